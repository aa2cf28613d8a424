use octmark_core::autodiff::Tape;
use octmark_core::cv::*;
use octmark_core::data::*;
use octmark_core::models::*;
use octmark_core::nn::{AdamW, BoundParams};
use octmark_core::augment::{apply_eval, defaults};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let config = FixtureConfig { n_patients: 12, images_per_patient: 8, image_size: 64, label_prior: [0.5; 6], seed: 11 };
    let ds = generate_fixture(&config, dir.path()).unwrap();
    let cache = ImageCache::load(&ds).unwrap();
    let ids: Vec<&str> = ds.records.iter().map(|r| r.image_id.as_str()).collect();
    let truth: std::collections::BTreeMap<&str, [bool;6]> = ds.records.iter().map(|r| (r.image_id.as_str(), r.label_bits().unwrap())).collect();

    for (name, spec) in [
        ("CONV w16", BackboneSpec::conv_cbam(64, 16, 6)),
        ("LOCAL w32", BackboneSpec::local_attn(64, 32, 2, 4, 4, 6)),
    ] {
        let mut model = build_model(&spec, 7).unwrap();
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut rng = octmark_core::seeding::stream_rng(3, "clean");
        let t0 = Instant::now();
        let bs = 4;
        for epoch in 0..30 {
            opt.lr = 1e-3 * 0.98f64.powi(epoch);
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                let mut batch = ArrayD::zeros(IxDyn(&[chunk.len(), 3, 64, 64]));
                let mut bits = ArrayD::zeros(IxDyn(&[chunk.len(), 6]));
                for (i, id) in chunk.iter().enumerate() {
                    let t = apply_eval(64, cache.get(id), defaults::NORM_MEAN, defaults::NORM_STD).unwrap();
                    batch.index_axis_mut(ndarray::Axis(0), i).assign(&t.into_dyn());
                    for k in 0..6 { bits[[i,k]] = if truth[id][k] {1.0} else {0.0}; }
                }
                let mut tape = Tape::new();
                let x = tape.leaf(batch);
                let bound = BoundParams::bind(&model.params, &mut tape);
                let logits = forward_tape(&model, &mut tape, x, &bound, ForwardOpts::default()).unwrap();
                let loss = multi_label_loss(&mut tape, logits, &bits, None).unwrap();
                let grads = tape.backward(loss);
                let g = bound.gradients(&model.params, &grads);
                opt.step(&mut model.params, &g);
            }
        }
        // train-set eval
        let probs = infer_probabilities(&model, &ds, &cache, &ids).unwrap();
        let mut dec = Vec::new(); let mut tr = Vec::new();
        for id in &ids { let row = probs[*id]; dec.push(std::array::from_fn(|k| row[k] >= 0.5)); tr.push(truth[id]); }
        let per = octmark_core::metrics::per_biomarker_f1(&dec, &tr, octmark_core::metrics::ZeroDivisionPolicy::Zero).unwrap();
        println!("{name} CLEAN30ep: per={:?} t={:.0?}", per.map(|v| (v*100.0).round()/100.0), t0.elapsed());
    }
}
