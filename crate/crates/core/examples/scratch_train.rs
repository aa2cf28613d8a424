use octmark_core::cv::*;
use octmark_core::data::*;
use octmark_core::models::*;
use octmark_core::augment::Phase;
use std::time::Instant;

fn run(width: usize, lr: f64, decay: f64, epochs: usize, bs: usize, red: usize, wd: f64) {
    let dir = tempfile::tempdir().unwrap();
    let config = FixtureConfig { n_patients: 12, images_per_patient: 8, image_size: 48, label_prior: [0.5; 6], seed: 11 };
    let ds = generate_fixture(&config, dir.path()).unwrap();
    let mut spec = BackboneSpec::conv_cbam(48, width, 6); spec.cbam_reduction = red;
    let mut cfg = TrainConfig::default_for(BackboneKind::ConvCbam);
    cfg.lr = lr; cfg.lr_decay = decay; cfg.weight_decay = wd;
    cfg.epochs = epochs;
    cfg.batch_size = bs;
    cfg.early_stop = EarlyStop::Off;
    cfg.seed = 5; cfg.k = 5; cfg.phase = Phase::Phase1;
    let folds = make_folds(&ds, cfg.k, Grouping::ByPatient, cfg.seed).unwrap();
    let t0 = Instant::now();
    let out = train_fold(&spec, 0, &folds, &ds, &ds, &cfg).unwrap();
    let cache = ImageCache::load(&ds).unwrap();
    let train_ids = folds.training_ids(&ds, 0);
    let probs = infer_probabilities(&out.final_model, &ds, &cache, &train_ids).unwrap();
    let mut dec = Vec::new(); let mut truth = Vec::new();
    for id in &train_ids {
        let row = probs[*id];
        dec.push(std::array::from_fn(|k| row[k] >= 0.5));
        truth.push(ds.records.iter().find(|r| r.image_id == *id).unwrap().label_bits().unwrap());
    }
    let per = octmark_core::metrics::per_biomarker_f1(&dec, &truth, octmark_core::metrics::ZeroDivisionPolicy::Zero).unwrap();
    println!("w={width} lr={lr} decay={decay} ep={epochs} bs={bs} r={red} wd={wd}: train_macro={:.3} t={:.1?} per={:?}",
        octmark_core::metrics::macro_f1(&per), t0.elapsed(), per.map(|v| (v*100.0).round()/100.0));
    // mean prob for positives vs negatives per biomarker
    for k in 0..6 {
        let (mut sp, mut np_, mut sn, mut nn) = (0.0, 0, 0.0, 0);
        for id in &train_ids {
            let p = probs[*id][k];
            let t = ds.records.iter().find(|r| r.image_id == *id).unwrap().label_bits().unwrap()[k];
            if t { sp += p; np_ += 1; } else { sn += p; nn += 1; }
        }
        println!("  bm{k}: pos_mean={:.3} ({np_}) neg_mean={:.3} ({nn})", sp/np_ as f64, sn/nn as f64);
    }
}

fn main() {
    run(16, 3e-3, 0.99, 30, 2, 2, 0.0);
    run(16, 5e-3, 0.99, 30, 2, 2, 0.0);
    run(16, 3e-3, 0.99, 30, 2, 2, 0.01);
}
