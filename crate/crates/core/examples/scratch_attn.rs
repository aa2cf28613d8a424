use octmark_core::cv::*;
use octmark_core::data::*;
use octmark_core::models::*;
use octmark_core::augment::Phase;
use std::time::Instant;

fn heldout_f1(spec: &BackboneSpec, cfg: &TrainConfig, train: &Dataset, test: &Dataset, name: &str) {
    let folds = make_folds(train, cfg.k, Grouping::ByPatient, cfg.seed).unwrap();
    let t0 = Instant::now();
    let out = train_fold(spec, 0, &folds, train, test, cfg).unwrap();
    let cache = ImageCache::load(test).unwrap();
    let ids: Vec<&str> = test.records.iter().map(|r| r.image_id.as_str()).collect();
    let probs = infer_probabilities(&out.final_model, test, &cache, &ids).unwrap();
    let mut dec = Vec::new();
    let mut truth = Vec::new();
    for id in &ids {
        let row = probs[*id];
        dec.push(std::array::from_fn(|k| row[k] >= 0.5));
        truth.push(test.records.iter().find(|r| r.image_id == *id).unwrap().label_bits().unwrap());
    }
    let per = octmark_core::metrics::per_biomarker_f1(&dec, &truth, octmark_core::metrics::ZeroDivisionPolicy::Zero).unwrap();
    println!("{name}: heldout per={:?} t={:.0?}", per.map(|v| (v*100.0).round()/100.0), t0.elapsed());
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let config = FixtureConfig { n_patients: 12, images_per_patient: 8, image_size: 64, label_prior: [0.5; 6], seed: 11 };
    let all = generate_fixture(&config, dir.path()).unwrap();
    // hold out 3 patients
    let holdout: std::collections::BTreeSet<&str> = ["P009", "P010", "P011"].into();
    let train = Dataset::new(all.records.iter().filter(|r| !holdout.contains(r.patient_id.as_str())).cloned().collect(), SplitTag::Train, all.root.clone());
    let test = Dataset::new(all.records.iter().filter(|r| holdout.contains(r.patient_id.as_str())).cloned().collect(), SplitTag::TestPhase1, all.root.clone());
    println!("train {} test {}", train.len(), test.len());

    let mut cfg = TrainConfig::default_for(BackboneKind::LocalAttn);
    cfg.lr = 1e-3; cfg.lr_decay = 0.98; cfg.epochs = 30; cfg.batch_size = 4; cfg.grad_accum_steps = 1;
    cfg.early_stop = EarlyStop::Off; cfg.seed = 5; cfg.k = 5; cfg.phase = Phase::Phase1;

    let local = BackboneSpec::local_attn(64, 48, 2, 4, 4, 6);
    heldout_f1(&local, &cfg, &train, &test, "LOCAL w48 d2");
    let global = BackboneSpec::global_attn(64, 48, 2, 4, 6);
    heldout_f1(&global, &cfg, &train, &test, "GLOBAL w48 d2");
}
