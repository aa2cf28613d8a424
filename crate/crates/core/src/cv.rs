//! 5-fold cross-validation: fold assignment, per-fold training with
//! gradient accumulation and an exponential learning-rate schedule,
//! per-epoch test-set inference into a score store, and confidence
//! accumulation into a prediction matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_eval, apply_train, build_recipe, AugmentRecipe, Phase, SampleSeed};
use crate::autodiff::Tape;
use crate::data::{read_gray_image, Dataset, NUM_BIOMARKERS};
use crate::ensemble::PredictionMatrix;
use crate::error::{Error, Result};
use crate::metrics::{macro_f1, per_biomarker_f1, ZeroDivisionPolicy};
use crate::models::{
    build_model, forward, forward_tape, multi_label_loss, BackboneKind, BackboneSpec,
    ForwardOpts, Model,
};
use crate::nn::{AdamW, BoundParams};
use crate::seeding::{derived_u64, indexed_rng};

/// How groups are assigned to folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    /// All images of a patient share a fold (no patient leakage).
    ByPatient,
    ByImage,
}

/// Assignment of every train-set image to one of k folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub grouping: Grouping,
    pub seed: u64,
}

impl FoldAssignment {
    /// Image ids of fold `fold`'s validation split, in dataset order.
    pub fn validation_ids<'a>(&self, ds: &'a Dataset, fold: usize) -> Vec<&'a str> {
        ds.records
            .iter()
            .filter(|r| self.assignments[&r.image_id] == fold)
            .map(|r| r.image_id.as_str())
            .collect()
    }

    /// Image ids of fold `fold`'s training split (the other folds).
    pub fn training_ids<'a>(&self, ds: &'a Dataset, fold: usize) -> Vec<&'a str> {
        ds.records
            .iter()
            .filter(|r| self.assignments[&r.image_id] != fold)
            .map(|r| r.image_id.as_str())
            .collect()
    }
}

/// Deterministic grouped fold assignment: shuffle groups by seed, then
/// deal them round-robin. Fold i serves as fold i's validation split.
pub fn make_folds(ds: &Dataset, k: usize, grouping: Grouping, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::contract(format!("k = {k} must be at least 2")));
    }
    let mut groups: Vec<String> = match grouping {
        Grouping::ByPatient => ds.patients().iter().map(|p| p.to_string()).collect(),
        Grouping::ByImage => ds.records.iter().map(|r| r.image_id.clone()).collect(),
    };
    if groups.len() < k {
        return Err(Error::contract(format!(
            "{} groups under {:?} grouping, need at least k = {k}",
            groups.len(),
            grouping
        )));
    }
    let mut rng = indexed_rng(seed, "folds", k as u64);
    groups.shuffle(&mut rng);

    let mut assignments = BTreeMap::new();
    match grouping {
        Grouping::ByPatient => {
            let fold_of_patient: BTreeMap<&str, usize> = groups
                .iter()
                .enumerate()
                .map(|(i, p)| (p.as_str(), i % k))
                .collect();
            for r in &ds.records {
                assignments.insert(r.image_id.clone(), fold_of_patient[r.patient_id.as_str()]);
            }
        }
        Grouping::ByImage => {
            for (i, id) in groups.iter().enumerate() {
                assignments.insert(id.clone(), i % k);
            }
        }
    }
    Ok(FoldAssignment {
        k,
        assignments,
        grouping,
        seed,
    })
}

/// Early-stopping policy for the per-fold loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EarlyStop {
    Off,
    /// Keep the best-val-F1 checkpoint; stop after `patience` epochs
    /// without improvement.
    OnValF1 { patience: usize },
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial AdamW learning rate.
    pub lr: f64,
    /// Per-epoch exponential decay factor.
    pub lr_decay: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub early_stop: EarlyStop,
    pub phase: Phase,
    pub seed: u64,
    pub k: usize,
    pub grouping: Grouping,
}

impl TrainConfig {
    /// Paper-faithful defaults for a backbone family.
    pub fn default_for(kind: BackboneKind) -> TrainConfig {
        match kind {
            BackboneKind::ConvCbam => TrainConfig {
                lr: 3e-5,
                lr_decay: 0.9,
                weight_decay: 0.01,
                batch_size: 128,
                grad_accum_steps: 1,
                epochs: 35,
                early_stop: EarlyStop::OnValF1 { patience: 5 },
                phase: Phase::Phase1,
                seed: 0,
                k: 5,
                grouping: Grouping::ByPatient,
            },
            BackboneKind::LocalAttn | BackboneKind::GlobalAttn => TrainConfig {
                lr: 3e-5,
                lr_decay: 0.9,
                weight_decay: 0.01,
                batch_size: 2,
                grad_accum_steps: 8,
                epochs: 2,
                early_stop: EarlyStop::Off,
                phase: Phase::Phase1,
                seed: 0,
                k: 5,
                grouping: Grouping::ByPatient,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return Err(Error::contract(
                "batch_size, grad_accum_steps, and epochs must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::contract("lr must be positive and decay in (0,1]"));
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `e` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Raw sigmoid confidences indexed by (fold, epoch, image), plus each
/// fold's validation macro-F1 trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreStore {
    pub entries: BTreeMap<(usize, usize), BTreeMap<String, [f64; NUM_BIOMARKERS]>>,
    pub val_f1: BTreeMap<(usize, usize), f64>,
}

pub const SCORES_HEADER: &str = "fold,epoch,image_id,IRHRF,PAVF,FAVF,IRF,DRT_DME,VD";
pub const VAL_F1_HEADER: &str = "fold,epoch,val_macro_f1";

impl ScoreStore {
    /// Fold ids present in this store.
    pub fn folds(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|(f, _)| *f).collect()
    }

    /// Merge fragments; (fold, epoch) slices must not collide.
    pub fn merge(fragments: Vec<ScoreStore>) -> Result<ScoreStore> {
        let mut out = ScoreStore::default();
        for frag in fragments {
            for (key, slice) in frag.entries {
                if out.entries.insert(key, slice).is_some() {
                    return Err(Error::contract(format!(
                        "duplicate score slice for fold {} epoch {}",
                        key.0, key.1
                    )));
                }
            }
            for (key, v) in frag.val_f1 {
                out.val_f1.insert(key, v);
            }
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{SCORES_HEADER}").map_err(|e| Error::io(path, e))?;
        for ((fold, epoch), slice) in &self.entries {
            for (id, probs) in slice {
                let cells: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
                writeln!(f, "{fold},{epoch},{id},{}", cells.join(","))
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }

    pub fn write_val_f1_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{VAL_F1_HEADER}").map_err(|e| Error::io(path, e))?;
        for ((fold, epoch), v) in &self.val_f1 {
            writeln!(f, "{fold},{epoch},{v:.6}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_csv(scores_path: &Path, val_f1_path: &Path) -> Result<ScoreStore> {
        let mut store = ScoreStore::default();
        let text = std::fs::read_to_string(scores_path).map_err(|e| Error::io(scores_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(SCORES_HEADER) {
            return Err(Error::contract(format!(
                "bad scores header in {}",
                scores_path.display()
            )));
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 + NUM_BIOMARKERS {
                return Err(Error::contract(format!(
                    "scores line {}: bad field count",
                    i + 2
                )));
            }
            let fold: usize = parts[0]
                .parse()
                .map_err(|_| Error::contract(format!("scores line {}: bad fold", i + 2)))?;
            let epoch: usize = parts[1]
                .parse()
                .map_err(|_| Error::contract(format!("scores line {}: bad epoch", i + 2)))?;
            let mut probs = [0.0; NUM_BIOMARKERS];
            for (k, cell) in parts[3..].iter().enumerate() {
                probs[k] = cell.parse().map_err(|_| {
                    Error::contract(format!("scores line {}: bad probability", i + 2))
                })?;
            }
            store
                .entries
                .entry((fold, epoch))
                .or_default()
                .insert(parts[2].to_string(), probs);
        }

        let text = std::fs::read_to_string(val_f1_path).map_err(|e| Error::io(val_f1_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(VAL_F1_HEADER) {
            return Err(Error::contract(format!(
                "bad val_f1 header in {}",
                val_f1_path.display()
            )));
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::contract(format!(
                    "val_f1 line {}: bad field count",
                    i + 2
                )));
            }
            let fold: usize = parts[0]
                .parse()
                .map_err(|_| Error::contract(format!("val_f1 line {}: bad fold", i + 2)))?;
            let epoch: usize = parts[1]
                .parse()
                .map_err(|_| Error::contract(format!("val_f1 line {}: bad epoch", i + 2)))?;
            let v: f64 = parts[2]
                .parse()
                .map_err(|_| Error::contract(format!("val_f1 line {}: bad value", i + 2)))?;
            store.val_f1.insert((fold, epoch), v);
        }
        Ok(store)
    }
}

/// How accumulated confidences reduce to one probability per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Mean over every (fold, epoch) slice.
    MeanAll,
    /// Per fold, the slice at that fold's best-val-F1 epoch (ties go to
    /// the later epoch), then the mean over folds.
    MeanBestEpoch,
}

/// Reduce a complete score store into per-image probabilities.
pub fn accumulate_scores(store: &ScoreStore, reduction: Reduction) -> Result<PredictionMatrix> {
    if store.entries.is_empty() {
        return Err(Error::contract("score store is empty"));
    }
    // Every slice must cover the same image set.
    let reference: BTreeSet<&String> = store.entries.values().next().unwrap().keys().collect();
    for ((fold, epoch), slice) in &store.entries {
        let ids: BTreeSet<&String> = slice.keys().collect();
        if ids != reference {
            return Err(Error::contract(format!(
                "slice (fold {fold}, epoch {epoch}) covers a different image set"
            )));
        }
    }

    let selected: Vec<&(usize, usize)> = match reduction {
        Reduction::MeanAll => store.entries.keys().collect(),
        Reduction::MeanBestEpoch => {
            let folds = store.folds();
            let mut picks = Vec::new();
            let mut missing = Vec::new();
            for fold in folds {
                let mut best: Option<(usize, f64)> = None;
                for ((f, epoch), v) in &store.val_f1 {
                    if *f != fold {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((be, bv)) => *v > bv || (*v == bv && *epoch > be),
                    };
                    if better {
                        best = Some((*epoch, *v));
                    }
                }
                match best {
                    Some((epoch, _)) => {
                        let key = store
                            .entries
                            .keys()
                            .find(|(f, e)| *f == fold && *e == epoch)
                            .ok_or_else(|| {
                                Error::contract(format!(
                                    "fold {fold}: best epoch {epoch} has no score slice"
                                ))
                            })?;
                        picks.push(key);
                    }
                    None => missing.push(fold),
                }
            }
            if !missing.is_empty() {
                return Err(Error::contract(format!(
                    "no val_f1 recorded for folds {missing:?}"
                )));
            }
            picks
        }
    };

    let n_slices = selected.len() as f64;
    let mut acc: BTreeMap<&String, [f64; NUM_BIOMARKERS]> = reference
        .iter()
        .map(|id| (*id, [0.0; NUM_BIOMARKERS]))
        .collect();
    for key in &selected {
        for (id, probs) in &store.entries[key] {
            let row = acc.get_mut(id).unwrap();
            for k in 0..NUM_BIOMARKERS {
                row[k] += probs[k];
            }
        }
    }
    let image_ids: Vec<String> = acc.keys().map(|s| s.to_string()).collect();
    let probabilities: Vec<[f64; NUM_BIOMARKERS]> = acc
        .values()
        .map(|row| std::array::from_fn(|k| row[k] / n_slices))
        .collect();
    PredictionMatrix::new(
        image_ids,
        probabilities,
        format!("cv:{reduction:?}:{}slices", selected.len()),
    )
}

/// Images decoded once and keyed by id.
pub struct ImageCache {
    images: BTreeMap<String, Array2<f64>>,
}

impl ImageCache {
    pub fn load(ds: &Dataset) -> Result<ImageCache> {
        let mut images = BTreeMap::new();
        for r in &ds.records {
            images.insert(r.image_id.clone(), read_gray_image(&ds.resolved_path(r))?);
        }
        Ok(ImageCache { images })
    }

    pub fn get(&self, id: &str) -> &Array2<f64> {
        &self.images[id]
    }
}

/// Result of training one fold.
pub struct FoldOutcome {
    /// Weights after the last trained epoch.
    pub final_model: Model,
    /// Best-val-F1 weights when early stopping is on, else the final ones.
    pub best_model: Model,
    pub store: ScoreStore,
    pub epochs_run: usize,
    /// Center-crop fallbacks observed while augmenting.
    pub crop_fallbacks: u64,
}

fn stack_batch(tensors: Vec<ndarray::Array3<f64>>) -> ArrayD<f64> {
    let (c, h, w) = tensors[0].dim();
    let b = tensors.len();
    let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
    for (i, t) in tensors.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&t.into_dyn());
    }
    out
}

fn targets_for(
    ds: &Dataset,
    ids: &[&str],
) -> Result<(ArrayD<f64>, Option<ArrayD<f64>>)> {
    let by_id: BTreeMap<&str, &crate::data::ImageRecord> = ds
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let mut bits = ArrayD::zeros(IxDyn(&[ids.len(), NUM_BIOMARKERS]));
    let mut clinical = ArrayD::zeros(IxDyn(&[ids.len(), 2]));
    let mut have_clinical = true;
    for (i, id) in ids.iter().enumerate() {
        let r = by_id
            .get(id)
            .ok_or_else(|| Error::contract(format!("unknown image id {id}")))?;
        let row = r.label_bits().ok_or_else(|| {
            Error::contract(format!("record {id} has UNKNOWN labels; training rejects UNKNOWN"))
        })?;
        for k in 0..NUM_BIOMARKERS {
            bits[[i, k]] = if row[k] { 1.0 } else { 0.0 };
        }
        match r.clinical {
            Some(c) => {
                clinical[[i, 0]] = c[0];
                clinical[[i, 1]] = c[1];
            }
            None => have_clinical = false,
        }
    }
    Ok((bits, if have_clinical { Some(clinical) } else { None }))
}

/// Eval-transform inference over a set of ids, in fixed-size chunks.
pub fn infer_probabilities(
    model: &Model,
    ds: &Dataset,
    cache: &ImageCache,
    ids: &[&str],
) -> Result<BTreeMap<String, [f64; NUM_BIOMARKERS]>> {
    let _ = ds;
    let size = model.spec.input_size;
    let mut out = BTreeMap::new();
    for chunk in ids.chunks(8) {
        let tensors: Vec<ndarray::Array3<f64>> = chunk
            .iter()
            .map(|id| {
                apply_eval(
                    size,
                    cache.get(id),
                    crate::augment::defaults::NORM_MEAN,
                    crate::augment::defaults::NORM_STD,
                )
            })
            .collect::<Result<_>>()?;
        let batch = stack_batch(tensors);
        let output = forward(model, &batch)?;
        for (i, id) in chunk.iter().enumerate() {
            let mut row = [0.0; NUM_BIOMARKERS];
            for k in 0..NUM_BIOMARKERS {
                row[k] = output.probabilities[[i, k]];
            }
            out.insert(id.to_string(), row);
        }
    }
    Ok(out)
}

fn macro_f1_of(
    probs: &BTreeMap<String, [f64; NUM_BIOMARKERS]>,
    ds: &Dataset,
    ids: &[&str],
) -> Result<f64> {
    let by_id: BTreeMap<&str, &crate::data::ImageRecord> = ds
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let mut decisions = Vec::with_capacity(ids.len());
    let mut truth = Vec::with_capacity(ids.len());
    for id in ids {
        let row = probs[*id];
        decisions.push(std::array::from_fn(|k| row[k] >= 0.5));
        truth.push(by_id[id].label_bits().ok_or_else(|| {
            Error::contract(format!("record {id} has UNKNOWN labels in validation"))
        })?);
    }
    let per = per_biomarker_f1(&decisions, &truth, ZeroDivisionPolicy::Zero)?;
    Ok(macro_f1(&per))
}

/// Train one fold: optimize on the fold's training split, and after every
/// epoch record the validation macro-F1 and every test image's sigmoid
/// confidences. The learning rate decays by `lr_decay` each epoch;
/// accumulation flushes any remainder microbatches at epoch end.
pub fn train_fold(
    model_spec: &BackboneSpec,
    fold_id: usize,
    folds: &FoldAssignment,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if fold_id >= folds.k {
        return Err(Error::contract(format!(
            "fold {fold_id} out of range for k = {}",
            folds.k
        )));
    }
    crate::data::ensure_valid(train_ds)?;
    crate::data::ensure_valid(test_ds)?;

    let recipe: AugmentRecipe = build_recipe(cfg.phase, model_spec.input_size)?;
    let train_cache = ImageCache::load(train_ds)?;
    let test_cache = ImageCache::load(test_ds)?;

    let train_ids = folds.training_ids(train_ds, fold_id);
    let val_ids = folds.validation_ids(train_ds, fold_id);
    let test_ids: Vec<&str> = test_ds.records.iter().map(|r| r.image_id.as_str()).collect();
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::contract(format!(
            "fold {fold_id} has an empty split ({} train, {} val)",
            train_ids.len(),
            val_ids.len()
        )));
    }

    let init_seed = derived_u64(cfg.seed, &format!("init/fold{fold_id}"));
    let mut model = build_model(model_spec, init_seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    let mut store = ScoreStore::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut crop_fallbacks = 0u64;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at_epoch(epoch);

        let mut order: Vec<&str> = train_ids.clone();
        let mut rng = indexed_rng(cfg.seed, &format!("order/fold{fold_id}"), epoch as u64);
        order.shuffle(&mut rng);

        let mut accum: Option<BTreeMap<String, ArrayD<f64>>> = None;
        let mut accum_count = 0usize;
        let flush = |opt: &mut AdamW,
                         model: &mut Model,
                         accum: &mut Option<BTreeMap<String, ArrayD<f64>>>,
                         count: &mut usize| {
            if let Some(mut grads) = accum.take() {
                if *count > 0 {
                    let scale = 1.0 / *count as f64;
                    for g in grads.values_mut() {
                        g.mapv_inplace(|v| v * scale);
                    }
                    opt.step(&mut model.params, &grads);
                }
                *count = 0;
            }
        };

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tensors = Vec::with_capacity(chunk.len());
            for id in chunk {
                let outcome = apply_train(
                    &recipe,
                    train_cache.get(id),
                    &SampleSeed::new(cfg.seed, epoch as u32, *id),
                )?;
                if outcome.crop_fallback {
                    crop_fallbacks += 1;
                }
                tensors.push(outcome.tensor);
            }
            let batch = stack_batch(tensors);
            let (bits, clinical) = targets_for(train_ds, chunk)?;

            let mut tape = Tape::new();
            let x = tape.leaf(batch);
            let bound = BoundParams::bind(&model.params, &mut tape);
            let logits = forward_tape(&model, &mut tape, x, &bound, ForwardOpts::default())?;
            let loss = multi_label_loss(
                &mut tape,
                logits,
                &bits,
                clinical.as_ref().filter(|_| model_spec.n_outputs == 8),
            )?;
            let loss_value = tape.value(loss)[[]];
            if !loss_value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at fold {fold_id} epoch {epoch} step {step} (lr {})",
                    opt.lr
                )));
            }
            let grads = tape.backward(loss);
            let step_grads = bound.gradients(&model.params, &grads);

            match &mut accum {
                None => accum = Some(step_grads),
                Some(acc) => {
                    for (name, g) in step_grads {
                        *acc.get_mut(&name).unwrap() += &g;
                    }
                }
            }
            accum_count += 1;
            if accum_count == cfg.grad_accum_steps {
                flush(&mut opt, &mut model, &mut accum, &mut accum_count);
            }
        }
        // Remainder microbatches flush at epoch end.
        flush(&mut opt, &mut model, &mut accum, &mut accum_count);

        // Per-epoch inference: validation F1 and test confidences.
        let val_probs = infer_probabilities(&model, train_ds, &train_cache, &val_ids)?;
        let val_f1 = macro_f1_of(&val_probs, train_ds, &val_ids)?;
        store.val_f1.insert((fold_id, epoch), val_f1);

        let test_probs = infer_probabilities(&model, test_ds, &test_cache, &test_ids)?;
        store.entries.insert((fold_id, epoch), test_probs);

        epochs_run = epoch + 1;

        if let EarlyStop::OnValF1 { patience } = cfg.early_stop {
            let improved = match &best {
                None => true,
                Some((best_f1, _, _)) => val_f1 > *best_f1,
            };
            if improved {
                best = Some((val_f1, epoch, model.clone()));
            } else if let Some((_, best_epoch, _)) = &best {
                if epoch - best_epoch >= patience {
                    break;
                }
            }
        }
    }

    let best_model = match best {
        Some((_, _, m)) => m,
        None => model.clone(),
    };
    Ok(FoldOutcome {
        final_model: model,
        best_model,
        store,
        epochs_run,
        crop_fallbacks,
    })
}

/// Outcome of a full cross-validation run.
pub struct CvRun {
    pub store: ScoreStore,
    pub fold_outcomes: Vec<FoldOutcome>,
}

/// Train folds 0..k-1 sequentially and merge their score fragments.
/// Folds draw from independent seed streams, so results do not depend on
/// execution order; callers that need resumability drive `train_fold`
/// per fold and persist fragments themselves.
pub fn run_cv(
    model_spec: &BackboneSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<CvRun> {
    let folds = make_folds(train_ds, cfg.k, cfg.grouping, cfg.seed)?;
    let mut outcomes = Vec::with_capacity(cfg.k);
    for fold_id in 0..cfg.k {
        let outcome = train_fold(model_spec, fold_id, &folds, train_ds, test_ds, cfg)
            .map_err(|e| Error::Training(format!("fold {fold_id} failed: {e}")))?;
        outcomes.push(outcome);
    }
    let store = ScoreStore::merge(outcomes.iter().map(|o| o.store.clone()).collect())?;
    Ok(CvRun {
        store,
        fold_outcomes: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_formula() {
        let mut cfg = TrainConfig::default_for(BackboneKind::ConvCbam);
        cfg.lr = 3e-5;
        cfg.lr_decay = 0.9;
        for e in 0..40 {
            let expect = 3e-5 * 0.9f64.powi(e as i32);
            assert!((cfg.lr_at_epoch(e) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_mean_all_averages_slices() {
        let mut store = ScoreStore::default();
        let mut s0 = BTreeMap::new();
        s0.insert("img".to_string(), [0.4; 6]);
        let mut s1 = BTreeMap::new();
        s1.insert("img".to_string(), [0.6; 6]);
        store.entries.insert((0, 0), s0);
        store.entries.insert((1, 0), s1);
        let pm = accumulate_scores(&store, Reduction::MeanAll).unwrap();
        for p in &pm.probabilities[0] {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_identical_slices_is_idempotent() {
        let mut store = ScoreStore::default();
        for fold in 0..3 {
            let mut s = BTreeMap::new();
            s.insert("a".to_string(), [0.25, 0.5, 0.75, 0.1, 0.9, 0.0]);
            store.entries.insert((fold, 0), s);
        }
        let pm = accumulate_scores(&store, Reduction::MeanAll).unwrap();
        for (p, expect) in pm.probabilities[0].iter().zip([0.25, 0.5, 0.75, 0.1, 0.9, 0.0]) {
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn best_epoch_takes_argmax_with_later_tiebreak() {
        let mut store = ScoreStore::default();
        for (fold, epoch, p, f1) in [
            (0usize, 0usize, 0.1, 0.5),
            (0, 1, 0.2, 0.8), // best for fold 0
            (0, 2, 0.3, 0.7),
            (1, 0, 0.5, 0.6),
            (1, 1, 0.7, 0.6), // tie -> later epoch wins
        ] {
            let mut s = BTreeMap::new();
            s.insert("a".to_string(), [p; 6]);
            store.entries.insert((fold, epoch), s);
            store.val_f1.insert((fold, epoch), f1);
        }
        let pm = accumulate_scores(&store, Reduction::MeanBestEpoch).unwrap();
        // (0.2 + 0.7) / 2
        assert!((pm.probabilities[0][0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn strictly_increasing_val_f1_picks_final_epochs() {
        let mut store = ScoreStore::default();
        for fold in 0..2usize {
            for epoch in 0..3usize {
                let mut s = BTreeMap::new();
                s.insert("a".to_string(), [0.1 * (epoch as f64 + 1.0); 6]);
                store.entries.insert((fold, epoch), s);
                store.val_f1.insert((fold, epoch), 0.2 * epoch as f64);
            }
        }
        let best = accumulate_scores(&store, Reduction::MeanBestEpoch).unwrap();
        // Final epoch slice for both folds: 0.3.
        assert!((best.probabilities[0][0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn accumulation_is_a_convex_combination() {
        let mut store = ScoreStore::default();
        let values = [0.1, 0.9, 0.4];
        for (i, v) in values.iter().enumerate() {
            let mut s = BTreeMap::new();
            s.insert("a".to_string(), [*v; 6]);
            store.entries.insert((i, 0), s);
        }
        let pm = accumulate_scores(&store, Reduction::MeanAll).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for p in &pm.probabilities[0] {
            assert!(*p >= lo && *p <= hi);
        }
    }

    #[test]
    fn incomplete_store_is_rejected() {
        let mut store = ScoreStore::default();
        let mut s0 = BTreeMap::new();
        s0.insert("a".to_string(), [0.5; 6]);
        store.entries.insert((0, 0), s0);
        let mut s1 = BTreeMap::new();
        s1.insert("b".to_string(), [0.5; 6]);
        store.entries.insert((1, 0), s1);
        assert!(accumulate_scores(&store, Reduction::MeanAll).is_err());
    }

    #[test]
    fn merge_rejects_duplicate_slices() {
        let mut a = ScoreStore::default();
        let mut s = BTreeMap::new();
        s.insert("x".to_string(), [0.5; 6]);
        a.entries.insert((0, 0), s.clone());
        let mut b = ScoreStore::default();
        b.entries.insert((0, 0), s);
        assert!(ScoreStore::merge(vec![a, b]).is_err());
    }

    #[test]
    fn score_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ScoreStore::default();
        let mut s = BTreeMap::new();
        s.insert("img-a".to_string(), [0.123456, 0.2, 0.3, 0.4, 0.5, 0.6]);
        s.insert("img-b".to_string(), [0.9; 6]);
        store.entries.insert((0, 0), s.clone());
        store.entries.insert((2, 1), s);
        store.val_f1.insert((0, 0), 0.75);
        store.val_f1.insert((2, 1), 0.5);
        let scores = dir.path().join("scores.csv");
        let val = dir.path().join("val_f1.csv");
        store.write_csv(&scores).unwrap();
        store.write_val_f1_csv(&val).unwrap();
        let back = ScoreStore::read_csv(&scores, &val).unwrap();
        assert_eq!(back.entries.keys().collect::<Vec<_>>(), store.entries.keys().collect::<Vec<_>>());
        assert_eq!(back.val_f1.len(), 2);
        assert!((back.entries[&(0, 0)]["img-a"][0] - 0.123456).abs() < 1e-9);
    }
}
