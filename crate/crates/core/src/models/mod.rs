//! Desk-scale model zoo: a CBAM-gated convolutional backbone, a
//! local-attention transformer (depthwise convolution + block attention +
//! grid attention per stage), and a global-attention transformer with
//! full self-attention over patch tokens. All end in a multi-label
//! sigmoid head over the six biomarkers, optionally extended by two
//! clinical regression outputs.

mod attention;
mod cbam;
mod checkpoint;

pub use attention::{
    block_grid_permutation, mhsa_grouped, windowed_attention, AttnParamIds, WindowMode,
};
pub use cbam::{cbam_apply, CbamParamIds, CbamParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Init, ParamStore};

pub const LN_EPS: f64 = 1e-5;
const USE_STAGE_LN: bool = true;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    ConvCbam,
    LocalAttn,
    GlobalAttn,
}

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_size: usize,
    /// Base channel count (conv) or embedding dim (attention).
    pub width: usize,
    /// Stage count (conv) or block count (attention).
    pub depth: usize,
    /// Window side for local attention (ignored otherwise).
    pub window: usize,
    /// Attention heads (ignored for conv).
    pub heads: usize,
    /// 6 biomarker logits, or 8 with the two clinical regression targets.
    pub n_outputs: usize,
    /// Patch embedding stride for the attention models.
    pub patch_size: usize,
    pub use_cbam: bool,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
}

impl BackboneSpec {
    pub fn conv_cbam(input_size: usize, width: usize, n_outputs: usize) -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::ConvCbam,
            input_size,
            width,
            depth: 3,
            window: 0,
            heads: 0,
            n_outputs,
            patch_size: 0,
            use_cbam: true,
            cbam_reduction: 16,
            cbam_spatial_kernel: 7,
        }
    }

    pub fn local_attn(
        input_size: usize,
        width: usize,
        depth: usize,
        window: usize,
        heads: usize,
        n_outputs: usize,
    ) -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::LocalAttn,
            input_size,
            width,
            depth,
            window,
            heads,
            n_outputs,
            patch_size: 4,
            use_cbam: false,
            cbam_reduction: 0,
            cbam_spatial_kernel: 0,
        }
    }

    pub fn global_attn(
        input_size: usize,
        width: usize,
        depth: usize,
        heads: usize,
        n_outputs: usize,
    ) -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::GlobalAttn,
            input_size,
            width,
            depth,
            window: 0,
            heads,
            n_outputs,
            patch_size: 4,
            use_cbam: false,
            cbam_reduction: 0,
            cbam_spatial_kernel: 0,
        }
    }

    /// Side of the patch-token grid for the attention models.
    pub fn token_grid(&self) -> usize {
        self.input_size / self.patch_size.max(1)
    }

    /// Output channels of conv stage `i`.
    fn stage_channels(&self, i: usize) -> usize {
        self.width << i
    }

    fn stage_name(i: usize) -> String {
        match i {
            0 => "stem".to_string(),
            1 => "reduction_a".to_string(),
            2 => "reduction_b".to_string(),
            n => format!("stage{n}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outputs != 6 && self.n_outputs != 8 {
            return Err(Error::contract(format!(
                "n_outputs must be 6 or 8, got {}",
                self.n_outputs
            )));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::contract("width and depth must be positive"));
        }
        match self.kind {
            BackboneKind::ConvCbam => {
                if self.input_size % (1 << self.depth) != 0 || self.input_size < (1 << self.depth) {
                    return Err(Error::contract(format!(
                        "input_size {} not divisible by 2^{}",
                        self.input_size, self.depth
                    )));
                }
                if self.use_cbam {
                    for i in 0..self.depth {
                        CbamParams::resolve(
                            self.stage_channels(i),
                            self.cbam_reduction,
                            self.cbam_spatial_kernel,
                        )?;
                    }
                }
            }
            BackboneKind::LocalAttn => {
                if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
                    return Err(Error::contract(format!(
                        "input_size {} not divisible by patch {}",
                        self.input_size, self.patch_size
                    )));
                }
                let grid = self.token_grid();
                if self.window == 0 || grid % self.window != 0 {
                    return Err(Error::contract(format!(
                        "token grid {grid}x{grid} not divisible by window {}",
                        self.window
                    )));
                }
                if self.heads == 0 || self.width % self.heads != 0 {
                    return Err(Error::contract(format!(
                        "width {} not divisible by heads {}",
                        self.width, self.heads
                    )));
                }
            }
            BackboneKind::GlobalAttn => {
                if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
                    return Err(Error::contract(format!(
                        "input_size {} not divisible by patch {}",
                        self.input_size, self.patch_size
                    )));
                }
                if self.heads == 0 || self.width % self.heads != 0 {
                    return Err(Error::contract(format!(
                        "width {} not divisible by heads {}",
                        self.width, self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// CBAM block shapes implied by this spec (conv backbone only).
    pub fn cbam_blocks(&self) -> Result<Vec<CbamParams>> {
        let mut blocks = Vec::new();
        if self.kind == BackboneKind::ConvCbam && self.use_cbam {
            for i in 0..self.depth {
                blocks.push(CbamParams::resolve(
                    self.stage_channels(i),
                    self.cbam_reduction,
                    self.cbam_spatial_kernel,
                )?);
            }
        }
        Ok(blocks)
    }
}

/// A backbone spec plus its parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: BackboneSpec,
    pub params: ParamStore,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Clamp both CBAM gates to 1, making each block the identity map.
    pub force_cbam_identity: bool,
}

/// Sigmoid of the biomarker logits alongside the raw logits.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// [B, n_outputs]
    pub logits: ArrayD<f64>,
    /// [B, 6]
    pub probabilities: ArrayD<f64>,
}

impl ModelOutput {
    pub fn from_logits(logits: ArrayD<f64>) -> ModelOutput {
        let b = logits.shape()[0];
        let mut probabilities = ArrayD::zeros(IxDyn(&[b, 6]));
        for bi in 0..b {
            for k in 0..6 {
                probabilities[[bi, k]] = 1.0 / (1.0 + (-logits[[bi, k]]).exp());
            }
        }
        ModelOutput {
            logits,
            probabilities,
        }
    }
}

fn create_linear(store: &mut ParamStore, name: &str, cout: usize, cin: usize, seed: u64) {
    store.create(&format!("{name}.w"), &[cout, cin], Init::KaimingUniform { fan_in: cin }, seed);
    store.create(&format!("{name}.b"), &[cout], Init::KaimingUniform { fan_in: cin }, seed);
}

fn create_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    seed: u64,
) {
    let fan_in = cin * k * k;
    store.create(
        &format!("{name}.w"),
        &[cout, cin, k, k],
        Init::KaimingUniform { fan_in },
        seed,
    );
    store.create(&format!("{name}.b"), &[cout], Init::KaimingUniform { fan_in }, seed);
}

fn create_layer_norm(store: &mut ParamStore, name: &str, c: usize, seed: u64) {
    store.create(&format!("{name}.g"), &[c], Init::Ones, seed);
    store.create(&format!("{name}.b"), &[c], Init::Zeros, seed);
}

fn create_attention(store: &mut ParamStore, name: &str, c: usize, seed: u64) {
    create_layer_norm(store, &format!("{name}.ln"), c, seed);
    create_linear(store, &format!("{name}.qkv"), 3 * c, c, seed);
    create_linear(store, &format!("{name}.proj"), c, c, seed);
}

/// Build a model with parameters initialized from (seed, parameter name).
pub fn build_model(spec: &BackboneSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut store = ParamStore::new();
    match spec.kind {
        BackboneKind::ConvCbam => {
            let mut cin = 3;
            for i in 0..spec.depth {
                let cout = spec.stage_channels(i);
                create_conv(&mut store, &BackboneSpec::stage_name(i), cout, cin, 3, seed);
                create_layer_norm(&mut store, &format!("{}.ln", BackboneSpec::stage_name(i)), cout, seed);
                if spec.use_cbam {
                    let p = CbamParams::resolve(cout, spec.cbam_reduction, spec.cbam_spatial_kernel)?;
                    let base = format!("cbam_{}", BackboneSpec::stage_name(i));
                    create_linear(&mut store, &format!("{base}.fc1"), p.hidden(), cout, seed);
                    create_linear(&mut store, &format!("{base}.fc2"), cout, p.hidden(), seed);
                    let k = p.spatial_kernel;
                    store.create(
                        &format!("{base}.spatial.w"),
                        &[1, 2, k, k],
                        Init::KaimingUniform { fan_in: 2 * k * k },
                        seed,
                    );
                    store.create(
                        &format!("{base}.spatial.b"),
                        &[1],
                        Init::KaimingUniform { fan_in: 2 * k * k },
                        seed,
                    );
                }
                cin = cout;
            }
            create_linear(&mut store, "head", spec.n_outputs, cin, seed);
        }
        BackboneKind::LocalAttn => {
            let c = spec.width;
            create_conv(&mut store, "patch", c, 3, spec.patch_size, seed);
            for i in 0..spec.depth {
                store.create(
                    &format!("block{i}.dw.w"),
                    &[c, 3, 3],
                    Init::KaimingUniform { fan_in: 9 },
                    seed,
                );
                store.create(
                    &format!("block{i}.dw.b"),
                    &[c],
                    Init::KaimingUniform { fan_in: 9 },
                    seed,
                );
                create_conv(&mut store, &format!("block{i}.pw"), c, c, 1, seed);
                create_attention(&mut store, &format!("block{i}.block_attn"), c, seed);
                create_attention(&mut store, &format!("block{i}.grid_attn"), c, seed);
            }
            create_layer_norm(&mut store, "final_ln", c, seed);
            create_linear(&mut store, "head", spec.n_outputs, c, seed);
        }
        BackboneKind::GlobalAttn => {
            let c = spec.width;
            let n = spec.token_grid() * spec.token_grid();
            create_conv(&mut store, "patch", c, 3, spec.patch_size, seed);
            store.create("pos", &[n, c], Init::KaimingUniform { fan_in: c }, seed);
            for i in 0..spec.depth {
                create_attention(&mut store, &format!("block{i}.attn"), c, seed);
                create_layer_norm(&mut store, &format!("block{i}.mlp.ln"), c, seed);
                create_linear(&mut store, &format!("block{i}.mlp.fc1"), 4 * c, c, seed);
                create_linear(&mut store, &format!("block{i}.mlp.fc2"), c, 4 * c, seed);
            }
            create_layer_norm(&mut store, "final_ln", c, seed);
            create_linear(&mut store, "head", spec.n_outputs, c, seed);
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params: store,
    })
}

impl Model {
    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }
}

fn attn_ids(bound: &BoundParams, name: &str) -> AttnParamIds {
    AttnParamIds {
        qkv_w: bound.id(&format!("{name}.qkv.w")),
        qkv_b: bound.id(&format!("{name}.qkv.b")),
        proj_w: bound.id(&format!("{name}.proj.w")),
        proj_b: bound.id(&format!("{name}.proj.b")),
    }
}

/// Pre-norm residual attention sub-block on [B, H, W, C] tokens.
fn attention_sublayer(
    tape: &mut Tape,
    tokens: TensorId,
    name: &str,
    window: usize,
    mode: WindowMode,
    heads: usize,
    bound: &BoundParams,
) -> Result<TensorId> {
    let g = bound.id(&format!("{name}.ln.g"));
    let b = bound.id(&format!("{name}.ln.b"));
    let normed = tape.layer_norm(tokens, g, b, LN_EPS);
    let ids = attn_ids(bound, name);
    let attended = windowed_attention(tape, normed, window, mode, heads, &ids)?;
    Ok(tape.add(tokens, attended))
}

fn forward_conv_cbam(
    model: &Model,
    tape: &mut Tape,
    x: TensorId,
    bound: &BoundParams,
    opts: ForwardOpts,
) -> Result<TensorId> {
    let spec = &model.spec;
    let mut h = x;
    for i in 0..spec.depth {
        let name = BackboneSpec::stage_name(i);
        let w = bound.id(&format!("{name}.w"));
        let b = bound.id(&format!("{name}.b"));
        let conv = tape.conv2d(h, w, b, 2, 1);
        let normed = if USE_STAGE_LN {
            let t = tape.permute(conv, &[0, 2, 3, 1]);
            let n = tape.layer_norm(
                t,
                bound.id(&format!("{name}.ln.g")),
                bound.id(&format!("{name}.ln.b")),
                LN_EPS,
            );
            tape.permute(n, &[0, 3, 1, 2])
        } else {
            conv
        };
        h = tape.relu(normed);
        if spec.use_cbam && !opts.force_cbam_identity {
            let p = CbamParams::resolve(
                spec.stage_channels(i),
                spec.cbam_reduction,
                spec.cbam_spatial_kernel,
            )?;
            let base = format!("cbam_{name}");
            let ids = CbamParamIds {
                fc1_w: bound.id(&format!("{base}.fc1.w")),
                fc1_b: bound.id(&format!("{base}.fc1.b")),
                fc2_w: bound.id(&format!("{base}.fc2.w")),
                fc2_b: bound.id(&format!("{base}.fc2.b")),
                spatial_w: bound.id(&format!("{base}.spatial.w")),
                spatial_b: bound.id(&format!("{base}.spatial.b")),
            };
            h = cbam_apply(tape, h, &p, &ids)?;
        }
    }
    let pooled = tape.reduce_mean(h, &[2, 3]);
    Ok(tape.linear(pooled, bound.id("head.w"), bound.id("head.b")))
}

fn forward_local_attn(
    model: &Model,
    tape: &mut Tape,
    x: TensorId,
    bound: &BoundParams,
) -> Result<TensorId> {
    let spec = &model.spec;
    let grid = spec.token_grid();
    let c = spec.width;
    let embedded = tape.conv2d(
        x,
        bound.id("patch.w"),
        bound.id("patch.b"),
        spec.patch_size,
        0,
    ); // [B, C, G, G]
    let batch = tape.shape(embedded)[0];
    let mut h = embedded;
    for i in 0..spec.depth {
        // Depthwise-separable convolution with a residual connection.
        let dw = tape.depthwise_conv2d(
            h,
            bound.id(&format!("block{i}.dw.w")),
            bound.id(&format!("block{i}.dw.b")),
            1,
        );
        let pw = tape.conv2d(
            dw,
            bound.id(&format!("block{i}.pw.w")),
            bound.id(&format!("block{i}.pw.b")),
            1,
            0,
        );
        let act = tape.relu(pw);
        h = tape.add(h, act);

        // Attention operates in token layout.
        let mut tokens = tape.permute(h, &[0, 2, 3, 1]); // [B, G, G, C]
        tokens = attention_sublayer(
            tape,
            tokens,
            &format!("block{i}.block_attn"),
            spec.window,
            WindowMode::Block,
            spec.heads,
            bound,
        )?;
        tokens = attention_sublayer(
            tape,
            tokens,
            &format!("block{i}.grid_attn"),
            spec.window,
            WindowMode::Grid,
            spec.heads,
            bound,
        )?;
        h = tape.permute(tokens, &[0, 3, 1, 2]);
    }
    let tokens = tape.permute(h, &[0, 2, 3, 1]);
    let flat = tape.reshape(tokens, &[batch, grid * grid, c]);
    let normed = tape.layer_norm(flat, bound.id("final_ln.g"), bound.id("final_ln.b"), LN_EPS);
    let pooled = tape.reduce_mean(normed, &[1]);
    Ok(tape.linear(pooled, bound.id("head.w"), bound.id("head.b")))
}

fn forward_global_attn(
    model: &Model,
    tape: &mut Tape,
    x: TensorId,
    bound: &BoundParams,
) -> Result<TensorId> {
    let spec = &model.spec;
    let grid = spec.token_grid();
    let n = grid * grid;
    let c = spec.width;
    let embedded = tape.conv2d(
        x,
        bound.id("patch.w"),
        bound.id("patch.b"),
        spec.patch_size,
        0,
    );
    let batch = tape.shape(embedded)[0];
    let tokens = tape.permute(embedded, &[0, 2, 3, 1]);
    let flat = tape.reshape(tokens, &[batch, n, c]);
    let mut h = tape.add_bcast_axis0(flat, bound.id("pos"));
    for i in 0..spec.depth {
        // Pre-norm full self-attention.
        let name = format!("block{i}.attn");
        let normed = tape.layer_norm(
            h,
            bound.id(&format!("{name}.ln.g")),
            bound.id(&format!("{name}.ln.b")),
            LN_EPS,
        );
        let ids = attn_ids(bound, &name);
        let attended = mhsa_grouped(tape, normed, spec.heads, &ids)?;
        h = tape.add(h, attended);

        // Pre-norm MLP.
        let normed = tape.layer_norm(
            h,
            bound.id(&format!("block{i}.mlp.ln.g")),
            bound.id(&format!("block{i}.mlp.ln.b")),
            LN_EPS,
        );
        let up = tape.linear(
            normed,
            bound.id(&format!("block{i}.mlp.fc1.w")),
            bound.id(&format!("block{i}.mlp.fc1.b")),
        );
        let act = tape.gelu(up);
        let down = tape.linear(
            act,
            bound.id(&format!("block{i}.mlp.fc2.w")),
            bound.id(&format!("block{i}.mlp.fc2.b")),
        );
        h = tape.add(h, down);
    }
    let normed = tape.layer_norm(h, bound.id("final_ln.g"), bound.id("final_ln.b"), LN_EPS);
    let pooled = tape.reduce_mean(normed, &[1]);
    Ok(tape.linear(pooled, bound.id("head.w"), bound.id("head.b")))
}

/// Run a forward pass on an existing tape, returning the logits node.
/// The caller owns parameter binding so it can reach gradients afterward.
pub fn forward_tape(
    model: &Model,
    tape: &mut Tape,
    x: TensorId,
    bound: &BoundParams,
    opts: ForwardOpts,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != model.spec.input_size || shape[3] != model.spec.input_size
    {
        return Err(Error::contract(format!(
            "input shape {shape:?} does not match [B, 3, {0}, {0}]",
            model.spec.input_size
        )));
    }
    match model.spec.kind {
        BackboneKind::ConvCbam => forward_conv_cbam(model, tape, x, bound, opts),
        BackboneKind::LocalAttn => forward_local_attn(model, tape, x, bound),
        BackboneKind::GlobalAttn => forward_global_attn(model, tape, x, bound),
    }
}

/// Eval-mode forward: deterministic, no gradient bookkeeping kept.
pub fn forward(model: &Model, batch: &ArrayD<f64>) -> Result<ModelOutput> {
    forward_with_opts(model, batch, ForwardOpts::default())
}

pub fn forward_with_opts(
    model: &Model,
    batch: &ArrayD<f64>,
    opts: ForwardOpts,
) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let bound = BoundParams::bind(&model.params, &mut tape);
    let logits = forward_tape(model, &mut tape, x, &bound, opts)?;
    Ok(ModelOutput::from_logits(tape.value(logits).clone()))
}

/// Mean BCE over the six biomarker logits, plus mean squared error over
/// the two clinical outputs when the head emits eight (weighted 1:1).
pub fn multi_label_loss(
    tape: &mut Tape,
    logits: TensorId,
    biomarker_targets: &ArrayD<f64>,
    clinical_targets: Option<&ArrayD<f64>>,
) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || (shape[1] != 6 && shape[1] != 8) {
        return Err(Error::contract(format!(
            "loss expects [B, 6|8] logits, got {shape:?}"
        )));
    }
    let bio = tape.narrow(logits, 1, 0, 6);
    let bce = tape.bce_with_logits_mean(bio, biomarker_targets);
    if shape[1] == 8 {
        let Some(clin) = clinical_targets else {
            return Err(Error::contract(
                "8-output model requires clinical targets for the loss",
            ));
        };
        let pred = tape.narrow(logits, 1, 6, 2);
        let mse = tape.mse_mean(pred, clin);
        return Ok(tape.add(bce, mse));
    }
    Ok(bce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_batch(b: usize, s: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = crate::seeding::stream_rng(seed, "models-test");
        ArrayD::from_shape_fn(IxDyn(&[b, 3, s, s]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_cbam_shapes() {
        let spec = BackboneSpec::conv_cbam(64, 16, 6);
        let model = build_model(&spec, 11).unwrap();
        let out = forward(&model, &rand_batch(2, 64, 1)).unwrap();
        assert_eq!(out.logits.shape(), [2, 6]);
        assert_eq!(out.probabilities.shape(), [2, 6]);
    }

    #[test]
    fn probabilities_are_sigmoid_of_biomarker_logits() {
        let spec = BackboneSpec::conv_cbam(32, 8, 8);
        let model = build_model(&spec, 3).unwrap();
        let out = forward(&model, &rand_batch(2, 32, 2)).unwrap();
        for bi in 0..2 {
            for k in 0..6 {
                let s = 1.0 / (1.0 + (-out.logits[[bi, k]]).exp());
                assert!((out.probabilities[[bi, k]] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cbam_param_count_difference_matches_formula() {
        let mut with = BackboneSpec::conv_cbam(64, 16, 6);
        with.cbam_reduction = 4;
        let mut without = with.clone();
        without.use_cbam = false;
        let m_with = build_model(&with, 5).unwrap();
        let m_without = build_model(&without, 5).unwrap();
        let expected: usize = with
            .cbam_blocks()
            .unwrap()
            .iter()
            .map(|p| p.num_scalars())
            .sum();
        assert_eq!(m_with.num_scalars() - m_without.num_scalars(), expected);
    }

    #[test]
    fn gates_forced_to_one_match_ablation_baseline() {
        // Same seed: shared (non-CBAM) parameter names initialize
        // identically, so forcing the gates to identity must reproduce
        // the no-CBAM model exactly.
        let with = BackboneSpec::conv_cbam(32, 8, 6);
        let mut without = with.clone();
        without.use_cbam = false;
        let m_with = build_model(&with, 7).unwrap();
        let m_without = build_model(&without, 7).unwrap();
        let batch = rand_batch(2, 32, 8);
        let forced = forward_with_opts(
            &m_with,
            &batch,
            ForwardOpts {
                force_cbam_identity: true,
            },
        )
        .unwrap();
        let baseline = forward(&m_without, &batch).unwrap();
        assert_eq!(forced.logits, baseline.logits);
    }

    #[test]
    fn local_attn_shapes() {
        let spec = BackboneSpec::local_attn(64, 16, 2, 4, 4, 6);
        let model = build_model(&spec, 13).unwrap();
        let out = forward(&model, &rand_batch(2, 64, 3)).unwrap();
        assert_eq!(out.logits.shape(), [2, 6]);
    }

    #[test]
    fn global_attn_shapes() {
        let spec = BackboneSpec::global_attn(32, 16, 2, 4, 8);
        let model = build_model(&spec, 17).unwrap();
        let out = forward(&model, &rand_batch(2, 32, 4)).unwrap();
        assert_eq!(out.logits.shape(), [2, 8]);
        assert_eq!(out.probabilities.shape(), [2, 6]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = BackboneSpec::local_attn(32, 8, 1, 4, 2, 6);
        let model = build_model(&spec, 19).unwrap();
        let batch = rand_batch(2, 32, 5);
        let a = forward(&model, &batch).unwrap();
        let b = forward(&model, &batch).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn batch_independence_in_eval() {
        let spec = BackboneSpec::global_attn(32, 8, 1, 2, 6);
        let model = build_model(&spec, 23).unwrap();
        let batch = rand_batch(4, 32, 6);
        let full = forward(&model, &batch).unwrap();
        let single = batch.slice(ndarray::s![1..2, .., .., ..]).to_owned().into_dyn();
        let single = forward(&model, &single.as_standard_layout().to_owned()).unwrap();
        for k in 0..6 {
            assert!(
                (full.logits[[1, k]] - single.logits[[0, k]]).abs() < 1e-5,
                "cross-sample coupling at output {k}"
            );
        }
    }

    #[test]
    fn size_mismatch_is_contract_error() {
        let spec = BackboneSpec::conv_cbam(64, 8, 6);
        let model = build_model(&spec, 29).unwrap();
        assert!(forward(&model, &rand_batch(1, 32, 7)).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_windows() {
        let spec = BackboneSpec::local_attn(64, 16, 2, 5, 4, 6);
        assert!(spec.validate().is_err());
        let spec = BackboneSpec::local_attn(64, 15, 2, 4, 4, 6);
        assert!(spec.validate().is_err());
        let spec = BackboneSpec::conv_cbam(60, 16, 6);
        assert!(spec.validate().is_err());
        let spec = BackboneSpec::conv_cbam(64, 16, 7);
        assert!(spec.validate().is_err());
    }
}
