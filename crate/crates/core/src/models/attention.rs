//! Multi-head self-attention over token groups, plus the block/grid
//! windowing schemes.
//!
//! Block attention partitions an H x W token grid into non-overlapping
//! window x window tiles and attends within each tile. Grid attention
//! attends within dilated sets: tokens sharing (row mod (H/window),
//! col mod (W/window)). The two are duals under a fixed spatial
//! permutation, which the tests exploit as an oracle.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowMode {
    Block,
    Grid,
}

/// Tape ids of one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttnParamIds {
    /// [3C, C] fused query/key/value projection.
    pub qkv_w: TensorId,
    /// [3C]
    pub qkv_b: TensorId,
    /// [C, C]
    pub proj_w: TensorId,
    /// [C]
    pub proj_b: TensorId,
}

/// Multi-head self-attention within each group of a [G, T, C] tensor.
pub fn mhsa_grouped(
    tape: &mut Tape,
    tokens: TensorId,
    heads: usize,
    ids: &AttnParamIds,
) -> Result<TensorId> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "attention expects [groups, tokens, channels], got {shape:?}"
        )));
    }
    let (g, t, c) = (shape[0], shape[1], shape[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::contract(format!(
            "channel count {c} not divisible by heads {heads}"
        )));
    }
    let dh = c / heads;

    let qkv = tape.linear(tokens, ids.qkv_w, ids.qkv_b); // [G, T, 3C]
    let q = tape.narrow(qkv, 2, 0, c);
    let k = tape.narrow(qkv, 2, c, c);
    let v = tape.narrow(qkv, 2, 2 * c, c);

    let split = |tape: &mut Tape, x: TensorId| -> TensorId {
        let r = tape.reshape(x, &[g, t, heads, dh]);
        let p = tape.permute(r, &[0, 2, 1, 3]); // [G, h, T, dh]
        tape.reshape(p, &[g * heads, t, dh])
    };
    let qh = split(tape, q);
    let kh = split(tape, k);
    let vh = split(tape, v);

    let kt = tape.permute(kh, &[0, 2, 1]); // [G*h, dh, T]
    let scores = tape.bmm(qh, kt); // [G*h, T, T]
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_last(scaled);
    let ctx = tape.bmm(attn, vh); // [G*h, T, dh]

    let r = tape.reshape(ctx, &[g, heads, t, dh]);
    let p = tape.permute(r, &[0, 2, 1, 3]); // [G, T, h, dh]
    let merged = tape.reshape(p, &[g, t, c]);
    Ok(tape.linear(merged, ids.proj_w, ids.proj_b))
}

fn check_divisible(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::contract(format!(
            "token grid {h}x{w} not divisible by window {window}"
        )));
    }
    Ok(())
}

/// Windowed self-attention on a [B, H, W, C] token grid; shape preserved.
pub fn windowed_attention(
    tape: &mut Tape,
    x: TensorId,
    window: usize,
    mode: WindowMode,
    heads: usize,
    ids: &AttnParamIds,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::contract(format!(
            "windowed attention expects [batch, rows, cols, channels], got {shape:?}"
        )));
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    check_divisible(h, w, window)?;
    let (gh, gw) = (h / window, w / window);
    let groups = b * gh * gw;
    let t = window * window;

    let tokens = match mode {
        WindowMode::Block => {
            // Rows split as (tile row, offset); tiles become groups.
            let r = tape.reshape(x, &[b, gh, window, gw, window, c]);
            let p = tape.permute(r, &[0, 1, 3, 2, 4, 5]);
            tape.reshape(p, &[groups, t, c])
        }
        WindowMode::Grid => {
            // Rows split as (offset, residue); residues become groups, so a
            // group gathers tokens strided by H/window across the image.
            let r = tape.reshape(x, &[b, window, gh, window, gw, c]);
            let p = tape.permute(r, &[0, 2, 4, 1, 3, 5]);
            tape.reshape(p, &[groups, t, c])
        }
    };

    let attended = mhsa_grouped(tape, tokens, heads, ids)?;

    let out = match mode {
        WindowMode::Block => {
            let r = tape.reshape(attended, &[b, gh, gw, window, window, c]);
            let p = tape.permute(r, &[0, 1, 3, 2, 4, 5]);
            tape.reshape(p, &[b, h, w, c])
        }
        WindowMode::Grid => {
            let r = tape.reshape(attended, &[b, gh, gw, window, window, c]);
            let p = tape.permute(r, &[0, 3, 1, 4, 2, 5]);
            tape.reshape(p, &[b, h, w, c])
        }
    };
    Ok(out)
}

/// The spatial permutation P mapping the grid layout onto the block
/// layout: member (a_r, a_c) of dilated set (b_r, b_c) moves to position
/// (b_r * window + a_r, b_c * window + a_c). Applying block attention
/// after P and inverting reproduces grid attention. Exposed for tests.
pub fn block_grid_permutation(h: usize, w: usize, window: usize) -> Vec<(usize, usize)> {
    assert!(h % window == 0 && w % window == 0);
    let (gh, gw) = (h / window, w / window);
    let mut dest = vec![(0usize, 0usize); h * w];
    for r in 0..h {
        for c in 0..w {
            let (a_r, b_r) = (r / gh, r % gh);
            let (a_c, b_c) = (c / gw, c % gw);
            dest[r * w + c] = (b_r * window + a_r, b_c * window + a_c);
        }
    }
    dest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn attn_params(tape: &mut Tape, c: usize, seed: u64) -> AttnParamIds {
        let mut store = ParamStore::new();
        store.create("qkv.w", &[3 * c, c], Init::KaimingUniform { fan_in: c }, seed);
        store.create("qkv.b", &[3 * c], Init::KaimingUniform { fan_in: c }, seed);
        store.create("proj.w", &[c, c], Init::KaimingUniform { fan_in: c }, seed);
        store.create("proj.b", &[c], Init::KaimingUniform { fan_in: c }, seed);
        AttnParamIds {
            qkv_w: tape.leaf(store.get("qkv.w").clone()),
            qkv_b: tape.leaf(store.get("qkv.b").clone()),
            proj_w: tape.leaf(store.get("proj.w").clone()),
            proj_b: tape.leaf(store.get("proj.b").clone()),
        }
    }

    fn rand_grid(b: usize, h: usize, w: usize, c: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = crate::seeding::stream_rng(seed, "attn-test");
        ArrayD::from_shape_fn(IxDyn(&[b, h, w, c]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_preserved_both_modes() {
        for mode in [WindowMode::Block, WindowMode::Grid] {
            let mut tape = Tape::new();
            let ids = attn_params(&mut tape, 8, 1);
            let x = tape.leaf(rand_grid(2, 8, 8, 8, 2));
            let y = windowed_attention(&mut tape, x, 4, mode, 2, &ids).unwrap();
            assert_eq!(tape.shape(y), [2, 8, 8, 8]);
        }
    }

    #[test]
    fn divisibility_violation_names_dims() {
        let mut tape = Tape::new();
        let ids = attn_params(&mut tape, 8, 1);
        let x = tape.leaf(rand_grid(1, 6, 8, 8, 3));
        let err = windowed_attention(&mut tape, x, 4, WindowMode::Block, 2, &ids).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('8') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn single_tile_degeneracy_block_equals_grid() {
        // H = W = window: both modes are full attention over all tokens.
        let mut tape = Tape::new();
        let ids = attn_params(&mut tape, 8, 4);
        let x = tape.leaf(rand_grid(2, 4, 4, 8, 5));
        let yb = windowed_attention(&mut tape, x, 4, WindowMode::Block, 2, &ids).unwrap();
        let yg = windowed_attention(&mut tape, x, 4, WindowMode::Grid, 2, &ids).unwrap();
        assert_eq!(tape.value(yb), tape.value(yg));
    }

    #[test]
    fn grid_equals_permuted_block() {
        // Oracle: apply the explicit permutation, run block attention,
        // invert. Must agree with grid attention bit-for-bit.
        let (b, h, w, c, window, heads) = (2, 8, 8, 8, 4, 2);
        let x0 = rand_grid(b, h, w, c, 6);
        let perm = block_grid_permutation(h, w, window);

        let mut permuted = ArrayD::zeros(IxDyn(&[b, h, w, c]));
        for bi in 0..b {
            for r in 0..h {
                for cc in 0..w {
                    let (pr, pc) = perm[r * w + cc];
                    for ch in 0..c {
                        permuted[[bi, pr, pc, ch]] = x0[[bi, r, cc, ch]];
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let ids = attn_params(&mut tape, c, 7);
        let xg = tape.leaf(x0.clone());
        let yg = windowed_attention(&mut tape, xg, window, WindowMode::Grid, heads, &ids).unwrap();

        let xp = tape.leaf(permuted);
        let yp = windowed_attention(&mut tape, xp, window, WindowMode::Block, heads, &ids).unwrap();

        // Invert the permutation on the block result.
        let ypv = tape.value(yp);
        let mut unpermuted = ArrayD::zeros(IxDyn(&[b, h, w, c]));
        for bi in 0..b {
            for r in 0..h {
                for cc in 0..w {
                    let (pr, pc) = perm[r * w + cc];
                    for ch in 0..c {
                        unpermuted[[bi, r, cc, ch]] = ypv[[bi, pr, pc, ch]];
                    }
                }
            }
        }
        assert_eq!(tape.value(yg), &unpermuted);
    }

    #[test]
    fn batch_equivariance() {
        let (h, w, c, window, heads) = (8, 8, 8, 4, 2);
        let x0 = rand_grid(3, h, w, c, 8);
        let mut swapped = x0.clone();
        for r in 0..h {
            for cc in 0..w {
                for ch in 0..c {
                    swapped[[0, r, cc, ch]] = x0[[2, r, cc, ch]];
                    swapped[[2, r, cc, ch]] = x0[[0, r, cc, ch]];
                }
            }
        }
        let mut tape = Tape::new();
        let ids = attn_params(&mut tape, c, 9);
        let xa = tape.leaf(x0);
        let ya = windowed_attention(&mut tape, xa, window, WindowMode::Block, heads, &ids).unwrap();
        let xb = tape.leaf(swapped);
        let yb = windowed_attention(&mut tape, xb, window, WindowMode::Block, heads, &ids).unwrap();
        let yav = tape.value(ya);
        let ybv = tape.value(yb);
        for r in 0..h {
            for cc in 0..w {
                for ch in 0..c {
                    assert_eq!(yav[[0, r, cc, ch]], ybv[[2, r, cc, ch]]);
                    assert_eq!(yav[[2, r, cc, ch]], ybv[[0, r, cc, ch]]);
                    assert_eq!(yav[[1, r, cc, ch]], ybv[[1, r, cc, ch]]);
                }
            }
        }
    }
}
