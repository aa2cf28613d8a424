//! Convolutional block attention: sequential channel-then-spatial gating
//! of a feature map.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape parameters of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamParams {
    pub channels: usize,
    /// Channel-MLP reduction; must divide `channels`.
    pub reduction: usize,
    /// Spatial attention kernel; odd.
    pub spatial_kernel: usize,
}

impl CbamParams {
    /// Resolve a requested reduction against a channel count: clamp into
    /// [1, C], then decrease until it divides C.
    pub fn resolve(channels: usize, requested_reduction: usize, spatial_kernel: usize) -> Result<CbamParams> {
        if spatial_kernel % 2 == 0 || spatial_kernel == 0 {
            return Err(Error::contract(format!(
                "spatial kernel {spatial_kernel} must be odd"
            )));
        }
        let mut reduction = requested_reduction.clamp(1, channels.max(1));
        while channels % reduction != 0 {
            reduction -= 1;
        }
        Ok(CbamParams {
            channels,
            reduction,
            spatial_kernel,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    /// Number of scalar weights in one block (channel MLP + spatial conv,
    /// all with biases).
    pub fn num_scalars(&self) -> usize {
        let c = self.channels;
        let h = self.hidden();
        let k = self.spatial_kernel;
        (h * c + h) + (c * h + c) + (2 * k * k + 1)
    }
}

/// Tape ids of one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct CbamParamIds {
    /// [hidden, C] and [hidden]
    pub fc1_w: TensorId,
    pub fc1_b: TensorId,
    /// [C, hidden] and [C]
    pub fc2_w: TensorId,
    pub fc2_b: TensorId,
    /// [1, 2, k, k] and [1]
    pub spatial_w: TensorId,
    pub spatial_b: TensorId,
}

fn channel_descriptor_mlp(
    tape: &mut Tape,
    descriptor: TensorId,
    ids: &CbamParamIds,
) -> TensorId {
    let h = tape.linear(descriptor, ids.fc1_w, ids.fc1_b);
    let h = tape.relu(h);
    tape.linear(h, ids.fc2_w, ids.fc2_b)
}

/// x ⊙ Mc(x) ⊙ Ms(x ⊙ Mc(x)) with Mc from shared-MLP avg/max channel
/// descriptors and Ms from a k x k convolution over the stacked
/// channel-wise average and maximum.
pub fn cbam_apply(
    tape: &mut Tape,
    x: TensorId,
    params: &CbamParams,
    ids: &CbamParamIds,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::contract(format!(
            "cbam expects [batch, channels, h, w], got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != params.channels {
        return Err(Error::contract(format!(
            "cbam channel mismatch: feature map has {c}, block built for {}",
            params.channels
        )));
    }

    // Channel gate from shared-MLP avg- and max-pooled descriptors.
    let avg = tape.reduce_mean(x, &[2, 3]); // [B, C]
    let max = tape.reduce_max(x, &[2, 3]); // [B, C]
    let avg_out = channel_descriptor_mlp(tape, avg, ids);
    let max_out = channel_descriptor_mlp(tape, max, ids);
    let summed = tape.add(avg_out, max_out);
    let channel_gate = tape.sigmoid(summed);
    let gated = tape.scale_channels(x, channel_gate);

    // Spatial gate over [avg_c; max_c] of the channel-gated map.
    let ch_avg = tape.reduce_mean(gated, &[1]); // [B, H, W]
    let ch_max = tape.reduce_max(gated, &[1]);
    let ch_avg = tape.reshape(ch_avg, &[b, 1, h, w]);
    let ch_max = tape.reshape(ch_max, &[b, 1, h, w]);
    let stacked = tape.concat(&[ch_avg, ch_max], 1); // [B, 2, H, W]
    let pad = params.spatial_kernel / 2;
    let conv = tape.conv2d(stacked, ids.spatial_w, ids.spatial_b, 1, pad); // [B, 1, H, W]
    let conv = tape.reshape(conv, &[b, h, w]);
    let spatial_gate = tape.sigmoid(conv);
    Ok(tape.scale_spatial(gated, spatial_gate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn zero_ids(tape: &mut Tape, p: &CbamParams) -> CbamParamIds {
        let c = p.channels;
        let hid = p.hidden();
        let k = p.spatial_kernel;
        CbamParamIds {
            fc1_w: tape.leaf(ArrayD::zeros(IxDyn(&[hid, c]))),
            fc1_b: tape.leaf(ArrayD::zeros(IxDyn(&[hid]))),
            fc2_w: tape.leaf(ArrayD::zeros(IxDyn(&[c, hid]))),
            fc2_b: tape.leaf(ArrayD::zeros(IxDyn(&[c]))),
            spatial_w: tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, k, k]))),
            spatial_b: tape.leaf(ArrayD::zeros(IxDyn(&[1]))),
        }
    }

    #[test]
    fn zero_weights_gate_to_quarter() {
        // Both gates sigmoid(0) = 0.5, so output = 0.25 x.
        let p = CbamParams::resolve(8, 4, 3).unwrap();
        let mut tape = Tape::new();
        let ids = zero_ids(&mut tape, &p);
        let mut rng = crate::seeding::stream_rng(1, "cbam");
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 8, 5, 5]), |_| rng.random_range(-1.0..1.0));
        let x = tape.leaf(x0.clone());
        let y = cbam_apply(&mut tape, x, &p, &ids).unwrap();
        for (yv, xv) in tape.value(y).iter().zip(x0.iter()) {
            assert!((yv - 0.25 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn spatially_constant_input_gives_constant_interior_gate() {
        let p = CbamParams::resolve(4, 2, 3).unwrap();
        let mut tape = Tape::new();
        let mut rng = crate::seeding::stream_rng(2, "cbam");
        let c = p.channels;
        let hid = p.hidden();
        let k = p.spatial_kernel;
        let mut leaf = |shape: &[usize]| {
            let v = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-0.5..0.5));
            v
        };
        let ids = CbamParamIds {
            fc1_w: tape.leaf(leaf(&[hid, c])),
            fc1_b: tape.leaf(leaf(&[hid])),
            fc2_w: tape.leaf(leaf(&[c, hid])),
            fc2_b: tape.leaf(leaf(&[c])),
            spatial_w: tape.leaf(leaf(&[1, 2, k, k])),
            spatial_b: tape.leaf(leaf(&[1])),
        };
        // Constant over H x W, varying per channel.
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 4, 7, 7]), |ix| 0.3 * ix[1] as f64 - 0.4);
        let x = tape.leaf(x0);
        let y = cbam_apply(&mut tape, x, &p, &ids).unwrap();
        let yv = tape.value(y);
        // Interior pixels (away from conv padding) share one gate value.
        let border = k / 2;
        for ch in 0..4 {
            let reference = yv[[0, ch, border + 1, border + 1]];
            for yy in border + 1..7 - border - 1 {
                for xx in border + 1..7 - border - 1 {
                    assert!((yv[[0, ch, yy, xx]] - reference).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let p = CbamParams::resolve(8, 4, 3).unwrap();
        let mut tape = Tape::new();
        let ids = zero_ids(&mut tape, &p);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 5, 5])));
        assert!(cbam_apply(&mut tape, x, &p, &ids).is_err());
    }

    #[test]
    fn reduction_resolution() {
        assert_eq!(CbamParams::resolve(16, 16, 7).unwrap().reduction, 16);
        assert_eq!(CbamParams::resolve(16, 5, 7).unwrap().reduction, 4);
        assert_eq!(CbamParams::resolve(6, 16, 7).unwrap().reduction, 6);
        assert_eq!(CbamParams::resolve(7, 3, 7).unwrap().reduction, 1);
        assert!(CbamParams::resolve(8, 4, 4).is_err());
    }

    #[test]
    fn scalar_count_formula() {
        let p = CbamParams::resolve(8, 4, 3).unwrap();
        // fc1: 2*8+2, fc2: 8*2+8, spatial: 2*9+1
        assert_eq!(p.num_scalars(), (2 * 8 + 2) + (8 * 2 + 8) + (2 * 9 + 1));
    }
}
