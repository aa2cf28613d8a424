//! Minimal reverse-mode automatic differentiation over `ndarray` in f64.
//!
//! A `Tape` is an append-only arena of nodes; every operation produces a
//! new node whose backward closure computes vector-Jacobian products from
//! the upstream gradient, the parent values, and the node's own output.
//! Evaluation is single-threaded and allocation order is deterministic,
//! so training runs are bit-reproducible on a given platform.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
}

/// Gradients for every node of a tape, indexed by `TensorId`.
pub struct Gradients(Vec<Option<ArrayD<f64>>>);

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node (no gradient flows past it, but its gradient
    /// is recorded).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<TensorId>,
        backward: Option<BackwardFn>,
    ) -> TensorId {
        // ndarray ops occasionally emit F-order results (e.g. outer-product
        // matmuls); node values must be standard layout for the flat-slice
        // kernels above.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        id
    }

    /// Reverse pass from a scalar root. Insertion order is a topological
    /// order, so a single reverse sweep suffices.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let Some(gy) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let Some(back) = &node.backward else { continue };
            let parent_values: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = back(&gy, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape mismatch for parent {parent:?}"
                );
                let pg = if pg.is_standard_layout() {
                    pg
                } else {
                    pg.as_standard_layout().to_owned()
                };
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients(grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|gy, _, _| vec![gy.clone(), gy.clone()])),
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|gy, parents, _| {
                vec![gy * parents[1], gy * parents[0]]
            })),
        )
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let value = self.value(x) * factor;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, _| vec![gy * factor])),
        )
    }

    /// x[..., C] + b[C], broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let c = *self.shape(x).last().expect("add_bias on 0-d tensor");
        assert_eq!(self.shape(bias), [c], "bias length mismatch");
        let mut value = self.value(x).clone();
        {
            let b = self.value(bias);
            let flat = value.as_slice_mut().unwrap();
            for (i, v) in flat.iter_mut().enumerate() {
                *v += b[[i % c]];
            }
        }
        self.push(
            value,
            vec![x, bias],
            Some(Box::new(move |gy, _, _| {
                let mut db = ArrayD::zeros(IxDyn(&[c]));
                for (i, g) in gy.iter().enumerate() {
                    db[[i % c]] += *g;
                }
                vec![gy.clone(), db]
            })),
        )
    }

    /// x[B, ...rest] + p[...rest], broadcasting over the batch axis.
    pub fn add_bcast_axis0(&mut self, x: TensorId, p: TensorId) -> TensorId {
        assert_eq!(
            &self.shape(x)[1..],
            self.shape(p),
            "broadcast trailing shape mismatch"
        );
        let mut value = self.value(x).clone();
        let stride: usize = self.shape(p).iter().product();
        {
            let pv = self.value(p).as_slice().unwrap().to_vec();
            let flat = value.as_slice_mut().unwrap();
            for (i, v) in flat.iter_mut().enumerate() {
                *v += pv[i % stride];
            }
        }
        let p_shape = self.shape(p).to_vec();
        self.push(
            value,
            vec![x, p],
            Some(Box::new(move |gy, _, _| {
                let mut dp = ArrayD::zeros(IxDyn(&p_shape));
                {
                    let dpf = dp.as_slice_mut().unwrap();
                    for (i, g) in gy.iter().enumerate() {
                        dpf[i % stride] += *g;
                    }
                }
                vec![gy.clone(), dp]
            })),
        )
    }

    // ---- activations ----

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![x],
            Some(Box::new(|gy, parents, _| {
                let mut dx = gy.clone();
                for (d, v) in dx.iter_mut().zip(parents[0].iter()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            vec![x],
            Some(Box::new(|gy, _, y| {
                let mut dx = gy.clone();
                for (d, s) in dx.iter_mut().zip(y.iter()) {
                    *d *= s * (1.0 - s);
                }
                vec![dx]
            })),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let value = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (K * (v + C3 * v * v * v)).tanh()));
        self.push(
            value,
            vec![x],
            Some(Box::new(|gy, parents, _| {
                let mut dx = gy.clone();
                for (d, &v) in dx.iter_mut().zip(parents[0].iter()) {
                    let u = K * (v + C3 * v * v * v);
                    let t = u.tanh();
                    let du = K * (1.0 + 3.0 * C3 * v * v);
                    *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                }
                vec![dx]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let parent_shape = self.shape(x).to_vec();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, _| {
                vec![gy
                    .clone()
                    .into_shape_with_order(IxDyn(&parent_shape))
                    .unwrap()]
            })),
        )
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let value = self
            .value(x)
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes_owned = axes.to_vec();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, _| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![gy
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Slice along `axis` (keeping the axis).
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let parent_shape = self.shape(x).to_vec();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, _| {
                let mut dx = ArrayD::zeros(IxDyn(&parent_shape));
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(gy);
                vec![dx]
            })),
        )
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shape mismatch")
            .as_standard_layout()
            .to_owned();
        let extents: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |gy, _, _| {
                let mut out = Vec::with_capacity(extents.len());
                let mut offset = 0;
                for &ext in &extents {
                    out.push(
                        gy.slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + ext))
                            .as_standard_layout()
                            .to_owned(),
                    );
                    offset += ext;
                }
                out
            })),
        )
    }

    // ---- reductions ----

    /// Mean over `axes` (removed from the shape). `axes` must be sorted.
    pub fn reduce_mean(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let mut value = self.value(x).clone();
        let mut count = 1usize;
        for &axis in axes.iter().rev() {
            count *= value.shape()[axis];
            value = value.mean_axis(Axis(axis)).expect("mean over empty axis");
        }
        let parent_shape = self.shape(x).to_vec();
        let axes_owned = axes.to_vec();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, _| {
                // Re-insert the removed axes, then broadcast.
                let mut expanded = gy.clone();
                for &axis in &axes_owned {
                    expanded = expanded.insert_axis(Axis(axis));
                }
                let scaled = expanded / count as f64;
                let dx = scaled
                    .broadcast(IxDyn(&parent_shape))
                    .unwrap()
                    .as_standard_layout()
                    .to_owned();
                vec![dx]
            })),
        )
    }

    /// Max over `axes` (removed). Gradient routes to the first argmax.
    pub fn reduce_max(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
        let out_len: usize = out_shape.iter().product::<usize>().max(1);

        // Strides for mapping input flat index -> output flat index.
        let mut out_strides = vec![0usize; out_shape.len()];
        {
            let mut acc = 1;
            for i in (0..out_shape.len()).rev() {
                out_strides[i] = acc;
                acc *= out_shape[i];
            }
        }
        let in_strides: Vec<usize> = {
            let mut s = vec![0usize; shape.len()];
            let mut acc = 1;
            for i in (0..shape.len()).rev() {
                s[i] = acc;
                acc *= shape[i];
            }
            s
        };

        let flat = xv.as_slice().unwrap();
        let mut best = vec![f64::NEG_INFINITY; out_len];
        let mut arg = vec![0usize; out_len];
        for (i, &v) in flat.iter().enumerate() {
            let mut o = 0;
            for (k, &axis) in keep.iter().enumerate() {
                let coord = (i / in_strides[axis]) % shape[axis];
                o += coord * out_strides[k];
            }
            if v > best[o] {
                best[o] = v;
                arg[o] = i;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), best).unwrap();
        let parent_shape = shape;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, _| {
                let mut dx = ArrayD::zeros(IxDyn(&parent_shape));
                {
                    let dxf = dx.as_slice_mut().unwrap();
                    for (o, g) in gy.iter().enumerate() {
                        dxf[arg[o]] += *g;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_last(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let c = *xv.shape().last().expect("softmax on 0-d tensor");
        let mut value = xv.clone();
        {
            let flat = value.as_slice_mut().unwrap();
            for row in flat.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gy, _, y| {
                let mut dx = gy.clone();
                {
                    let dxf = dx.as_slice_mut().unwrap();
                    let yf = y.as_slice().unwrap();
                    for (drow, yrow) in dxf.chunks_mut(c).zip(yf.chunks(c)) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, s)| d * s).sum();
                        for (d, s) in drow.iter_mut().zip(yrow.iter()) {
                            *d = s * (*d - dot);
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let c = *self.shape(x).last().expect("layer_norm on 0-d tensor");
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let mut value = self.value(x).clone();
        {
            let g = self.value(gamma).as_slice().unwrap().to_vec();
            let b = self.value(beta).as_slice().unwrap().to_vec();
            let flat = value.as_slice_mut().unwrap();
            for row in flat.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * g[j] + b[j];
                }
            }
        }
        self.push(
            value,
            vec![x, gamma, beta],
            Some(Box::new(move |gy, parents, _| {
                let xv = parents[0].as_slice().unwrap();
                let g = parents[1].as_slice().unwrap();
                let gyf = gy.as_slice().unwrap();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (row_idx, (xrow, gyrow)) in
                    xv.chunks(c).zip(gyf.chunks(c)).enumerate()
                {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var =
                        xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let dxhat: Vec<f64> = gyrow
                        .iter()
                        .zip(g.iter())
                        .map(|(dy, gg)| dy * gg)
                        .collect();
                    for j in 0..c {
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += gyrow[j] * xhat[j];
                        dbeta[j] += gyrow[j];
                    }
                    let base = row_idx * c;
                    for j in 0..c {
                        dx[base + j] = inv / c as f64
                            * (c as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                vec![
                    ArrayD::from_shape_vec(parents[0].raw_dim(), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                ]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).clone().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).clone().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|gy, parents, _| {
                let g = gy.clone().into_dimensionality::<Ix2>().unwrap();
                let a2 = parents[0].clone().into_dimensionality::<Ix2>().unwrap();
                let b2 = parents[1].clone().into_dimensionality::<Ix2>().unwrap();
                vec![g.dot(&b2.t()).into_dyn(), a2.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// Batched matmul: [G, M, K] x [G, K, N] -> [G, M, N].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ga, m, k) = dims3(self.shape(a));
        let (gb, k2, n) = dims3(self.shape(b));
        assert_eq!(ga, gb, "bmm group mismatch");
        assert_eq!(k, k2, "bmm inner dim mismatch");
        let mut value = ArrayD::zeros(IxDyn(&[ga, m, n]));
        {
            let av = self.value(a);
            let bv = self.value(b);
            for g in 0..ga {
                let a2 = slice3(av, g);
                let b2 = slice3(bv, g);
                let mut out = value.index_axis_mut(Axis(0), g);
                out.assign(&a2.dot(&b2).into_dyn());
            }
        }
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |gy, parents, _| {
                let mut da = ArrayD::zeros(parents[0].raw_dim());
                let mut db = ArrayD::zeros(parents[1].raw_dim());
                for g in 0..ga {
                    let gslice = slice3(gy, g);
                    let a2 = slice3(parents[0], g);
                    let b2 = slice3(parents[1], g);
                    da.index_axis_mut(Axis(0), g)
                        .assign(&gslice.dot(&b2.t()).into_dyn());
                    db.index_axis_mut(Axis(0), g)
                        .assign(&a2.t().dot(&gslice).into_dyn());
                }
                vec![da, db]
            })),
        )
    }

    /// x[..., Cin] * w[Cout, Cin]^T + b[Cout].
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> TensorId {
        let in_shape = self.shape(x).to_vec();
        let cin = *in_shape.last().unwrap();
        let (cout, win) = {
            let ws = self.shape(weight);
            (ws[0], ws[1])
        };
        assert_eq!(cin, win, "linear input dim mismatch");
        let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, cin]);
        let wt = self.permute(weight, &[1, 0]);
        let prod = self.matmul(flat, wt);
        let biased = self.add_bias(prod, bias);
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = cout;
        self.reshape(biased, &out_shape)
    }

    // ---- convolution ----

    /// 2-D convolution: x[B, Cin, H, W], w[Cout, Cin, kh, kw], b[Cout],
    /// zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let w_mat = self
            .value(weight)
            .clone()
            .into_shape_with_order(IxDyn(&[cout, cin * kh * kw]))
            .unwrap()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bias_v = self.value(bias).as_slice().unwrap().to_vec();

        let mut value = ArrayD::zeros(IxDyn(&[b, cout, ho, wo]));
        for bi in 0..b {
            let col = im2col(self.value(x), bi, kh, kw, stride, pad, ho, wo);
            let out = w_mat.dot(&col); // [cout, ho*wo]
            let mut slot = value.index_axis_mut(Axis(0), bi);
            for co in 0..cout {
                for s in 0..ho * wo {
                    slot[[co, s / wo, s % wo]] = out[[co, s]] + bias_v[co];
                }
            }
        }

        self.push(
            value,
            vec![x, weight, bias],
            Some(Box::new(move |gy, parents, _| {
                let xv = parents[0];
                let wv = parents[1];
                let w2 = wv
                    .clone()
                    .into_shape_with_order(IxDyn(&[cout, cin * kh * kw]))
                    .unwrap()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dw = ndarray::Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut db = vec![0.0; cout];
                for bi in 0..b {
                    // dout for this batch element as [cout, ho*wo]
                    let mut g2 = ndarray::Array2::<f64>::zeros((cout, ho * wo));
                    for co in 0..cout {
                        for s in 0..ho * wo {
                            let g = gy[[bi, co, s / wo, s % wo]];
                            g2[[co, s]] = g;
                            db[co] += g;
                        }
                    }
                    let col = im2col(xv, bi, kh, kw, stride, pad, ho, wo);
                    dw += &g2.dot(&col.t());
                    let dcol = w2.t().dot(&g2); // [cin*kh*kw, ho*wo]
                    col2im_accumulate(&mut dx, bi, &dcol, kh, kw, stride, pad, ho, wo);
                }
                vec![
                    dx,
                    dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap(),
                ]
            })),
        )
    }

    /// Depthwise 3x3-style convolution: x[B, C, H, W], w[C, kh, kw], b[C],
    /// stride 1, zero padding.
    pub fn depthwise_conv2d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (wc, kh, kw) = (ws[0], ws[1], ws[2]);
        assert_eq!(c, wc, "depthwise channel mismatch");
        let ho = h + 2 * pad - kh + 1;
        let wo = w + 2 * pad - kw + 1;

        let mut value = ArrayD::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = self.value(bias);
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bv[[ci]];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy + ky;
                                    let ix = ox + kx;
                                    if iy < pad || ix < pad {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - pad, ix - pad);
                                    if iy >= h || ix >= w {
                                        continue;
                                    }
                                    acc += xv[[bi, ci, iy, ix]] * wv[[ci, ky, kx]];
                                }
                            }
                            value[[bi, ci, oy, ox]] = acc;
                        }
                    }
                }
            }
        }

        self.push(
            value,
            vec![x, weight, bias],
            Some(Box::new(move |gy, parents, _| {
                let xv = parents[0];
                let wv = parents[1];
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dw = ArrayD::zeros(wv.raw_dim());
                let mut db = ArrayD::zeros(IxDyn(&[c]));
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gy[[bi, ci, oy, ox]];
                                db[[ci]] += g;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = oy + ky;
                                        let ix = ox + kx;
                                        if iy < pad || ix < pad {
                                            continue;
                                        }
                                        let (iy, ix) = (iy - pad, ix - pad);
                                        if iy >= h || ix >= w {
                                            continue;
                                        }
                                        dw[[ci, ky, kx]] += g * xv[[bi, ci, iy, ix]];
                                        dx[[bi, ci, iy, ix]] += g * wv[[ci, ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    // ---- gated scaling (attention gates) ----

    /// x[B, C, H, W] * g[B, C] broadcast over space.
    pub fn scale_channels(&mut self, x: TensorId, gate: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(gate), [b, c], "channel gate shape mismatch");
        let mut value = self.value(x).clone();
        {
            let g = self.value(gate);
            for ((bi, ci, y, xx), v) in value
                .indexed_iter_mut()
                .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
            {
                let _ = (y, xx);
                *v *= g[[bi, ci]];
            }
        }
        self.push(
            value,
            vec![x, gate],
            Some(Box::new(move |gy, parents, _| {
                let xv = parents[0];
                let g = parents[1];
                let mut dx = gy.clone();
                let mut dg = ArrayD::zeros(IxDyn(&[b, c]));
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g[[bi, ci]];
                        for y in 0..h {
                            for xx in 0..w {
                                let gyv = gy[[bi, ci, y, xx]];
                                dx[[bi, ci, y, xx]] = gyv * gv;
                                dg[[bi, ci]] += gyv * xv[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                vec![dx, dg]
            })),
        )
    }

    /// x[B, C, H, W] * g[B, H, W] broadcast over channels.
    pub fn scale_spatial(&mut self, x: TensorId, gate: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(gate), [b, h, w], "spatial gate shape mismatch");
        let mut value = self.value(x).clone();
        {
            let g = self.value(gate);
            for ((bi, ci, y, xx), v) in value
                .indexed_iter_mut()
                .map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v))
            {
                let _ = ci;
                *v *= g[[bi, y, xx]];
            }
        }
        self.push(
            value,
            vec![x, gate],
            Some(Box::new(move |gy, parents, _| {
                let xv = parents[0];
                let g = parents[1];
                let mut dx = gy.clone();
                let mut dg = ArrayD::zeros(IxDyn(&[b, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let gyv = gy[[bi, ci, y, xx]];
                                dx[[bi, ci, y, xx]] = gyv * g[[bi, y, xx]];
                                dg[[bi, y, xx]] += gyv * xv[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                vec![dx, dg]
            })),
        )
    }

    // ---- losses ----

    /// Mean of the numerically stable binary cross-entropy with logits.
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: &ArrayD<f64>) -> TensorId {
        assert_eq!(self.shape(logits), targets.shape(), "bce target mismatch");
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (&z, &y) in self.value(logits).iter().zip(targets.iter()) {
            total += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / n);
        let targets = targets.clone();
        self.push(
            value,
            vec![logits],
            Some(Box::new(move |gy, parents, _| {
                let gs = gy[[]];
                let mut dz = parents[0].clone();
                for (d, y) in dz.iter_mut().zip(targets.iter()) {
                    let s = 1.0 / (1.0 + (-*d).exp());
                    *d = gs * (s - y) / n;
                }
                vec![dz]
            })),
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse_mean(&mut self, pred: TensorId, targets: &ArrayD<f64>) -> TensorId {
        assert_eq!(self.shape(pred), targets.shape(), "mse target mismatch");
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).iter().zip(targets.iter()) {
            total += (p - t) * (p - t);
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / n);
        let targets = targets.clone();
        self.push(
            value,
            vec![pred],
            Some(Box::new(move |gy, parents, _| {
                let gs = gy[[]];
                let mut dp = parents[0].clone();
                for (d, t) in dp.iter_mut().zip(targets.iter()) {
                    *d = gs * 2.0 * (*d - t) / n;
                }
                vec![dp]
            })),
        )
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected rank-3 tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn slice3(x: &ArrayD<f64>, g: usize) -> ndarray::ArrayView2<'_, f64> {
    x.index_axis(Axis(0), g)
        .into_dimensionality::<Ix2>()
        .unwrap()
}

/// Unfold one batch element into a [Cin*kh*kw, Ho*Wo] matrix.
fn im2col(
    x: &ArrayD<f64>,
    batch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<f64> {
    let shape = x.shape();
    let (cin, h, w) = (shape[1], shape[2], shape[3]);
    let mut col = ndarray::Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[batch, ci, iy - pad, ix - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Fold a [Cin*kh*kw, Ho*Wo] gradient back onto the input (accumulating).
fn col2im_accumulate(
    dx: &mut ArrayD<f64>,
    batch: usize,
    dcol: &ndarray::Array2<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let shape = dx.shape().to_vec();
    let (cin, h, w) = (shape[1], shape[2], shape[3]);
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        dx[[batch, ci, iy - pad, ix - pad]] += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Finite-difference utilities shared by gradient-check tests.
pub mod fdcheck {
    /// Central difference of `f` at `x` along coordinate `idx`.
    pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: usize, eps: f64) -> f64 {
        let mut plus = x.to_vec();
        plus[idx] += eps;
        let mut minus = x.to_vec();
        minus[idx] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    /// Relative error with an absolute floor to keep near-zero gradients
    /// comparable.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        (analytic - numeric).abs() / denom
    }
}
