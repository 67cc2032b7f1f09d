//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] is an append-only graph: every operation pushes a node holding
//! its value, and [`Tape::backward`] walks the nodes in reverse to accumulate
//! gradients. Nodes created with [`Tape::constant`] are treated as frozen:
//! gradients flow through them but are never computed for them.
//!
//! The op set is exactly what the model needs — convolutions, dense layers,
//! normalization, pixel shuffle, pooling, resizing and a few reductions —
//! all single-example (no batch axis); callers loop over batch items and sum
//! gradients, which keeps reductions deterministic.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    QuickGelu(usize),
    Abs(usize),
    Sum(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        pad: usize,
    },
    PixelShuffle {
        input: usize,
        r: usize,
    },
    ConcatChannels(Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    BroadcastToMap {
        input: usize,
    },
    LayerNormVec {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    LayerNormRows {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    SoftmaxRows(usize),
    L2NormalizeVec(usize),
    TakeRow {
        input: usize,
        row: usize,
    },
    AddRowBroadcast {
        matrix: usize,
        vector: usize,
    },
    Reshape {
        input: usize,
        orig: Vec<usize>,
    },
    AdaptiveAvgPool {
        input: usize,
        gh: usize,
        gw: usize,
    },
    Resize {
        input: usize,
        ky: Array2<f64>,
        kx: Array2<f64>,
    },
    ChannelWeightedSum {
        input: usize,
        weights: Vec<f64>,
    },
    ExtractPatches {
        input: usize,
        p: usize,
    },
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(ndarray::IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Differentiable leaf (parameters, inputs under optimization).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: gradients flow through ops that consume it, but the
    /// leaf itself never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn view2(&self, i: usize) -> ArrayView2<'_, f64> {
        self.nodes[i]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d value")
    }

    fn view3(&self, i: usize) -> ArrayView3<'_, f64> {
        self.nodes[i]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected 3-d value")
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let rg = self.needs(a.0);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        let rg = self.needs(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.needs(a.0);
        self.push(value, Op::Tanh(a.0), rg)
    }

    /// `x * sigmoid(1.702 x)`, the GELU form used by contrastive ViT encoders.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * sigmoid(1.702 * v));
        let rg = self.needs(a.0);
        self.push(value, Op::QuickGelu(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.needs(a.0);
        self.push(value, Op::Abs(a.0), rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.iter().sum();
        let value = ArrayD::from_elem(ndarray::IxDyn(&[]), total);
        let rg = self.needs(a.0);
        self.push(value, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.view2(a.0);
        let bv = self.view2(b.0);
        assert_eq!(av.dim().1, bv.dim().0, "matmul inner dims differ");
        let value = av.dot(&bv).into_dyn();
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.view2(a.0).t().to_owned().into_dyn();
        let rg = self.needs(a.0);
        self.push(value, Op::Transpose(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.value(a).shape().to_vec();
        let value = self
            .nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(ndarray::IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.needs(a.0);
        self.push(value, Op::Reshape { input: a.0, orig }, rg)
    }

    /// Dense layer on a 1-d vector: `w (m,k) · x (k) + b (m)`.
    pub fn linear_vec(&mut self, w: Var, x: Var, b: Var) -> Var {
        let k = self.value(x).len();
        let m = self.value(b).len();
        let xc = self.reshape(x, &[k, 1]);
        let prod = self.matmul(w, xc);
        let flat = self.reshape(prod, &[m]);
        self.add(flat, b)
    }

    // ---- convolution ----

    /// Same-padding stride-1 convolution: input `(Ci,H,W)`, weight
    /// `(Co,Ci,kh,kw)` with odd `kh = kw`, bias `(Co)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.view3(input.0);
        let wshape = self.value(weight).shape().to_vec();
        let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(x.dim().0, ci, "conv2d channel mismatch");
        let pad = kh / 2;
        let (_, h, w) = x.dim();
        let col = im2col(&x, kh, kw, pad);
        let wmat = self
            .view2_from_weight(weight.0, co, ci * kh * kw);
        let mut out_mat = wmat.dot(&col);
        {
            let bv = self.nodes[bias.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for (mut row, bval) in out_mat.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row += *bval;
            }
        }
        let value = out_mat
            .into_shape_with_order((co, h, w))
            .unwrap()
            .into_dyn();
        let rg = self.needs(input.0) || self.needs(weight.0) || self.needs(bias.0);
        self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                pad,
            },
            rg,
        )
    }

    fn view2_from_weight(&self, i: usize, rows: usize, cols: usize) -> Array2<f64> {
        self.nodes[i]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .unwrap()
    }

    // ---- structure ----

    /// `(C·r², H, W)` to `(C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Var {
        let x = self.view3(input.0);
        let (cr2, h, w) = x.dim();
        assert_eq!(cr2 % (r * r), 0, "channels not divisible by r^2");
        let c = cr2 / (r * r);
        let mut out = Array3::zeros((c, h * r, w * r));
        for oc in 0..c {
            for di in 0..r {
                for dj in 0..r {
                    let ic = oc * r * r + di * r + dj;
                    for i in 0..h {
                        for j in 0..w {
                            out[[oc, i * r + di, j * r + dj]] = x[[ic, i, j]];
                        }
                    }
                }
            }
        }
        let rg = self.needs(input.0);
        self.push(
            out.into_dyn(),
            Op::PixelShuffle { input: input.0, r },
            rg,
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView3<f64>> = parts.iter().map(|p| self.view3(p.0)).collect();
        let value = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        let rg = parts.iter().any(|p| self.needs(p.0));
        self.push(value, Op::ConcatChannels(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.view2(p.0)).collect();
        let value = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        let rg = parts.iter().any(|p| self.needs(p.0));
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.view2(p.0)).collect();
        let value = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        let rg = parts.iter().any(|p| self.needs(p.0));
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    /// Broadcast a vector `(s)` to a constant-per-channel map `(s, h, w)`.
    pub fn broadcast_to_map(&mut self, v: Var, h: usize, w: usize) -> Var {
        let x = self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let s = x.len();
        let mut out = Array3::zeros((s, h, w));
        for (c, val) in x.iter().enumerate() {
            out.index_axis_mut(Axis(0), c).fill(*val);
        }
        let rg = self.needs(v.0);
        self.push(out.into_dyn(), Op::BroadcastToMap { input: v.0 }, rg)
    }

    // ---- normalization ----

    pub fn layer_norm_vec(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let g = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let b = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let value = layer_norm_1d(&xv.to_owned(), &g.to_owned(), &b.to_owned(), eps).into_dyn();
        let rg = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            value,
            Op::LayerNormVec {
                input: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            rg,
        )
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.view2(x.0).to_owned();
        let g = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let b = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let mut out = Array2::zeros(xv.dim());
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let normed = layer_norm_1d(&row.to_owned(), &g, &b, eps);
            out.row_mut(i).assign(&normed);
        }
        let rg = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            out.into_dyn(),
            Op::LayerNormRows {
                input: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.view2(x.0);
        let mut out = xv.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let total: f64 = row.iter().sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.needs(x.0);
        self.push(out.into_dyn(), Op::SoftmaxRows(x.0), rg)
    }

    /// `x / max(‖x‖₂, 1e-12)` for a 1-d vector.
    pub fn l2_normalize_vec(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let n = xv.dot(&xv).sqrt().max(1e-12);
        let value = xv.mapv(|v| v / n).into_dyn();
        let rg = self.needs(x.0);
        self.push(value, Op::L2NormalizeVec(x.0), rg)
    }

    pub fn take_row(&mut self, x: Var, row: usize) -> Var {
        let xv = self.view2(x.0);
        let value = xv.row(row).to_owned().into_dyn();
        let rg = self.needs(x.0);
        self.push(value, Op::TakeRow { input: x.0, row }, rg)
    }

    /// `(t,d)` matrix plus a `(d)` vector added to every row.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Var {
        let mv = self.view2(m.0);
        let vv = self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut out = mv.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            row += &vv;
        }
        let rg = self.needs(m.0) || self.needs(v.0);
        self.push(
            out.into_dyn(),
            Op::AddRowBroadcast {
                matrix: m.0,
                vector: v.0,
            },
            rg,
        )
    }

    /// Adaptive average pooling `(C,H,W)` to `(C,gh,gw)`; bin `i` covers
    /// source rows `[floor(i·H/gh), ceil((i+1)·H/gh))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, gh: usize, gw: usize) -> Var {
        let xv = self.view3(x.0);
        let (c, h, w) = xv.dim();
        let mut out = Array3::zeros((c, gh, gw));
        for ch in 0..c {
            for i in 0..gh {
                let (r0, r1) = pool_range(i, h, gh);
                for j in 0..gw {
                    let (c0, c1) = pool_range(j, w, gw);
                    let mut acc = 0.0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            acc += xv[[ch, y, xx]];
                        }
                    }
                    out[[ch, i, j]] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let rg = self.needs(x.0);
        self.push(
            out.into_dyn(),
            Op::AdaptiveAvgPool {
                input: x.0,
                gh,
                gw,
            },
            rg,
        )
    }

    /// Linear resize of `(C,H,W)` using fixed per-axis weight matrices
    /// `ky (oh,H)` and `kx (ow,W)`: `out[c] = ky · in[c] · kxᵀ`.
    pub fn resize_with(&mut self, x: Var, ky: Array2<f64>, kx: Array2<f64>) -> Var {
        let xv = self.view3(x.0);
        let (c, h, w) = xv.dim();
        assert_eq!(ky.dim().1, h);
        assert_eq!(kx.dim().1, w);
        let (oh, ow) = (ky.dim().0, kx.dim().0);
        let mut out = Array3::zeros((c, oh, ow));
        let kxt = kx.t();
        for ch in 0..c {
            let plane = xv.index_axis(Axis(0), ch);
            let resized = ky.dot(&plane).dot(&kxt);
            out.index_axis_mut(Axis(0), ch).assign(&resized);
        }
        let rg = self.needs(x.0);
        self.push(out.into_dyn(), Op::Resize { input: x.0, ky, kx }, rg)
    }

    /// Weighted channel sum `(C,H,W)` to `(1,H,W)` (e.g. luma extraction).
    pub fn channel_weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.view3(x.0);
        let (c, h, w) = xv.dim();
        assert_eq!(c, weights.len());
        let mut out = Array3::zeros((1, h, w));
        for (ch, wt) in weights.iter().enumerate() {
            let plane = xv.index_axis(Axis(0), ch);
            out.index_axis_mut(Axis(0), 0)
                .zip_mut_with(&plane, |o, v| *o += wt * v);
        }
        let rg = self.needs(x.0);
        self.push(
            out.into_dyn(),
            Op::ChannelWeightedSum {
                input: x.0,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Non-overlapping `p×p` patch extraction: `(C, nh·p, nw·p)` to
    /// `(nh·nw, C·p·p)` with patches in row-major order.
    pub fn extract_patches(&mut self, x: Var, p: usize) -> Var {
        let xv = self.view3(x.0);
        let (c, h, w) = xv.dim();
        assert_eq!(h % p, 0);
        assert_eq!(w % p, 0);
        let (nh, nw) = (h / p, w / p);
        let mut out = Array2::zeros((nh * nw, c * p * p));
        for i in 0..nh {
            for j in 0..nw {
                let row = i * nw + j;
                for ch in 0..c {
                    for u in 0..p {
                        for v in 0..p {
                            out[[row, (ch * p + u) * p + v]] = xv[[ch, i * p + u, j * p + v]];
                        }
                    }
                }
            }
        }
        let rg = self.needs(x.0);
        self.push(out.into_dyn(), Op::ExtractPatches { input: x.0, p }, rg)
    }

    // ---- composite helpers ----

    /// Mean absolute difference (L1).
    pub fn l1_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean(ad)
    }

    /// Sum of squared differences.
    pub fn squared_dist(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum(sq)
    }

    /// Mean of squared differences.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    // ---- backward ----

    /// Accumulate gradients of `root` (a scalar node) with respect to every
    /// grad-requiring node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.value(root).raw_dim(),
            1.0,
        ));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], idx: usize, delta: ArrayD<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * &self.nodes[*b].value);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.mapv(|v| v * c)),
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::QuickGelu(a) => {
                let x = &self.nodes[*a].value;
                let d = x.mapv(|v| {
                    let s = sigmoid(1.702 * v);
                    s + 1.702 * v * s * (1.0 - s)
                });
                self.accumulate(grads, *a, g * &d);
            }
            Op::Abs(a) => {
                let s = self.nodes[*a].value.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, g * &s);
            }
            Op::Sum(a) => {
                let gv = *g.iter().next().unwrap();
                let shape = self.nodes[*a].value.raw_dim();
                self.accumulate(grads, *a, ArrayD::from_elem(shape, gv));
            }
            Op::MatMul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    let bv = self.view2(*b);
                    self.accumulate(grads, *a, gv.dot(&bv.t()).into_dyn());
                }
                if self.needs(*b) {
                    let av = self.view2(*a);
                    self.accumulate(grads, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Transpose(a) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                self.accumulate(grads, *a, gv.t().to_owned().into_dyn());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => self.backprop_conv2d(*input, *weight, *bias, *pad, g, grads),
            Op::PixelShuffle { input, r } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, hr, wr) = gv.dim();
                let r = *r;
                let (h, w) = (hr / r, wr / r);
                let mut din = Array3::zeros((c * r * r, h, w));
                for oc in 0..c {
                    for di in 0..r {
                        for dj in 0..r {
                            let ic = oc * r * r + di * r + dj;
                            for y in 0..h {
                                for x in 0..w {
                                    din[[ic, y, x]] = gv[[oc, y * r + di, x * r + dj]];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, din.into_dyn());
            }
            Op::ConcatChannels(parts) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[0];
                    let slice = gv
                        .slice(ndarray::s![offset..offset + c, .., ..])
                        .to_owned();
                    self.accumulate(grads, p, slice.into_dyn());
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].value.shape()[0];
                    let slice = gv.slice(ndarray::s![offset..offset + r, ..]).to_owned();
                    self.accumulate(grads, p, slice.into_dyn());
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    let slice = gv.slice(ndarray::s![.., offset..offset + c]).to_owned();
                    self.accumulate(grads, p, slice.into_dyn());
                    offset += c;
                }
            }
            Op::BroadcastToMap { input } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let s = gv.dim().0;
                let mut dv = Array1::zeros(s);
                for c in 0..s {
                    dv[c] = gv.index_axis(Axis(0), c).sum();
                }
                self.accumulate(grads, *input, dv.into_dyn());
            }
            Op::LayerNormVec {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = self.nodes[*input]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let gam = self.nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let (dx, dgamma, dbeta) = layer_norm_1d_backward(&x, &gam, &gv, *eps);
                if self.needs(*input) {
                    self.accumulate(grads, *input, dx.into_dyn());
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, dgamma.into_dyn());
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::LayerNormRows {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = self.view2(*input).to_owned();
                let gam = self.nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::zeros(x.dim());
                let mut dgamma = Array1::zeros(gam.len());
                let mut dbeta = Array1::zeros(gam.len());
                for (r, row) in x.axis_iter(Axis(0)).enumerate() {
                    let grow = gv.row(r).to_owned();
                    let (dxr, dgr, dbr) =
                        layer_norm_1d_backward(&row.to_owned(), &gam, &grow, *eps);
                    dx.row_mut(r).assign(&dxr);
                    dgamma += &dgr;
                    dbeta += &dbr;
                }
                if self.needs(*input) {
                    self.accumulate(grads, *input, dx.into_dyn());
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, dgamma.into_dyn());
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.view2(i);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::zeros(y.raw_dim());
                for r in 0..y.dim().0 {
                    let yr = y.row(r);
                    let gr = gv.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.dim().1 {
                        dx[[r, c]] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, dx.into_dyn());
            }
            Op::L2NormalizeVec(a) => {
                let x = self.nodes[*a]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let n = x.dot(&x).sqrt().max(1e-12);
                let y = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let ydg: f64 = y.iter().zip(gv.iter()).map(|(a, b)| a * b).sum();
                let dx = ndarray::Zip::from(&gv)
                    .and(&y)
                    .map_collect(|gi, yi| (gi - yi * ydg) / n);
                self.accumulate(grads, *a, dx.into_dyn());
            }
            Op::TakeRow { input, row } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let mut dm = Array2::zeros((shape[0], shape[1]));
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                dm.row_mut(*row).assign(&gv);
                self.accumulate(grads, *input, dm.into_dyn());
            }
            Op::AddRowBroadcast { matrix, vector } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*matrix) {
                    self.accumulate(grads, *matrix, gv.to_owned().into_dyn());
                }
                if self.needs(*vector) {
                    self.accumulate(grads, *vector, gv.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Reshape { input, orig } => {
                let back = g
                    .clone()
                    .into_shape_with_order(ndarray::IxDyn(orig))
                    .unwrap();
                self.accumulate(grads, *input, back);
            }
            Op::AdaptiveAvgPool { input, gh, gw } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut din = Array3::zeros((c, h, w));
                for ch in 0..c {
                    for i2 in 0..*gh {
                        let (r0, r1) = pool_range(i2, h, *gh);
                        for j in 0..*gw {
                            let (c0, c1) = pool_range(j, w, *gw);
                            let share = gv[[ch, i2, j]] / ((r1 - r0) * (c1 - c0)) as f64;
                            for y in r0..r1 {
                                for x in c0..c1 {
                                    din[[ch, y, x]] += share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, din.into_dyn());
            }
            Op::Resize { input, ky, kx } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let c = gv.dim().0;
                let kyt = ky.t();
                let mut din = Array3::zeros((c, ky.dim().1, kx.dim().1));
                for ch in 0..c {
                    let plane = gv.index_axis(Axis(0), ch);
                    let back = kyt.dot(&plane).dot(kx);
                    din.index_axis_mut(Axis(0), ch).assign(&back);
                }
                self.accumulate(grads, *input, din.into_dyn());
            }
            Op::ChannelWeightedSum { input, weights } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (_, h, w) = gv.dim();
                let mut din = Array3::zeros((weights.len(), h, w));
                for (ch, wt) in weights.iter().enumerate() {
                    din.index_axis_mut(Axis(0), ch)
                        .zip_mut_with(&gv.index_axis(Axis(0), 0), |o, v| *o = wt * v);
                }
                self.accumulate(grads, *input, din.into_dyn());
            }
            Op::ExtractPatches { input, p } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let p = *p;
                let nw = w / p;
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut din = Array3::zeros((c, h, w));
                for i2 in 0..h / p {
                    for j in 0..nw {
                        let row = i2 * nw + j;
                        for ch in 0..c {
                            for u in 0..p {
                                for v in 0..p {
                                    din[[ch, i2 * p + u, j * p + v]] =
                                        gv[[row, (ch * p + u) * p + v]];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, din.into_dyn());
            }
        }
    }

    fn backprop_conv2d(
        &self,
        input: usize,
        weight: usize,
        bias: usize,
        pad: usize,
        g: &ArrayD<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) {
        let x = self.view3(input);
        let wshape = self.nodes[weight].value.shape().to_vec();
        let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let (_, h, w) = x.dim();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let g_mat = gv
            .to_owned()
            .into_shape_with_order((co, h * w))
            .unwrap();
        if self.needs(bias) {
            let db = g_mat.sum_axis(Axis(1));
            self.accumulate(grads, bias, db.into_dyn());
        }
        if self.needs(weight) {
            // recomputing im2col trades time for memory
            let col = im2col(&x, kh, kw, pad);
            let dw = g_mat.dot(&col.t());
            self.accumulate(
                grads,
                weight,
                dw.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn(),
            );
        }
        if self.needs(input) {
            let wmat = self.view2_from_weight(weight, co, ci * kh * kw);
            let dcol = wmat.t().dot(&g_mat);
            let din = col2im(&dcol, ci, h, w, kh, kw, pad);
            self.accumulate(grads, input, din.into_dyn());
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pool_range(i: usize, n: usize, g: usize) -> (usize, usize) {
    let start = (i * n) / g;
    let end = ((i + 1) * n).div_ceil(g);
    (start, end.max(start + 1).min(n))
}

fn layer_norm_1d(x: &Array1<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, eps: f64) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.mapv(|v| (v - mean).powi(2)).sum() / n;
    let sigma = (var + eps).sqrt();
    ndarray::Zip::from(x)
        .and(gamma)
        .and(beta)
        .map_collect(|&xv, &g, &b| g * (xv - mean) / sigma + b)
}

fn layer_norm_1d_backward(
    x: &Array1<f64>,
    gamma: &Array1<f64>,
    g: &Array1<f64>,
    eps: f64,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.mapv(|v| (v - mean).powi(2)).sum() / n;
    let sigma = (var + eps).sqrt();
    let xhat = x.mapv(|v| (v - mean) / sigma);
    let dxhat = ndarray::Zip::from(g).and(gamma).map_collect(|&gv, &gm| gv * gm);
    let mean_dxhat = dxhat.sum() / n;
    let mean_dxhat_xhat = ndarray::Zip::from(&dxhat)
        .and(&xhat)
        .fold(0.0, |acc, &a, &b| acc + a * b)
        / n;
    let dx = ndarray::Zip::from(&dxhat)
        .and(&xhat)
        .map_collect(|&d, &xh| (d - mean_dxhat - xh * mean_dxhat_xhat) / sigma);
    let dgamma = ndarray::Zip::from(g).and(&xhat).map_collect(|&gv, &xh| gv * xh);
    let dbeta = g.clone();
    (dx, dgamma, dbeta)
}

fn im2col(input: &ArrayView3<f64>, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (ci, h, w) = input.dim();
    let mut col = Array2::zeros((ci * kh * kw, h * w));
    for c in 0..ci {
        for u in 0..kh {
            for v in 0..kw {
                let row = (c * kh + u) * kw + v;
                for y in 0..h {
                    let sy = y as isize + u as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + v as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[[row, y * w + x]] = input[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array3<f64> {
    let mut din = Array3::zeros((ci, h, w));
    for c in 0..ci {
        for u in 0..kh {
            for v in 0..kw {
                let row = (c * kh + u) * kw + v;
                for y in 0..h {
                    let sy = y as isize + u as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + v as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        din[[c, sy as usize, sx as usize]] += dcol[[row, y * w + x]];
                    }
                }
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_grad, rand_arr};

    const TOL: f64 = 1e-6;

    /// Reduce an arbitrary-shaped node to a scalar with fixed random
    /// weights, so gradients are non-uniform across coordinates.
    fn weighted_scalar(t: &mut Tape, v: Var, seed: u64) -> Var {
        let shape = t.value(v).shape().to_vec();
        let w = t.constant(rand_arr(&shape, seed));
        let p = t.mul(v, w);
        t.sum(p)
    }

    /// Gradient-check a single-input graph builder at one leaf.
    fn check_unary<F>(shape: &[usize], seed: u64, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let x = rand_arr(shape, seed);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        let scal = weighted_scalar(&mut t, out, seed ^ 0xabcd);
        let grads = t.backward(scal);
        let analytic = grads.get_or_zeros(v, shape);
        check_grad(
            |xp| {
                let mut t2 = Tape::new();
                let v2 = t2.leaf(xp.clone());
                let o2 = build(&mut t2, v2);
                let s2 = weighted_scalar(&mut t2, o2, seed ^ 0xabcd);
                t2.scalar(s2)
            },
            &x,
            &analytic,
            TOL,
        );
    }

    /// Gradient-check one input of a two-input builder, holding the other
    /// fixed.
    fn check_binary<F>(sa: &[usize], sb: &[usize], seed: u64, build: F)
    where
        F: Fn(&mut Tape, Var, Var) -> Var,
    {
        let a0 = rand_arr(sa, seed);
        let b0 = rand_arr(sb, seed + 1);
        for which in 0..2 {
            let mut t = Tape::new();
            let a = t.leaf(a0.clone());
            let b = t.leaf(b0.clone());
            let out = build(&mut t, a, b);
            let scal = weighted_scalar(&mut t, out, seed ^ 0x1234);
            let grads = t.backward(scal);
            let (target, x, shape) = if which == 0 {
                (a, &a0, sa)
            } else {
                (b, &b0, sb)
            };
            let analytic = grads.get_or_zeros(target, shape);
            check_grad(
                |xp| {
                    let mut t2 = Tape::new();
                    let (a2, b2) = if which == 0 {
                        (t2.leaf(xp.clone()), t2.leaf(b0.clone()))
                    } else {
                        (t2.leaf(a0.clone()), t2.leaf(xp.clone()))
                    };
                    let o2 = build(&mut t2, a2, b2);
                    let s2 = weighted_scalar(&mut t2, o2, seed ^ 0x1234);
                    t2.scalar(s2)
                },
                x,
                &analytic,
                TOL,
            );
        }
    }

    #[test]
    fn grad_elementwise_binary() {
        check_binary(&[3, 4], &[3, 4], 10, |t, a, b| t.add(a, b));
        check_binary(&[3, 4], &[3, 4], 11, |t, a, b| t.sub(a, b));
        check_binary(&[3, 4], &[3, 4], 12, |t, a, b| t.mul(a, b));
    }

    #[test]
    fn grad_unary_activations() {
        check_unary(&[2, 5], 20, |t, v| t.relu(v));
        check_unary(&[2, 5], 21, |t, v| t.tanh(v));
        check_unary(&[2, 5], 22, |t, v| t.quick_gelu(v));
        check_unary(&[2, 5], 23, |t, v| t.abs(v));
        check_unary(&[2, 5], 24, |t, v| t.scale(v, -2.5));
    }

    #[test]
    fn grad_reductions() {
        check_unary(&[7], 30, |t, v| t.sum(v));
        check_unary(&[7], 31, |t, v| t.mean(v));
    }

    #[test]
    fn grad_matmul_and_transpose() {
        check_binary(&[3, 4], &[4, 2], 40, |t, a, b| t.matmul(a, b));
        check_unary(&[3, 5], 41, |t, v| t.transpose(v));
        check_unary(&[2, 6], 42, |t, v| t.reshape(v, &[3, 4]));
    }

    #[test]
    fn grad_linear_vec() {
        let w0 = rand_arr(&[3, 5], 50);
        check_binary(&[5], &[3], 51, move |t, x, b| {
            let w = t.constant(w0.clone());
            t.linear_vec(w, x, b)
        });
        let b0 = rand_arr(&[3], 52);
        check_binary(&[3, 5], &[5], 53, move |t, w, x| {
            let b = t.constant(b0.clone());
            t.linear_vec(w, x, b)
        });
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let x0 = rand_arr(&[2, 4, 5], 60);
        let w0 = rand_arr(&[3, 2, 3, 3], 61);
        let b0 = rand_arr(&[3], 62);
        // input and weight
        check_binary(&[2, 4, 5], &[3, 2, 3, 3], 63, {
            let b0 = b0.clone();
            move |t, x, w| {
                let b = t.constant(b0.clone());
                t.conv2d(x, w, b)
            }
        });
        // bias
        check_unary(&[3], 64, {
            let x0 = x0.clone();
            let w0 = w0.clone();
            move |t, b| {
                let x = t.constant(x0.clone());
                let w = t.constant(w0.clone());
                t.conv2d(x, w, b)
            }
        });
    }

    #[test]
    fn grad_conv2d_1x1() {
        check_binary(&[2, 3, 3], &[4, 2, 1, 1], 65, |t, x, w| {
            let b = t.constant(ArrayD::zeros(ndarray::IxDyn(&[4])));
            t.conv2d(x, w, b)
        });
    }

    #[test]
    fn conv2d_forward_matches_direct_sum() {
        // direct dense convolution restated from the definition
        let x = rand_arr(&[2, 5, 6], 66);
        let w = rand_arr(&[3, 2, 3, 3], 67);
        let b = rand_arr(&[3], 68);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let bv = t.leaf(b.clone());
        let out = t.conv2d(xv, wv, bv);
        let got = t.value(out).clone();
        for o in 0..3 {
            for y in 0..5usize {
                for xx in 0..6usize {
                    let mut acc = b[[o]];
                    for c in 0..2 {
                        for u in 0..3usize {
                            for v in 0..3usize {
                                let sy = y as isize + u as isize - 1;
                                let sx = xx as isize + v as isize - 1;
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 6 {
                                    continue;
                                }
                                acc += w[[o, c, u, v]]
                                    * x[[c, sy as usize, sx as usize]];
                            }
                        }
                    }
                    let diff = (got[[o, y, xx]] - acc).abs();
                    assert!(diff < 1e-10, "conv mismatch at ({o},{y},{xx}): {diff}");
                }
            }
        }
    }

    #[test]
    fn grad_pixel_shuffle() {
        check_unary(&[8, 3, 4], 70, |t, v| t.pixel_shuffle(v, 2));
    }

    #[test]
    fn pixel_shuffle_forward_layout() {
        // 4 channels, r=2: channel (di*2+dj) lands at offset (di, dj)
        let mut x = Array3::zeros((4, 1, 1));
        for c in 0..4 {
            x[[c, 0, 0]] = c as f64;
        }
        let mut t = Tape::new();
        let v = t.leaf(x.into_dyn());
        let out = t.pixel_shuffle(v, 2);
        let o = t.value(out);
        assert_eq!(o.shape(), &[1, 2, 2]);
        assert_eq!(o[[0, 0, 0]], 0.0);
        assert_eq!(o[[0, 0, 1]], 1.0);
        assert_eq!(o[[0, 1, 0]], 2.0);
        assert_eq!(o[[0, 1, 1]], 3.0);
    }

    #[test]
    fn grad_concats() {
        check_binary(&[2, 3, 4], &[3, 3, 4], 80, |t, a, b| {
            t.concat_channels(&[a, b])
        });
        check_binary(&[2, 4], &[3, 4], 81, |t, a, b| t.concat_rows(&[a, b]));
        check_binary(&[3, 2], &[3, 5], 82, |t, a, b| t.concat_cols(&[a, b]));
    }

    #[test]
    fn grad_broadcast_to_map() {
        check_unary(&[3], 90, |t, v| t.broadcast_to_map(v, 4, 5));
    }

    #[test]
    fn grad_layer_norm_vec() {
        let g0 = rand_arr(&[6], 100);
        let be0 = rand_arr(&[6], 101);
        check_unary(&[6], 102, {
            let g0 = g0.clone();
            let be0 = be0.clone();
            move |t, x| {
                let g = t.constant(g0.clone());
                let b = t.constant(be0.clone());
                t.layer_norm_vec(x, g, b, 1e-5)
            }
        });
        // gamma and beta as leaves
        let x0 = rand_arr(&[6], 103);
        check_binary(&[6], &[6], 104, {
            let x0 = x0.clone();
            move |t, g, b| {
                let x = t.constant(x0.clone());
                t.layer_norm_vec(x, g, b, 1e-5)
            }
        });
    }

    #[test]
    fn grad_layer_norm_rows() {
        let g0 = rand_arr(&[5], 110);
        let be0 = rand_arr(&[5], 111);
        check_unary(&[3, 5], 112, move |t, x| {
            let g = t.constant(g0.clone());
            let b = t.constant(be0.clone());
            t.layer_norm_rows(x, g, b, 1e-5)
        });
    }

    #[test]
    fn grad_softmax_rows() {
        check_unary(&[3, 6], 120, |t, v| t.softmax_rows(v));
        let mut t = Tape::new();
        let v = t.leaf(rand_arr(&[4, 7], 121));
        let s = t.softmax_rows(v);
        let sv = t.value(s).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        for row in sv.axis_iter(Axis(0)) {
            let total: f64 = row.sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn grad_l2_normalize() {
        check_unary(&[8], 130, |t, v| t.l2_normalize_vec(v));
        let mut t = Tape::new();
        let v = t.leaf(rand_arr(&[8], 131));
        let n = t.l2_normalize_vec(v);
        let nv = t.value(n);
        let norm: f64 = nv.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_take_row_and_row_broadcast() {
        check_unary(&[4, 5], 140, |t, v| t.take_row(v, 2));
        check_binary(&[3, 4], &[4], 141, |t, m, v| t.add_row_broadcast(m, v));
    }

    #[test]
    fn grad_adaptive_avg_pool() {
        check_unary(&[2, 7, 5], 150, |t, v| t.adaptive_avg_pool(v, 3, 2));
        // exact forward for an evenly divisible case
        let mut x = Array3::zeros((1, 2, 2));
        x[[0, 0, 0]] = 1.0;
        x[[0, 0, 1]] = 3.0;
        x[[0, 1, 0]] = 5.0;
        x[[0, 1, 1]] = 7.0;
        let mut t = Tape::new();
        let v = t.leaf(x.into_dyn());
        let p = t.adaptive_avg_pool(v, 1, 1);
        assert!((t.value(p)[[0, 0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn grad_resize_with() {
        let ky = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).sin());
        let kx = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 6 + j) as f64 * 0.3).cos());
        check_unary(&[2, 5, 6], 160, move |t, v| {
            t.resize_with(v, ky.clone(), kx.clone())
        });
    }

    #[test]
    fn resize_with_matches_resample() {
        // the tape resize with resample weights must reproduce resize_raw
        let img = crate::testutil::gradient_image(12, 10, 0.3);
        let (h, w) = (12, 10);
        let (oh, ow) = (6, 5);
        let ky = crate::resample::resample_matrix(h, oh);
        let kx = crate::resample::resample_matrix(w, ow);
        let chw = crate::image::hwc_to_chw(&img.pixels);
        let mut t = Tape::new();
        let v = t.leaf(chw.into_dyn());
        let out = t.resize_with(v, ky, kx);
        let got = t.value(out).clone().into_dimensionality::<Ix3>().unwrap();
        let expect = crate::resample::resize_raw(&img, oh, ow);
        let expect_chw = crate::image::hwc_to_chw(&expect.pixels);
        let diff = got
            .iter()
            .zip(expect_chw.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "tape resize deviates from resample: {diff}");
    }

    #[test]
    fn grad_channel_weighted_sum() {
        check_unary(&[3, 4, 5], 170, |t, v| {
            t.channel_weighted_sum(v, &[0.299, 0.587, 0.114])
        });
    }

    #[test]
    fn grad_extract_patches() {
        check_unary(&[2, 4, 6], 180, |t, v| t.extract_patches(v, 2));
        // forward layout: patch rows are row-major over the patch grid
        let mut x = Array3::zeros((1, 2, 4));
        for j in 0..4 {
            x[[0, 0, j]] = j as f64;
            x[[0, 1, j]] = 10.0 + j as f64;
        }
        let mut t = Tape::new();
        let v = t.leaf(x.into_dyn());
        let p = t.extract_patches(v, 2);
        let pv = t.value(p);
        assert_eq!(pv.shape(), &[2, 4]);
        assert_eq!(pv[[0, 0]], 0.0);
        assert_eq!(pv[[0, 1]], 1.0);
        assert_eq!(pv[[0, 2]], 10.0);
        assert_eq!(pv[[0, 3]], 11.0);
        assert_eq!(pv[[1, 0]], 2.0);
    }

    #[test]
    fn grad_composites() {
        check_binary(&[3, 4], &[3, 4], 190, |t, a, b| t.l1_diff(a, b));
        check_binary(&[6], &[6], 191, |t, a, b| t.squared_dist(a, b));
        check_binary(&[2, 3], &[2, 3], 192, |t, a, b| t.mean_squared_diff(a, b));
    }

    #[test]
    fn constants_receive_no_gradient_but_pass_it_through() {
        let mut t = Tape::new();
        let c = t.constant(rand_arr(&[4], 200));
        let x = t.leaf(rand_arr(&[4], 201));
        let p = t.mul(c, x);
        let s = t.sum(p);
        let grads = t.backward(s);
        assert!(grads.get(c).is_none());
        let gx = grads.get(x).unwrap();
        // d(sum(c*x))/dx = c
        for (a, b) in gx.iter().zip(t.value(c).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = x*x + x => dy/dx = 2x + 1
        let x0 = rand_arr(&[5], 210);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let s = t.sum(y);
        let grads = t.backward(s);
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.iter().zip(x0.iter()) {
            assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
        }
    }
}
