//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Forward methods record one node per operation. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into tracked leaves.
//! Gradients of repeated `backward` calls accumulate until
//! [`Graph::zero_grad`].

use crate::error::{Error, Result};

use super::{matmul_raw, Elem, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<E: Elem> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, E),
    AddConst(usize),
    Ln(usize),
    Exp(usize),
    Sqrt(usize),
    Silu(usize),
    Prelu { x: usize, slope: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRow { x: usize, bias: usize },
    AddChannelBias { x: usize, bias: usize },
    SoftmaxRows(usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    MinAxis1 { x: usize, argmin: Vec<u32> },
    MaxAxis0 { x: usize, argmax: Vec<u32> },
    PairSqDist { a: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Upsample2x(usize),
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, mean: Vec<E>, inv_std: Vec<E> },
    Pad2d { x: usize, pad: usize },
    Crop2d { x: usize, crop: usize },
    ConcatC(usize, usize),
    SliceC { x: usize, start: usize },
    Detach(#[allow(dead_code)] usize),
}

struct Node<E: Elem> {
    value: Tensor<E>,
    op: Op<E>,
    tracked: bool,
    grad: Option<Vec<E>>,
}

/// Recorded forward pass over tensors of element type `E`.
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn transpose_raw<E: Elem>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid<E: Elem>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Tracked leaves receive gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert an untracked constant.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf, if `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes[id].tracked
    }

    fn val(&self, id: usize) -> &Tensor<E> {
        &self.nodes[id].value
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str, f: impl Fn(E, E) -> E, op: Op<E>) -> Var {
        assert_eq!(
            self.val(a.0).shape(),
            self.val(b.0).shape(),
            "{name}: operand shapes differ: {:?} vs {:?}",
            self.val(a.0).shape(),
            self.val(b.0).shape()
        );
        let data: Vec<E> =
            self.val(a.0).data().iter().zip(self.val(b.0).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.val(a.0).shape().to_vec();
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        self.push(Tensor::new(shape, data), op, tracked)
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let data: Vec<E> = self.val(x.0).data().iter().map(|&v| f(v)).collect();
        let shape = self.val(x.0).shape().to_vec();
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(shape, data), op, tracked)
    }

    // ── Elementwise ────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_const(&mut self, x: Var, c: E) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x.0))
    }

    /// Parametric ReLU with a single learned slope (shape `[1]`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        assert_eq!(self.val(slope.0).numel(), 1, "prelu: slope must be a single element");
        let a = self.val(slope.0).data()[0];
        let data: Vec<E> =
            self.val(x.0).data().iter().map(|&v| if v > E::zero() { v } else { a * v }).collect();
        let shape = self.val(x.0).shape().to_vec();
        let tracked = self.tracked(x.0) || self.tracked(slope.0);
        self.push(Tensor::new(shape, data), Op::Prelu { x: x.0, slope: slope.0 }, tracked)
    }

    // ── Linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul: operands must be 2D, got {sa:?} x {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul: inner extents differ: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.val(a.0).data(), self.val(b.0).data(), m, k, n);
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        self.push(Tensor::new(vec![m, n], data), Op::MatMul { a: a.0, b: b.0, m, k, n }, tracked)
    }

    /// Broadcast-add a length-`n` bias row to every row of an `(m, n)` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (sx, sb) = (self.val(x.0).shape(), self.val(bias.0).shape());
        assert!(sx.len() == 2 && sb == [sx[1]], "add_row: {sx:?} + {sb:?}");
        let (m, n) = (sx[0], sx[1]);
        let mut data = self.val(x.0).data().to_vec();
        let b = self.val(bias.0).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + b[j];
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(bias.0);
        self.push(Tensor::new(vec![m, n], data), Op::AddRow { x: x.0, bias: bias.0 }, tracked)
    }

    /// Broadcast-add a length-`c` bias to every spatial position of `(c, h, w)`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (sx, sb) = (self.val(x.0).shape(), self.val(bias.0).shape());
        assert!(sx.len() == 3 && sb == [sx[0]], "add_channel_bias: {sx:?} + {sb:?}");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut data = self.val(x.0).data().to_vec();
        let b = self.val(bias.0).data();
        for ch in 0..c {
            for i in 0..h * w {
                data[ch * h * w + i] = data[ch * h * w + i] + b[ch];
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(bias.0);
        self.push(Tensor::new(vec![c, h, w], data), Op::AddChannelBias { x: x.0, bias: bias.0 }, tracked)
    }

    /// Row-wise softmax of a 2D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 2, "softmax_rows: input must be 2D, got {sx:?}");
        let (m, n) = (sx[0], sx[1]);
        let xd = self.val(x.0).data();
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum = sum + e;
            }
            for j in 0..n {
                data[i * n + j] = data[i * n + j] / sum;
            }
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![m, n], data), Op::SoftmaxRows(x.0), tracked)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 2, "transpose: input must be 2D, got {sx:?}");
        let (m, n) = (sx[0], sx[1]);
        let data = transpose_raw(self.val(x.0).data(), m, n);
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(x.0), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.val(x.0).numel(), "reshape: {:?} -> {shape:?}", self.val(x.0).shape());
        let data = self.val(x.0).data().to_vec();
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(shape, data), Op::Reshape(x.0), tracked)
    }

    // ── Reductions ─────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::zero();
        for &v in self.val(x.0).data() {
            s = s + v;
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), tracked)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x.0).numel();
        let mut s = E::zero();
        for &v in self.val(x.0).data() {
            s = s + v;
        }
        let mean = s / E::of_f64(n as f64);
        let tracked = self.tracked(x.0);
        self.push(Tensor::scalar(mean), Op::MeanAll(x.0), tracked)
    }

    /// Per-row minimum of an `(m, n)` tensor, `-> (m)`.
    pub fn min_axis1(&mut self, x: Var) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 2, "min_axis1: input must be 2D, got {sx:?}");
        let (m, n) = (sx[0], sx[1]);
        assert!(n > 0, "min_axis1: empty rows");
        let xd = self.val(x.0).data();
        let mut data = vec![E::zero(); m];
        let mut argmin = vec![0u32; m];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let (mut best, mut best_j) = (row[0], 0usize);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < best {
                    best = v;
                    best_j = j;
                }
            }
            data[i] = best;
            argmin[i] = best_j as u32;
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![m], data), Op::MinAxis1 { x: x.0, argmin }, tracked)
    }

    /// Per-column maximum of an `(n, c)` tensor, `-> (c)`.
    ///
    /// This is the global max pool over the point axis: the output is
    /// exactly invariant under any permutation of the rows.
    pub fn max_axis0(&mut self, x: Var) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 2, "max_axis0: input must be 2D, got {sx:?}");
        let (n, c) = (sx[0], sx[1]);
        assert!(n > 0, "max_axis0: no rows to pool");
        let xd = self.val(x.0).data();
        let mut data = vec![E::zero(); c];
        let mut argmax = vec![0u32; c];
        for j in 0..c {
            let (mut best, mut best_i) = (xd[j], 0usize);
            for i in 1..n {
                let v = xd[i * c + j];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data[j] = best;
            argmax[j] = best_i as u32;
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![c], data), Op::MaxAxis0 { x: x.0, argmax }, tracked)
    }

    /// All-pairs squared Euclidean distances between `(n, d)` and `(m, d)`.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "pairwise_sqdist: {sa:?} vs {sb:?}");
        let (n, d, m) = (sa[0], sa[1], sb[0]);
        let (ad, bd) = (self.val(a.0).data(), self.val(b.0).data());
        let mut data = vec![E::zero(); n * m];
        for i in 0..n {
            let pa = &ad[i * d..(i + 1) * d];
            for j in 0..m {
                let pb = &bd[j * d..(j + 1) * d];
                let mut s = E::zero();
                for k in 0..d {
                    let diff = pa[k] - pb[k];
                    s = s + diff * diff;
                }
                data[i * m + j] = s;
            }
        }
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        self.push(Tensor::new(vec![n, m], data), Op::PairSqDist { a: a.0, b: b.0 }, tracked)
    }

    // ── Spatial (channels-first (c, h, w)) ─────────────────────────

    /// 2D convolution with square kernel, zero padding and stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw, sb) = (self.val(x.0).shape(), self.val(w.0).shape(), self.val(b.0).shape());
        assert_eq!(sx.len(), 3, "conv2d: input must be (c,h,w), got {sx:?}");
        assert_eq!(sw.len(), 4, "conv2d: weight must be (co,ci,kh,kw), got {sw:?}");
        assert_eq!(sw[1], sx[0], "conv2d: in-channel mismatch: x {sx:?}, w {sw:?}");
        assert_eq!(sb, [sw[0]], "conv2d: bias {sb:?} vs out channels {}", sw[0]);
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xd = self.val(x.0).data();
        let wdat = self.val(w.0).data();
        let bd = self.val(b.0).data();
        let mut out = vec![E::zero(); co * ho * wo];
        for oc in 0..co {
            let w_oc = &wdat[oc * ci * kh * kw..(oc + 1) * ci * kh * kw];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bd[oc];
                    for ic in 0..ci {
                        let x_ic = &xd[ic * h * wd..(ic + 1) * h * wd];
                        let w_ic = &w_oc[ic * kh * kw..(ic + 1) * kh * kw];
                        for di in 0..kh {
                            let xi = (oi * stride + di) as isize - pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let row = &x_ic[xi as usize * wd..(xi as usize + 1) * wd];
                            for dj in 0..kw {
                                let xj = (oj * stride + dj) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                acc = acc + row[xj as usize] * w_ic[di * kw + dj];
                            }
                        }
                    }
                    out[oc * ho * wo + oi * wo + oj] = acc;
                }
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(w.0) || self.tracked(b.0);
        self.push(
            Tensor::new(vec![co, ho, wo], out),
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
            tracked,
        )
    }

    /// Nearest-neighbor 2x upsample of `(c, h, w)`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 3, "upsample2x: input must be (c,h,w), got {sx:?}");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xd = self.val(x.0).data();
        let mut out = vec![E::zero(); c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ch * ho * wo + i * wo + j] = xd[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![c, ho, wo], out), Op::Upsample2x(x.0), tracked)
    }

    /// Group normalization over `(c, h, w)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (sx, sg, sb) = (self.val(x.0).shape(), self.val(gamma.0).shape(), self.val(beta.0).shape());
        assert_eq!(sx.len(), 3, "group_norm: input must be (c,h,w), got {sx:?}");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups do not divide {c} channels");
        assert!(sg == [c] && sb == [c], "group_norm: affine shapes {sg:?}/{sb:?} vs {c} channels");
        let cg = c / groups;
        let group_size = cg * h * w;
        let xd = self.val(x.0).data();
        let gd = self.val(gamma.0).data();
        let bd = self.val(beta.0).data();
        let mut out = vec![E::zero(); c * h * w];
        let mut means = vec![E::zero(); groups];
        let mut inv_stds = vec![E::zero(); groups];
        let eps = E::of_f64(eps);
        for g in 0..groups {
            let seg = &xd[g * group_size..(g + 1) * group_size];
            let mut sum = E::zero();
            for &v in seg {
                sum = sum + v;
            }
            let mean = sum / E::of_f64(group_size as f64);
            let mut var = E::zero();
            for &v in seg {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / E::of_f64(group_size as f64);
            let inv_std = E::one() / (var + eps).sqrt();
            means[g] = mean;
            inv_stds[g] = inv_std;
            for (i, &v) in seg.iter().enumerate() {
                let flat = g * group_size + i;
                let ch = flat / (h * w);
                out[flat] = (v - mean) * inv_std * gd[ch] + bd[ch];
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(gamma.0) || self.tracked(beta.0);
        self.push(
            Tensor::new(vec![c, h, w], out),
            Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, groups, mean: means, inv_std: inv_stds },
            tracked,
        )
    }

    /// Zero-pad `(c, h, w)` by `pad` on every spatial side.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 3, "pad2d: input must be (c,h,w), got {sx:?}");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let xd = self.val(x.0).data();
        let mut out = vec![E::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[ch * ho * wo + (i + pad) * wo + (j + pad)] = xd[ch * h * w + i * w + j];
                }
            }
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![c, ho, wo], out), Op::Pad2d { x: x.0, pad }, tracked)
    }

    /// Remove `crop` rows/columns from every spatial side of `(c, h, w)`.
    pub fn crop2d(&mut self, x: Var, crop: usize) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 3, "crop2d: input must be (c,h,w), got {sx:?}");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        assert!(h > 2 * crop && w > 2 * crop, "crop2d: crop {crop} exceeds extent ({h},{w})");
        let (ho, wo) = (h - 2 * crop, w - 2 * crop);
        let xd = self.val(x.0).data();
        let mut out = vec![E::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ch * ho * wo + i * wo + j] = xd[ch * h * w + (i + crop) * w + (j + crop)];
                }
            }
        }
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![c, ho, wo], out), Op::Crop2d { x: x.0, crop }, tracked)
    }

    /// Concatenate two `(c, h, w)` tensors along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[1..] == sb[1..],
            "concat_c: spatial extents differ: {sa:?} vs {sb:?}"
        );
        let (ca, cb, h, w) = (sa[0], sb[0], sa[1], sa[2]);
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.val(a.0).data());
        data.extend_from_slice(self.val(b.0).data());
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        self.push(Tensor::new(vec![ca + cb, h, w], data), Op::ConcatC(a.0, b.0), tracked)
    }

    /// Take `count` channels of `(c, h, w)` starting at `start`.
    pub fn slice_c(&mut self, x: Var, start: usize, count: usize) -> Var {
        let sx = self.val(x.0).shape();
        assert_eq!(sx.len(), 3, "slice_c: input must be (c,h,w), got {sx:?}");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        assert!(start + count <= c, "slice_c: channels {start}..{} out of {c}", start + count);
        let data = self.val(x.0).data()[start * h * w..(start + count) * h * w].to_vec();
        let tracked = self.tracked(x.0);
        self.push(Tensor::new(vec![count, h, w], data), Op::SliceC { x: x.0, start }, tracked)
    }

    /// Copy a value out of the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.val(x.0).clone();
        self.push(value, Op::Detach(x.0), false)
    }

    // ── Backward ───────────────────────────────────────────────────

    /// Accumulate `∂loss/∂leaf` into every tracked leaf.
    ///
    /// `loss` must be scalar. Intermediate gradients are local to the call;
    /// leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let two = E::of_f64(2.0);
        let add_to = |grads: &mut [Option<Vec<E>>], id: usize, numel: usize, f: &mut dyn FnMut(&mut [E])| {
            let slot = grads[id].get_or_insert_with(|| vec![E::zero(); numel]);
            f(slot);
        };
        macro_rules! accum {
            ($id:expr, $f:expr) => {
                if self.nodes[$id].tracked {
                    let numel = self.nodes[$id].value.numel();
                    #[allow(clippy::redundant_closure_call)]
                    add_to(grads, $id, numel, &mut $f);
                }
            };
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Detach(_) => {}
            Op::Add(a, b) => {
                accum!(*a, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
                accum!(*b, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
            }
            Op::Sub(a, b) => {
                accum!(*a, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
                accum!(*b, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d - gv });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                accum!(*a, |dst: &mut [E]| for k in 0..dst.len() { dst[k] = dst[k] + g[k] * bd[k] });
                accum!(*b, |dst: &mut [E]| for k in 0..dst.len() { dst[k] = dst[k] + g[k] * ad[k] });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                accum!(*a, |dst: &mut [E]| for k in 0..dst.len() { dst[k] = dst[k] + g[k] / bd[k] });
                accum!(*b, |dst: &mut [E]| for k in 0..dst.len() {
                    dst[k] = dst[k] - g[k] * ad[k] / (bd[k] * bd[k])
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                accum!(*x, |dst: &mut [E]| for k in 0..dst.len() { dst[k] = dst[k] + g[k] * c });
            }
            Op::AddConst(x) => {
                accum!(*x, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
            }
            Op::Ln(x) => {
                let xd = self.val(*x).data();
                accum!(*x, |dst: &mut [E]| for k in 0..dst.len() { dst[k] = dst[k] + g[k] / xd[k] });
            }
            Op::Exp(x) => {
                let out = self.nodes[i].value.data();
                accum!(*x, |dst: &mut [E]| for k in 0..dst.len() { dst[k] = dst[k] + g[k] * out[k] });
            }
            Op::Sqrt(x) => {
                let out = self.nodes[i].value.data();
                accum!(*x, |dst: &mut [E]| for k in 0..dst.len() {
                    dst[k] = dst[k] + g[k] / (two * out[k])
                });
            }
            Op::Silu(x) => {
                let xd = self.val(*x).data();
                accum!(*x, |dst: &mut [E]| for k in 0..dst.len() {
                    let s = sigmoid(xd[k]);
                    dst[k] = dst[k] + g[k] * (s + xd[k] * s * (E::one() - s));
                });
            }
            Op::Prelu { x, slope } => {
                let xd = self.val(*x).data();
                let a = self.val(*slope).data()[0];
                accum!(*x, |dst: &mut [E]| for k in 0..dst.len() {
                    dst[k] = dst[k] + g[k] * if xd[k] > E::zero() { E::one() } else { a };
                });
                accum!(*slope, |dst: &mut [E]| {
                    let mut s = E::zero();
                    for k in 0..xd.len() {
                        if xd[k] <= E::zero() {
                            s = s + g[k] * xd[k];
                        }
                    }
                    dst[0] = dst[0] + s;
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, kk, n) = (*m, *k, *n);
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                accum!(*a, |dst: &mut [E]| {
                    let bt = transpose_raw(bd, kk, n);
                    let da = matmul_raw(g, &bt, m, n, kk);
                    for (d, v) in dst.iter_mut().zip(da) {
                        *d = *d + v;
                    }
                });
                accum!(*b, |dst: &mut [E]| {
                    let at = transpose_raw(ad, m, kk);
                    let db = matmul_raw(&at, g, kk, m, n);
                    for (d, v) in dst.iter_mut().zip(db) {
                        *d = *d + v;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                let [m, n] = self.val(*x).shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                accum!(*x, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
                accum!(*bias, |dst: &mut [E]| for i in 0..m {
                    for j in 0..n {
                        dst[j] = dst[j] + g[i * n + j];
                    }
                });
            }
            Op::AddChannelBias { x, bias } => {
                let [c, h, w] = self.val(*x).shape() else { unreachable!() };
                let (c, hw) = (*c, h * w);
                accum!(*x, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
                accum!(*bias, |dst: &mut [E]| for ch in 0..c {
                    for p in 0..hw {
                        dst[ch] = dst[ch] + g[ch * hw + p];
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let out = self.nodes[i].value.data();
                let [m, n] = self.nodes[i].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                accum!(*x, |dst: &mut [E]| for r in 0..m {
                    let s = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = E::zero();
                    for j in 0..n {
                        dot = dot + gr[j] * s[j];
                    }
                    for j in 0..n {
                        dst[r * n + j] = dst[r * n + j] + s[j] * (gr[j] - dot);
                    }
                });
            }
            Op::Transpose(x) => {
                let [n, m] = self.nodes[i].value.shape() else { unreachable!() };
                let (n, m) = (*n, *m);
                accum!(*x, |dst: &mut [E]| {
                    let gt = transpose_raw(g, n, m);
                    for (d, v) in dst.iter_mut().zip(gt) {
                        *d = *d + v;
                    }
                });
            }
            Op::Reshape(x) => {
                accum!(*x, |dst: &mut [E]| for (d, &gv) in dst.iter_mut().zip(g) { *d = *d + gv });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                accum!(*x, |dst: &mut [E]| for d in dst.iter_mut() { *d = *d + gv });
            }
            Op::MeanAll(x) => {
                let numel = self.val(*x).numel();
                let gv = g[0] / E::of_f64(numel as f64);
                accum!(*x, |dst: &mut [E]| for d in dst.iter_mut() { *d = *d + gv });
            }
            Op::MinAxis1 { x, argmin } => {
                let [_, n] = self.val(*x).shape() else { unreachable!() };
                let n = *n;
                accum!(*x, |dst: &mut [E]| for (i_row, &j) in argmin.iter().enumerate() {
                    dst[i_row * n + j as usize] = dst[i_row * n + j as usize] + g[i_row];
                });
            }
            Op::MaxAxis0 { x, argmax } => {
                let [_, c] = self.val(*x).shape() else { unreachable!() };
                let c = *c;
                accum!(*x, |dst: &mut [E]| for (j, &i_row) in argmax.iter().enumerate() {
                    dst[i_row as usize * c + j] = dst[i_row as usize * c + j] + g[j];
                });
            }
            Op::PairSqDist { a, b } => {
                let [n, d] = self.val(*a).shape() else { unreachable!() };
                let [m, _] = self.val(*b).shape() else { unreachable!() };
                let (n, d, m) = (*n, *d, *m);
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                accum!(*a, |dst: &mut [E]| for i_p in 0..n {
                    for j_p in 0..m {
                        let gv = g[i_p * m + j_p];
                        if gv == E::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let diff = ad[i_p * d + k] - bd[j_p * d + k];
                            dst[i_p * d + k] = dst[i_p * d + k] + two * gv * diff;
                        }
                    }
                });
                accum!(*b, |dst: &mut [E]| for i_p in 0..n {
                    for j_p in 0..m {
                        let gv = g[i_p * m + j_p];
                        if gv == E::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let diff = ad[i_p * d + k] - bd[j_p * d + k];
                            dst[j_p * d + k] = dst[j_p * d + k] - two * gv * diff;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let [ci, h, wd] = self.val(*x).shape() else { unreachable!() };
                let [co, _, kh, kw] = self.val(*w).shape() else { unreachable!() };
                let [_, ho, wo] = self.nodes[i].value.shape() else { unreachable!() };
                let (ci, h, wd, co, kh, kw, ho, wo) = (*ci, *h, *wd, *co, *kh, *kw, *ho, *wo);
                let (stride, pad) = (*stride, *pad);
                let xd = self.val(*x).data();
                let wdat = self.val(*w).data();
                accum!(*b, |dst: &mut [E]| for oc in 0..co {
                    let mut s = E::zero();
                    for p in 0..ho * wo {
                        s = s + g[oc * ho * wo + p];
                    }
                    dst[oc] = dst[oc] + s;
                });
                accum!(*w, |dst: &mut [E]| for oc in 0..co {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let gv = g[oc * ho * wo + oi * wo + oj];
                            if gv == E::zero() {
                                continue;
                            }
                            for ic in 0..ci {
                                for di in 0..kh {
                                    let xi = (oi * stride + di) as isize - pad as isize;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..kw {
                                        let xj = (oj * stride + dj) as isize - pad as isize;
                                        if xj < 0 || xj >= wd as isize {
                                            continue;
                                        }
                                        let widx = ((oc * ci + ic) * kh + di) * kw + dj;
                                        dst[widx] = dst[widx]
                                            + gv * xd[ic * h * wd + xi as usize * wd + xj as usize];
                                    }
                                }
                            }
                        }
                    }
                });
                accum!(*x, |dst: &mut [E]| for oc in 0..co {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let gv = g[oc * ho * wo + oi * wo + oj];
                            if gv == E::zero() {
                                continue;
                            }
                            for ic in 0..ci {
                                for di in 0..kh {
                                    let xi = (oi * stride + di) as isize - pad as isize;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..kw {
                                        let xj = (oj * stride + dj) as isize - pad as isize;
                                        if xj < 0 || xj >= wd as isize {
                                            continue;
                                        }
                                        let widx = ((oc * ci + ic) * kh + di) * kw + dj;
                                        let xidx = ic * h * wd + xi as usize * wd + xj as usize;
                                        dst[xidx] = dst[xidx] + gv * wdat[widx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let [c, h, w] = self.val(*x).shape() else { unreachable!() };
                let (c, h, w) = (*c, *h, *w);
                let (ho, wo) = (2 * h, 2 * w);
                accum!(*x, |dst: &mut [E]| for ch in 0..c {
                    for i_o in 0..ho {
                        for j_o in 0..wo {
                            dst[ch * h * w + (i_o / 2) * w + j_o / 2] =
                                dst[ch * h * w + (i_o / 2) * w + j_o / 2] + g[ch * ho * wo + i_o * wo + j_o];
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, inv_std } => {
                let [c, h, w] = self.val(*x).shape() else { unreachable!() };
                let (c, hw) = (*c, h * w);
                let groups = *groups;
                let cg = c / groups;
                let group_size = cg * hw;
                let xd = self.val(*x).data();
                let gd = self.val(*gamma).data();
                accum!(*beta, |dst: &mut [E]| for ch in 0..c {
                    for p in 0..hw {
                        dst[ch] = dst[ch] + g[ch * hw + p];
                    }
                });
                accum!(*gamma, |dst: &mut [E]| for ch in 0..c {
                    let grp = ch / cg;
                    for p in 0..hw {
                        let flat = ch * hw + p;
                        let xhat = (xd[flat] - mean[grp]) * inv_std[grp];
                        dst[ch] = dst[ch] + g[flat] * xhat;
                    }
                });
                accum!(*x, |dst: &mut [E]| {
                    let m_e = E::of_f64(group_size as f64);
                    for grp in 0..groups {
                        let base = grp * group_size;
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for idx in 0..group_size {
                            let flat = base + idx;
                            let ch = flat / hw;
                            let dxhat = g[flat] * gd[ch];
                            let xhat = (xd[flat] - mean[grp]) * inv_std[grp];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for idx in 0..group_size {
                            let flat = base + idx;
                            let ch = flat / hw;
                            let dxhat = g[flat] * gd[ch];
                            let xhat = (xd[flat] - mean[grp]) * inv_std[grp];
                            dst[flat] = dst[flat]
                                + inv_std[grp]
                                    * (dxhat - sum_dxhat / m_e - xhat * sum_dxhat_xhat / m_e);
                        }
                    }
                });
            }
            Op::Pad2d { x, pad } => {
                let [c, h, w] = self.val(*x).shape() else { unreachable!() };
                let (c, h, w, pad) = (*c, *h, *w, *pad);
                let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                accum!(*x, |dst: &mut [E]| for ch in 0..c {
                    for i_r in 0..h {
                        for j_c in 0..w {
                            dst[ch * h * w + i_r * w + j_c] = dst[ch * h * w + i_r * w + j_c]
                                + g[ch * ho * wo + (i_r + pad) * wo + (j_c + pad)];
                        }
                    }
                });
            }
            Op::Crop2d { x, crop } => {
                let [c, h, w] = self.val(*x).shape() else { unreachable!() };
                let (c, h, w, crop) = (*c, *h, *w, *crop);
                let (ho, wo) = (h - 2 * crop, w - 2 * crop);
                accum!(*x, |dst: &mut [E]| for ch in 0..c {
                    for i_r in 0..ho {
                        for j_c in 0..wo {
                            dst[ch * h * w + (i_r + crop) * w + (j_c + crop)] =
                                dst[ch * h * w + (i_r + crop) * w + (j_c + crop)]
                                    + g[ch * ho * wo + i_r * wo + j_c];
                        }
                    }
                });
            }
            Op::ConcatC(a, b) => {
                let na = self.val(*a).numel();
                accum!(*a, |dst: &mut [E]| for k in 0..na {
                    dst[k] = dst[k] + g[k];
                });
                accum!(*b, |dst: &mut [E]| for k in 0..dst.len() {
                    dst[k] = dst[k] + g[na + k];
                });
            }
            Op::SliceC { x, start } => {
                let [_, h, w] = self.val(*x).shape() else { unreachable!() };
                let offset = start * h * w;
                accum!(*x, |dst: &mut [E]| for (k, &gv) in g.iter().enumerate() {
                    dst[offset + k] = dst[offset + k] + gv;
                });
            }
        }
    }
}
