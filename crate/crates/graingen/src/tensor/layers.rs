//! Layer-level forward functions and weight initialization.
//!
//! Each function validates its shape contract and records onto the graph;
//! gradients come from the recorded primitives. The layer set is exactly
//! what the point cloud autoencoder and the denoising U-Net consume.

use crate::error::{Error, Result};
use crate::rng::{uniform, RunRng};

use super::{Elem, Graph, Tensor, Var};

/// Epsilon used inside group normalization.
pub const NORM_EPS: f64 = 1e-5;

fn expect_shape(g: &Graph<impl Elem>, v: Var, ndim: usize, layer: &str) -> Result<()> {
    if g.shape(v).len() != ndim {
        return Err(Error::shape(layer, format!("expected {ndim}D input, got {:?}", g.shape(v))));
    }
    Ok(())
}

/// Dense layer: `(m, in) x (in, out) + bias -> (m, out)`.
pub fn dense<E: Elem>(g: &mut Graph<E>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    expect_shape(g, x, 2, "dense")?;
    let (sx, sw, sb) = (g.shape(x).to_vec(), g.shape(weight).to_vec(), g.shape(bias).to_vec());
    if sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
        return Err(Error::shape("dense", format!("x {sx:?} x w {sw:?} + b {sb:?}")));
    }
    let h = g.matmul(x, weight);
    Ok(g.add_row(h, bias))
}

/// Pointwise (kernel-size-1) 1D convolution over a point sequence:
/// `(points, in_ch) -> (points, out_ch)`.
///
/// With kernel size 1 this is a dense map applied independently per point,
/// which is what keeps the encoder permutation-equivariant.
pub fn pointwise_conv1d<E: Elem>(g: &mut Graph<E>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    dense(g, x, weight, bias).map_err(|_| {
        Error::shape(
            "pointwise_conv1d",
            format!(
                "x {:?} x w {:?} + b {:?}",
                g.shape(x),
                g.shape(weight),
                g.shape(bias)
            ),
        )
    })
}

/// Parametric ReLU with one learned slope for the negative part.
pub fn prelu<E: Elem>(g: &mut Graph<E>, x: Var, slope: Var) -> Result<Var> {
    if g.shape(slope) != [1] {
        return Err(Error::shape("prelu", format!("slope must be [1], got {:?}", g.shape(slope))));
    }
    Ok(g.prelu(x, slope))
}

/// Sigmoid Linear Unit activation.
pub fn silu<E: Elem>(g: &mut Graph<E>, x: Var) -> Var {
    g.silu(x)
}

/// Global max pool over the point axis: `(points, ch) -> (ch)`.
pub fn global_max_pool<E: Elem>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    expect_shape(g, x, 2, "global_max_pool")?;
    Ok(g.max_axis0(x))
}

/// 2D convolution over `(ch, h, w)`, kernel 3x3 or 1x1, stride 1 or 2.
pub fn conv2d<E: Elem>(
    g: &mut Graph<E>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    expect_shape(g, x, 3, "conv2d")?;
    let (sx, sw) = (g.shape(x).to_vec(), g.shape(weight).to_vec());
    if sw.len() != 4 || sw[1] != sx[0] {
        return Err(Error::shape("conv2d", format!("x {sx:?} with w {sw:?}")));
    }
    Ok(g.conv2d(x, weight, bias, stride, pad))
}

/// Stride-2 downsample implemented as a 3x3 stride-2 convolution.
pub fn downsample2x<E: Elem>(g: &mut Graph<E>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    conv2d(g, x, weight, bias, 2, 1)
}

/// Nearest-neighbor 2x spatial upsample of `(ch, h, w)`.
pub fn upsample2x<E: Elem>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    expect_shape(g, x, 3, "upsample2x")?;
    Ok(g.upsample2x(x))
}

/// Group normalization with per-channel affine.
pub fn group_norm<E: Elem>(
    g: &mut Graph<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
) -> Result<Var> {
    expect_shape(g, x, 3, "group_norm")?;
    let c = g.shape(x)[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape("group_norm", format!("{groups} groups do not divide {c} channels")));
    }
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine {:?}/{:?} vs {c} channels", g.shape(gamma), g.shape(beta)),
        ));
    }
    Ok(g.group_norm(x, gamma, beta, groups, NORM_EPS))
}

/// Largest group count `<= preferred` that divides `channels`.
pub fn norm_groups(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|&d| channels % d == 0).unwrap_or(1)
}

/// Parameters of a single-head self-attention block over spatial positions.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
}

/// Single-head scaled dot-product self-attention over the flattened spatial
/// positions of `(ch, h, w)`. Returns the projected attention output; the
/// caller adds any residual connection.
pub fn self_attention<E: Elem>(g: &mut Graph<E>, x: Var, p: AttentionVars) -> Result<Var> {
    expect_shape(g, x, 3, "self_attention")?;
    let (c, h, w) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    for (name, wv) in [("wq", p.wq), ("wk", p.wk), ("wv", p.wv), ("wo", p.wo)] {
        if g.shape(wv) != [c, c] {
            return Err(Error::shape(
                "self_attention",
                format!("{name} must be [{c}, {c}], got {:?}", g.shape(wv)),
            ));
        }
    }
    let hw = h * w;
    let flat = g.reshape(x, vec![c, hw]);
    let tokens = g.transpose(flat); // (hw, c)
    let q = dense(g, tokens, p.wq, p.bq)?;
    let k = dense(g, tokens, p.wk, p.bk)?;
    let v = dense(g, tokens, p.wv, p.bv)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, E::of_f64(1.0 / (c as f64).sqrt()));
    let attn = g.softmax_rows(scaled);
    let mixed = g.matmul(attn, v);
    let proj = dense(g, mixed, p.wo, p.bo)?;
    let back = g.transpose(proj);
    Ok(g.reshape(back, vec![c, h, w]))
}

// ── Initialization ─────────────────────────────────────────────────

/// Fan-in-scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<E: Elem>(rng: &mut RunRng, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel).map(|_| E::of_f64(uniform(rng, -bound, bound))).collect();
    Tensor::new(shape, data)
}

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;
    use crate::tensor::gradcheck::check_gradients;

    fn rand_tensor(rng: &mut RunRng, shape: Vec<usize>) -> Tensor<f64> {
        let numel = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| uniform(rng, -1.0, 1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn prelu_definition() {
        // slope 0.25 on [-1, 2] -> [-0.25, 2]
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64s(vec![2], &[-1.0, 2.0]));
        let s = g.constant(Tensor::from_f64s(vec![1], &[0.25]));
        let y = prelu(&mut g, x, s).unwrap();
        assert_eq!(g.value(y).data(), &[-0.25, 2.0]);
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64s(vec![1, 3], &[0.4, -0.8, 1.5]));
        let eye = Tensor::from_f64s(vec![3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = dense(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.4, -0.8, 1.5]);
    }

    #[test]
    fn global_max_pool_compresses_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![600, 784]));
        let y = global_max_pool(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[784]);
    }

    #[test]
    fn shape_violations_name_the_layer() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4, 3]));
        let w = g.constant(Tensor::zeros(vec![5, 2]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let err = dense(&mut g, x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense"), "message should name the layer: {msg}");
        assert!(msg.contains("[4, 3]"), "message should carry shapes: {msg}");
    }

    #[test]
    fn norm_groups_divides() {
        assert_eq!(norm_groups(32, 8), 8);
        assert_eq!(norm_groups(4, 8), 4);
        assert_eq!(norm_groups(12, 8), 6);
        assert_eq!(norm_groups(7, 8), 7);
    }

    // Gradient checks for every layer kind, 64-bit, central differences.

    #[test]
    fn grad_dense_and_pointwise_conv() {
        let mut rng = run_rng(11);
        let x = rand_tensor(&mut rng, vec![5, 4]);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let report = check_gradients(&[x, w, b], None, |g, v| {
            let y = pointwise_conv1d(g, v[0], v[1], v[2]).unwrap();
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_prelu() {
        let mut rng = run_rng(12);
        let x = rand_tensor(&mut rng, vec![10]);
        let s = Tensor::from_f64s(vec![1], &[0.25]);
        let report = check_gradients(&[x, s], None, |g, v| {
            let y = prelu(g, v[0], v[1]).unwrap();
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_silu() {
        let mut rng = run_rng(13);
        let x = rand_tensor(&mut rng, vec![12]);
        let report = check_gradients(&[x], None, |g, v| {
            let y = silu(g, v[0]);
            g.sum_all(y)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_global_max_pool() {
        let mut rng = run_rng(14);
        let x = rand_tensor(&mut rng, vec![7, 3]);
        let report = check_gradients(&[x], None, |g, v| {
            let y = g.max_axis0(v[0]);
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_conv2d_stride1_and_stride2() {
        let mut rng = run_rng(15);
        for stride in [1usize, 2] {
            let x = rand_tensor(&mut rng, vec![2, 6, 6]);
            let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, vec![3]);
            let report = check_gradients(&[x, w, b], None, |g, v| {
                let y = conv2d(g, v[0], v[1], v[2], stride, 1).unwrap();
                let sq = g.mul(y, y);
                g.sum_all(sq)
            });
            assert!(report.max_rel_err < 1e-4, "stride {stride} rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn grad_group_norm() {
        let mut rng = run_rng(16);
        let x = rand_tensor(&mut rng, vec![4, 3, 3]);
        let gamma = rand_tensor(&mut rng, vec![4]);
        let beta = rand_tensor(&mut rng, vec![4]);
        let report = check_gradients(&[x, gamma, beta], None, |g, v| {
            let y = group_norm(g, v[0], v[1], v[2], 2).unwrap();
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_self_attention() {
        let mut rng = run_rng(17);
        let c = 3;
        let x = rand_tensor(&mut rng, vec![c, 2, 2]);
        let mut inputs = vec![x];
        for _ in 0..4 {
            inputs.push(rand_tensor(&mut rng, vec![c, c]));
        }
        for _ in 0..4 {
            inputs.push(rand_tensor(&mut rng, vec![c]));
        }
        let report = check_gradients(&inputs, None, |g, v| {
            let p = AttentionVars {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
                bq: v[5],
                bk: v[6],
                bv: v[7],
                bo: v[8],
            };
            let y = self_attention(g, v[0], p).unwrap();
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_upsample_nearest() {
        let mut rng = run_rng(18);
        let x = rand_tensor(&mut rng, vec![2, 3, 3]);
        let report = check_gradients(&[x], None, |g, v| {
            let y = upsample2x(g, v[0]).unwrap();
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_pad_crop_concat_softmax() {
        let mut rng = run_rng(19);
        let x = rand_tensor(&mut rng, vec![2, 4, 4]);
        let y = rand_tensor(&mut rng, vec![1, 4, 4]);
        let report = check_gradients(&[x, y], None, |g, v| {
            let p = g.pad2d(v[0], 1);
            let c = g.crop2d(p, 1);
            let cat = g.concat_c(c, v[1]);
            let flat = g.reshape(cat, vec![3, 16]);
            let sm = g.softmax_rows(flat);
            let sq = g.mul(sm, sm);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_pairwise_and_min() {
        let mut rng = run_rng(20);
        let a = rand_tensor(&mut rng, vec![5, 3]);
        let b = rand_tensor(&mut rng, vec![4, 3]);
        let report = check_gradients(&[a, b], None, |g, v| {
            let d = g.pairwise_sqdist(v[0], v[1]);
            let m = g.min_axis1(d);
            g.mean_all(m)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_scalar_ops() {
        let mut rng = run_rng(21);
        let x0 = rand_tensor(&mut rng, vec![6]);
        let x = Tensor::new(
            vec![6],
            x0.data().iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>(),
        );
        let report = check_gradients(&[x], None, |g, v| {
            let l = g.ln(v[0]);
            let e = g.exp(l);
            let s = g.sqrt(e);
            let sc = g.scale(s, 0.7);
            let sh = g.add_const(sc, 0.1);
            let q = g.div(sh, v[0]);
            g.sum_all(q)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = run_rng(22);
        let x = rand_tensor(&mut rng, vec![3, 5, 5]);
        let w = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, vec![2]);
        let run = || {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = conv2d(&mut g, xv, wv, bv, 1, 1).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
