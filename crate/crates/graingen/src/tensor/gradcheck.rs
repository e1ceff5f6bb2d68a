//! Central-finite-difference gradient verification.
//!
//! The checker is independent of the reverse-mode path: it only evaluates
//! the forward closure at perturbed inputs. Runs in 64-bit with step 1e-5.

use super::{Graph, Tensor, Var};

/// Default perturbation step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Result of a gradient check: the worst relative error over all checked
/// coordinates, plus where it occurred.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Relative error with a magnitude floor so finite-difference noise on
/// near-zero gradients does not dominate. Below the floor the comparison
/// degenerates to an absolute tolerance of `floor * rel_tol`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `build` must construct the full forward pass from the given leaves and
/// return the scalar loss. All leaves are tracked. `coords` optionally
/// limits the number of coordinates checked per input (selected evenly);
/// `None` checks every coordinate.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    coords: Option<usize>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheckReport {
    // Analytic gradients.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "gradient check requires a scalar loss");
    g.backward(loss).expect("backward on scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };

    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_coord: 0, coords_checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let selected: Vec<usize> = match coords {
            Some(limit) if limit < n => {
                // Evenly spaced coordinates cover every region of the tensor.
                (0..limit).map(|k| k * n / limit).collect()
            }
            _ => (0..n).collect(),
        };
        for ci in selected {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + DEFAULT_STEP;
            let up = eval(&work);
            work[pi].data_mut()[ci] = orig - DEFAULT_STEP;
            let down = eval(&work);
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let rel = relative_error(analytic[pi][ci], numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = pi;
                report.worst_coord = ci;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient() {
        let x = Tensor::from_f64s(vec![4], &[0.5, -1.2, 2.0, 0.1]);
        let report = check_gradients(&[x], None, |g, vars| {
            let sq = g.mul(vars[0], vars[0]);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_expression() {
        let x = Tensor::from_f64s(vec![3], &[0.3, 0.7, -0.4]);
        let y = Tensor::from_f64s(vec![3], &[1.5, -0.2, 0.9]);
        let report = check_gradients(&[x, y], None, |g, vars| {
            let p = g.mul(vars[0], vars[1]);
            let e = g.exp(p);
            let s = g.silu(e);
            g.mean_all(s)
        });
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
