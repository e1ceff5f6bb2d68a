//! Denoising diffusion over latent grids.
//!
//! Forward process, true posterior, learned-variance parameterization,
//! hybrid training objective, and the ancestral sampler. The schedule and
//! all closed-form coefficients are kept in f64; model evaluation is
//! generic over the element type.
//!
//! Conventions: steps are 1-based (`t in 1..=T`), `alpha_bar(0) = 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, RunRng};
use crate::tensor::{Elem, Graph, Tensor, Var};

/// Floor applied to `beta_tilde` before taking logarithms
/// (`beta_tilde(1)` is exactly zero).
pub const BETA_TILDE_FLOOR: f64 = 1e-20;

/// Default endpoints of the linear variance schedule.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

/// Per-step variance schedule with precomputed cumulative terms.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit per-step variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let t_count = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_count);
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut beta_tilde = Vec::with_capacity(t_count);
        for t in 1..=t_count {
            let prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
            beta_tilde.push((1.0 - prev) / (1.0 - alpha_bar[t - 1]) * beta[t - 1]);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar, beta_tilde })
    }

    /// Linear schedule interpolating beta from 1e-4 to 0.02 over `t_count`
    /// steps.
    pub fn linear(t_count: usize) -> Result<Self> {
        if t_count < 1 {
            return Err(Error::Config("schedule length must be >= 1".into()));
        }
        let beta = (0..t_count)
            .map(|i| {
                if t_count == 1 {
                    LINEAR_BETA_START
                } else {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (t_count - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance at step `t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    fn check_t(&self, t: usize, op: &str) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::Config(format!("{op}: step {t} outside 1..={}", self.len())));
        }
        Ok(())
    }
}

/// Closed-form forward marginal: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<E: Elem>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    schedule.check_t(t, "q_sample")?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let c0 = E::of_f64(ab.sqrt());
    let ce = E::of_f64((1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| c0 * x + ce * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data))
}

/// Coefficients of the true posterior mean
/// `mu_tilde = c0 * x0 + ct * x_t` at step `t`.
pub fn posterior_mean_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab = schedule.alpha_bar(t);
    let c0 = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, ct)
}

/// True posterior `q(x_{t-1} | x_t, x0)`: mean tensor and scalar variance.
pub fn posterior(
    x0: &Tensor<f64>,
    x_t: &Tensor<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor<f64>, f64)> {
    schedule.check_t(t, "posterior")?;
    if x0.shape() != x_t.shape() {
        return Err(Error::shape("posterior", format!("x0 {:?} vs x_t {:?}", x0.shape(), x_t.shape())));
    }
    let (c0, ct) = posterior_mean_coefficients(schedule, t);
    let data = x0.data().iter().zip(x_t.data()).map(|(&a, &b)| c0 * a + ct * b).collect();
    Ok((Tensor::new(x0.shape().to_vec(), data), schedule.beta_tilde(t)))
}

/// Model mean from the predicted noise:
/// `mu_theta = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`.
pub fn mu_from_eps<E: Elem>(
    x_t: &Tensor<E>,
    t: usize,
    eps_pred: &Tensor<E>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    schedule.check_t(t, "mu_from_eps")?;
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::shape(
            "mu_from_eps",
            format!("x_t {:?} vs eps {:?}", x_t.shape(), eps_pred.shape()),
        ));
    }
    let inv_sqrt_alpha = E::of_f64(1.0 / schedule.alpha(t).sqrt());
    let coef = E::of_f64(schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data))
}

/// Learned variance: interpolate between `beta_t` and `beta_tilde_t` in log
/// space, elementwise in `v`.
pub fn sigma_from_v<E: Elem>(v: &Tensor<E>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<E>> {
    schedule.check_t(t, "sigma_from_v")?;
    let log_beta = schedule.beta(t).ln();
    let log_beta_tilde = schedule.beta_tilde(t).max(BETA_TILDE_FLOOR).ln();
    let data = v
        .data()
        .iter()
        .map(|&vi| {
            let vi = vi.as_f64();
            E::of_f64((vi * log_beta + (1.0 - vi) * log_beta_tilde).exp())
        })
        .collect();
    Ok(Tensor::new(v.shape().to_vec(), data))
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// elements. Inputs are (mean, variance) pairs.
pub fn gaussian_kl(
    mu1: &Tensor<f64>,
    var1: &Tensor<f64>,
    mu2: &Tensor<f64>,
    var2: &Tensor<f64>,
) -> Result<f64> {
    let n = mu1.numel();
    if [var1.numel(), mu2.numel(), var2.numel()].iter().any(|&m| m != n) {
        return Err(Error::shape("gaussian_kl", "operand sizes differ".to_string()));
    }
    if var1.data().iter().chain(var2.data()).any(|&v| v <= 0.0) {
        return Err(Error::NonFinite("gaussian_kl: variance must be positive".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (m1, s1, m2, s2) = (mu1.data()[i], var1.data()[i], mu2.data()[i], var2.data()[i]);
        let dm = m1 - m2;
        total += 0.5 * (s2 / s1).ln() + (s1 + dm * dm) / (2.0 * s2) - 0.5;
    }
    Ok(total)
}

/// Gaussian negative log-likelihood, summed over elements.
pub fn gaussian_nll(x: &Tensor<f64>, mu: &Tensor<f64>, var: &Tensor<f64>) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.data()
        .iter()
        .zip(mu.data())
        .zip(var.data())
        .map(|((&xv, &m), &s)| 0.5 * (ln_2pi + s.ln()) + (xv - m) * (xv - m) / (2.0 * s))
        .sum()
}

/// KL between the terminal forward marginal `q(x_T | x0)` and the standard
/// normal prior, summed over elements. Parameter-free diagnostic.
pub fn prior_kl(x0: &Tensor<f64>, schedule: &NoiseSchedule) -> f64 {
    let t = schedule.len();
    let ab = schedule.alpha_bar(t);
    let mean_coef = ab.sqrt();
    let var = 1.0 - ab;
    x0.data()
        .iter()
        .map(|&x| {
            let m = mean_coef * x;
            0.5 * (1.0 / var).ln() + (var + m * m) / 2.0 - 0.5
        })
        .sum()
}

/// Scalar components of the hybrid objective.
#[derive(Debug, Clone, Copy)]
pub struct HybridLossParts {
    pub hybrid: f64,
    pub l_mu: f64,
    pub l_vlb: f64,
}

/// Graph closure type for a denoising model: maps `(graph, x_t, t)` to the
/// `(eps, v)` prediction pair.
pub type DenoiseForward<'a, E> = dyn FnMut(&mut Graph<E>, Var, usize) -> Result<(Var, Var)> + 'a;

/// Explicit `(t, eps)` draw for one batch item of the hybrid loss.
pub struct DrawnStep<E: Elem> {
    pub t: usize,
    pub eps: Tensor<E>,
}

/// Hybrid objective on a recorded graph, ready for `backward`.
///
/// One step `t` is drawn uniformly per batch item. The noise objective is
/// the mean squared error between the drawn and predicted noise; the
/// variational term is the per-element KL against the true posterior
/// (Gaussian log-likelihood of `x0` at `t = 1`), in bits per element, with
/// the model mean detached so the variational term trains only the
/// variance output.
pub fn loss_hybrid_graph<E: Elem>(
    g: &mut Graph<E>,
    forward: &mut DenoiseForward<'_, E>,
    x0_batch: &[Tensor<E>],
    schedule: &NoiseSchedule,
    lambda: f64,
    rng: &mut RunRng,
) -> Result<(Var, HybridLossParts)> {
    use rand::Rng;
    let t_max = schedule.len();
    let draws: Vec<DrawnStep<E>> = x0_batch
        .iter()
        .map(|x0| DrawnStep {
            t: rng.gen_range(1..=t_max),
            eps: Tensor::new(
                x0.shape().to_vec(),
                (0..x0.numel()).map(|_| E::of_f64(rng::normal(rng))).collect(),
            ),
        })
        .collect();
    loss_hybrid_graph_with(g, forward, x0_batch, &draws, schedule, lambda, true)
}

/// [`loss_hybrid_graph`] with explicit draws and a switch for the
/// stop-gradient on the model mean (disabled only to make the full loss
/// surface visible to finite-difference checks).
pub fn loss_hybrid_graph_with<E: Elem>(
    g: &mut Graph<E>,
    forward: &mut DenoiseForward<'_, E>,
    x0_batch: &[Tensor<E>],
    draws: &[DrawnStep<E>],
    schedule: &NoiseSchedule,
    lambda: f64,
    detach_mean: bool,
) -> Result<(Var, HybridLossParts)> {
    if x0_batch.is_empty() {
        return Err(Error::Config("loss_hybrid: empty batch".into()));
    }
    assert_eq!(x0_batch.len(), draws.len(), "one draw per batch item");
    let ln2 = std::f64::consts::LN_2;
    let mut mu_terms = Vec::with_capacity(x0_batch.len());
    let mut vlb_terms = Vec::with_capacity(x0_batch.len());
    for (x0, draw) in x0_batch.iter().zip(draws) {
        let (t, eps) = (draw.t, &draw.eps);
        let x_t = q_sample(x0, t, eps, schedule)?;
        let x_t_var = g.constant(x_t.clone());
        let (eps_hat, v) = forward(g, x_t_var, t)?;

        // Noise-matching term: mean squared error over elements.
        let eps_const = g.constant(eps.clone());
        let diff = g.sub(eps_hat, eps_const);
        let sq = g.mul(diff, diff);
        mu_terms.push(g.mean_all(sq));

        // Variational term for the drawn step, mean detached.
        let eps_for_mean = if detach_mean { g.detach(eps_hat) } else { eps_hat };
        let mu_theta = {
            let inv_sqrt_alpha = E::of_f64(1.0 / schedule.alpha(t).sqrt());
            let coef = E::of_f64(schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt());
            let scaled_eps = g.scale(eps_for_mean, coef);
            let centered = g.sub(x_t_var, scaled_eps);
            g.scale(centered, inv_sqrt_alpha)
        };
        let log_beta = schedule.beta(t).ln();
        let log_beta_tilde_floored = schedule.beta_tilde(t).max(BETA_TILDE_FLOOR).ln();
        // log Sigma = v (log beta - log beta~) + log beta~, linear in v.
        let log_sigma = {
            let s = g.scale(v, E::of_f64(log_beta - log_beta_tilde_floored));
            g.add_const(s, E::of_f64(log_beta_tilde_floored))
        };
        let neg_log_sigma = g.scale(log_sigma, E::of_f64(-1.0));
        let inv_sigma = g.exp(neg_log_sigma);

        // Both branches reduce to
        //   0.5 log Sigma + 0.5 c / Sigma + const
        // with c and the constant depending on the branch.
        let (c_tensor, const_term) = if t == 1 {
            // -log p(x0 | x1): c = (x0 - mu)^2, const = 0.5 ln(2 pi).
            let x0_const = g.constant(x0.clone());
            let d = g.sub(x0_const, mu_theta);
            let c = g.mul(d, d);
            (c, 0.5 * (2.0 * std::f64::consts::PI).ln())
        } else {
            // KL(q(x_{t-1}|x_t,x0) || p_theta): c = beta~ + (mu~ - mu)^2,
            // const = -0.5 ln beta~ - 0.5.
            let (c0, ct) = posterior_mean_coefficients(schedule, t);
            let x0_const = g.constant(x0.clone());
            let scaled_x0 = g.scale(x0_const, E::of_f64(c0));
            let scaled_xt = g.scale(x_t_var, E::of_f64(ct));
            let mu_tilde = g.add(scaled_x0, scaled_xt);
            let d = g.sub(mu_tilde, mu_theta);
            let d2 = g.mul(d, d);
            let beta_tilde = schedule.beta_tilde(t).max(BETA_TILDE_FLOOR);
            let c = g.add_const(d2, E::of_f64(beta_tilde));
            (c, -0.5 * beta_tilde.ln() - 0.5)
        };
        let half_log_sigma = g.scale(log_sigma, E::of_f64(0.5));
        let half_c = g.scale(c_tensor, E::of_f64(0.5));
        let ratio = g.mul(half_c, inv_sigma);
        let pre = g.add(half_log_sigma, ratio);
        let elems = g.add_const(pre, E::of_f64(const_term));
        let mean_bits = g.mean_all(elems);
        vlb_terms.push(g.scale(mean_bits, E::of_f64(1.0 / ln2)));
    }

    let l_mu = mean_of(g, &mu_terms);
    let l_vlb = mean_of(g, &vlb_terms);
    let scaled_vlb = g.scale(l_vlb, E::of_f64(lambda));
    let hybrid = g.add(l_mu, scaled_vlb);
    let parts = HybridLossParts {
        hybrid: g.value(hybrid).data()[0].as_f64(),
        l_mu: g.value(l_mu).data()[0].as_f64(),
        l_vlb: g.value(l_vlb).data()[0].as_f64(),
    };
    Ok((hybrid, parts))
}

fn mean_of<E: Elem>(g: &mut Graph<E>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, E::of_f64(1.0 / terms.len() as f64))
}

/// Denoising model interface used by the sampler.
pub trait Denoiser<E: Elem>: Sync {
    /// Predict `(eps, v)` for a single latent at step `t`.
    fn predict(&self, x_t: &Tensor<E>, t: usize) -> Result<(Tensor<E>, Tensor<E>)>;

    /// Predict for a whole batch at the same step; implementations may
    /// amortize per-call setup.
    fn predict_batch(&self, states: &[Tensor<E>], t: usize) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
        states.iter().map(|x| self.predict(x, t)).collect()
    }
}

/// Ancestral sampling options.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub count: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Use the posterior mean at every step (no injected noise).
    pub mean_mode: bool,
    /// Denoising step counts at which to keep intermediate states
    /// (`len()` means the final state).
    pub snapshot_steps: Vec<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { count: 1, batch_size: 128, seed: 0, mean_mode: false, snapshot_steps: Vec::new() }
    }
}

/// Output of a sampling run: latents in the scaled `[-1, 1]` space.
pub struct SampleOutput<E: Elem> {
    pub latents: Vec<Tensor<E>>,
    /// `(denoising step, per-sample states)` for each requested snapshot.
    pub snapshots: Vec<(usize, Vec<Tensor<E>>)>,
}

/// Run the reverse chain from pure noise.
///
/// Batches draw from independent streams derived from `(seed, batch index)`
/// so parallel and serial execution produce identical output. No noise is
/// injected at the final step.
pub fn sample<E: Elem>(
    model: &dyn Denoiser<E>,
    schedule: &NoiseSchedule,
    shape: &[usize],
    opts: &SampleOptions,
) -> Result<SampleOutput<E>> {
    if opts.count == 0 || opts.batch_size == 0 {
        return Err(Error::Config("sample: count and batch size must be positive".into()));
    }
    let batches: Vec<(usize, usize)> = (0..opts.count)
        .step_by(opts.batch_size)
        .map(|start| (start, opts.batch_size.min(opts.count - start)))
        .collect();

    let results: Vec<Result<(Vec<Tensor<E>>, Vec<(usize, Vec<Tensor<E>>)>)>> = batches
        .par_iter()
        .enumerate()
        .map(|(batch_idx, &(_, size))| sample_batch(model, schedule, shape, opts, batch_idx as u64, size))
        .collect();

    let mut latents = Vec::with_capacity(opts.count);
    let mut snapshots: Vec<(usize, Vec<Tensor<E>>)> =
        opts.snapshot_steps.iter().map(|&s| (s, Vec::new())).collect();
    for res in results {
        let (batch_latents, batch_snaps) = res?;
        latents.extend(batch_latents);
        for (slot, (_, states)) in snapshots.iter_mut().zip(batch_snaps) {
            slot.1.extend(states);
        }
    }
    Ok(SampleOutput { latents, snapshots })
}

#[allow(clippy::type_complexity)]
fn sample_batch<E: Elem>(
    model: &dyn Denoiser<E>,
    schedule: &NoiseSchedule,
    shape: &[usize],
    opts: &SampleOptions,
    batch_idx: u64,
    size: usize,
) -> Result<(Vec<Tensor<E>>, Vec<(usize, Vec<Tensor<E>>)>)> {
    let t_max = schedule.len();
    let numel: usize = shape.iter().product();
    let mut rng = rng::run_rng(derive_seed(opts.seed, batch_idx));
    let mut states: Vec<Tensor<E>> = (0..size)
        .map(|_| {
            Tensor::new(shape.to_vec(), (0..numel).map(|_| E::of_f64(rng::normal(&mut rng))).collect())
        })
        .collect();
    let mut snapshots: Vec<(usize, Vec<Tensor<E>>)> =
        opts.snapshot_steps.iter().map(|&s| (s, Vec::new())).collect();

    for t in (1..=t_max).rev() {
        // Draw all noise up front so the stream order is fixed per batch.
        let inject_noise = t > 1 && !opts.mean_mode;
        let noises: Vec<Option<Vec<f64>>> = (0..size)
            .map(|_| {
                inject_noise.then(|| (0..numel).map(|_| rng::normal(&mut rng)).collect::<Vec<f64>>())
            })
            .collect();
        let predictions = model.predict_batch(&states, t)?;
        for (item, (state, (eps, v))) in states.iter_mut().zip(predictions).enumerate() {
            let mu = mu_from_eps(state, t, &eps, schedule)?;
            let next = match &noises[item] {
                Some(z) => {
                    let sigma = sigma_from_v(&v, t, schedule)?;
                    let data = mu
                        .data()
                        .iter()
                        .zip(sigma.data())
                        .zip(z)
                        .map(|((&m, &s), &zi)| m + E::of_f64(s.as_f64().sqrt() * zi))
                        .collect();
                    Tensor::new(shape.to_vec(), data)
                }
                None => mu,
            };
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("sampling diverged at step t = {t}")));
            }
            *state = next;
        }
        let done = t_max - t + 1;
        for (snap_step, slot) in opts.snapshot_steps.iter().zip(snapshots.iter_mut()) {
            if *snap_step == done {
                slot.1 = states.clone();
            }
        }
    }
    Ok((states, snapshots))
}
