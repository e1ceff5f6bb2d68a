//! Compact time-conditioned U-Net predicting noise and variance
//! interpolation over square latent grids.
//!
//! Four (configurable) stages down and up, one residual block each,
//! single-head attention at the configured resolutions, channel widths
//! `[C, 2C, 4C, 8C]`. The latent is zero-padded to the internal grid
//! (28 -> 32) so the stated attention resolutions exist, and cropped back
//! at the head. The head emits two channels split as `(eps, v)`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::RunRng;
use crate::tensor::layers::{self, AttentionVars};
use crate::tensor::{Elem, Graph, ParamStore, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone)]
pub struct UNetConfig {
    /// Side length of the (square) latent input.
    pub input_size: usize,
    /// Base channel count `C`.
    pub base_channels: usize,
    /// Per-stage channel multipliers, shallow to deep.
    pub channel_mults: Vec<usize>,
    /// Internal resolutions at which attention runs.
    pub attention_resolutions: Vec<usize>,
    /// Width of the time embedding.
    pub time_dim: usize,
    /// Preferred group count for normalization.
    pub norm_groups: usize,
}

impl UNetConfig {
    /// Full-scale configuration for 28x28 latents.
    pub fn latent28() -> Self {
        UNetConfig {
            input_size: 28,
            base_channels: 32,
            channel_mults: vec![1, 2, 4, 8],
            attention_resolutions: vec![32, 16, 8],
            time_dim: 128,
            norm_groups: 8,
        }
    }

    /// Miniature configuration used for 64-bit gradient checks.
    pub fn miniature() -> Self {
        UNetConfig {
            input_size: 8,
            base_channels: 4,
            channel_mults: vec![1, 2, 4, 8],
            attention_resolutions: vec![8, 4],
            time_dim: 16,
            norm_groups: 8,
        }
    }

    /// Reduced configuration for desk-scale diffusion training on 8x8 grids.
    pub fn desk8() -> Self {
        UNetConfig {
            input_size: 8,
            base_channels: 16,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![4],
            time_dim: 64,
            norm_groups: 8,
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    /// Side length of the zero-padded internal grid: the smallest multiple
    /// of `2^(stages-1)` that is >= the input size.
    pub fn internal_size(&self) -> usize {
        let align = 1usize << (self.stages() - 1);
        self.input_size.div_ceil(align) * align
    }

    /// Resolution at stage `i` of the internal grid.
    pub fn resolution(&self, stage: usize) -> usize {
        self.internal_size() >> stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.base_channels == 0 || self.channel_mults.is_empty() {
            return Err(Error::Config("unet: empty architecture".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("unet: time_dim must be even and >= 2".into()));
        }
        if (self.internal_size() - self.input_size) % 2 != 0 {
            return Err(Error::Config(format!(
                "unet: internal size {} cannot be centered on input {}",
                self.internal_size(),
                self.input_size
            )));
        }
        if self.resolution(self.stages() - 1) == 0 {
            return Err(Error::Config("unet: too many stages for the input size".into()));
        }
        let internal: Vec<usize> = (0..self.stages()).map(|i| self.resolution(i)).collect();
        for &r in &self.attention_resolutions {
            if !internal.contains(&r) {
                return Err(Error::Config(format!(
                    "unet: attention resolution {r} not among internal resolutions {internal:?}"
                )));
            }
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_channels * self.channel_mults[stage]
    }

    fn attend_at(&self, stage: usize) -> bool {
        self.attention_resolutions.contains(&self.resolution(stage))
    }
}

/// U-Net with its parameter store and path index.
pub struct UNetModel<E: Elem> {
    pub config: UNetConfig,
    pub params: ParamStore<E>,
    index: HashMap<String, usize>,
}

fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = t as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10_000f64).ln() * exponent).exp();
        out.push((t * freq).sin());
    }
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10_000f64).ln() * exponent).exp();
        out.push((t * freq).cos());
    }
    out
}

struct ParamBuilder<'r, E: Elem> {
    store: ParamStore<E>,
    rng: &'r mut RunRng,
}

impl<'r, E: Elem> ParamBuilder<'r, E> {
    fn conv(&mut self, path: &str, co: usize, ci: usize, k: usize) {
        let fan_in = ci * k * k;
        let w = layers::uniform_fan_in(self.rng, vec![co, ci, k, k], fan_in);
        let b = layers::uniform_fan_in(self.rng, vec![co], fan_in);
        self.store.insert(format!("{path}.w"), w).expect("unique path");
        self.store.insert(format!("{path}.b"), b).expect("unique path");
    }

    fn dense(&mut self, path: &str, ci: usize, co: usize) {
        let w = layers::uniform_fan_in(self.rng, vec![ci, co], ci);
        let b = layers::uniform_fan_in(self.rng, vec![co], ci);
        self.store.insert(format!("{path}.w"), w).expect("unique path");
        self.store.insert(format!("{path}.b"), b).expect("unique path");
    }

    fn norm(&mut self, path: &str, c: usize) {
        self.store.insert(format!("{path}.gamma"), Tensor::filled(vec![c], E::one())).expect("unique path");
        self.store.insert(format!("{path}.beta"), Tensor::zeros(vec![c])).expect("unique path");
    }

    fn res_block(&mut self, path: &str, cin: usize, cout: usize, time_dim: usize) {
        self.norm(&format!("{path}.norm1"), cin);
        self.conv(&format!("{path}.conv1"), cout, cin, 3);
        self.dense(&format!("{path}.time"), time_dim, cout);
        self.norm(&format!("{path}.norm2"), cout);
        self.conv(&format!("{path}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{path}.skip"), cout, cin, 1);
        }
    }

    fn attention(&mut self, path: &str, c: usize) {
        self.norm(&format!("{path}.norm"), c);
        for name in ["wq", "wk", "wv", "wo"] {
            let w = layers::uniform_fan_in(self.rng, vec![c, c], c);
            self.store.insert(format!("{path}.{name}"), w).expect("unique path");
        }
        for name in ["bq", "bk", "bv", "bo"] {
            let b = layers::uniform_fan_in(self.rng, vec![c], c);
            self.store.insert(format!("{path}.{name}"), b).expect("unique path");
        }
    }
}

impl<E: Elem> UNetModel<E> {
    /// Initialize all parameters from the run generator.
    pub fn init(config: UNetConfig, rng: &mut RunRng) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder { store: ParamStore::new(), rng };
        let td = config.time_dim;
        b.dense("time.fc1", td, td);
        b.dense("time.fc2", td, td);
        b.conv("stem", config.base_channels, 1, 3);
        let n = config.stages();
        let mut ch = config.base_channels;
        for i in 0..n {
            let cout = config.width(i);
            b.res_block(&format!("down{i}.res"), ch, cout, td);
            if config.attend_at(i) {
                b.attention(&format!("down{i}.attn"), cout);
            }
            ch = cout;
            if i < n - 1 {
                b.conv(&format!("down{i}.down"), ch, ch, 3);
            }
        }
        for i in (0..n).rev() {
            let cin = if i == n - 1 { config.width(n - 1) } else { ch + config.width(i) };
            let cout = if i >= 1 { config.width(i - 1) } else { config.base_channels };
            b.res_block(&format!("up{i}.res"), cin, cout, td);
            if config.attend_at(i) {
                b.attention(&format!("up{i}.attn"), cout);
            }
            if i > 0 {
                b.conv(&format!("up{i}.up"), cout, cout, 3);
            }
            ch = cout;
        }
        b.norm("head.norm", ch);
        b.conv("head.conv", 2, ch, 3);
        let store = b.store;
        let index =
            store.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect::<HashMap<_, _>>();
        Ok(UNetModel { config, params: store, index })
    }

    /// Rebuild from a loaded parameter store.
    pub fn from_params(config: UNetConfig, params: ParamStore<E>) -> Result<Self> {
        config.validate()?;
        let index =
            params.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect::<HashMap<_, _>>();
        Ok(UNetModel { config, params, index })
    }

    fn var(&self, leaves: &[Var], path: &str) -> Var {
        leaves[*self.index.get(path).unwrap_or_else(|| panic!("unknown parameter path {path}"))]
    }

    fn attention_vars(&self, leaves: &[Var], path: &str) -> AttentionVars {
        AttentionVars {
            wq: self.var(leaves, &format!("{path}.wq")),
            wk: self.var(leaves, &format!("{path}.wk")),
            wv: self.var(leaves, &format!("{path}.wv")),
            wo: self.var(leaves, &format!("{path}.wo")),
            bq: self.var(leaves, &format!("{path}.bq")),
            bk: self.var(leaves, &format!("{path}.bk")),
            bv: self.var(leaves, &format!("{path}.bv")),
            bo: self.var(leaves, &format!("{path}.bo")),
        }
    }

    fn res_block(
        &self,
        g: &mut Graph<E>,
        leaves: &[Var],
        path: &str,
        x: Var,
        t_emb: Var,
    ) -> Result<Var> {
        let cin = g.shape(x)[0];
        let cout = g.shape(self.var(leaves, &format!("{path}.conv1.w")))[0];
        let groups_in = layers::norm_groups(cin, self.config.norm_groups);
        let groups_out = layers::norm_groups(cout, self.config.norm_groups);
        let h = layers::group_norm(
            g,
            x,
            self.var(leaves, &format!("{path}.norm1.gamma")),
            self.var(leaves, &format!("{path}.norm1.beta")),
            groups_in,
        )?;
        let h = g.silu(h);
        let h = layers::conv2d(
            g,
            h,
            self.var(leaves, &format!("{path}.conv1.w")),
            self.var(leaves, &format!("{path}.conv1.b")),
            1,
            1,
        )?;
        // Time conditioning enters as a per-channel bias.
        let t_act = g.silu(t_emb);
        let t_row = g.reshape(t_act, vec![1, self.config.time_dim]);
        let t_proj = layers::dense(
            g,
            t_row,
            self.var(leaves, &format!("{path}.time.w")),
            self.var(leaves, &format!("{path}.time.b")),
        )?;
        let t_bias = g.reshape(t_proj, vec![cout]);
        let h = g.add_channel_bias(h, t_bias);
        let h = layers::group_norm(
            g,
            h,
            self.var(leaves, &format!("{path}.norm2.gamma")),
            self.var(leaves, &format!("{path}.norm2.beta")),
            groups_out,
        )?;
        let h = g.silu(h);
        let h = layers::conv2d(
            g,
            h,
            self.var(leaves, &format!("{path}.conv2.w")),
            self.var(leaves, &format!("{path}.conv2.b")),
            1,
            1,
        )?;
        let shortcut = if cin == cout {
            x
        } else {
            layers::conv2d(
                g,
                x,
                self.var(leaves, &format!("{path}.skip.w")),
                self.var(leaves, &format!("{path}.skip.b")),
                1,
                0,
            )?
        };
        Ok(g.add(h, shortcut))
    }

    fn attention_block(&self, g: &mut Graph<E>, leaves: &[Var], path: &str, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        let groups = layers::norm_groups(c, self.config.norm_groups);
        let h = layers::group_norm(
            g,
            x,
            self.var(leaves, &format!("{path}.norm.gamma")),
            self.var(leaves, &format!("{path}.norm.beta")),
            groups,
        )?;
        let attn = layers::self_attention(g, h, self.attention_vars(leaves, path))?;
        Ok(g.add(x, attn))
    }

    /// Forward pass on a recorded graph: `(s, s)` latent to `(eps, v)`.
    pub fn forward(&self, g: &mut Graph<E>, leaves: &[Var], x: Var, t: usize) -> Result<(Var, Var)> {
        let s = self.config.input_size;
        if g.shape(x) != [s, s] {
            return Err(Error::shape("unet", format!("expected [{s}, {s}], got {:?}", g.shape(x))));
        }
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("unet input".into()));
        }
        let t_sin = g.constant(Tensor::from_f64s(
            vec![1, self.config.time_dim],
            &sinusoidal_embedding(t, self.config.time_dim),
        ));
        let t_h = layers::dense(
            g,
            t_sin,
            self.var(leaves, "time.fc1.w"),
            self.var(leaves, "time.fc1.b"),
        )?;
        let t_h = g.silu(t_h);
        let t_emb = layers::dense(
            g,
            t_h,
            self.var(leaves, "time.fc2.w"),
            self.var(leaves, "time.fc2.b"),
        )?;
        let t_emb = g.reshape(t_emb, vec![self.config.time_dim]);

        let spatial = g.reshape(x, vec![1, s, s]);
        let pad = (self.config.internal_size() - s) / 2;
        let padded = if pad > 0 { g.pad2d(spatial, pad) } else { spatial };
        let mut h = layers::conv2d(
            g,
            padded,
            self.var(leaves, "stem.w"),
            self.var(leaves, "stem.b"),
            1,
            1,
        )?;

        let n = self.config.stages();
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            h = self.res_block(g, leaves, &format!("down{i}.res"), h, t_emb)?;
            if self.config.attend_at(i) {
                h = self.attention_block(g, leaves, &format!("down{i}.attn"), h)?;
            }
            skips.push(h);
            if i < n - 1 {
                h = layers::downsample2x(
                    g,
                    h,
                    self.var(leaves, &format!("down{i}.down.w")),
                    self.var(leaves, &format!("down{i}.down.b")),
                )?;
            }
        }

        h = skips[n - 1];
        for i in (0..n).rev() {
            if i < n - 1 {
                h = g.concat_c(h, skips[i]);
            }
            h = self.res_block(g, leaves, &format!("up{i}.res"), h, t_emb)?;
            if self.config.attend_at(i) {
                h = self.attention_block(g, leaves, &format!("up{i}.attn"), h)?;
            }
            if i > 0 {
                let up = layers::upsample2x(g, h)?;
                h = layers::conv2d(
                    g,
                    up,
                    self.var(leaves, &format!("up{i}.up.w")),
                    self.var(leaves, &format!("up{i}.up.b")),
                    1,
                    1,
                )?;
            }
        }

        let groups = layers::norm_groups(g.shape(h)[0], self.config.norm_groups);
        let h = layers::group_norm(
            g,
            h,
            self.var(leaves, "head.norm.gamma"),
            self.var(leaves, "head.norm.beta"),
            groups,
        )?;
        let h = g.silu(h);
        let out = layers::conv2d(
            g,
            h,
            self.var(leaves, "head.conv.w"),
            self.var(leaves, "head.conv.b"),
            1,
            1,
        )?;
        let out = if pad > 0 { g.crop2d(out, pad) } else { out };
        let eps = g.slice_c(out, 0, 1);
        let v = g.slice_c(out, 1, 1);
        let eps = g.reshape(eps, vec![s, s]);
        let v = g.reshape(v, vec![s, s]);
        Ok((eps, v))
    }

    /// Forward pass outside any training loop: builds a private graph.
    pub fn predict_one(&self, x: &Tensor<E>, t: usize) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut g = Graph::new();
        let leaves = self.params.inject(&mut g);
        let xv = g.constant(x.clone());
        let (eps, v) = self.forward(&mut g, &leaves, xv, t)?;
        Ok((g.value(eps).clone(), g.value(v).clone()))
    }
}

impl<E: Elem> crate::diffusion::Denoiser<E> for UNetModel<E> {
    fn predict(&self, x_t: &Tensor<E>, t: usize) -> Result<(Tensor<E>, Tensor<E>)> {
        self.predict_one(x_t, t)
    }

    fn predict_batch(&self, states: &[Tensor<E>], t: usize) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
        // One graph per batch so parameters are injected once per step.
        let mut g = Graph::new();
        let leaves = self.params.inject(&mut g);
        let mut out = Vec::with_capacity(states.len());
        for x in states {
            let xv = g.constant(x.clone());
            let (eps, v) = self.forward(&mut g, &leaves, xv, t)?;
            out.push((g.value(eps).clone(), g.value(v).clone()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;
    use crate::tensor::gradcheck::check_gradients;

    #[test]
    fn internal_size_and_resolutions() {
        let cfg = UNetConfig::latent28();
        assert_eq!(cfg.internal_size(), 32);
        assert_eq!(
            (0..cfg.stages()).map(|i| cfg.resolution(i)).collect::<Vec<_>>(),
            vec![32, 16, 8, 4]
        );
        cfg.validate().unwrap();
        let mini = UNetConfig::miniature();
        assert_eq!(mini.internal_size(), 8);
        mini.validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_attention_resolution() {
        let mut cfg = UNetConfig::miniature();
        cfg.attention_resolutions = vec![32];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shapes_are_input_shaped() {
        let mut rng = run_rng(1);
        let model = UNetModel::<f32>::init(UNetConfig::miniature(), &mut rng).unwrap();
        let x = Tensor::filled(vec![8, 8], 0.5f32);
        let (eps, v) = model.predict_one(&x, 3).unwrap();
        assert_eq!(eps.shape(), &[8, 8]);
        assert_eq!(v.shape(), &[8, 8]);
        assert!(eps.is_finite() && v.is_finite());
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let build = || {
            let mut rng = run_rng(9);
            UNetModel::<f32>::init(UNetConfig::miniature(), &mut rng).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a.params.numel(), b.params.numel());
        assert_eq!(a.params.names(), b.params.names());
    }

    #[test]
    fn time_step_changes_output() {
        let mut rng = run_rng(2);
        let model = UNetModel::<f64>::init(UNetConfig::miniature(), &mut rng).unwrap();
        let x = Tensor::filled(vec![8, 8], 0.25f64);
        let (e0, _) = model.predict_one(&x, 0).unwrap();
        let (e500, _) = model.predict_one(&x, 500).unwrap();
        let gap = e0
            .data()
            .iter()
            .zip(e500.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(gap > 0.0, "changing t must change the output");
    }

    #[test]
    fn time_embedding_distinct_and_sized() {
        let e0 = sinusoidal_embedding(0, 128);
        let e500 = sinusoidal_embedding(500, 128);
        assert_eq!(e0.len(), 128);
        let gap: f64 = e0.iter().zip(&e500).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(gap > 0.0);
    }

    #[test]
    fn forward_finite_on_wide_inputs() {
        let mut rng = run_rng(3);
        let model = UNetModel::<f64>::init(UNetConfig::miniature(), &mut rng).unwrap();
        for fill in [-3.0, 3.0] {
            let x = Tensor::filled(vec![8, 8], fill);
            let (eps, v) = model.predict_one(&x, 7).unwrap();
            assert!(eps.is_finite() && v.is_finite());
        }
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let mut rng = run_rng(4);
        let model = UNetModel::<f64>::init(UNetConfig::miniature(), &mut rng).unwrap();
        let mut g = Graph::new();
        let leaves = model.params.inject(&mut g);
        let x = Tensor::new(vec![8, 8], (0..64).map(|i| ((i * 37 % 64) as f64 / 64.0) - 0.5).collect());
        let xv = g.constant(x);
        let (eps, v) = model.forward(&mut g, &leaves, xv, 11).unwrap();
        let se = g.mul(eps, eps);
        let sv = g.mul(v, v);
        let le = g.sum_all(se);
        let lv = g.sum_all(sv);
        let loss = g.add(le, lv);
        g.backward(loss).unwrap();
        for (i, &leaf) in leaves.iter().enumerate() {
            let grad = g.grad(leaf).unwrap_or_else(|| panic!("no grad for {}", model.params.at(i).0));
            let max = grad.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(max > 0.0, "dead branch: parameter {} has zero gradient", model.params.at(i).0);
        }
    }

    #[test]
    fn miniature_gradient_check() {
        let mut rng = run_rng(5);
        let model = UNetModel::<f64>::init(UNetConfig::miniature(), &mut rng).unwrap();
        let n_params = model.params.len();
        let mut inputs: Vec<Tensor<f64>> =
            model.params.iter().map(|(_, t)| t.clone()).collect();
        let x = Tensor::new(vec![8, 8], (0..64).map(|i| (i as f64 / 64.0) - 0.5).collect());
        inputs.push(x);
        let report = check_gradients(&inputs, Some(3), |g, vars| {
            let (eps, v) = model.forward(g, &vars[..n_params], vars[n_params], 5).unwrap();
            let se = g.mul(eps, eps);
            let sv = g.mul(v, v);
            let le = g.sum_all(se);
            let lv = g.sum_all(sv);
            g.add(le, lv)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} at input {} coord {}",
            report.max_rel_err,
            report.worst_input,
            report.worst_coord
        );
    }
}
