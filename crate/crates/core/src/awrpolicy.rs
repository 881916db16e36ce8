//! Advantage-weighted regression over world-model latents.
//!
//! The policy maps `h‖z` to a tanh-squashed action mean; the value network
//! regresses the discounted return of future change norms and serves as the
//! advantage baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Linear, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::worldmodel::checkpoint::{self, CheckpointHeader, CheckpointKind};
use crate::worldmodel::{LatentState, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwrConfig {
    pub top_n: usize,
    pub beta: f64,
    pub discount: f64,
    pub weight_clip: f64,
    pub hidden: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Gaussian noise used when the policy is executed directly.
    pub action_std: f64,
    pub batch_size: usize,
}

impl Default for AwrConfig {
    fn default() -> Self {
        Self {
            top_n: 10,
            beta: 1.0,
            discount: 0.95,
            weight_clip: 20.0,
            hidden: 64,
            policy_lr: 3e-3,
            value_lr: 1e-3,
            action_std: 0.3,
            batch_size: 64,
        }
    }
}

impl AwrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 || self.hidden == 0 || self.hidden > 256 || self.batch_size == 0 {
            return Err(Error::Config("awr top_n, batch_size > 0 and hidden in 1..=256".into()));
        }
        if self.beta <= 0.0 || !(0.0..=1.0).contains(&self.discount) || self.weight_clip <= 0.0 {
            return Err(Error::Config("awr beta > 0, discount in [0,1], clip > 0".into()));
        }
        if self.policy_lr <= 0.0 || self.value_lr <= 0.0 || self.action_std < 0.0 {
            return Err(Error::Config("awr learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// Indices of the `n` largest totals, newest first among ties.
pub fn select_top(totals: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..totals.len()).collect();
    idx.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(b.cmp(&a)));
    idx.truncate(n);
    idx
}

/// `R_t = Σ_{k≥t} γ^{k−t} r_k`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Return after each action: the discounted sum of the change norms it leads to.
pub fn action_returns(change_norms: &[f64], gamma: f64) -> Vec<f64> {
    let n = change_norms.len();
    if n == 0 {
        return Vec::new();
    }
    let mut next = discounted_returns(&change_norms[1..], gamma);
    next.push(0.0);
    next
}

/// Normalised exponential advantage weights.
///
/// `exp((A − max A)/β)` rescaled to mean 1 and clipped to `(0, clip]`, so
/// constant advantages give unit weights (plain behavioural cloning).
pub fn advantage_weights(advantages: &[f64], beta: f64, clip: f64) -> Vec<f64> {
    let finite: Vec<f64> = advantages.iter().map(|&a| if a.is_finite() { a } else { 0.0 }).collect();
    if finite.len() != advantages.len() || advantages.iter().any(|a| !a.is_finite()) {
        log::warn!("non-finite advantages replaced by 0");
    }
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = finite.iter().map(|a| ((a - max) / beta).exp()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter()
        .map(|r| (r / mean).clamp(f64::MIN_POSITIVE, clip))
        .collect()
}

#[derive(Debug, Clone)]
struct Mlp {
    params: ParamSet,
    l1: Linear,
    l2: Linear,
    opt: Adam,
}

impl Mlp {
    fn new(input: usize, hidden: usize, out: usize, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let l1 = Linear::new(&mut params, "hidden", input, hidden, rng);
        let l2 = Linear::new(&mut params, "out", hidden, out, rng);
        Self {
            params,
            l1,
            l2,
            opt: Adam::new(lr),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.l1.forward(tape, x);
        let h = tape.tanh(h);
        self.l2.forward(tape, h)
    }
}

/// Latent features, executed actions and returns of many transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct AwrBatch {
    pub features: Tensor,
    pub actions: Tensor,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AwrLosses {
    pub policy: f64,
    pub value: f64,
    pub max_weight: f64,
}

#[derive(Debug, Clone)]
pub struct AwrAgent {
    cfg: AwrConfig,
    feature_dim: usize,
    action_dim: usize,
    seed: u64,
    policy: Mlp,
    value: Mlp,
}

impl AwrAgent {
    pub fn new(cfg: AwrConfig, feature_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "awr.init", 0));
        let policy = Mlp::new(feature_dim, cfg.hidden, action_dim, cfg.policy_lr, &mut rng);
        let value = Mlp::new(feature_dim, cfg.hidden, 1, cfg.value_lr, &mut rng);
        Ok(Self {
            cfg,
            feature_dim,
            action_dim,
            seed,
            policy,
            value,
        })
    }

    pub fn config(&self) -> &AwrConfig {
        &self.cfg
    }

    pub fn policy_params(&self) -> &ParamSet {
        &self.policy.params
    }

    pub fn value_params(&self) -> &ParamSet {
        &self.value.params
    }

    pub fn set_policy_params(&mut self, p: ParamSet) {
        self.policy.params = p;
    }

    pub fn set_value_params(&mut self, p: ParamSet) {
        self.value.params = p;
    }

    pub fn policy_mean_on(&self, tape: &mut Tape<'_>, feats: Var) -> Var {
        let out = self.policy.forward(tape, feats);
        tape.tanh(out)
    }

    pub fn value_on(&self, tape: &mut Tape<'_>, feats: Var) -> Var {
        self.value.forward(tape, feats)
    }

    /// Weighted squared action error, averaged over rows.
    pub fn policy_loss_on(&self, tape: &mut Tape<'_>, batch: &AwrBatch, weights: &[f64]) -> Var {
        let x = tape.constant(batch.features.clone());
        let mu = self.policy_mean_on(tape, x);
        let a = tape.constant(batch.actions.clone());
        let d = tape.sub(mu, a);
        let sq = tape.square(d);
        let per_row = tape.sum_cols(sq);
        let w = tape.constant(Tensor::from_vec(weights.len(), 1, weights.to_vec()));
        let weighted = tape.mul(per_row, w);
        tape.mean(weighted)
    }

    /// Half squared error of the value estimate, averaged over rows.
    pub fn value_loss_on(&self, tape: &mut Tape<'_>, batch: &AwrBatch) -> Var {
        let x = tape.constant(batch.features.clone());
        let v = self.value_on(tape, x);
        let r = tape.constant(Tensor::from_vec(batch.returns.len(), 1, batch.returns.clone()));
        let d = tape.sub(v, r);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        tape.scale(m, 0.5)
    }

    pub fn values(&self, features: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new(&self.value.params);
        let x = tape.constant(features.clone());
        let v = self.value_on(&mut tape, x);
        tape.value(v).data.clone()
    }

    pub fn weights_for(&self, batch: &AwrBatch) -> Vec<f64> {
        let v = self.values(&batch.features);
        let adv: Vec<f64> = batch.returns.iter().zip(&v).map(|(r, v)| r - v).collect();
        advantage_weights(&adv, self.cfg.beta, self.cfg.weight_clip)
    }

    fn check(&self, batch: &AwrBatch) -> Result<()> {
        let n = batch.features.rows;
        if n == 0 {
            return Err(Error::EmptyReplay);
        }
        if batch.features.cols != self.feature_dim {
            return Err(Error::dims(self.feature_dim, batch.features.cols));
        }
        if batch.actions.cols != self.action_dim || batch.actions.rows != n || batch.returns.len() != n {
            return Err(Error::dims(format!("{n} rows"), "mismatched awr batch"));
        }
        Ok(())
    }

    /// One value step and one weighted-regression policy step.
    pub fn update(&mut self, batch: &AwrBatch) -> Result<AwrLosses> {
        self.check(batch)?;
        let weights = self.weights_for(batch);
        self.update_weighted(batch, &weights)
    }

    /// As [`AwrAgent::update`] with caller-supplied regression weights.
    pub fn update_weighted(&mut self, batch: &AwrBatch, weights: &[f64]) -> Result<AwrLosses> {
        self.check(batch)?;
        if weights.len() != batch.returns.len() {
            return Err(Error::dims(batch.returns.len(), weights.len()));
        }
        let (policy_loss, pg) = {
            let mut tape = Tape::new(&self.policy.params);
            let l = self.policy_loss_on(&mut tape, batch, weights);
            (tape.scalar(l), tape.backward(l))
        };
        let (value_loss, vg) = {
            let mut tape = Tape::new(&self.value.params);
            let l = self.value_loss_on(&mut tape, batch);
            (tape.scalar(l), tape.backward(l))
        };
        if !policy_loss.is_finite() || !value_loss.is_finite() {
            return Err(Error::NonFinite(format!("awr losses {policy_loss} / {value_loss}")));
        }
        let saved = (self.policy.clone(), self.value.clone());
        self.policy.opt.step(&mut self.policy.params, &pg);
        self.value.opt.step(&mut self.value.params, &vg);
        if !self.policy.params.is_finite() || !self.value.params.is_finite() {
            (self.policy, self.value) = saved;
            return Err(Error::NonFinite("awr parameters after update".into()));
        }
        Ok(AwrLosses {
            policy: policy_loss,
            value: value_loss,
            max_weight: weights.iter().copied().fold(0.0, f64::max),
        })
    }

    /// Policy mean for each feature row.
    pub fn act_batch(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::new(&self.policy.params);
        let x = tape.constant(features.clone());
        let mu = self.policy_mean_on(&mut tape, x);
        tape.value(mu).clone()
    }

    pub fn act(&self, features: &[f64]) -> Vec<f64> {
        self.act_batch(&Tensor::row_vector(features)).into_vec()
    }

    /// Mean action plus clipped Gaussian exploration noise.
    pub fn sample_action<R: Rng + ?Sized>(&self, features: &[f64], rng: &mut R) -> Vec<f64> {
        let mean = self.act(features);
        if self.cfg.action_std == 0.0 {
            return mean;
        }
        let n = Normal::new(0.0, self.cfg.action_std).expect("std >= 0");
        mean.iter().map(|m| (m + n.sample(rng)).clamp(-1.0, 1.0)).collect()
    }

    /// Rolls the policy mean through the prior for `horizon` steps.
    pub fn propose_actions(&self, model: &WorldModel, start: &LatentState, horizon: usize) -> Result<Vec<Vec<f64>>> {
        if horizon == 0 {
            return Err(Error::EmptyActions);
        }
        let mut s = start.clone();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let a = self.act(&s.features());
            s = model.prior_step::<ChaCha8Rng>(&s, &a, None)?;
            out.push(a);
        }
        Ok(out)
    }

    fn header(&self, kind: CheckpointKind) -> CheckpointHeader {
        CheckpointHeader {
            kind,
            dims: vec![self.feature_dim as u64, self.cfg.hidden as u64, self.action_dim as u64],
            seed: self.seed,
            members: 1,
        }
    }

    pub fn save(&self, policy_path: &Path, value_path: &Path) -> Result<()> {
        checkpoint::write(policy_path, &self.header(CheckpointKind::Policy), &[&self.policy.params])?;
        checkpoint::write(value_path, &self.header(CheckpointKind::Value), &[&self.value.params])
    }

    pub fn load(policy_path: &Path, value_path: &Path, cfg: AwrConfig) -> Result<Self> {
        let (ph, p) = checkpoint::read(policy_path)?;
        let (vh, v) = checkpoint::read(value_path)?;
        if ph.kind != CheckpointKind::Policy || vh.kind != CheckpointKind::Value || ph.dims.len() != 3 || ph.dims != vh.dims {
            return Err(Error::Format("policy/value checkpoints do not match".into()));
        }
        let cfg = AwrConfig {
            hidden: ph.dims[1] as usize,
            ..cfg
        };
        let mut agent = Self::new(cfg, ph.dims[0] as usize, ph.dims[2] as usize, ph.seed)?;
        let bad = |n| Error::Format(format!("expected {n} parameters"));
        agent.policy.params.assign_flat(&p[0]).map_err(bad)?;
        agent.value.params.assign_flat(&v[0]).map_err(bad)?;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{directional_difference, scalar_relative_error};
    use crate::worldmodel::ModelConfig;

    fn batch(n: usize, f: usize, seed: u64) -> AwrBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AwrBatch {
            features: Tensor::uniform(n, f, 1.0, &mut rng),
            actions: Tensor::uniform(n, 4, 0.9, &mut rng),
            returns: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
        }
    }

    fn small(seed: u64) -> AwrAgent {
        let cfg = AwrConfig {
            hidden: 8,
            ..AwrConfig::default()
        };
        AwrAgent::new(cfg, 12, 4, seed).unwrap()
    }

    #[test]
    fn select_top_sorts_and_breaks_ties_by_recency() {
        assert_eq!(select_top(&[0.1, 0.5, 0.3], 2), vec![1, 2]);
        assert_eq!(select_top(&[0.1, 0.5, 0.3], 3).len(), 3);
        assert_eq!(select_top(&[0.2, 0.2, 0.1], 1), vec![1]);
        assert_eq!(select_top(&[0.2], 5), vec![0]);
    }

    #[test]
    fn returns_discount_future_change() {
        let r = discounted_returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(r, vec![1.5, 1.0, 2.0]);
        assert_eq!(action_returns(&[9.0, 1.0, 0.0, 2.0], 0.5), vec![1.5, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn weights_are_positive_clipped_and_unit_when_flat() {
        assert!(advantage_weights(&[0.7; 5], 1.0, 20.0).iter().all(|&w| w == 1.0));
        let w = advantage_weights(&[0.0, 50.0, -1e6, 3.0], 1.0, 20.0);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 20.0));
        let w = advantage_weights(&[0.0, 1.0, -2.0], 1e9, 20.0);
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let w = advantage_weights(&[0.0, f64::NAN], 1.0, 20.0);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_advantages_match_behaviour_cloning_gradient() {
        let a = small(1);
        let b = batch(10, 12, 2);
        let ones = vec![1.0; 10];
        let g_awr = {
            let mut t = Tape::new(a.policy_params());
            let w = advantage_weights(&[0.3; 10], 1.0, 20.0);
            let l = a.policy_loss_on(&mut t, &b, &w);
            t.backward(l).flatten(a.policy_params())
        };
        let g_bc = {
            let mut t = Tape::new(a.policy_params());
            let l = a.policy_loss_on(&mut t, &b, &ones);
            t.backward(l).flatten(a.policy_params())
        };
        assert_eq!(g_awr, g_bc);
    }

    #[test]
    fn policy_and_value_gradients_match_finite_differences() {
        let a = small(3);
        let b = batch(7, 12, 4);
        let w = a.weights_for(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = {
            let mut t = Tape::new(a.policy_params());
            let l = a.policy_loss_on(&mut t, &b, &w);
            t.backward(l).flatten(a.policy_params())
        };
        let dir: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let an: f64 = g.iter().zip(&dir).map(|(x, y)| x * y).sum();
        let num = directional_difference(a.policy_params(), &dir, 1e-5, |p| {
            let mut probe = a.clone();
            probe.set_policy_params(p.clone());
            let mut t = Tape::new(probe.policy_params());
            let l = probe.policy_loss_on(&mut t, &b, &w);
            t.scalar(l)
        });
        assert!(scalar_relative_error(an, num) < 1e-4);

        let g = {
            let mut t = Tape::new(a.value_params());
            let l = a.value_loss_on(&mut t, &b);
            t.backward(l).flatten(a.value_params())
        };
        let dir: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let an: f64 = g.iter().zip(&dir).map(|(x, y)| x * y).sum();
        let num = directional_difference(a.value_params(), &dir, 1e-5, |p| {
            let mut probe = a.clone();
            probe.set_value_params(p.clone());
            let mut t = Tape::new(probe.value_params());
            let l = probe.value_loss_on(&mut t, &b);
            t.scalar(l)
        });
        assert!(scalar_relative_error(an, num) < 1e-4);
    }

    #[test]
    fn cloning_fidelity_on_repeated_trajectory() {
        let mut a = AwrAgent::new(AwrConfig::default(), 80, 4, 6).unwrap();
        let mut b = batch(20, 80, 7);
        b.returns = vec![1.0; 20];
        let uniform = advantage_weights(&[0.0; 20], 1.0, 20.0);
        for _ in 0..500 {
            a.update_weighted(&b, &uniform).unwrap();
        }
        let mu = a.act_batch(&b.features);
        let mse = mu.data.iter().zip(&b.actions.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / mu.len() as f64;
        assert!(mse < 0.01, "mse {mse}");
    }

    #[test]
    fn proposals_are_bounded_and_repeatable() {
        let m = WorldModel::new(ModelConfig::tiny(8), 1).unwrap();
        let a = AwrAgent::new(AwrConfig::default(), m.config().feature_dim(), 4, 2).unwrap();
        let s = LatentState::initial(m.config());
        let p = a.propose_actions(&m, &s, 5).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().flatten().all(|v| v.abs() < 1.0));
        assert_eq!(p, a.propose_actions(&m, &s, 5).unwrap());
        assert!(a.propose_actions(&m, &s, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let a = small(9);
        let dir = tempfile::tempdir().unwrap();
        let (pp, vp) = (dir.path().join("p.ckpt"), dir.path().join("v.ckpt"));
        a.save(&pp, &vp).unwrap();
        let b = AwrAgent::load(&pp, &vp, AwrConfig::default()).unwrap();
        let f = vec![0.25; 12];
        assert_eq!(a.act(&f), b.act(&f));
        assert_eq!(a.values(&Tensor::row_vector(&f)), b.values(&Tensor::row_vector(&f)));
    }
}
