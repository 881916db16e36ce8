//! Ensembles of one-step predictors and their disagreement reward.
//!
//! The change ensemble maps `(c_t, a_t)` to Bernoulli probabilities over
//! `c_{t+1}`; the latent ensemble (used by the latent-disagreement baseline)
//! regresses the next world-model feature vector. Disagreement is the
//! per-output population variance across members, averaged over outputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Linear, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::worldmodel::checkpoint::{self, CheckpointHeader, CheckpointKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: usize,
    pub lr: f64,
    pub bootstrap: bool,
    pub batch_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: 64,
            lr: 1e-3,
            bootstrap: true,
            batch_size: 64,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        if self.hidden == 0 || self.hidden > 256 || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("ensemble hidden in 1..=256, lr > 0, batch_size > 0".into()));
        }
        Ok(())
    }
}

/// Output head and matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Sigmoid probabilities trained with Bernoulli NLL.
    Bernoulli,
    /// Linear outputs trained with squared error.
    Linear,
}

#[derive(Debug, Clone)]
struct Member {
    params: ParamSet,
    l1: Linear,
    l2: Linear,
    opt: Adam,
    rng: ChaCha8Rng,
}

/// Outcome of one training step over every member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStep {
    /// Pre-update loss per member (NaN for rolled-back members).
    pub losses: Vec<f64>,
    pub rolled_back: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    cfg: EnsembleConfig,
    head: Head,
    in_dim: usize,
    action_dim: usize,
    out_dim: usize,
    seed: u64,
    members: Vec<Member>,
}

impl Ensemble {
    /// `in_dim` is the state part of the input; the action is appended to it.
    pub fn new(cfg: EnsembleConfig, head: Head, in_dim: usize, action_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let members = (0..cfg.members)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ensemble.init", k as u64));
                let mut params = ParamSet::new();
                let l1 = Linear::new(&mut params, "hidden", in_dim + action_dim, cfg.hidden, &mut rng);
                let l2 = Linear::new(&mut params, "out", cfg.hidden, out_dim, &mut rng);
                Member {
                    params,
                    l1,
                    l2,
                    opt: Adam::new(cfg.lr),
                    rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "ensemble.bootstrap", k as u64)),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            head,
            in_dim,
            action_dim,
            out_dim,
            seed,
            members,
        })
    }

    /// Change-space ensemble over flattened `side x side` change maps.
    pub fn change(cfg: EnsembleConfig, pixels: usize, action_dim: usize, seed: u64) -> Result<Self> {
        Self::new(cfg, Head::Bernoulli, pixels, action_dim, pixels, seed)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn member_params(&self, k: usize) -> &ParamSet {
        &self.members[k].params
    }

    /// Overwrites member `k` with the weights of member `from`.
    pub fn clone_member(&mut self, from: usize, k: usize) {
        self.members[k].params = self.members[from].params.clone();
    }

    pub fn set_member_params(&mut self, k: usize, params: ParamSet) {
        self.members[k].params = params;
    }

    fn forward_on(&self, k: usize, tape: &mut Tape<'_>, x: Var) -> Var {
        let m = &self.members[k];
        let h = m.l1.forward(tape, x);
        let h = tape.tanh(h);
        m.l2.forward(tape, h)
    }

    /// Member `k`'s training loss on a tape built over its own parameters.
    pub fn member_loss_on(&self, k: usize, tape: &mut Tape<'_>, inputs: &Tensor, targets: &Tensor) -> Var {
        let x = tape.constant(inputs.clone());
        let out = self.forward_on(k, tape, x);
        let y = tape.constant(targets.clone());
        let per = match self.head {
            Head::Bernoulli => tape.bce_with_logits(out, y),
            Head::Linear => {
                let d = tape.sub(out, y);
                let sq = tape.square(d);
                tape.scale(sq, 0.5)
            }
        };
        let s = tape.sum(per);
        tape.scale(s, 1.0 / inputs.rows as f64)
    }

    fn check_inputs(&self, states: &Tensor, actions: &Tensor) -> Result<()> {
        if states.cols != self.in_dim {
            return Err(Error::dims(self.in_dim, states.cols));
        }
        if actions.cols != self.action_dim || actions.rows != states.rows {
            return Err(Error::dims(
                format!("{}x{}", states.rows, self.action_dim),
                format!("{}x{}", actions.rows, actions.cols),
            ));
        }
        Ok(())
    }

    fn join(states: &Tensor, actions: &Tensor) -> Tensor {
        let cols = states.cols + actions.cols;
        let mut data = Vec::with_capacity(states.rows * cols);
        for r in 0..states.rows {
            data.extend_from_slice(states.row(r));
            data.extend_from_slice(actions.row(r));
        }
        Tensor::from_vec(states.rows, cols, data)
    }

    /// One prediction tensor per member for a batch of rows.
    pub fn predict_members_batch(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<Tensor>> {
        self.check_inputs(states, actions)?;
        let x = Self::join(states, actions);
        Ok((0..self.members.len())
            .map(|k| {
                let mut tape = Tape::new(&self.members[k].params);
                let xv = tape.constant(x.clone());
                let out = self.forward_on(k, &mut tape, xv);
                let out = match self.head {
                    Head::Bernoulli => tape.sigmoid(out),
                    Head::Linear => out,
                };
                tape.value(out).clone()
            })
            .collect())
    }

    pub fn predict_members(&self, state: &[f64], action: &[f64]) -> Result<Vec<Vec<f64>>> {
        let preds = self.predict_members_batch(&Tensor::row_vector(state), &Tensor::row_vector(action))?;
        Ok(preds.into_iter().map(Tensor::into_vec).collect())
    }

    /// Per-row disagreement for member predictions.
    ///
    /// Uses the pairwise form `(1/K²) Σ_{i<j} (x_i − x_j)²` of the population
    /// variance, which is exactly zero when members agree.
    pub fn disagreement_of(preds: &[Tensor]) -> Vec<f64> {
        let k = preds.len();
        let (rows, cols) = preds[0].shape();
        let norm = 1.0 / ((k * k) as f64 * cols as f64);
        (0..rows)
            .map(|r| {
                let mut total = 0.0;
                for i in 0..k {
                    for j in i + 1..k {
                        let (a, b) = (preds[i].row(r), preds[j].row(r));
                        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    }
                }
                total * norm
            })
            .collect()
    }

    pub fn disagreement_batch(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        Ok(Self::disagreement_of(&self.predict_members_batch(states, actions)?))
    }

    pub fn disagreement(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.disagreement_batch(&Tensor::row_vector(state), &Tensor::row_vector(action))
            .map(|v| v[0])
    }

    /// Mean member loss without updating.
    pub fn evaluate(&self, states: &Tensor, actions: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
        self.check_inputs(states, actions)?;
        let x = Self::join(states, actions);
        Ok((0..self.members.len())
            .map(|k| {
                let mut tape = Tape::new(&self.members[k].params);
                let l = self.member_loss_on(k, &mut tape, &x, targets);
                tape.scalar(l)
            })
            .collect())
    }

    /// One Adam step per member on its bootstrap view of the batch.
    pub fn train(&mut self, states: &Tensor, actions: &Tensor, targets: &Tensor) -> Result<EnsembleStep> {
        if states.rows == 0 {
            return Err(Error::EmptyReplay);
        }
        self.check_inputs(states, actions)?;
        if targets.cols != self.out_dim || targets.rows != states.rows {
            return Err(Error::dims(self.out_dim, targets.cols));
        }
        let x = Self::join(states, actions);
        let n = x.rows;
        let mut losses = Vec::with_capacity(self.members.len());
        let mut rolled_back = Vec::new();
        for k in 0..self.members.len() {
            let (xs, ys) = if self.cfg.bootstrap {
                let idx: Vec<usize> = (0..n).map(|_| self.members[k].rng.random_range(0..n)).collect();
                let pick = |t: &Tensor| {
                    let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
                    Tensor::from_rows(&rows)
                };
                (pick(&x), pick(targets))
            } else {
                (x.clone(), targets.clone())
            };
            let (loss, grads) = {
                let mut tape = Tape::new(&self.members[k].params);
                let l = self.member_loss_on(k, &mut tape, &xs, &ys);
                (tape.scalar(l), tape.backward(l))
            };
            if !loss.is_finite() {
                log::warn!("ensemble member {k}: non-finite loss, step skipped");
                losses.push(f64::NAN);
                rolled_back.push(k);
                continue;
            }
            let m = &mut self.members[k];
            let saved = (m.params.clone(), m.opt.clone());
            m.opt.step(&mut m.params, &grads);
            if !m.params.is_finite() {
                (m.params, m.opt) = saved;
                losses.push(f64::NAN);
                rolled_back.push(k);
                continue;
            }
            losses.push(loss);
        }
        Ok(EnsembleStep { losses, rolled_back })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            kind: match self.head {
                Head::Bernoulli => CheckpointKind::ChangeEnsemble,
                Head::Linear => CheckpointKind::LatentEnsemble,
            },
            dims: vec![
                self.members.len() as u64,
                self.in_dim as u64,
                self.action_dim as u64,
                self.cfg.hidden as u64,
                self.out_dim as u64,
            ],
            seed: self.seed,
            members: self.members.len() as u32,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let sets: Vec<&ParamSet> = self.members.iter().map(|m| &m.params).collect();
        checkpoint::write(path, &self.header(), &sets)
    }

    pub fn load(path: &Path, cfg: EnsembleConfig) -> Result<Self> {
        let (h, members) = checkpoint::read(path)?;
        let head = match h.kind {
            CheckpointKind::ChangeEnsemble => Head::Bernoulli,
            CheckpointKind::LatentEnsemble => Head::Linear,
            _ => return Err(Error::Format("not an ensemble checkpoint".into())),
        };
        if h.dims.len() != 5 || h.dims[0] as usize != members.len() {
            return Err(Error::Format("ensemble header does not match payload".into()));
        }
        let d: Vec<usize> = h.dims.iter().map(|&v| v as usize).collect();
        let cfg = EnsembleConfig {
            members: d[0],
            hidden: d[3],
            ..cfg
        };
        let mut ens = Self::new(cfg, head, d[1], d[2], d[4], h.seed)?;
        for (m, flat) in ens.members.iter_mut().zip(&members) {
            m.params
                .assign_flat(flat)
                .map_err(|n| Error::Format(format!("expected {n} parameters per member")))?;
        }
        Ok(ens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{directional_difference, scalar_relative_error};

    fn small(head: Head, seed: u64) -> Ensemble {
        let cfg = EnsembleConfig {
            members: 3,
            hidden: 8,
            ..EnsembleConfig::default()
        };
        Ensemble::new(cfg, head, 16, 4, 16, seed).unwrap()
    }

    fn data(n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = |rng: &mut ChaCha8Rng| Tensor::from_vec(n, 16, (0..n * 16).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect());
        let c = bits(&mut rng);
        let a = Tensor::uniform(n, 4, 1.0, &mut rng);
        let next = bits(&mut rng);
        (c, a, next)
    }

    #[test]
    fn k_outputs_in_open_unit_interval() {
        let e = small(Head::Bernoulli, 1);
        let p = e.predict_members(&[0.5; 16], &[0.0; 4]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, e.predict_members(&[0.5; 16], &[0.0; 4]).unwrap());
        assert!(e.predict_members(&[0.5; 15], &[0.0; 4]).is_err());
    }

    #[test]
    fn cloned_members_never_disagree() {
        let mut e = small(Head::Bernoulli, 2);
        e.clone_member(0, 1);
        e.clone_member(0, 2);
        let (c, a, _) = data(10, 3);
        assert!(e.disagreement_batch(&c, &a).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn two_member_constant_gap() {
        let p = Tensor::filled(1, 5, 0.3);
        let q = Tensor::filled(1, 5, 0.3 + 0.2);
        let d = Ensemble::disagreement_of(&[p.clone(), q.clone()])[0];
        assert!((d - 0.01).abs() < 1e-15);
        assert_eq!(d, Ensemble::disagreement_of(&[q, p])[0]);
    }

    #[test]
    fn member_gradient_matches_finite_differences() {
        for head in [Head::Bernoulli, Head::Linear] {
            let e = small(head, 4);
            let (c, a, y) = data(6, 5);
            let x = Ensemble::join(&c, &a);
            for k in 0..e.len() {
                let grad = {
                    let mut t = Tape::new(e.member_params(k));
                    let l = e.member_loss_on(k, &mut t, &x, &y);
                    t.backward(l).flatten(e.member_params(k))
                };
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
                let dir: Vec<f64> = (0..grad.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
                let numeric = directional_difference(e.member_params(k), &dir, 1e-5, |p| {
                    let mut probe = e.clone();
                    probe.set_member_params(k, p.clone());
                    let mut t = Tape::new(probe.member_params(k));
                    let l = probe.member_loss_on(k, &mut t, &x, &y);
                    t.scalar(l)
                });
                assert!(scalar_relative_error(analytic, numeric) < 1e-4);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_disagreement() {
        let cfg = EnsembleConfig {
            members: 3,
            ..EnsembleConfig::default()
        };
        let mut e = Ensemble::new(cfg, Head::Bernoulli, 16, 4, 16, 6).unwrap();
        // learnable dynamics: the change map persists
        let (c, a, _) = data(32, 7);
        let y = c.clone();
        let before = e.evaluate(&c, &a, &y).unwrap();
        let d0: f64 = e.disagreement_batch(&c, &a).unwrap().iter().sum();
        for _ in 0..200 {
            let step = e.train(&c, &a, &y).unwrap();
            assert!(step.rolled_back.is_empty());
        }
        let after = e.evaluate(&c, &a, &y).unwrap();
        assert!(before.iter().zip(&after).all(|(b, a)| a < b));
        let d1: f64 = e.disagreement_batch(&c, &a).unwrap().iter().sum();
        assert!(d1 < d0, "{d1} !< {d0}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let e = small(Head::Linear, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.ckpt");
        e.save(&path).unwrap();
        let back = Ensemble::load(&path, EnsembleConfig::default()).unwrap();
        assert_eq!(back.header(), e.header());
        let (c, a, _) = data(3, 9);
        assert_eq!(
            back.predict_members_batch(&c, &a).unwrap(),
            e.predict_members_batch(&c, &a).unwrap()
        );
    }
}
