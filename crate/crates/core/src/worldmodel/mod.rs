//! Recurrent state-space world model with a change-prediction head.
//!
//! The latent state is a deterministic recurrent vector `h` plus a Gaussian
//! stochastic vector `z`. The posterior sees the embedding of the next frame,
//! the prior does not; both share the recurrent update. Decoders map `h‖z` to
//! the image, the encoder embedding and the per-pixel change probabilities.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Linear, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::simworld::ACTION_DIM;

pub use checkpoint::{CheckpointHeader, CheckpointKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub obs_side: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub deter_dim: usize,
    pub stoch_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub free_nats: f64,
    pub lr: f64,
    pub min_std: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_side: 32,
            action_dim: ACTION_DIM,
            embed_dim: 128,
            deter_dim: 64,
            stoch_dim: 16,
            hidden: 128,
            beta: 1.0,
            free_nats: 1.0,
            lr: 3e-4,
            min_std: 1e-4,
            batch_size: 4,
        }
    }
}

impl ModelConfig {
    /// Narrow instance for gradient checks and fast tests.
    pub fn tiny(width: usize) -> Self {
        Self {
            embed_dim: width,
            deter_dim: width,
            stoch_dim: (width / 2).max(1),
            hidden: width,
            ..Self::default()
        }
    }

    pub fn obs_pixels(&self) -> usize {
        self.obs_side * self.obs_side
    }

    pub fn feature_dim(&self) -> usize {
        self.deter_dim + self.stoch_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.obs_side,
            self.action_dim,
            self.embed_dim,
            self.deter_dim,
            self.stoch_dim,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden > 256 || self.embed_dim > 256 {
            return Err(Error::Config("model widths are limited to 256".into()));
        }
        if self.beta < 0.0 || self.free_nats < 0.0 || self.lr <= 0.0 || self.min_std <= 0.0 {
            return Err(Error::Config("beta, free_nats, lr and min_std must be nonnegative (lr, min_std positive)".into()));
        }
        Ok(())
    }
}

/// Belief state: recurrent vector plus a sample of the stochastic part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
}

impl LatentState {
    /// Blank state used before the first observation.
    pub fn initial(cfg: &ModelConfig) -> Self {
        Self {
            h: vec![0.0; cfg.deter_dim],
            z: vec![0.0; cfg.stoch_dim],
            z_mean: vec![0.0; cfg.stoch_dim],
            z_std: vec![1.0; cfg.stoch_dim],
        }
    }

    /// `h‖z`, the input to every decoder.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.h.clone();
        f.extend_from_slice(&self.z);
        f
    }

    fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.z).all(|v| v.is_finite())
    }
}

/// Sequences of equal length `L`: observation, action taken from it, and change label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub observations: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub changes: Vec<Vec<Vec<f64>>>,
}

impl TrainBatch {
    pub fn batch_size(&self) -> usize {
        self.observations.len()
    }

    pub fn seq_len(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.batch_size();
        let l = self.seq_len();
        if b == 0 || l < 2 {
            return Err(Error::dims("batch >= 1 and length >= 2", format!("{b}x{l}")));
        }
        if self.actions.len() != b || self.changes.len() != b {
            return Err(Error::dims(format!("{b} sequences"), "ragged batch"));
        }
        for i in 0..b {
            if self.observations[i].len() != l || self.actions[i].len() != l || self.changes[i].len() != l {
                return Err(Error::dims(format!("length {l}"), format!("sequence {i} differs")));
            }
            for t in 0..l {
                if self.observations[i][t].len() != cfg.obs_pixels()
                    || self.changes[i][t].len() != cfg.obs_pixels()
                {
                    return Err(Error::dims(cfg.obs_pixels(), "frame size"));
                }
                if self.actions[i][t].len() != cfg.action_dim {
                    return Err(Error::dims(cfg.action_dim, self.actions[i][t].len()));
                }
            }
        }
        Ok(())
    }

    /// Standard-normal noise for every posterior sample the batch will draw.
    pub fn sample_noise(&self, cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.seq_len())
            .map(|_| Tensor::randn(self.batch_size(), cfg.stoch_dim, &mut rng))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub reconstruction: f64,
    pub embed: f64,
    pub kl: f64,
    pub change_nll: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
struct Nets {
    enc: Linear,
    gate: Linear,
    cand: Linear,
    prior1: Linear,
    prior2: Linear,
    post1: Linear,
    post2: Linear,
    img1: Linear,
    img2: Linear,
    emb: Linear,
    chg1: Linear,
    chg2: Linear,
}

/// Tape handles of one latent step.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub h: Var,
    pub z: Var,
    pub mean: Var,
    pub std: Var,
}

/// Tape handles of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub embed: Var,
    pub kl: Var,
    pub change_nll: Var,
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    cfg: ModelConfig,
    seed: u64,
    params: ParamSet,
    nets: Nets,
    opt: Adam,
}

impl WorldModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let px = cfg.obs_pixels();
        let feat = cfg.feature_dim();
        let core_in = cfg.deter_dim + cfg.stoch_dim + cfg.action_dim;
        let nets = Nets {
            enc: Linear::new(&mut p, "encoder", px, cfg.embed_dim, &mut rng),
            gate: Linear::new(&mut p, "core.gate", core_in, cfg.deter_dim, &mut rng),
            cand: Linear::new(&mut p, "core.cand", core_in, cfg.deter_dim, &mut rng),
            prior1: Linear::new(&mut p, "prior.hidden", cfg.deter_dim, cfg.hidden, &mut rng),
            prior2: Linear::new(&mut p, "prior.out", cfg.hidden, 2 * cfg.stoch_dim, &mut rng),
            post1: Linear::new(&mut p, "posterior.hidden", cfg.deter_dim + cfg.embed_dim, cfg.hidden, &mut rng),
            post2: Linear::new(&mut p, "posterior.out", cfg.hidden, 2 * cfg.stoch_dim, &mut rng),
            img1: Linear::new(&mut p, "image.hidden", feat, cfg.hidden, &mut rng),
            img2: Linear::new(&mut p, "image.out", cfg.hidden, px, &mut rng),
            emb: Linear::new(&mut p, "embed.out", feat, cfg.embed_dim, &mut rng),
            chg1: Linear::new(&mut p, "change.hidden", feat, cfg.hidden, &mut rng),
            chg2: Linear::new(&mut p, "change.out", cfg.hidden, px, &mut rng),
        };
        Ok(Self {
            cfg,
            seed,
            params: p,
            nets,
            opt: Adam::new(cfg.lr),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Copies the posterior head weights into the prior head where shapes allow.
    ///
    /// The prior's first layer sees only `h`, so the posterior's embedding
    /// columns are dropped; with zero embedding weights the two heads coincide.
    pub fn copy_posterior_into_prior(&mut self) {
        let d = self.cfg.deter_dim;
        let post_w = self.params.get(self.nets.post1.weight).clone();
        let prior_w = self.params.get_mut(self.nets.prior1.weight);
        prior_w.data.copy_from_slice(&post_w.data[..d * post_w.cols]);
        let b = self.params.get(self.nets.post1.bias).clone();
        *self.params.get_mut(self.nets.prior1.bias) = b;
        let w2 = self.params.get(self.nets.post2.weight).clone();
        *self.params.get_mut(self.nets.prior2.weight) = w2;
        let b2 = self.params.get(self.nets.post2.bias).clone();
        *self.params.get_mut(self.nets.prior2.bias) = b2;
        // zero the embedding rows so the posterior ignores the observation
        let post_w = self.params.get_mut(self.nets.post1.weight);
        let cols = post_w.cols;
        post_w.data[d * cols..].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            kind: CheckpointKind::WorldModel,
            dims: vec![
                self.cfg.obs_side as u64,
                self.cfg.action_dim as u64,
                self.cfg.embed_dim as u64,
                self.cfg.deter_dim as u64,
                self.cfg.stoch_dim as u64,
                self.cfg.hidden as u64,
            ],
            seed: self.seed,
            members: 1,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::write(path, &self.header(), &[&self.params])
    }

    /// Restores a model; training hyperparameters come from `cfg`, sizes from the file.
    pub fn load(path: &std::path::Path, cfg: ModelConfig) -> Result<Self> {
        let (header, members) = checkpoint::read(path)?;
        if header.kind != CheckpointKind::WorldModel || header.dims.len() != 6 || members.len() != 1 {
            return Err(Error::Format("not a world-model checkpoint".into()));
        }
        let d = &header.dims;
        let cfg = ModelConfig {
            obs_side: d[0] as usize,
            action_dim: d[1] as usize,
            embed_dim: d[2] as usize,
            deter_dim: d[3] as usize,
            stoch_dim: d[4] as usize,
            hidden: d[5] as usize,
            ..cfg
        };
        let mut model = Self::new(cfg, header.seed)?;
        model
            .params
            .assign_flat(&members[0])
            .map_err(|n| Error::Format(format!("expected {n} parameters")))?;
        Ok(model)
    }

    // ---- tape-level building blocks ----

    pub fn encode_on(&self, tape: &mut Tape<'_>, obs: Var) -> Var {
        let y = self.nets.enc.forward(tape, obs);
        tape.tanh(y)
    }

    /// Gated recurrent update `h' = h + u ⊙ (c − h)`.
    pub fn core_on(&self, tape: &mut Tape<'_>, h: Var, z: Var, action: Var) -> Var {
        let x = tape.concat_cols(&[h, z, action]);
        let g = self.nets.gate.forward(tape, x);
        let u = tape.sigmoid(g);
        let c = self.nets.cand.forward(tape, x);
        let c = tape.tanh(c);
        let diff = tape.sub(c, h);
        let step = tape.mul(u, diff);
        tape.add(h, step)
    }

    fn gaussian_head(&self, tape: &mut Tape<'_>, l1: Linear, l2: Linear, x: Var) -> (Var, Var) {
        let s = self.cfg.stoch_dim;
        let hid = l1.forward(tape, x);
        let hid = tape.tanh(hid);
        let out = l2.forward(tape, hid);
        let mean = tape.slice_cols(out, 0, s);
        let raw = tape.slice_cols(out, s, 2 * s);
        let sp = tape.softplus(raw);
        let std = tape.add_scalar(sp, self.cfg.min_std);
        (mean, std)
    }

    pub fn prior_dist_on(&self, tape: &mut Tape<'_>, h: Var) -> (Var, Var) {
        self.gaussian_head(tape, self.nets.prior1, self.nets.prior2, h)
    }

    pub fn posterior_dist_on(&self, tape: &mut Tape<'_>, h: Var, embed: Var) -> (Var, Var) {
        let x = tape.concat_cols(&[h, embed]);
        self.gaussian_head(tape, self.nets.post1, self.nets.post2, x)
    }

    /// `mean + std ⊙ eps`, or the mean when no noise is supplied.
    pub fn sample_on(&self, tape: &mut Tape<'_>, mean: Var, std: Var, eps: Option<&Tensor>) -> Var {
        match eps {
            Some(e) => {
                let e = tape.constant(e.clone());
                let scaled = tape.mul(std, e);
                tape.add(mean, scaled)
            }
            None => mean,
        }
    }

    pub fn posterior_step_on(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        z: Var,
        action: Var,
        embed_next: Var,
        eps: Option<&Tensor>,
    ) -> LatentVars {
        let h = self.core_on(tape, h, z, action);
        let (mean, std) = self.posterior_dist_on(tape, h, embed_next);
        let z = self.sample_on(tape, mean, std, eps);
        LatentVars { h, z, mean, std }
    }

    pub fn prior_step_on(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        z: Var,
        action: Var,
        eps: Option<&Tensor>,
    ) -> LatentVars {
        let h = self.core_on(tape, h, z, action);
        let (mean, std) = self.prior_dist_on(tape, h);
        let z = self.sample_on(tape, mean, std, eps);
        LatentVars { h, z, mean, std }
    }

    pub fn decode_image_on(&self, tape: &mut Tape<'_>, feat: Var) -> Var {
        let hid = self.nets.img1.forward(tape, feat);
        let hid = tape.tanh(hid);
        let out = self.nets.img2.forward(tape, hid);
        tape.sigmoid(out)
    }

    pub fn decode_embed_on(&self, tape: &mut Tape<'_>, feat: Var) -> Var {
        self.nets.emb.forward(tape, feat)
    }

    pub fn change_logits_on(&self, tape: &mut Tape<'_>, feat: Var) -> Var {
        let hid = self.nets.chg1.forward(tape, feat);
        let hid = tape.tanh(hid);
        self.nets.chg2.forward(tape, hid)
    }

    /// Per-row `KL(q ‖ p)` for diagonal Gaussians, as a column.
    pub fn kl_on(tape: &mut Tape<'_>, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
        let lp = tape.log(sp);
        let lq = tape.log(sq);
        let log_ratio = tape.sub(lp, lq);
        let vq = tape.square(sq);
        let dm = tape.sub(mq, mp);
        let dm2 = tape.square(dm);
        let num = tape.add(vq, dm2);
        let vp = tape.square(sp);
        let den = tape.scale(vp, 2.0);
        let frac = tape.div(num, den);
        let term = tape.add(log_ratio, frac);
        let term = tape.add_scalar(term, -0.5);
        tape.sum_cols(term)
    }

    /// Builds the full training objective for a batch with fixed sampling noise.
    pub fn loss_on(&self, tape: &mut Tape<'_>, batch: &TrainBatch, noise: &[Tensor]) -> LossVars {
        let b = batch.batch_size();
        let l = batch.seq_len();
        let px = self.cfg.obs_pixels();
        let time_major = |seqs: &Vec<Vec<Vec<f64>>>, width: usize| {
            let mut data = Vec::with_capacity(b * l * width);
            for t in 0..l {
                for seq in seqs {
                    data.extend_from_slice(&seq[t]);
                }
            }
            Tensor::from_vec(l * b, width, data)
        };
        let obs_t = time_major(&batch.observations, px);
        let chg_t = time_major(&batch.changes, px);
        let act_t = time_major(&batch.actions, self.cfg.action_dim);

        let obs = tape.constant(obs_t);
        let embeds = self.encode_on(tape, obs);

        let mut h = tape.constant(Tensor::zeros(b, self.cfg.deter_dim));
        let mut z = tape.constant(Tensor::zeros(b, self.cfg.stoch_dim));
        let mut prev_action = tape.constant(Tensor::zeros(b, self.cfg.action_dim));
        let mut feats = Vec::with_capacity(l);
        let mut kls = Vec::with_capacity(l);
        for t in 0..l {
            let e = tape.slice_rows(embeds, t * b, (t + 1) * b);
            let post = self.posterior_step_on(tape, h, z, prev_action, e, Some(&noise[t]));
            let (pm, ps) = self.prior_dist_on(tape, post.h);
            kls.push(Self::kl_on(tape, post.mean, post.std, pm, ps));
            feats.push(tape.concat_cols(&[post.h, post.z]));
            h = post.h;
            z = post.z;
            prev_action = tape.constant(act_t.rows_range(t * b, (t + 1) * b));
        }
        let rows = (b * l) as f64;
        let feat = tape.concat_rows(&feats);

        let recon = self.decode_image_on(tape, feat);
        let diff = tape.sub(recon, obs);
        let sq = tape.square(diff);
        let sse = tape.sum(sq);
        let reconstruction = tape.scale(sse, 0.5 / rows);

        let emb_pred = self.decode_embed_on(tape, feat);
        let ediff = tape.sub(emb_pred, embeds);
        let esq = tape.square(ediff);
        let esum = tape.sum(esq);
        let embed = tape.scale(esum, 0.5 / rows);

        let kl_col = tape.concat_rows(&kls);
        let kl = tape.mean(kl_col);

        let target = tape.constant(chg_t);
        let logits = self.change_logits_on(tape, feat);
        let bce = tape.bce_with_logits(logits, target);
        let bsum = tape.sum(bce);
        let change_nll = tape.scale(bsum, 1.0 / rows);

        let mut total = tape.add(reconstruction, embed);
        total = tape.add(total, change_nll);
        if self.cfg.beta > 0.0 {
            let floored = tape.max_scalar(kl, self.cfg.free_nats);
            let weighted = tape.scale(floored, self.cfg.beta);
            total = tape.add(total, weighted);
        }
        LossVars {
            total,
            reconstruction,
            embed,
            kl,
            change_nll,
        }
    }

    /// Loss values without taking a step.
    pub fn evaluate(&self, batch: &TrainBatch, seed: u64) -> Result<Losses> {
        batch.validate(&self.cfg)?;
        let noise = batch.sample_noise(&self.cfg, seed);
        let mut tape = Tape::new(&self.params);
        let vars = self.loss_on(&mut tape, batch, &noise);
        Ok(read_losses(&tape, &vars))
    }

    /// One Adam step on the batch; parameters are left untouched on failure.
    pub fn train_batch(&mut self, batch: &TrainBatch, seed: u64) -> Result<Losses> {
        batch.validate(&self.cfg)?;
        let noise = batch.sample_noise(&self.cfg, seed);
        let (losses, grads) = {
            let mut tape = Tape::new(&self.params);
            let vars = self.loss_on(&mut tape, batch, &noise);
            let losses = read_losses(&tape, &vars);
            if !losses.total.is_finite() {
                return Err(Error::NonFinite(format!("world-model loss {losses:?}")));
            }
            (losses, tape.backward(vars.total))
        };
        let saved = (self.params.clone(), self.opt.clone());
        self.opt.step(&mut self.params, &grads);
        if !self.params.is_finite() {
            (self.params, self.opt) = saved;
            return Err(Error::NonFinite("world-model parameters after update".into()));
        }
        Ok(losses)
    }

    // ---- single-state inference ----

    fn check_len(v: &[f64], want: usize) -> Result<()> {
        if v.len() != want {
            return Err(Error::dims(want, v.len()));
        }
        Ok(())
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Self::check_len(obs, self.cfg.obs_pixels())?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(Tensor::row_vector(obs));
        let e = self.encode_on(&mut tape, x);
        Ok(tape.value(e).data.clone())
    }

    fn state_vars(&self, tape: &mut Tape<'_>, s: &LatentState) -> (Var, Var) {
        (
            tape.constant(Tensor::row_vector(&s.h)),
            tape.constant(Tensor::row_vector(&s.z)),
        )
    }

    fn read_state(tape: &Tape<'_>, v: &LatentVars) -> LatentState {
        LatentState {
            h: tape.value(v.h).data.clone(),
            z: tape.value(v.z).data.clone(),
            z_mean: tape.value(v.mean).data.clone(),
            z_std: tape.value(v.std).data.clone(),
        }
    }

    fn check_state(&self, s: &LatentState, action: &[f64]) -> Result<()> {
        Self::check_len(&s.h, self.cfg.deter_dim)?;
        Self::check_len(&s.z, self.cfg.stoch_dim)?;
        Self::check_len(action, self.cfg.action_dim)?;
        if !s.is_finite() || !action.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent step input".into()));
        }
        Ok(())
    }

    fn draw_noise<R: Rng + ?Sized>(&self, rng: Option<&mut R>) -> Option<Tensor> {
        rng.map(|r| Tensor::randn(1, self.cfg.stoch_dim, r))
    }

    /// Posterior update; samples `z` when an RNG is given, else uses the mean.
    pub fn posterior_step<R: Rng + ?Sized>(
        &self,
        prev: &LatentState,
        action: &[f64],
        embed_next: &[f64],
        rng: Option<&mut R>,
    ) -> Result<LatentState> {
        self.check_state(prev, action)?;
        Self::check_len(embed_next, self.cfg.embed_dim)?;
        if !embed_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let eps = self.draw_noise(rng);
        let mut tape = Tape::new(&self.params);
        let (h, z) = self.state_vars(&mut tape, prev);
        let a = tape.constant(Tensor::row_vector(action));
        let e = tape.constant(Tensor::row_vector(embed_next));
        let v = self.posterior_step_on(&mut tape, h, z, a, e, eps.as_ref());
        Ok(Self::read_state(&tape, &v))
    }

    pub fn prior_step<R: Rng + ?Sized>(
        &self,
        prev: &LatentState,
        action: &[f64],
        rng: Option<&mut R>,
    ) -> Result<LatentState> {
        self.check_state(prev, action)?;
        let eps = self.draw_noise(rng);
        let mut tape = Tape::new(&self.params);
        let (h, z) = self.state_vars(&mut tape, prev);
        let a = tape.constant(Tensor::row_vector(action));
        let v = self.prior_step_on(&mut tape, h, z, a, eps.as_ref());
        Ok(Self::read_state(&tape, &v))
    }

    fn decode_with(&self, s: &LatentState, f: impl Fn(&Self, &mut Tape<'_>, Var) -> Var) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let feat = tape.constant(Tensor::row_vector(&s.features()));
        let out = f(self, &mut tape, feat);
        tape.value(out).data.clone()
    }

    pub fn decode_image(&self, s: &LatentState) -> Vec<f64> {
        self.decode_with(s, Self::decode_image_on)
    }

    pub fn decode_embed(&self, s: &LatentState) -> Vec<f64> {
        self.decode_with(s, Self::decode_embed_on)
    }

    /// Per-pixel change probabilities.
    pub fn predict_change(&self, s: &LatentState) -> Vec<f64> {
        self.decode_with(s, |m, t, f| {
            let l = m.change_logits_on(t, f);
            t.sigmoid(l)
        })
    }

    /// Expected change norm: mean of the probability map.
    pub fn expected_change_norm(&self, s: &LatentState) -> f64 {
        let p = self.predict_change(s);
        p.iter().sum::<f64>() / p.len() as f64
    }

    /// Prior rollout; one latent per action.
    pub fn imagine(&self, start: &LatentState, actions: &[Vec<f64>], seed: Option<u64>) -> Result<Vec<LatentState>> {
        if actions.is_empty() {
            return Err(Error::EmptyActions);
        }
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let mut out = Vec::with_capacity(actions.len());
        let mut s = start.clone();
        for a in actions {
            s = self.prior_step(&s, a, rng.as_mut())?;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// Posterior filtering of an observed sequence using mean latents.
    ///
    /// `actions[t]` is the action taken after `observations[t]`; the returned
    /// latent `t` has seen observations `0..=t`.
    pub fn filter(&self, observations: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<LatentState>> {
        if observations.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let mut out = Vec::with_capacity(observations.len());
        let mut s = LatentState::initial(&self.cfg);
        let zero = vec![0.0; self.cfg.action_dim];
        for (t, obs) in observations.iter().enumerate() {
            let e = self.encode(obs)?;
            let a = if t == 0 { &zero } else { &actions[t - 1] };
            s = self.posterior_step::<ChaCha8Rng>(&s, a, &e, None)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// Batched filtering of many equal-length sequences; returns `[t]` tensors of `h‖z`.
    pub fn filter_features_batch(&self, observations: &[&[Vec<f64>]], actions: &[&[Vec<f64>]]) -> Result<Vec<Tensor>> {
        let b = observations.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let l = observations[0].len();
        let mut tape = Tape::new(&self.params);
        let mut h = tape.constant(Tensor::zeros(b, self.cfg.deter_dim));
        let mut z = tape.constant(Tensor::zeros(b, self.cfg.stoch_dim));
        let mut out = Vec::with_capacity(l);
        for t in 0..l {
            let obs_rows: Vec<&[f64]> = observations.iter().map(|o| o[t].as_slice()).collect();
            let o = tape.constant(Tensor::from_rows(&obs_rows));
            let e = self.encode_on(&mut tape, o);
            let act = if t == 0 {
                Tensor::zeros(b, self.cfg.action_dim)
            } else {
                let rows: Vec<&[f64]> = actions.iter().map(|a| a[t - 1].as_slice()).collect();
                Tensor::from_rows(&rows)
            };
            let a = tape.constant(act);
            let v = self.posterior_step_on(&mut tape, h, z, a, e, None);
            h = v.h;
            z = v.z;
            let f = tape.concat_cols(&[h, z]);
            out.push(tape.value(f).clone());
        }
        Ok(out)
    }

    // ---- batched imagination for planning ----

    /// Rolls `P` candidate action sequences from one start state.
    ///
    /// `actions[t]` is `P x action_dim`; `noise[t]` (if given) is `P x stoch_dim`.
    /// Returns the `P x feature_dim` features of the start state followed by one
    /// tensor per step.
    pub fn imagine_batch(&self, start: &LatentState, actions: &[Tensor], noise: Option<&[Tensor]>) -> Vec<Tensor> {
        let p = actions.first().map_or(1, |a| a.rows);
        let mut tape = Tape::new(&self.params);
        let mut h = tape.constant(Tensor::row_vector(&start.h).repeat_rows(p));
        let mut z = tape.constant(Tensor::row_vector(&start.z).repeat_rows(p));
        let f0 = tape.concat_cols(&[h, z]);
        let mut feats = vec![tape.value(f0).clone()];
        for (t, a) in actions.iter().enumerate() {
            let av = tape.constant(a.clone());
            let eps = noise.map(|n| &n[t]);
            let v = self.prior_step_on(&mut tape, h, z, av, eps);
            h = v.h;
            z = v.z;
            let f = tape.concat_cols(&[h, z]);
            feats.push(tape.value(f).clone());
        }
        feats
    }

    /// Change probabilities for each row of a feature matrix.
    pub fn predict_change_batch(&self, feats: &Tensor) -> Tensor {
        let mut tape = Tape::new(&self.params);
        let f = tape.constant(feats.clone());
        let l = self.change_logits_on(&mut tape, f);
        let p = tape.sigmoid(l);
        tape.value(p).clone()
    }

    pub fn decode_image_batch(&self, feats: &Tensor) -> Tensor {
        let mut tape = Tape::new(&self.params);
        let f = tape.constant(feats.clone());
        let img = self.decode_image_on(&mut tape, f);
        tape.value(img).clone()
    }

    /// Prior mean and standard deviation of `z_{t+1}` for each row of `(h, z, a)`.
    pub fn prior_mean_batch(&self, h: &Tensor, z: &Tensor, a: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new(&self.params);
        let hv = tape.constant(h.clone());
        let zv = tape.constant(z.clone());
        let av = tape.constant(a.clone());
        let v = self.prior_step_on(&mut tape, hv, zv, av, None);
        let h2 = tape.value(v.h).clone();
        (h2, tape.value(v.mean).clone())
    }
}

fn read_losses(tape: &Tape<'_>, v: &LossVars) -> Losses {
    Losses {
        reconstruction: tape.scalar(v.reconstruction),
        embed: tape.scalar(v.embed),
        // analytically nonnegative; clamp rounding noise
        kl: tape.scalar(v.kl).max(0.0),
        change_nll: tape.scalar(v.change_nll),
        total: tape.scalar(v.total),
    }
}
