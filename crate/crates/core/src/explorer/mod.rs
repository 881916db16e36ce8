//! The exploration loop and its replay buffer.
//!
//! A run collects a seeded random bootstrap, then alternates a training block
//! (world model, ensembles, policy) with a sampling block of episodes until the
//! episode budget is spent. Every artifact goes to the run directory.

pub mod replay;

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::awrpolicy::{action_returns, discounted_returns, select_top, AwrAgent, AwrBatch};
use crate::changemetric::{label_trajectory, CHANGE_SIDE};
use crate::config::{Config, KeepCheckpoints};
use crate::ensemble::{Ensemble, Head};
use crate::error::{Error, Result};
use crate::planner::{cem_plan, ExplorationScorer, LatentDisagreementScorer, Objective, ObjectiveTerms};
use crate::seeds::derive_seed;
use crate::simworld::{Action, RegionDescriptor, Simulator, ACTION_DIM};
use crate::worldmodel::{LatentState, TrainBatch, WorldModel};

pub use replay::{Frame, ReplayBuffer, Trajectory, TrajectoryMeta};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPLAY_FILE: &str = "replay.bin";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_HEADER: &str = "episode,total_change,success_flag,cumulative_successes,ec_term,dis_term";

/// Exploration strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Change-space planning with disagreement and policy proposals.
    Alan,
    /// As `Alan` without the disagreement term (no ensemble).
    Ec,
    /// Executes the advantage-weighted policy without planning.
    Awr,
    /// Plans on latent-ensemble disagreement.
    Lexa,
    /// Executes a policy trained on latent prediction error.
    Icm,
    /// Uniform random actions, no learning.
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [Self::Alan, Self::Ec, Self::Awr, Self::Lexa, Self::Icm, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Alan => "alan",
            Self::Ec => "ec",
            Self::Awr => "awr",
            Self::Lexa => "lexa",
            Self::Icm => "icm",
            Self::Random => "random",
        }
    }

    pub fn uses_model(self) -> bool {
        self != Self::Random
    }

    pub fn uses_change_ensemble(self) -> bool {
        self == Self::Alan
    }

    pub fn uses_latent_ensemble(self) -> bool {
        self == Self::Lexa
    }

    pub fn uses_policy(self) -> bool {
        matches!(self, Self::Alan | Self::Ec | Self::Awr | Self::Icm)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected alan, ec, awr, lexa, icm or random)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Instrumentation written to the run summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub world_models_constructed: u64,
    pub ensembles_constructed: u64,
    pub latent_ensembles_constructed: u64,
    pub policies_constructed: u64,
    pub wm_train_steps: u64,
    pub ensemble_train_steps: u64,
    pub latent_ensemble_train_steps: u64,
    pub awr_train_steps: u64,
    pub plans: u64,
    pub env_steps: u64,
    pub rolled_back_steps: u64,
}

/// One metrics row per exploration episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub total_change: f64,
    pub success: bool,
    pub cumulative_successes: usize,
    pub ec_term: f64,
    pub dis_term: f64,
}

pub fn metrics_csv(rows: &[EpisodeMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{:.6},{:.6}",
            r.episode,
            r.total_change,
            u8::from(r.success),
            r.cumulative_successes,
            r.ec_term,
            r.dis_term
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpisodeMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad metrics row `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(EpisodeMetrics {
                episode: f[0].parse().map_err(|_| bad())?,
                total_change: f[1].parse().map_err(|_| bad())?,
                success: f[2] == "1",
                cumulative_successes: f[3].parse().map_err(|_| bad())?,
                ec_term: f[4].parse().map_err(|_| bad())?,
                dis_term: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Trained components; absent ones are never built for the method.
#[derive(Debug, Clone)]
pub struct Learners {
    pub model: Option<WorldModel>,
    pub ensemble: Option<Ensemble>,
    pub latent_ensemble: Option<Ensemble>,
    pub policy: Option<AwrAgent>,
    pub objective: Objective,
}

impl Learners {
    pub fn new(cfg: &Config, method: Method, seed: u64, counters: &mut Counters) -> Result<Self> {
        let model = if method.uses_model() {
            counters.world_models_constructed += 1;
            Some(WorldModel::new(cfg.model, derive_seed(seed, "world_model", 0))?)
        } else {
            None
        };
        let ensemble = if method.uses_change_ensemble() {
            counters.ensembles_constructed += 1;
            let px = CHANGE_SIDE * CHANGE_SIDE;
            Some(Ensemble::change(cfg.ensemble, px, ACTION_DIM, derive_seed(seed, "ensemble", 0))?)
        } else {
            None
        };
        let latent_ensemble = if method.uses_latent_ensemble() {
            counters.latent_ensembles_constructed += 1;
            let f = cfg.model.feature_dim();
            Some(Ensemble::new(cfg.ensemble, Head::Linear, f, ACTION_DIM, f, derive_seed(seed, "latent_ensemble", 0))?)
        } else {
            None
        };
        let policy = if method.uses_policy() {
            counters.policies_constructed += 1;
            Some(AwrAgent::new(cfg.awr, cfg.model.feature_dim(), ACTION_DIM, derive_seed(seed, "policy", 0))?)
        } else {
            None
        };
        let mut objective = cfg.planner.objective();
        if method == Method::Ec {
            objective.w_dis = 0.0;
        }
        Ok(Self {
            model,
            ensemble,
            latent_ensemble,
            policy,
            objective,
        })
    }

    fn model(&self) -> Result<&WorldModel> {
        self.model.as_ref().ok_or_else(|| Error::Config("method has no world model".into()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(m) = &self.model {
            m.save(&dir.join("world_model.ckpt"))?;
        }
        if let Some(e) = &self.ensemble {
            e.save(&dir.join("ensemble.ckpt"))?;
        }
        if let Some(e) = &self.latent_ensemble {
            e.save(&dir.join("latent_ensemble.ckpt"))?;
        }
        if let Some(p) = &self.policy {
            p.save(&dir.join("policy.ckpt"), &dir.join("value.ckpt"))?;
        }
        Ok(())
    }

    /// Restores whatever checkpoints exist in `dir`.
    pub fn load(dir: &Path, cfg: &Config, method: Method) -> Result<Self> {
        let mut objective = cfg.planner.objective();
        if method == Method::Ec {
            objective.w_dis = 0.0;
        }
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Ok(Self {
            model: opt("world_model.ckpt").map(|p| WorldModel::load(&p, cfg.model)).transpose()?,
            ensemble: opt("ensemble.ckpt").map(|p| Ensemble::load(&p, cfg.ensemble)).transpose()?,
            latent_ensemble: opt("latent_ensemble.ckpt").map(|p| Ensemble::load(&p, cfg.ensemble)).transpose()?,
            policy: match (opt("policy.ckpt"), opt("value.ckpt")) {
                (Some(p), Some(v)) => Some(AwrAgent::load(&p, &v, cfg.awr)?),
                _ => None,
            },
            objective,
        })
    }
}

/// Where and what a run explores.
#[derive(Debug, Clone)]
pub struct Task {
    pub sim: Simulator,
    pub region: RegionDescriptor,
    pub task_id: String,
}

impl Task {
    pub fn new(cfg: &Config, task_id: &str) -> Result<Self> {
        let sim = Simulator::new(cfg.scene()?)?;
        if sim.scene().object(task_id).is_none() {
            return Err(Error::UnknownTask(task_id.to_string()));
        }
        let region = sim.region(task_id)?;
        Ok(Self {
            sim,
            region,
            task_id: task_id.to_string(),
        })
    }
}

/// How actions are chosen within one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    Random,
    /// Plan with the exploration objective.
    Plan,
    /// Plan on latent-ensemble disagreement.
    LatentPlan,
    /// Execute the policy with exploration noise.
    Policy,
}

impl Driver {
    pub fn for_method(m: Method) -> Self {
        match m {
            Method::Alan | Method::Ec => Self::Plan,
            Method::Lexa => Self::LatentPlan,
            Method::Awr | Method::Icm => Self::Policy,
            Method::Random => Self::Random,
        }
    }
}

/// Identity of an episode within a run.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub index: u64,
    pub reset_seed: u64,
    pub seed: u64,
    pub method: String,
}

fn obs_vector(obs: &crate::simworld::Observation) -> Result<Vec<f32>> {
    Ok(obs.downsampled(CHANGE_SIDE)?.iter().map(|&v| v as f32).collect())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Collects and labels one episode.
pub fn run_episode(
    cfg: &Config,
    task: &Task,
    learners: &mut Learners,
    driver: Driver,
    spec: &EpisodeSpec,
    counters: &mut Counters,
) -> Result<(Trajectory, ObjectiveTerms)> {
    let len = cfg.explorer.episode_len;
    let sim = &task.sim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "episode.actions", 0));
    let mut state = sim.reset(&task.region, spec.reset_seed)?;
    let mut observations = vec![sim.render(&state)];
    let mut success = sim.success(&state, &task.task_id)?;
    let mut obs32 = vec![obs_vector(&observations[0])?];
    let mut actions: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut latent: Option<LatentState> = None;
    let mut plan: VecDeque<Vec<f64>> = VecDeque::new();
    let mut terms = ObjectiveTerms::default();

    for t in 0..len {
        if driver != Driver::Random {
            let model = learners.model()?;
            let e = model.encode(&widen(&obs32[t]))?;
            let (prev, a) = match &latent {
                Some(s) => (s.clone(), actions[t - 1].clone()),
                None => (LatentState::initial(model.config()), vec![0.0; ACTION_DIM]),
            };
            latent = Some(model.posterior_step::<ChaCha8Rng>(&prev, &a, &e, None)?);
        }
        let action = match driver {
            Driver::Random => (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            Driver::Policy => {
                let policy = learners.policy.as_ref().ok_or_else(|| Error::Config("method has no policy".into()))?;
                policy.sample_action(&latent.as_ref().expect("latent").features(), &mut rng)
            }
            Driver::Plan | Driver::LatentPlan => {
                if plan.is_empty() {
                    let h = cfg.planner.horizon.min(len - t);
                    let plan_seed = derive_seed(spec.seed, "plan", t as u64);
                    let (seq, tr) = make_plan(cfg, learners, driver, latent.as_ref().expect("latent"), h, plan_seed)?;
                    counters.plans += 1;
                    terms.change += tr.change;
                    terms.disagreement += tr.disagreement;
                    plan.extend(seq);
                }
                plan.pop_front().expect("nonempty plan")
            }
        };
        let action = Action::from_slice(&action).clamped();
        state = sim.step(&state, &action);
        counters.env_steps += 1;
        success |= sim.success(&state, &task.task_id)?;
        actions.push(action.0.to_vec());
        observations.push(sim.render(&state));
        if t + 1 < len {
            obs32.push(obs_vector(&observations[t + 1])?);
        }
    }
    let (labels, total) = label_trajectory(
        &observations[..len],
        &cfg.change,
        derive_seed(spec.seed, "label", 0),
    )?;
    let frames = obs32
        .into_iter()
        .zip(actions)
        .zip(labels)
        .map(|((observation, action), c)| Frame {
            observation,
            action,
            change: c.grid,
        })
        .collect();
    Ok((
        Trajectory {
            meta: TrajectoryMeta {
                episode_index: spec.index,
                seed: spec.reset_seed,
                region_id: task.region.object_id.clone(),
                method: spec.method.clone(),
                success,
            },
            frames,
            total_change: total,
        },
        terms,
    ))
}

fn make_plan(
    cfg: &Config,
    learners: &mut Learners,
    driver: Driver,
    start: &LatentState,
    horizon: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, ObjectiveTerms)> {
    let model = learners.model()?;
    let cem = crate::planner::CemConfig {
        horizon,
        ..cfg.planner.cem()
    };
    match driver {
        Driver::LatentPlan => {
            let ens = learners
                .latent_ensemble
                .as_ref()
                .ok_or_else(|| Error::Config("method has no latent ensemble".into()))?;
            let mut scorer = LatentDisagreementScorer {
                model,
                ensemble: ens,
                start,
                mode: cem.imagine,
            };
            let r = cem_plan(&mut scorer, &cem, ACTION_DIM, None, seed)?;
            let pop: Vec<Tensor> = r.actions.iter().map(|a| Tensor::row_vector(a)).collect();
            let dis = crate::planner::Scorer::score(&mut scorer, &pop, &[seed])?[0];
            Ok((
                r.actions,
                ObjectiveTerms {
                    change: 0.0,
                    disagreement: dis,
                },
            ))
        }
        _ => {
            let init = match &learners.policy {
                Some(p) => Some(p.propose_actions(model, start, horizon)?),
                None => None,
            };
            let obj = learners.objective;
            let ens = if obj.w_dis != 0.0 { learners.ensemble.as_ref() } else { None };
            let mut scorer = ExplorationScorer::new(model, ens, &obj, start, cem.imagine);
            let actions = if obj.w_ec == 0.0 && obj.w_dis == 0.0 {
                // no objective: execute the proposal as is
                init.unwrap_or_else(|| vec![vec![0.0; ACTION_DIM]; horizon])
            } else {
                cem_plan(&mut scorer, &cem, ACTION_DIM, init.as_deref(), seed)?.actions
            };
            let pop: Vec<Tensor> = actions.iter().map(|a| Tensor::row_vector(a)).collect();
            let executed = scorer.terms(&pop, &[seed])?[0];
            let seen = std::mem::take(&mut scorer.seen);
            for t in &seen {
                learners.objective.observe(t);
            }
            Ok((actions, executed))
        }
    }
}

fn sample_train_batch(trajs: &[Trajectory], b: usize, l: usize, rng: &mut ChaCha8Rng) -> TrainBatch {
    let mut batch = TrainBatch {
        observations: Vec::with_capacity(b),
        actions: Vec::with_capacity(b),
        changes: Vec::with_capacity(b),
    };
    for _ in 0..b {
        let tr = &trajs[rng.random_range(0..trajs.len())];
        let start = rng.random_range(0..=tr.len() - l);
        let frames = &tr.frames[start..start + l];
        batch.observations.push(frames.iter().map(Frame::observation_f64).collect());
        batch.actions.push(frames.iter().map(|f| f.action.clone()).collect());
        batch.changes.push(frames.iter().map(Frame::change_f64).collect());
    }
    batch
}

/// Filtered `h‖z` features for every frame of every trajectory.
pub fn filtered_features(model: &WorldModel, trajs: &[Trajectory]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::new(); trajs.len()];
    // group equal lengths so each group is one batched pass
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, t) in trajs.iter().enumerate() {
        by_len.entry(t.len()).or_default().push(i);
    }
    for idx in by_len.values() {
        let obs: Vec<Vec<Vec<f64>>> = idx.iter().map(|&i| trajs[i].observations_f64()).collect();
        let acts: Vec<Vec<Vec<f64>>> = idx.iter().map(|&i| trajs[i].actions()).collect();
        let obs_refs: Vec<&[Vec<f64>]> = obs.iter().map(Vec::as_slice).collect();
        let act_refs: Vec<&[Vec<f64>]> = acts.iter().map(Vec::as_slice).collect();
        let feats = model.filter_features_batch(&obs_refs, &act_refs)?;
        for (row, &i) in idx.iter().enumerate() {
            out[i] = feats.iter().map(|f| f.row(row).to_vec()).collect();
        }
    }
    Ok(out)
}

/// Latent prediction error of each transition; the last frame gets 0.
pub fn icm_rewards(model: &WorldModel, feats: &[Vec<f64>], actions: &[Vec<f64>]) -> Vec<f64> {
    let n = feats.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let d = model.config().deter_dim;
    let h = Tensor::from_rows(&feats[..n - 1].iter().map(|f| &f[..d]).collect::<Vec<_>>());
    let z = Tensor::from_rows(&feats[..n - 1].iter().map(|f| &f[d..]).collect::<Vec<_>>());
    let a = Tensor::from_rows(&actions[..n - 1]);
    let (_, mean) = model.prior_mean_batch(&h, &z, &a);
    let mut r: Vec<f64> = (0..n - 1)
        .map(|t| {
            mean.row(t)
                .iter()
                .zip(&feats[t + 1][d..])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    r.push(0.0);
    r
}

/// One-step latent prediction error `‖prior mean(s_t, a_t) − z_{t+1}‖`.
pub fn baseline_icm_reward(model: &WorldModel, s_t: &LatentState, a_t: &[f64], s_next: &LatentState) -> Result<f64> {
    let p = model.prior_step::<ChaCha8Rng>(s_t, a_t, None)?;
    Ok(p.z_mean
        .iter()
        .zip(&s_next.z)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Training block over the replay contents.
pub fn train_block(
    cfg: &Config,
    method: Method,
    learners: &mut Learners,
    trajs: &[Trajectory],
    seed: u64,
    counters: &mut Counters,
) -> Result<()> {
    if !method.uses_model() || trajs.is_empty() {
        return Ok(());
    }
    let ex = &cfg.explorer;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train", 0));
    let model = learners.model.as_mut().expect("model");
    for step in 0..ex.wm_steps {
        let batch = sample_train_batch(trajs, cfg.model.batch_size, ex.seq_len, &mut rng);
        match model.train_batch(&batch, derive_seed(seed, "wm.noise", step as u64)) {
            Ok(_) => {}
            Err(Error::NonFinite(msg)) => {
                log::warn!("world-model step skipped: {msg}");
                counters.rolled_back_steps += 1;
            }
            Err(e) => return Err(e),
        }
        counters.wm_train_steps += 1;
    }
    let model = learners.model.as_ref().expect("model");

    if let Some(ens) = &mut learners.ensemble {
        let transitions: Vec<(usize, usize)> = trajs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len().saturating_sub(1)).map(move |k| (i, k)))
            .collect();
        if !transitions.is_empty() {
            for _ in 0..ex.ensemble_steps {
                let picks: Vec<(usize, usize)> = (0..cfg.ensemble.batch_size)
                    .map(|_| transitions[rng.random_range(0..transitions.len())])
                    .collect();
                let c = Tensor::from_rows(&picks.iter().map(|&(i, k)| trajs[i].frames[k].change_f64()).collect::<Vec<_>>());
                let a = Tensor::from_rows(&picks.iter().map(|&(i, k)| trajs[i].frames[k].action.clone()).collect::<Vec<_>>());
                let y = Tensor::from_rows(&picks.iter().map(|&(i, k)| trajs[i].frames[k + 1].change_f64()).collect::<Vec<_>>());
                let step = ens.train(&c, &a, &y)?;
                counters.rolled_back_steps += step.rolled_back.len() as u64;
                counters.ensemble_train_steps += 1;
            }
        }
    }

    let needs_feats = learners.latent_ensemble.is_some() || learners.policy.is_some();
    if !needs_feats {
        return Ok(());
    }
    let feats = filtered_features(model, trajs)?;

    if let Some(lens) = &mut learners.latent_ensemble {
        let transitions: Vec<(usize, usize)> = trajs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len().saturating_sub(1)).map(move |k| (i, k)))
            .collect();
        for _ in 0..ex.ensemble_steps {
            let picks: Vec<(usize, usize)> = (0..cfg.ensemble.batch_size)
                .map(|_| transitions[rng.random_range(0..transitions.len())])
                .collect();
            let s = Tensor::from_rows(&picks.iter().map(|&(i, k)| feats[i][k].as_slice()).collect::<Vec<_>>());
            let a = Tensor::from_rows(&picks.iter().map(|&(i, k)| trajs[i].frames[k].action.as_slice()).collect::<Vec<_>>());
            let y = Tensor::from_rows(&picks.iter().map(|&(i, k)| feats[i][k + 1].as_slice()).collect::<Vec<_>>());
            let step = lens.train(&s, &a, &y)?;
            counters.rolled_back_steps += step.rolled_back.len() as u64;
            counters.latent_ensemble_train_steps += 1;
        }
    }

    if let Some(policy) = &mut learners.policy {
        let gamma = cfg.awr.discount;
        let (totals, returns): (Vec<f64>, Vec<Vec<f64>>) = if method == Method::Icm {
            trajs
                .iter()
                .zip(&feats)
                .map(|(t, f)| {
                    let r = icm_rewards(model, f, &t.actions());
                    (r.iter().sum::<f64>(), discounted_returns(&r, gamma))
                })
                .unzip()
        } else {
            trajs
                .iter()
                .map(|t| {
                    let norms: Vec<f64> = t.frames.iter().map(Frame::change_norm).collect();
                    (t.total_change, action_returns(&norms, gamma))
                })
                .unzip()
        };
        let top = select_top(&totals, cfg.awr.top_n);
        let rows: Vec<(usize, usize)> = top.iter().flat_map(|&i| (0..trajs[i].len()).map(move |k| (i, k))).collect();
        for _ in 0..ex.awr_steps {
            let picks: Vec<(usize, usize)> = (0..cfg.awr.batch_size)
                .map(|_| rows[rng.random_range(0..rows.len())])
                .collect();
            let batch = AwrBatch {
                features: Tensor::from_rows(&picks.iter().map(|&(i, k)| feats[i][k].as_slice()).collect::<Vec<_>>()),
                actions: Tensor::from_rows(&picks.iter().map(|&(i, k)| trajs[i].frames[k].action.as_slice()).collect::<Vec<_>>()),
                returns: picks.iter().map(|&(i, k)| returns[i][k]).collect(),
            };
            match policy.update(&batch) {
                Ok(_) => {}
                Err(Error::NonFinite(msg)) => {
                    log::warn!("policy step skipped: {msg}");
                    counters.rolled_back_steps += 1;
                }
                Err(e) => return Err(e),
            }
            counters.awr_train_steps += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub bootstrap_episodes: usize,
    pub exploration_episodes: usize,
    pub replay_size: usize,
    pub cumulative_successes: usize,
    pub counters: Counters,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: Vec<EpisodeMetrics>,
    pub summary: RunSummary,
    pub replay: ReplayBuffer,
    pub learners: Learners,
    pub task: Task,
}

/// Bootstrap episodes of uniform random actions.
pub fn bootstrap(cfg: &Config, task: &Task, replay: &mut ReplayBuffer, count: usize, seed: u64) -> Result<()> {
    let mut counters = Counters::default();
    let mut none = Learners {
        model: None,
        ensemble: None,
        latent_ensemble: None,
        policy: None,
        objective: Objective::default(),
    };
    for i in 0..count as u64 {
        let spec = EpisodeSpec {
            index: i,
            reset_seed: derive_seed(seed, "reset", i),
            seed: derive_seed(seed, "episode", i),
            method: "bootstrap".into(),
        };
        let (t, _) = run_episode(cfg, task, &mut none, Driver::Random, &spec, &mut counters)?;
        replay.push(t)?;
    }
    Ok(())
}

fn checkpoint_dir(out: &Path, keep: KeepCheckpoints, cycle: usize) -> PathBuf {
    match keep {
        KeepCheckpoints::All => out.join("checkpoints").join(format!("cycle_{cycle:03}")),
        KeepCheckpoints::Last => out.join("checkpoints").join("last"),
    }
}

/// Full exploration run; writes artifacts when `out_dir` is set.
pub fn run(cfg: &Config, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let task = Task::new(cfg, &opts.task)?;
    let method = opts.method;
    let seed = opts.seed;
    let mut replay = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(REPLAY_FILE);
            if std::fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false) {
                return Err(Error::Config(format!("{} already holds a run", dir.display())));
            }
            std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string())?;
            ReplayBuffer::open(&path)?
        }
        None => ReplayBuffer::in_memory(),
    };
    let ex = cfg.explorer;
    bootstrap(cfg, &task, &mut replay, ex.bootstrap, seed)?;

    let mut counters = Counters::default();
    let mut learners = Learners::new(cfg, method, seed, &mut counters)?;
    let driver = Driver::for_method(method);
    let mut metrics: Vec<EpisodeMetrics> = Vec::with_capacity(ex.budget);
    let mut cumulative = 0;
    let mut cycle = 0;

    while metrics.len() < ex.budget {
        let cycle_seed = derive_seed(seed, "cycle", cycle as u64);
        let n = ex.episodes_per_cycle.min(ex.budget - metrics.len());
        let sample = |learners: &mut Learners,
                      replay: &mut ReplayBuffer,
                      counters: &mut Counters,
                      metrics: &mut Vec<EpisodeMetrics>,
                      cumulative: &mut usize|
         -> Result<()> {
            for _ in 0..n {
                let index = replay.len() as u64;
                let spec = EpisodeSpec {
                    index,
                    reset_seed: derive_seed(seed, "reset", index),
                    seed: derive_seed(seed, "episode", index),
                    method: method.name().into(),
                };
                let (traj, terms) = run_episode(cfg, &task, learners, driver, &spec, counters)?;
                *cumulative += usize::from(traj.meta.success);
                metrics.push(EpisodeMetrics {
                    episode: metrics.len() + 1,
                    total_change: traj.total_change,
                    success: traj.meta.success,
                    cumulative_successes: *cumulative,
                    ec_term: terms.change,
                    dis_term: terms.disagreement,
                });
                replay.push(traj)?;
            }
            Ok(())
        };
        if ex.concurrent && method.uses_model() {
            // trainer works on a snapshot while the sampler keeps the previous models
            let snapshot = replay.as_slice().to_vec();
            let mut next = learners.clone();
            let mut train_counters = Counters::default();
            let trained = std::thread::scope(|s| -> Result<()> {
                let handle = s.spawn(|| train_block(cfg, method, &mut next, &snapshot, cycle_seed, &mut train_counters));
                sample(&mut learners, &mut replay, &mut counters, &mut metrics, &mut cumulative)?;
                handle.join().expect("trainer thread panicked")
            });
            trained?;
            next.objective = learners.objective;
            learners = next;
            merge_counters(&mut counters, &train_counters);
        } else {
            train_block(cfg, method, &mut learners, replay.as_slice(), cycle_seed, &mut counters)?;
            sample(&mut learners, &mut replay, &mut counters, &mut metrics, &mut cumulative)?;
        }
        if let Some(dir) = &opts.out_dir {
            if method.uses_model() {
                learners.save(&checkpoint_dir(dir, ex.keep_checkpoints, cycle))?;
            }
            std::fs::write(dir.join(METRICS_FILE), metrics_csv(&metrics))?;
        }
        log::info!(
            "{method} {} seed {seed}: cycle {cycle} done, {} episodes, {cumulative} successes",
            opts.task,
            metrics.len()
        );
        cycle += 1;
    }

    let summary = RunSummary {
        method,
        task: opts.task.clone(),
        seed,
        bootstrap_episodes: ex.bootstrap,
        exploration_episodes: metrics.len(),
        replay_size: replay.len(),
        cumulative_successes: cumulative,
        counters,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join(METRICS_FILE), metrics_csv(&metrics))?;
        std::fs::write(
            dir.join(SUMMARY_FILE),
            toml::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?,
        )?;
    }
    Ok(RunOutcome {
        metrics,
        summary,
        replay,
        learners,
        task,
    })
}

fn merge_counters(into: &mut Counters, from: &Counters) {
    into.wm_train_steps += from.wm_train_steps;
    into.ensemble_train_steps += from.ensemble_train_steps;
    into.latent_ensemble_train_steps += from.latent_ensemble_train_steps;
    into.awr_train_steps += from.awr_train_steps;
    into.rolled_back_steps += from.rolled_back_steps;
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(dir.join(SUMMARY_FILE))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("summary: {e}")))
}

pub fn read_metrics(dir: &Path) -> Result<Vec<EpisodeMetrics>> {
    parse_metrics_csv(&std::fs::read_to_string(dir.join(METRICS_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut c = Config::fast();
        c.model = crate::worldmodel::ModelConfig::tiny(8);
        c.ensemble.hidden = 8;
        c.ensemble.members = 2;
        c.awr.hidden = 8;
        c.planner.population = 20;
        c.planner.iterations = 1;
        c.explorer.bootstrap = 2;
        c.explorer.budget = 3;
        c.explorer.episodes_per_cycle = 2;
        c.explorer.wm_steps = 2;
        c.explorer.ensemble_steps = 2;
        c.explorer.awr_steps = 2;
        c
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("greedy".parse::<Method>().unwrap_err().is_config());
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let rows = vec![
            EpisodeMetrics {
                episode: 1,
                total_change: 0.25,
                success: false,
                cumulative_successes: 0,
                ec_term: 1.5,
                dis_term: 0.0,
            },
            EpisodeMetrics {
                episode: 2,
                total_change: 1.0,
                success: true,
                cumulative_successes: 1,
                ec_term: 0.0,
                dis_term: 2.0,
            },
        ];
        assert_eq!(parse_metrics_csv(&metrics_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn bootstrap_fills_replay_deterministically() {
        let cfg = tiny_config();
        let task = Task::new(&cfg, "door").unwrap();
        let mut a = ReplayBuffer::in_memory();
        bootstrap(&cfg, &task, &mut a, 3, 7).unwrap();
        let mut b = ReplayBuffer::in_memory();
        bootstrap(&cfg, &task, &mut b, 3, 7).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.as_slice(), b.as_slice());
        for t in a.iter() {
            assert_eq!(t.len(), 20);
            assert!(t.frames.iter().flat_map(|f| &f.action).all(|v| v.abs() <= 1.0));
            assert!((t.total_change - t.recomputed_total()).abs() < 1e-12);
        }
    }

    #[test]
    fn every_method_completes_a_tiny_run() {
        let cfg = tiny_config();
        for m in Method::ALL {
            let out = run(
                &cfg,
                &RunOptions {
                    method: m,
                    task: "door".into(),
                    seed: 3,
                    out_dir: None,
                },
            )
            .unwrap();
            assert_eq!(out.metrics.len(), 3, "{m}");
            assert_eq!(out.replay.len(), 5);
            let c = out.summary.counters;
            assert_eq!(c.env_steps, 60);
            assert_eq!(c.ensembles_constructed > 0, m == Method::Alan);
            if m == Method::Random {
                assert_eq!(c.wm_train_steps + c.awr_train_steps + c.ensemble_train_steps, 0);
            }
        }
    }

    #[test]
    fn zero_weights_execute_the_proposal() {
        let mut cfg = tiny_config();
        cfg.planner.w_ec = 0.0;
        cfg.planner.w_dis = 0.0;
        let task = Task::new(&cfg, "door").unwrap();
        let mut counters = Counters::default();
        let mut learners = Learners::new(&cfg, Method::Alan, 1, &mut counters).unwrap();
        let spec = EpisodeSpec {
            index: 0,
            reset_seed: 5,
            seed: 6,
            method: "alan".into(),
        };
        let (traj, _) = run_episode(&cfg, &task, &mut learners, Driver::Plan, &spec, &mut counters).unwrap();
        // replay the proposals by hand
        let model = learners.model.as_ref().unwrap();
        let policy = learners.policy.as_ref().unwrap();
        let mut latent = LatentState::initial(model.config());
        let mut expected = Vec::new();
        for t in 0..20 {
            let e = model.encode(&traj.frames[t].observation_f64()).unwrap();
            let a = if t == 0 { vec![0.0; 4] } else { traj.frames[t - 1].action.clone() };
            latent = model.posterior_step::<ChaCha8Rng>(&latent, &a, &e, None).unwrap();
            if t % 10 == 0 {
                expected.extend(policy.propose_actions(model, &latent, 10).unwrap());
            }
        }
        assert_eq!(traj.actions(), expected);
    }

    #[test]
    fn icm_reward_matches_exposed_heads() {
        let cfg = tiny_config();
        let m = WorldModel::new(cfg.model, 2).unwrap();
        let obs: Vec<Vec<f64>> = (0..3).map(|i| vec![0.1 * i as f64; 1024]).collect();
        let acts = vec![vec![0.5, -0.5, 0.0, 0.0]; 3];
        let lat = m.filter(&obs, &acts).unwrap();
        let feats: Vec<Vec<f64>> = lat.iter().map(LatentState::features).collect();
        let r = icm_rewards(&m, &feats, &acts);
        for t in 0..2 {
            let want = baseline_icm_reward(&m, &lat[t], &acts[t], &lat[t + 1]).unwrap();
            assert!((r[t] - want).abs() < 1e-12);
            assert!(r[t] >= 0.0);
        }
        assert_eq!(r[2], 0.0);
    }
}
