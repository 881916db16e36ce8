//! Goal reaching from exploration data: nearest-neighbour retrieval of a
//! trajectory, then model-based refinement of its actions.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::explorer::{Task, Trajectory};
use crate::planner::{cem_plan, CemConfig, GoalScorer, Scorer};
use crate::seeds::derive_seed;
use crate::simworld::{average_pool, Action, Observation, ACTION_DIM};
use crate::worldmodel::{LatentState, WorldModel};

/// Side of the pooling grid; features have `FEATURE_GRID²` entries.
pub const FEATURE_GRID: usize = 8;
pub const RESULTS_HEADER: &str = "task_id,trial,retrieved_rank,success";

/// 8×8 average-pooled intensities of a square image.
///
/// Panics if the image is not square with a side divisible by 8.
pub fn feature(img: &[f64]) -> Vec<f64> {
    let side = (img.len() as f64).sqrt().round() as usize;
    average_pool(img, side, FEATURE_GRID).expect("square image with side divisible by 8")
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSpec {
    /// Composite raster of the goal scene.
    pub goal_image: Vec<f64>,
    pub task_id: String,
}

impl GoalSpec {
    pub fn from_observation(obs: &Observation, task_id: &str) -> Self {
        Self {
            goal_image: obs.composite.clone(),
            task_id: task_id.to_string(),
        }
    }

    /// Renders the scripted goal state of `task`, arm parked at the region centre.
    pub fn scripted(task: &Task) -> Result<Self> {
        let state = task.sim.goal_state(&task.task_id, task.region.center)?;
        Ok(Self::from_observation(&task.sim.render(&state), &task.task_id))
    }

    pub fn feature(&self) -> Vec<f64> {
        feature(&self.goal_image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved {
    /// Position in the replay slice.
    pub index: usize,
    pub frame: usize,
    pub distance: f64,
}

/// Trajectories ranked by their closest frame to the goal; ties go to the newer one.
pub fn knn_retrieve(trajs: &[Trajectory], goal_feature: &[f64], k: usize) -> Result<Vec<Retrieved>> {
    if trajs.is_empty() {
        return Err(Error::EmptyReplay);
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let mut best: Vec<Retrieved> = trajs
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let mut r = Retrieved {
                index,
                frame: 0,
                distance: f64::INFINITY,
            };
            for (j, f) in t.frames.iter().enumerate() {
                let d = distance(&feature(&f.observation_f64()), goal_feature);
                if d < r.distance {
                    r.frame = j;
                    r.distance = d;
                }
            }
            r
        })
        .collect();
    best.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(b.index.cmp(&a.index)));
    best.truncate(k);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AchieveConfig {
    pub top_k: usize,
    pub trials_per_trajectory: usize,
    pub refine: CemConfig,
}

impl AchieveConfig {
    pub fn from_config(cfg: &Config) -> Self {
        let b = &cfg.benchmark;
        let p = cfg.planner.cem();
        Self {
            top_k: b.top_k,
            trials_per_trajectory: b.trials_per_trajectory,
            refine: CemConfig {
                iterations: b.refine_iterations,
                init_std: b.refine_std,
                min_std: p.min_std.min(b.refine_std),
                ..p
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task_id: String,
    pub trial: usize,
    /// 1-based rank of the retrieved trajectory.
    pub retrieved_rank: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AchieveReport {
    pub trials: Vec<TrialResult>,
}

impl AchieveReport {
    pub fn success_rate(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.success).count() as f64 / self.trials.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RESULTS_HEADER);
        s.push('\n');
        for t in &self.trials {
            let _ = writeln!(s, "{},{},{},{}", t.task_id, t.trial, t.retrieved_rank, u8::from(t.success));
        }
        s
    }
}

pub fn parse_results_csv(text: &str) -> Result<Vec<TrialResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Format("results file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad results row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TrialResult {
                task_id: f[0].to_string(),
                trial: f[1].parse().map_err(|_| bad())?,
                retrieved_rank: f[2].parse().map_err(|_| bad())?,
                success: f[3] == "1",
            })
        })
        .collect()
}

fn refine(
    model: &WorldModel,
    start: &LatentState,
    goal_feature: &[f64],
    init: &[Vec<f64>],
    cfg: &CemConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let cem = CemConfig {
        horizon: init.len(),
        ..*cfg
    };
    let mut scorer = GoalScorer {
        model,
        start,
        goal_feature,
        feature,
        mode: cem.imagine,
    };
    let r = cem_plan(&mut scorer, &cem, ACTION_DIM, Some(init), seed)?;
    // the retrieved sequence stays unless refinement imagines something closer
    let pop = |seq: &[Vec<f64>]| -> Vec<Tensor> { seq.iter().map(|a| Tensor::row_vector(a)).collect() };
    let ours = scorer.score(&pop(&r.best_actions), &[seed])?[0];
    let theirs = scorer.score(&pop(init), &[seed])?[0];
    Ok(if ours > theirs { r.best_actions } else { init.to_vec() })
}

/// Runs the retrieval-and-refine protocol and scores the final state of every trial.
pub fn achieve(
    task: &Task,
    trajs: &[Trajectory],
    model: Option<&WorldModel>,
    goal: &GoalSpec,
    cfg: &AchieveConfig,
    seed: u64,
) -> Result<AchieveReport> {
    let goal_feature = goal.feature();
    let ranked = knn_retrieve(trajs, &goal_feature, cfg.top_k)?;
    let sim = &task.sim;
    let mut trials = Vec::with_capacity(ranked.len() * cfg.trials_per_trajectory);
    for (rank, hit) in ranked.iter().enumerate() {
        let traj = &trajs[hit.index];
        let region = sim.region(&traj.meta.region_id)?;
        let n = hit.frame.max(1).min(traj.len());
        let init: Vec<Vec<f64>> = traj.frames[..n].iter().map(|f| f.action.clone()).collect();
        for k in 0..cfg.trials_per_trajectory {
            let trial = trials.len();
            let mut state = sim.reset(&region, traj.meta.seed)?;
            let plan = match model {
                Some(m) if cfg.refine.iterations > 0 => {
                    let obs: Vec<f64> = sim.render(&state).downsampled(m.config().obs_side)?;
                    // match the f32 precision frames are stored at
                    let obs: Vec<f64> = obs.iter().map(|&v| f64::from(v as f32)).collect();
                    let e = m.encode(&obs)?;
                    let start = m.posterior_step::<ChaCha8Rng>(
                        &LatentState::initial(m.config()),
                        &[0.0; ACTION_DIM],
                        &e,
                        None,
                    )?;
                    refine(m, &start, &goal_feature, &init, &cfg.refine, derive_seed(seed, "achieve", trial as u64))?
                }
                _ => init.clone(),
            };
            for a in &plan {
                state = sim.step(&state, &Action::from_slice(a).clamped());
            }
            trials.push(TrialResult {
                task_id: goal.task_id.clone(),
                trial,
                retrieved_rank: rank + 1,
                success: sim.success(&state, &goal.task_id)?,
            });
            log::debug!("trial {trial} (rank {}, repeat {k}) done", rank + 1);
        }
    }
    Ok(AchieveReport { trials })
}
