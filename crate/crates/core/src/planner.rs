//! Cross-entropy-method planning through the world model.
//!
//! [`cem_plan`] is generic over a [`Scorer`] so the same optimiser serves the
//! exploration objective, the latent-disagreement baseline, goal reaching and
//! analytic test surrogates. Candidates are scored as rows of one batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::worldmodel::{LatentState, WorldModel};

/// How stochastic latents are drawn while scoring candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagineMode {
    /// One prior sample per candidate from its own seed.
    Sample,
    /// Prior means only.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub horizon: usize,
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    pub init_std: f64,
    pub min_std: f64,
    pub imagine: ImagineMode,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            population: 64,
            elite_frac: 0.1,
            iterations: 4,
            init_std: 0.5,
            min_std: 0.05,
            imagine: ImagineMode::Sample,
        }
    }
}

impl CemConfig {
    pub fn elites(&self) -> usize {
        (self.population as f64 * self.elite_frac).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("planner horizon must be >= 1".into()));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) || self.elites() < 2 {
            return Err(Error::Config("population * elite_frac must be at least 2".into()));
        }
        if self.init_std <= 0.0 || self.min_std < 0.0 {
            return Err(Error::Config("init_std must be > 0 and min_std >= 0".into()));
        }
        Ok(())
    }
}

/// Scores a population of action sequences.
///
/// `actions[t]` holds the step-`t` actions of every candidate, one per row;
/// `seeds[p]` is candidate `p`'s private sampling seed.
pub trait Scorer {
    fn score(&mut self, actions: &[Tensor], seeds: &[u64]) -> Result<Vec<f64>>;
}

/// Adapts a per-candidate closure into a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: FnMut(&[Vec<f64>]) -> f64> Scorer for FnScorer<F> {
    fn score(&mut self, actions: &[Tensor], _seeds: &[u64]) -> Result<Vec<f64>> {
        let p = actions[0].rows;
        Ok((0..p)
            .map(|r| {
                let seq: Vec<Vec<f64>> = actions.iter().map(|a| a.row(r).to_vec()).collect();
                (self.0)(&seq)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemResult {
    /// Final sampling mean, clamped to the action box.
    pub actions: Vec<Vec<f64>>,
    /// Best elite score after each iteration.
    pub best_scores: Vec<f64>,
    pub best_actions: Vec<Vec<f64>>,
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Iteratively refits a diagonal Gaussian over action sequences to its elites.
pub fn cem_plan<S: Scorer + ?Sized>(
    scorer: &mut S,
    cfg: &CemConfig,
    action_dim: usize,
    init_mean: Option<&[Vec<f64>]>,
    seed: u64,
) -> Result<CemResult> {
    cfg.validate()?;
    let h = cfg.horizon;
    let mut mean: Vec<Vec<f64>> = match init_mean {
        Some(m) => {
            if m.len() != h || m.iter().any(|a| a.len() != action_dim) {
                return Err(Error::dims(format!("{h} actions of dim {action_dim}"), m.len()));
            }
            m.iter().map(|a| a.iter().map(|&v| clamp_unit(v)).collect()).collect()
        }
        None => vec![vec![0.0; action_dim]; h],
    };
    let mut std = vec![vec![cfg.init_std; action_dim]; h];
    let p = cfg.population;
    let n_elite = cfg.elites();
    let mut best: Option<(Vec<Vec<f64>>, u64, f64)> = None;
    let mut best_scores = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cem.sample", it as u64));
        let mut seeds: Vec<u64> = (0..p)
            .map(|i| derive_seed(seed, "cem.candidate", (it * p + i) as u64))
            .collect();
        let mut cands: Vec<Tensor> = (0..h)
            .map(|t| {
                let mut data = Vec::with_capacity(p * action_dim);
                for _ in 0..p {
                    for d in 0..action_dim {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        data.push(clamp_unit(mean[t][d] + std[t][d] * eps));
                    }
                }
                Tensor::from_vec(p, action_dim, data)
            })
            .collect();
        // elitism: the incumbent keeps its slot and its seed
        if let Some((seq, s, _)) = &best {
            for t in 0..h {
                cands[t].row_mut(0).copy_from_slice(&seq[t]);
            }
            seeds[0] = *s;
        }
        let mut scores = scorer.score(&cands, &seeds)?;
        if let Some((_, _, s)) = &best {
            scores[0] = *s;
        }
        let mut order: Vec<usize> = (0..p).filter(|&i| !scores[i].is_nan()).collect();
        if order.len() < n_elite {
            return Err(Error::DegenerateElites);
        }
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let elites = &order[..n_elite];
        let top = elites[0];
        best = Some((
            (0..h).map(|t| cands[t].row(top).to_vec()).collect(),
            seeds[top],
            scores[top],
        ));
        best_scores.push(scores[top]);
        for t in 0..h {
            for d in 0..action_dim {
                let m = elites.iter().map(|&i| cands[t].get(i, d)).sum::<f64>() / n_elite as f64;
                let v = elites.iter().map(|&i| (cands[t].get(i, d) - m).powi(2)).sum::<f64>() / n_elite as f64;
                mean[t][d] = m;
                std[t][d] = v.sqrt().max(cfg.min_std);
            }
        }
    }
    let actions: Vec<Vec<f64>> = mean
        .iter()
        .map(|a| a.iter().map(|&v| clamp_unit(v)).collect())
        .collect();
    let best_actions = best.map_or_else(|| actions.clone(), |(seq, _, _)| seq);
    Ok(CemResult {
        actions,
        best_scores,
        best_actions,
    })
}

/// Running statistics used to rescale objective terms.
///
/// Exact for the first `WINDOW` values, then exponentially forgetting with the
/// same weight, so a term whose scale shrinks as its models train (disagreement)
/// is not measured against its early magnitude forever.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: u64,
    pub mean: f64,
    /// Population variance over the (weighted) window.
    pub var: f64,
}

impl RunningNorm {
    pub const STD_FLOOR: f64 = 1e-6;
    pub const WINDOW: u64 = 20;

    pub fn update(&mut self, x: f64) {
        if !x.is_finite() {
            return;
        }
        self.count += 1;
        let w = 1.0 / self.count.min(Self::WINDOW) as f64;
        let d = x - self.mean;
        self.mean += w * d;
        self.var = (1.0 - w) * (self.var + w * d * d);
    }

    /// Sample standard deviation; 1 until two values have been seen.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        let n = self.count.min(Self::WINDOW) as f64;
        (self.var * n / (n - 1.0)).sqrt().max(Self::STD_FLOOR)
    }
}

/// Raw (unnormalised) objective terms of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub change: f64,
    pub disagreement: f64,
}

/// Weighted, normalised sum of the environment-change and disagreement terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub w_ec: f64,
    pub w_dis: f64,
    pub ec_norm: RunningNorm,
    pub dis_norm: RunningNorm,
}

impl Default for Objective {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl Objective {
    pub fn new(w_ec: f64, w_dis: f64) -> Self {
        Self {
            w_ec,
            w_dis,
            ec_norm: RunningNorm::default(),
            dis_norm: RunningNorm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_ec < 0.0 || self.w_dis < 0.0 {
            return Err(Error::Config("objective weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn combine(&self, t: &ObjectiveTerms) -> f64 {
        let mut v = 0.0;
        if self.w_ec != 0.0 {
            v += self.w_ec * t.change / self.ec_norm.std();
        }
        if self.w_dis != 0.0 {
            v += self.w_dis * t.disagreement / self.dis_norm.std();
        }
        v
    }

    pub fn observe(&mut self, t: &ObjectiveTerms) {
        self.ec_norm.update(t.change);
        self.dis_norm.update(t.disagreement);
    }

    /// Objective of one imagined sequence; `latents` includes the start state.
    pub fn evaluate(
        &self,
        model: &WorldModel,
        ensemble: Option<&Ensemble>,
        latents: &[LatentState],
        actions: &[Vec<f64>],
    ) -> Result<f64> {
        Ok(self.combine(&sequence_terms(model, ensemble, latents, actions)?))
    }
}

/// Raw objective terms of a single latent sequence.
pub fn sequence_terms(
    model: &WorldModel,
    ensemble: Option<&Ensemble>,
    latents: &[LatentState],
    actions: &[Vec<f64>],
) -> Result<ObjectiveTerms> {
    if latents.len() != actions.len() + 1 {
        return Err(Error::dims(actions.len() + 1, latents.len()));
    }
    let mut terms = ObjectiveTerms::default();
    let changes: Vec<Vec<f64>> = latents.iter().map(|s| model.predict_change(s)).collect();
    for (t, a) in actions.iter().enumerate() {
        let c = &changes[t + 1];
        terms.change += c.iter().sum::<f64>() / c.len() as f64;
        if let Some(e) = ensemble {
            terms.disagreement += e.disagreement(&changes[t], a)?;
        }
    }
    Ok(terms)
}

/// Per-candidate noise for `Sample` mode: `[t]` is `P x stoch_dim`.
pub fn candidate_noise(seeds: &[u64], horizon: usize, stoch: usize) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = (0..horizon).map(|_| Tensor::zeros(seeds.len(), stoch)).collect();
    for (p, &s) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        for step in out.iter_mut() {
            for v in step.row_mut(p) {
                *v = StandardNormal.sample(&mut rng);
            }
        }
    }
    out
}

/// Imagined features `[0..=H]` for a population, honouring the imagine mode.
pub fn imagine_population(
    model: &WorldModel,
    start: &LatentState,
    actions: &[Tensor],
    seeds: &[u64],
    mode: ImagineMode,
) -> Vec<Tensor> {
    match mode {
        ImagineMode::Mean => model.imagine_batch(start, actions, None),
        ImagineMode::Sample => {
            let noise = candidate_noise(seeds, actions.len(), model.config().stoch_dim);
            model.imagine_batch(start, actions, Some(&noise))
        }
    }
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols;
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(data.len() / cols, cols, data)
}

/// Exploration objective over imagined rollouts.
pub struct ExplorationScorer<'a> {
    pub model: &'a WorldModel,
    pub ensemble: Option<&'a Ensemble>,
    pub objective: &'a Objective,
    pub start: &'a LatentState,
    pub mode: ImagineMode,
    /// Raw terms of every candidate scored so far.
    pub seen: Vec<ObjectiveTerms>,
}

impl<'a> ExplorationScorer<'a> {
    pub fn new(
        model: &'a WorldModel,
        ensemble: Option<&'a Ensemble>,
        objective: &'a Objective,
        start: &'a LatentState,
        mode: ImagineMode,
    ) -> Self {
        Self {
            model,
            ensemble,
            objective,
            start,
            mode,
            seen: Vec::new(),
        }
    }

    /// Raw terms for each candidate.
    pub fn terms(&self, actions: &[Tensor], seeds: &[u64]) -> Result<Vec<ObjectiveTerms>> {
        let p = actions[0].rows;
        let h = actions.len();
        let feats = imagine_population(self.model, self.start, actions, seeds, self.mode);
        let probs = self.model.predict_change_batch(&stack(&feats));
        let px = probs.cols;
        let mut terms = vec![ObjectiveTerms::default(); p];
        for t in 1..=h {
            for (r, term) in terms.iter_mut().enumerate() {
                let row = probs.row(t * p + r);
                term.change += row.iter().sum::<f64>() / px as f64;
            }
        }
        let use_dis = self.ensemble.is_some() && self.objective.w_dis != 0.0;
        if let (true, Some(ens)) = (use_dis, self.ensemble) {
            let states = probs.rows_range(0, h * p);
            let acts = stack(actions);
            let dis = ens.disagreement_batch(&states, &acts)?;
            for t in 0..h {
                for (r, term) in terms.iter_mut().enumerate() {
                    term.disagreement += dis[t * p + r];
                }
            }
        }
        Ok(terms)
    }
}

impl Scorer for ExplorationScorer<'_> {
    fn score(&mut self, actions: &[Tensor], seeds: &[u64]) -> Result<Vec<f64>> {
        let terms = self.terms(actions, seeds)?;
        let scores = terms.iter().map(|t| self.objective.combine(t)).collect();
        self.seen.extend(terms);
        Ok(scores)
    }
}

/// Latent-ensemble disagreement summed over the horizon.
pub struct LatentDisagreementScorer<'a> {
    pub model: &'a WorldModel,
    pub ensemble: &'a Ensemble,
    pub start: &'a LatentState,
    pub mode: ImagineMode,
}

impl Scorer for LatentDisagreementScorer<'_> {
    fn score(&mut self, actions: &[Tensor], seeds: &[u64]) -> Result<Vec<f64>> {
        let p = actions[0].rows;
        let h = actions.len();
        let feats = imagine_population(self.model, self.start, actions, seeds, self.mode);
        let states = stack(&feats[..h]);
        let dis = self.ensemble.disagreement_batch(&states, &stack(actions))?;
        Ok((0..p).map(|r| (0..h).map(|t| dis[t * p + r]).sum()).collect())
    }
}

/// Negative feature distance between the final decoded image and a goal.
pub struct GoalScorer<'a> {
    pub model: &'a WorldModel,
    pub start: &'a LatentState,
    pub goal_feature: &'a [f64],
    pub feature: fn(&[f64]) -> Vec<f64>,
    pub mode: ImagineMode,
}

impl Scorer for GoalScorer<'_> {
    fn score(&mut self, actions: &[Tensor], seeds: &[u64]) -> Result<Vec<f64>> {
        let feats = imagine_population(self.model, self.start, actions, seeds, self.mode);
        let images = self.model.decode_image_batch(feats.last().expect("horizon >= 1"));
        Ok((0..images.rows)
            .map(|r| {
                let f = (self.feature)(images.row(r));
                -f.iter()
                    .zip(self.goal_feature)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleConfig;
    use crate::worldmodel::ModelConfig;

    #[test]
    fn zero_iterations_return_init_mean() {
        let cfg = CemConfig {
            iterations: 0,
            horizon: 2,
            ..CemConfig::default()
        };
        let init = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.0, 0.5, 2.0]];
        let mut s = FnScorer(|_: &[Vec<f64>]| 0.0);
        let r = cem_plan(&mut s, &cfg, 4, Some(&init), 1).unwrap();
        assert_eq!(r.actions, vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.0, 0.5, 1.0]]);
        let r = cem_plan(&mut s, &cfg, 4, None, 1).unwrap();
        assert_eq!(r.actions, vec![vec![0.0; 4]; 2]);
    }

    #[test]
    fn quadratic_surrogate_finds_interior_optimum() {
        let cfg = CemConfig {
            horizon: 1,
            iterations: 10,
            ..CemConfig::default()
        };
        let target = [0.3, -0.6, 0.1, 0.75];
        let mut s = FnScorer(|seq: &[Vec<f64>]| -seq[0].iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
        for seed in 0..5 {
            let r = cem_plan(&mut s, &cfg, 4, None, seed).unwrap();
            for (a, b) in r.actions[0].iter().zip(&target) {
                assert!((a - b).abs() < 0.05, "seed {seed}: {:?}", r.actions[0]);
            }
        }
    }

    #[test]
    fn elite_scores_never_decrease_and_plans_repeat() {
        let cfg = CemConfig {
            horizon: 3,
            iterations: 6,
            ..CemConfig::default()
        };
        let mut s = FnScorer(|seq: &[Vec<f64>]| seq.iter().flatten().map(|v| (3.0 * v).sin()).sum::<f64>());
        let a = cem_plan(&mut s, &cfg, 4, None, 9).unwrap();
        assert!(a.best_scores.windows(2).all(|w| w[1] >= w[0]));
        assert!(a.actions.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, cem_plan(&mut s, &cfg, 4, None, 9).unwrap());
    }

    #[test]
    fn all_nan_scores_are_rejected() {
        let mut s = FnScorer(|_: &[Vec<f64>]| f64::NAN);
        assert!(matches!(
            cem_plan(&mut s, &CemConfig::default(), 4, None, 0),
            Err(Error::DegenerateElites)
        ));
    }

    #[test]
    fn config_rejects_tiny_elite_sets() {
        let cfg = CemConfig {
            population: 10,
            ..CemConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn running_norm_matches_sample_std() {
        let mut n = RunningNorm::default();
        assert_eq!(n.std(), 1.0);
        for x in [1.0, 2.0, 4.0, 7.0] {
            n.update(x);
        }
        let mean = 3.5;
        let var = [1.0f64, 2.0, 4.0, 7.0].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((n.std() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn running_norm_forgets_an_old_scale() {
        let mut n = RunningNorm::default();
        for i in 0..100 {
            n.update(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        for i in 0..400 {
            n.update(if i % 2 == 0 { 1e-3 } else { -1e-3 });
        }
        assert!((n.std() / 1e-3 - 1.0).abs() < 0.1, "{}", n.std());
    }

    fn setup() -> (WorldModel, Ensemble) {
        let m = WorldModel::new(ModelConfig::tiny(8), 3).unwrap();
        let cfg = EnsembleConfig {
            members: 3,
            hidden: 8,
            ..EnsembleConfig::default()
        };
        (m, Ensemble::change(cfg, 1024, 4, 4).unwrap())
    }

    #[test]
    fn batched_scores_match_sequence_objective() {
        let (m, e) = setup();
        let obj = Objective::default();
        let start = LatentState::initial(m.config());
        let acts = vec![vec![0.2, -0.4, 0.0, 0.9], vec![0.7, 0.1, -0.3, -0.9]];
        let latents: Vec<LatentState> = std::iter::once(start.clone())
            .chain(m.imagine(&start, &acts, None).unwrap())
            .collect();
        let single = obj.evaluate(&m, Some(&e), &latents, &acts).unwrap();
        let mut sc = ExplorationScorer::new(&m, Some(&e), &obj, &start, ImagineMode::Mean);
        let pop: Vec<Tensor> = acts.iter().map(|a| Tensor::row_vector(a).repeat_rows(2)).collect();
        let scores = sc.score(&pop, &[0, 1]).unwrap();
        assert!((scores[0] - single).abs() < 1e-12 && scores[0] == scores[1]);
        assert!(obj.evaluate(&m, Some(&e), &latents[..2], &acts).is_err());
    }

    #[test]
    fn objective_weights_select_terms() {
        let (m, mut e) = setup();
        let start = LatentState::initial(m.config());
        let acts = vec![vec![0.5; 4]; 3];
        let latents: Vec<LatentState> = std::iter::once(start.clone())
            .chain(m.imagine(&start, &acts, None).unwrap())
            .collect();
        let terms = sequence_terms(&m, Some(&e), &latents, &acts).unwrap();
        let ec_only = Objective::new(1.0, 0.0).evaluate(&m, Some(&e), &latents, &acts).unwrap();
        assert_eq!(ec_only, terms.change);
        // additivity over time
        let head = sequence_terms(&m, Some(&e), &latents[..2], &acts[..1]).unwrap();
        let tail = sequence_terms(&m, Some(&e), &latents[1..], &acts[1..]).unwrap();
        assert!((head.change + tail.change - terms.change).abs() < 1e-12);
        e.clone_member(0, 1);
        e.clone_member(0, 2);
        let dis_only = Objective::new(0.0, 1.0).evaluate(&m, Some(&e), &latents, &acts).unwrap();
        assert_eq!(dis_only, 0.0);
    }
}
