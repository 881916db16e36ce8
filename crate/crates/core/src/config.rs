//! Run configuration: one TOML section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::awrpolicy::AwrConfig;
use crate::changemetric::ChangeConfig;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::planner::{CemConfig, ImagineMode, Objective};
use crate::simworld::SceneConfig;
use crate::worldmodel::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    /// Built-in scene name, used when `file` is absent.
    pub name: String,
    pub file: Option<PathBuf>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            name: "kitchen1".into(),
            file: None,
        }
    }
}

impl SceneSection {
    pub fn resolve(&self, base: Option<&Path>) -> Result<SceneConfig> {
        match &self.file {
            Some(f) => {
                let path = match base {
                    Some(b) if f.is_relative() => b.join(f),
                    _ => f.clone(),
                };
                SceneConfig::load(&path)
            }
            None => SceneConfig::builtin(&self.name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    pub init_std: f64,
    pub min_std: f64,
    pub imagine: ImagineMode,
    pub w_ec: f64,
    pub w_dis: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let c = CemConfig::default();
        Self {
            horizon: c.horizon,
            population: c.population,
            elite_frac: c.elite_frac,
            iterations: c.iterations,
            init_std: c.init_std,
            min_std: c.min_std,
            imagine: c.imagine,
            w_ec: 1.0,
            w_dis: 1.0,
        }
    }
}

impl PlannerConfig {
    pub fn cem(&self) -> CemConfig {
        CemConfig {
            horizon: self.horizon,
            population: self.population,
            elite_frac: self.elite_frac,
            iterations: self.iterations,
            init_std: self.init_std,
            min_std: self.min_std,
            imagine: self.imagine,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective::new(self.w_ec, self.w_dis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepCheckpoints {
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorerConfig {
    pub episode_len: usize,
    pub bootstrap: usize,
    pub budget: usize,
    pub episodes_per_cycle: usize,
    pub wm_steps: usize,
    pub ensemble_steps: usize,
    pub awr_steps: usize,
    /// Window length of world-model training sequences.
    pub seq_len: usize,
    /// Train on a background thread while the sampler uses the previous cycle's models.
    pub concurrent: bool,
    pub keep_checkpoints: KeepCheckpoints,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        Self {
            episode_len: 20,
            bootstrap: 25,
            budget: 125,
            episodes_per_cycle: 5,
            wm_steps: 500,
            ensemble_steps: 200,
            awr_steps: 200,
            seq_len: 20,
            concurrent: false,
            keep_checkpoints: KeepCheckpoints::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub methods: Vec<String>,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    /// Retrieved trajectories per goal.
    pub top_k: usize,
    /// Trials per retrieved trajectory.
    pub trials_per_trajectory: usize,
    /// CEM iterations when refining retrieved actions.
    pub refine_iterations: usize,
    pub refine_std: f64,
    /// Run goal-reaching trials after exploration.
    pub achieve: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            methods: vec!["alan".into(), "ec".into(), "awr".into(), "lexa".into(), "icm".into(), "random".into()],
            tasks: vec!["door".into(), "knife".into()],
            seeds: vec![1, 2, 3, 4, 5],
            top_k: 2,
            trials_per_trajectory: 5,
            refine_iterations: 2,
            refine_std: 0.1,
            achieve: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSection,
    pub change: ChangeConfig,
    pub model: ModelConfig,
    pub ensemble: EnsembleConfig,
    pub planner: PlannerConfig,
    pub awr: AwrConfig,
    pub explorer: ExplorerConfig,
    pub benchmark: BenchmarkConfig,
    /// Directory relative scene paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Config {
    /// Desk-scale preset: narrower networks and shorter training blocks.
    pub fn fast() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            embed_dim: 64,
            deter_dim: 32,
            stoch_dim: 8,
            hidden: 64,
            lr: 1e-3,
            ..ModelConfig::default()
        };
        c.ensemble.hidden = 32;
        c.awr.hidden = 32;
        c.planner.population = 32;
        c.planner.iterations = 3;
        c.explorer.wm_steps = 200;
        c.explorer.ensemble_steps = 100;
        c.explorer.awr_steps = 100;
        c.explorer.keep_checkpoints = KeepCheckpoints::Last;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::from_toml_str(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf);
        c.scene()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        self.scene.resolve(self.base_dir.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.change.validate()?;
        self.model.validate()?;
        self.ensemble.validate()?;
        self.planner.cem().validate()?;
        self.planner.objective().validate()?;
        self.awr.validate()?;
        let e = &self.explorer;
        if e.episode_len == 0 || e.bootstrap == 0 || e.episodes_per_cycle == 0 {
            return Err(Error::Config("episode_len, bootstrap and episodes_per_cycle must be >= 1".into()));
        }
        if e.seq_len < 2 || e.seq_len > e.episode_len {
            return Err(Error::Config("seq_len must be in 2..=episode_len".into()));
        }
        if self.planner.horizon > e.episode_len {
            return Err(Error::Config("planner horizon exceeds the episode length".into()));
        }
        let b = &self.benchmark;
        if b.top_k == 0 || b.trials_per_trajectory == 0 {
            return Err(Error::Config("top_k and trials_per_trajectory must be >= 1".into()));
        }
        for m in &b.methods {
            m.parse::<crate::explorer::Method>()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = Config::default();
        let text = c.to_toml_string();
        for section in ["[scene]", "[change]", "[model]", "[ensemble]", "[planner]", "[awr]", "[explorer]", "[benchmark]"] {
            assert!(text.contains(section), "{section}");
        }
        assert_eq!(Config::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = Config::from_toml_str("[planner]\nw_dis = 0.0\n").unwrap();
        assert_eq!(c.planner.w_dis, 0.0);
        assert_eq!(c.explorer.budget, 125);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "[planner]\nhorizon = 0\n",
            "[explorer]\nbudgett = 3\n",
            "[benchmark]\nmethods = [\"greedy\"]\n",
            "[scene]\nname = \"attic\"\n",
            "not toml",
        ] {
            let r = Config::from_toml_str(text).and_then(|c| c.scene().map(|_| c));
            assert!(r.unwrap_err().is_config(), "{text}");
        }
    }
}
