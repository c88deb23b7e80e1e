//! Experiment configuration, read from TOML.
//!
//! Every field has a default except `kind`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Role;
use crate::dgp::{BackdoorSpriteConfig, DiscreteScm, FrontdoorSpriteConfig, SpriteConfig, ToyGraph};
use crate::error::{Error, Result};
use crate::estimators::{Adjustment, Parameter};
use crate::nn::{AdamConfig, OutputActivation};
use crate::stage1::{FactorSpec, TrainConfig};
use crate::stage2::RegressorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BackdoorDsprite,
    FrontdoorDsprite,
    DiscreteToy,
    CsvBackdoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "defaults::replications")]
    pub replications: usize,
    /// Replication `k` uses seed `seed + k`.
    #[serde(default)]
    pub seed: u64,
    /// Concurrent replications; 0 uses one per core.
    #[serde(default)]
    pub workers: usize,
    /// Sample size per replication (ignored for CSV input).
    #[serde(default = "defaults::n")]
    pub n: usize,
    #[serde(default = "defaults::output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sprite: SpriteConfig,
    #[serde(default)]
    pub backdoor: BackdoorSpriteConfig,
    #[serde(default)]
    pub frontdoor: FrontdoorSpriteConfig,
    #[serde(default)]
    pub toy: ToySettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSettings>,
    #[serde(default)]
    pub stage1: Stage1Settings,
    #[serde(default)]
    pub stage2: Stage2Settings,
    #[serde(default)]
    pub query: QuerySettings,
    #[serde(default)]
    pub ground_truth: GroundTruthSettings,
    /// Directory relative paths in the file are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod defaults {
    use std::path::PathBuf;

    pub fn replications() -> usize {
        10
    }
    pub fn n() -> usize {
        5000
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("results")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySettings {
    pub graph: ToyGraph,
    /// Seed of the random probability tables; shared by all replications.
    pub tables_seed: u64,
    pub noise_std: f64,
    /// Explicit model; overrides `graph` and `tables_seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scm: Option<DiscreteScm>,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            graph: ToyGraph::Backdoor,
            tables_seed: 0,
            noise_std: 0.1,
            scm: None,
        }
    }
}

impl ToySettings {
    pub fn model(&self) -> DiscreteScm {
        self.scm
            .clone()
            .unwrap_or_else(|| DiscreteScm::random(self.graph, self.noise_std, self.tables_seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSettings {
    /// Relative paths are taken from the config file's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Settings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 penalty on feature-map weights.
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge_lambda: Option<f64>,
    pub feature_dim: usize,
    /// Hidden widths of the treatment map; unset picks a size from the input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment_hidden: Option<Vec<usize>>,
    /// Hidden widths of the other maps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariate_hidden: Option<Vec<usize>>,
    pub output: OutputActivation,
    /// Append a constant 1 to every learned feature vector.
    pub constant_feature: bool,
    /// `false` keeps the random initial features and only fits the weight.
    pub train_features: bool,
}

impl Default for Stage1Settings {
    fn default() -> Self {
        Stage1Settings {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ridge_lambda: None,
            feature_dim: 8,
            treatment_hidden: None,
            covariate_hidden: None,
            output: OutputActivation::Identity,
            constant_feature: true,
            train_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Settings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for Stage2Settings {
    fn default() -> Self {
        let r = RegressorConfig::default();
        Stage2Settings {
            hidden: r.hidden,
            epochs: r.epochs,
            batch_size: r.batch_size,
            learning_rate: r.adam.step_size,
            weight_decay: r.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySettings {
    /// Parameters to estimate; unset picks the usual ones for the kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameters: Option<Vec<Parameter>>,
    /// Sprite positions of the query images, crossed into a grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions_x: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions_y: Option<Vec<f64>>,
    /// Sprite position of the conditioning treatment for ATT.
    pub a_prime: [f64; 2],
    /// Explicit treatment values (CSV input).
    pub treatments: Vec<Vec<f64>>,
    /// Explicit conditioning treatments for ATT (CSV input).
    pub conditioning_treatments: Vec<Vec<f64>>,
    /// Explicit confounder values for CATE (CSV input).
    pub confounders: Vec<Vec<f64>>,
}

impl Default for QuerySettings {
    fn default() -> Self {
        QuerySettings {
            parameters: None,
            positions_x: None,
            positions_y: None,
            a_prime: [0.6, 0.6],
            treatments: Vec::new(),
            conditioning_treatments: Vec::new(),
            confounders: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthSettings {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for GroundTruthSettings {
    fn default() -> Self {
        GroundTruthSettings {
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

/// Command-line overrides, applied before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub replications: Option<usize>,
}

impl ExperimentConfig {
    /// Parses and validates a config. `base_dir` anchors relative paths.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &Overrides::default())
    }

    pub fn load_with(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(r) = o.replications {
            self.replications = r;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.stage1.feature_dim == 0 {
            return bad("stage1.feature_dim must be >= 1".into());
        }
        self.stage1_config(0).validate()?;
        self.stage2_config(0).validate()?;
        match self.kind {
            ExperimentKind::BackdoorDsprite | ExperimentKind::FrontdoorDsprite => {
                self.sprite.validate()?;
                if self.ground_truth.mc_samples < 10_000 {
                    return bad("ground_truth.mc_samples must be >= 10000".into());
                }
                let (xs, ys) = self.positions();
                if xs.iter().chain(&ys).chain(&self.query.a_prime).any(|p| !(0.0..=1.0).contains(p)) {
                    return bad("query positions must lie in [0, 1]".into());
                }
            }
            ExperimentKind::DiscreteToy => {
                if let Some(scm) = &self.toy.scm {
                    scm.validate()?;
                }
            }
            ExperimentKind::CsvBackdoor => {
                if self.csv.is_none() {
                    return bad("kind csv-backdoor needs a [csv] section with `path`".into());
                }
                if self.query.treatments.is_empty() {
                    return bad("kind csv-backdoor needs query.treatments".into());
                }
            }
        }
        let params = self.parameters();
        if params.is_empty() {
            return bad("query.parameters must not be empty".into());
        }
        let confounded = self.factor_roles().contains(&Role::ObservedConfounder)
            || (self.kind == ExperimentKind::CsvBackdoor && !self.query.confounders.is_empty());
        for p in &params {
            match p {
                Parameter::Cate if !confounded => {
                    return bad(format!("cate needs an observed confounder, not available for {:?}", self.kind));
                }
                Parameter::Att if self.kind == ExperimentKind::CsvBackdoor && self.query.conditioning_treatments.is_empty() => {
                    return bad("att on CSV input needs query.conditioning_treatments".into());
                }
                Parameter::Cate if self.kind == ExperimentKind::CsvBackdoor && self.query.confounders.is_empty() => {
                    return bad("cate on CSV input needs query.confounders".into());
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn adjustment(&self) -> Adjustment {
        match self.kind {
            ExperimentKind::FrontdoorDsprite => Adjustment::FrontDoor,
            ExperimentKind::DiscreteToy if self.toy_graph().is_frontdoor() => Adjustment::FrontDoor,
            _ => Adjustment::BackDoor,
        }
    }

    pub fn toy_graph(&self) -> ToyGraph {
        self.toy.scm.as_ref().map_or(self.toy.graph, |s| s.graph)
    }

    /// Stage-one factor roles, treatment first. For CSV input the confounder
    /// factor is used when query confounders are given.
    pub fn factor_roles(&self) -> Vec<Role> {
        match self.kind {
            ExperimentKind::BackdoorDsprite => vec![Role::Treatment, Role::BackDoor],
            ExperimentKind::FrontdoorDsprite => vec![Role::Treatment, Role::FrontDoor],
            ExperimentKind::DiscreteToy => self.toy_graph().factor_roles(),
            ExperimentKind::CsvBackdoor if !self.query.confounders.is_empty() => {
                vec![Role::Treatment, Role::ObservedConfounder, Role::BackDoor]
            }
            ExperimentKind::CsvBackdoor => vec![Role::Treatment, Role::BackDoor],
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        if let Some(p) = &self.query.parameters {
            return p.clone();
        }
        match self.kind {
            ExperimentKind::BackdoorDsprite | ExperimentKind::CsvBackdoor => vec![Parameter::Ate],
            ExperimentKind::FrontdoorDsprite => vec![Parameter::Att],
            ExperimentKind::DiscreteToy if self.toy_graph().has_confounder() => {
                vec![Parameter::Ate, Parameter::Att, Parameter::Cate]
            }
            ExperimentKind::DiscreteToy => vec![Parameter::Ate, Parameter::Att],
        }
    }

    /// Query grid axes: 3 × 3 for back-door, 11 × 11 for front-door images.
    pub fn positions(&self) -> (Vec<f64>, Vec<f64>) {
        let default = match self.kind {
            ExperimentKind::FrontdoorDsprite => crate::dgp::unit_linspace(11),
            _ => vec![0.2, 0.5, 0.8],
        };
        (
            self.query.positions_x.clone().unwrap_or_else(|| default.clone()),
            self.query.positions_y.clone().unwrap_or(default),
        )
    }

    pub fn csv_path(&self) -> Option<PathBuf> {
        self.csv.as_ref().map(|c| self.base_dir.join(&c.path))
    }

    pub fn replication_seed(&self, replication: usize) -> u64 {
        self.seed.wrapping_add(replication as u64)
    }

    pub fn factor_specs(&self) -> Vec<FactorSpec> {
        let s = &self.stage1;
        self.factor_roles()
            .into_iter()
            .map(|role| FactorSpec {
                hidden: if role == Role::Treatment {
                    s.treatment_hidden.clone()
                } else {
                    s.covariate_hidden.clone()
                },
                output: s.output,
                frozen: !s.train_features,
                constant_feature: s.constant_feature,
                ..FactorSpec::new(role, s.feature_dim)
            })
            .collect()
    }

    pub fn stage1_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            ridge_lambda: self.stage1.ridge_lambda,
            adam: AdamConfig {
                step_size: self.stage1.learning_rate,
                ..AdamConfig::default()
            },
            epochs: self.stage1.epochs,
            batch_size: self.stage1.batch_size,
            weight_decay: self.stage1.weight_decay,
            seed,
        }
    }

    pub fn stage2_config(&self, seed: u64) -> RegressorConfig {
        RegressorConfig {
            hidden: self.stage2.hidden.clone(),
            epochs: self.stage2.epochs,
            batch_size: self.stage2.batch_size,
            adam: AdamConfig {
                step_size: self.stage2.learning_rate,
                ..AdamConfig::default()
            },
            weight_decay: self.stage2.weight_decay,
            seed,
        }
    }
}
