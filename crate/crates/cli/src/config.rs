//! Run configuration: a TOML file with one section per stage. Every field has
//! a default, and command-line flags override the file.

use std::path::{Path, PathBuf};

use npeb_core::discrimination::{CallbackModel, Profile};
use npeb_core::identification::IdentificationConfig;
use npeb_core::models::{Grid1D, ModelSpec, MoveKind};
use npeb_core::solver::{ConsistencyConfig, SolveConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// `{1/(n+1), ..., n/(n+1)}`.
    UniformOpen { n: usize },
    Linspace { lo: f64, hi: f64, n: usize },
    Points { points: Vec<f64> },
}

impl GridSpec {
    pub fn build(&self) -> npeb_core::Result<Grid1D> {
        match self {
            GridSpec::UniformOpen { n } => Grid1D::uniform_open(*n),
            GridSpec::Linspace { lo, hi, n } => Grid1D::linspace(*lo, *hi, *n),
            GridSpec::Points { points } => Grid1D::new(points.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndependenceSection {
    pub n_sim: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub move_kind: MoveKind,
}

impl Default for IndependenceSection {
    fn default() -> Self {
        IndependenceSection { n_sim: 100_000, burn_in: 2000, thin: 50, move_kind: MoveKind::Line }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub grids: Vec<GridSpec>,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            grids: [9, 99, 999].iter().map(|&n| GridSpec::UniformOpen { n }).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    /// Counts CSV (`outcome,count`) for solve/diagnose/refine, or a callback
    /// CSV (`c_f,c_m,count`) for discrimination/independence.
    pub data: Option<PathBuf>,
    /// Inline counts, used when `data` is absent.
    pub counts: Option<Vec<u64>>,
    pub model: Option<ModelSpec>,
    pub grid: Option<GridSpec>,
    pub callback_model: CallbackModel,
    /// Directory for cached density matrices; caching is off when unset.
    pub cache_dir: Option<PathBuf>,
    pub solve: SolveConfig,
    pub identification: IdentificationConfig,
    pub independence: IndependenceSection,
    pub refine: RefineSection,
    pub consistency: ConsistencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            profile: Profile::Desk,
            data: None,
            counts: None,
            model: None,
            grid: None,
            callback_model: CallbackModel::Frechet,
            cache_dir: None,
            solve: SolveConfig::default(),
            identification: IdentificationConfig::default(),
            independence: IndependenceSection::default(),
            refine: RefineSection::default(),
            consistency: ConsistencyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
