//! Run configuration: one TOML document, flag overrides applied on top,
//! everything validated before any compute starts.

use std::path::{Path, PathBuf};

use qramp_core::models::{
    FermionModelParams, ThreeComponentParams, TwoQubitParams, K40_LI6_MASS_RATIO,
};
use qramp_core::optimizer::{BfgsOptions, EscalationOptions, OptimizeOptions};
use qramp_core::{Error, ModelSpec, RangeScenario, Result, Scenario, Tolerances};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Contact-table cache; tables are rebuilt when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub converge: Option<ConvergeSection>,
    #[serde(default)]
    pub spectrum: Option<SpectrumSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TwoQubit,
    TwoComponent,
    ThreeComponent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub mass_ratio: Option<f64>,
    #[serde(default)]
    pub cutoff_c: Option<usize>,
    #[serde(default)]
    pub cutoff_k: Option<usize>,
    #[serde(default)]
    pub g_spectator: Option<f64>,
}

impl ModelSection {
    pub fn spec(&self) -> Result<ModelSpec> {
        let unused = |name: &str, present: bool| {
            if present {
                Err(Error::Validation(format!(
                    "model.{name} does not apply to family {:?}",
                    self.family
                )))
            } else {
                Ok(())
            }
        };
        let need_c = || {
            self.cutoff_c
                .ok_or_else(|| Error::Validation("model.cutoff_c is required".into()))
        };
        let spec = match self.family {
            Family::TwoQubit => {
                unused("mass_ratio", self.mass_ratio.is_some())?;
                unused("cutoff_c", self.cutoff_c.is_some())?;
                unused("cutoff_k", self.cutoff_k.is_some())?;
                unused("g_spectator", self.g_spectator.is_some())?;
                ModelSpec::TwoQubit(TwoQubitParams {
                    delta: self.delta.unwrap_or(1.0),
                })
            }
            Family::TwoComponent | Family::ThreeComponent => {
                unused("delta", self.delta.is_some())?;
                let base = FermionModelParams {
                    mass_ratio: self.mass_ratio.unwrap_or(K40_LI6_MASS_RATIO),
                    cutoff_c: need_c()?,
                };
                if self.family == Family::TwoComponent {
                    unused("cutoff_k", self.cutoff_k.is_some())?;
                    unused("g_spectator", self.g_spectator.is_some())?;
                    ModelSpec::TwoComponent(base)
                } else {
                    ModelSpec::ThreeComponent(ThreeComponentParams {
                        base,
                        cutoff_k: self.cutoff_k.ok_or_else(|| {
                            Error::Validation("model.cutoff_k is required".into())
                        })?,
                        g_spectator: self.g_spectator.ok_or_else(|| {
                            Error::Validation("model.g_spectator is required".into())
                        })?,
                    })
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub g1: f64,
    pub g2: f64,
    pub range: [f64; 2],
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Protocol duration for `optimize`.
    pub duration: Option<f64>,
    /// Duration bracket for `qsl`.
    pub bracket: Option<[f64; 2]>,
    pub resolution: f64,
    pub m_schedule: Vec<usize>,
    pub eps_m: f64,
    /// `qsl` with this many knots instead of the M schedule.
    pub fixed_m: Option<usize>,
    /// Extra ranges for a range-widening `qsl` sweep.
    pub range_sweep: Vec<[f64; 2]>,
    pub restarts: usize,
    pub n_samples: usize,
    pub fd_step: f64,
    pub bfgs: BfgsOptions,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let esc = EscalationOptions::default();
        let opt = OptimizeOptions::default();
        Self {
            duration: None,
            bracket: None,
            resolution: 0.01,
            m_schedule: esc.m_schedule,
            eps_m: esc.eps_m,
            fixed_m: None,
            range_sweep: Vec::new(),
            restarts: opt.n_restarts,
            n_samples: opt.n_samples,
            fd_step: opt.fd_step,
            bfgs: opt.bfgs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Outcome record written by `optimize`.
    pub outcome: PathBuf,
    pub sigmas: Vec<f64>,
    #[serde(default = "default_realizations")]
    pub n_realizations: usize,
    #[serde(default)]
    pub clamp_noisy: bool,
}

fn default_realizations() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub outcome: PathBuf,
    #[serde(default)]
    pub cutoffs_c: Vec<usize>,
    #[serde(default)]
    pub cutoffs_k: Vec<usize>,
    /// Deltas above this are flagged.
    #[serde(default = "default_converge_tolerance")]
    pub tolerance: f64,
}

fn default_converge_tolerance() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub g_min: f64,
    pub g_max: f64,
    pub n_points: usize,
    #[serde(default = "default_levels")]
    pub n_levels: usize,
}

fn default_levels() -> usize {
    4
}

impl RunConfig {
    /// Reads `path`, applies `key.path=value` overrides and parses the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(format!("config: {e}")))
    }

    /// SHA-256 of the resolved configuration in canonical JSON. The output
    /// directory is left out so reruns elsewhere carry the same hash.
    pub fn hash(&self) -> String {
        let keyed = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let canonical = serde_json::to_vec(&keyed).expect("config serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let s = self
            .scenario
            .as_ref()
            .ok_or_else(|| Error::Validation("[scenario] section is required".into()))?;
        let range = RangeScenario::new(s.range[0], s.range[1])?;
        Scenario::new(self.model.spec()?, s.g1, s.g2, range, s.threshold)
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        OptimizeOptions {
            n_restarts: self.schedule.restarts,
            seed: self.seed,
            fd_step: self.schedule.fd_step,
            n_samples: self.schedule.n_samples,
            bfgs: self.schedule.bfgs,
        }
    }

    pub fn escalation(&self) -> EscalationOptions {
        EscalationOptions {
            m_schedule: self.schedule.m_schedule.clone(),
            eps_m: self.schedule.eps_m,
            stop_at: None,
        }
    }

    /// Checks shared by every command.
    pub fn validate_common(&self) -> Result<()> {
        self.model.spec()?;
        self.tolerances.validate()?;
        self.escalation().validate()?;
        let s = &self.schedule;
        if s.n_samples < 2 {
            return Err(Error::Validation(
                "schedule.n_samples must be at least 2".into(),
            ));
        }
        if !(s.fd_step > 0.0 && s.fd_step.is_finite()) {
            return Err(Error::Validation(
                "schedule.fd_step must be positive".into(),
            ));
        }
        if !(s.resolution > 0.0 && s.resolution.is_finite()) {
            return Err(Error::Validation(
                "schedule.resolution must be positive".into(),
            ));
        }
        if s.fixed_m == Some(0) {
            return Err(Error::Validation(
                "schedule.fixed_m must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is parsed as TOML and taken as a bare string
/// when that fails.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Validation(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Validation(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
