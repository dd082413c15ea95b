//! Run configuration: a TOML file with one section per concern, every
//! field optional with documented defaults, overridable from the command
//! line. Invalid values map to the configuration error (exit code 2).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BundleParams, Model, ModelA, ModelB, ModelC, ModelId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub channels: ChannelSection,
    pub tolerances: ToleranceSection,
    pub pde: PdeSection,
    pub debug: DebugSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            model: ModelSection::default(),
            channels: ChannelSection::default(),
            tolerances: ToleranceSection::default(),
            pde: PdeSection::default(),
            debug: DebugSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub experiment: String,
    pub model: String,
    pub t_a: f64,
    pub t: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub workers: usize,
    pub antithetic: bool,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            experiment: "geometry-audit".into(),
            model: "A".into(),
            t_a: 0.0,
            t: 0.25,
            dt: 1e-3,
            paths: 20_000,
            seed: 42,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            antithetic: false,
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub r1: f64,
    pub r2: f64,
    /// U(1) representation charge for models A and B.
    pub charge: f64,
    pub v_fiber: f64,
    pub v_base: f64,
    pub mu: f64,
    pub kappa: f64,
    pub mass: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            v_fiber: 0.0,
            v_base: 0.0,
            mu: 1.0,
            kappa: 1.0,
            mass: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    /// U(1) charges to include (|n| ≤ 8 supported).
    pub u1: Vec<i32>,
    /// Twice the SU(2) spins to include (0, 1, 2).
    pub su2_two_j: Vec<u32>,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            u1: (-4..=4).collect(),
            su2_two_j: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSection {
    pub algebraic: f64,
    pub finite_difference: f64,
    pub lie_derivative: f64,
    pub abelian_collapse: f64,
    pub relative: f64,
    pub sigma_level: f64,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        ToleranceSection {
            algebraic: 1e-10,
            finite_difference: 1e-6,
            lie_derivative: 1e-5,
            abelian_collapse: 1e-3,
            relative: 0.05,
            sigma_level: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSection {
    pub nx: usize,
    pub nf: usize,
    pub l: f64,
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            nx: 64,
            nf: 49,
            l: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebugSection {
    /// Dump the first k paths of each Monte Carlo ensemble as versioned
    /// binary files under out_dir.
    pub dump_paths: usize,
}

impl Default for DebugSection {
    fn default() -> Self {
        DebugSection { dump_paths: 0 }
    }
}

pub const EXPERIMENTS: [&str; 7] = [
    "geometry-audit",
    "sde-convergence",
    "filtering-audit",
    "girsanov-audit",
    "reduction-identity",
    "channel-consistency",
    "pde-cross-check",
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENTS.contains(&self.run.experiment.as_str()) {
            return Err(Error::Config(format!(
                "unknown experiment '{}'; known: {}",
                self.run.experiment,
                EXPERIMENTS.join(", ")
            )));
        }
        if !["A", "B", "C"].contains(&self.run.model.as_str()) {
            return Err(Error::Config(format!(
                "unknown model '{}'; known: A, B, C",
                self.run.model
            )));
        }
        for (name, v) in [
            ("run.t", self.run.t),
            ("run.dt", self.run.dt),
            ("model.r1", self.model.r1),
            ("model.r2", self.model.r2),
            ("model.mu", self.model.mu),
            ("model.kappa", self.model.kappa),
            ("model.mass", self.model.mass),
            ("pde.l", self.pde.l),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.run.t_a < 0.0 || self.run.t_a >= self.run.t {
            return Err(Error::Config(format!(
                "need 0 <= t_a < t, got t_a = {}, t = {}",
                self.run.t_a, self.run.t
            )));
        }
        if self.run.paths == 0 || self.run.workers == 0 {
            return Err(Error::Config("paths and workers must be positive".into()));
        }
        if self.channels.u1.iter().any(|n| n.abs() > 8) {
            return Err(Error::Config("U(1) channels limited to |n| <= 8".into()));
        }
        if self.channels.su2_two_j.iter().any(|j| *j > 2) {
            return Err(Error::Config("SU(2) channels limited to 2j <= 2".into()));
        }
        if self.pde.nx < 8 || self.pde.nf < 9 {
            return Err(Error::Config("pde grid too coarse (nx >= 8, nf >= 9)".into()));
        }
        Ok(())
    }

    pub fn model_id(&self) -> ModelId {
        match self.run.model.as_str() {
            "A" => ModelId::A,
            "B" => ModelId::B,
            _ => ModelId::C,
        }
    }

    /// Instantiate the configured model.
    pub fn build_model(&self) -> Box<dyn Model> {
        let params = BundleParams {
            mu: self.model.mu,
            kappa: self.model.kappa,
            mass: self.model.mass,
        };
        match self.model_id() {
            ModelId::A => Box::new(ModelA {
                r1: self.model.r1,
                r2: self.model.r2,
                charge: self.model.charge,
                v_fiber: self.model.v_fiber,
                v_base: self.model.v_base,
                params,
            }),
            ModelId::B => Box::new(ModelB {
                charge: self.model.charge,
                v_fiber: self.model.v_fiber,
                params,
            }),
            _ => Box::new(ModelC {
                v_fiber: self.model.v_fiber,
                params,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_partial_toml() {
        let cfg = RunConfig::from_toml(
            r#"
[run]
experiment = "reduction-identity"
model = "A"
t = 0.5
paths = 1000

[model]
charge = 2.0
"#,
        )
        .unwrap();
        assert_eq!(cfg.run.experiment, "reduction-identity");
        assert_eq!(cfg.model.charge, 2.0);
        assert_eq!(cfg.model.r1, 1.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[run]\nexperiment = \"nope\"").is_err());
        assert!(RunConfig::from_toml("[run]\ndt = -1.0").is_err());
        assert!(RunConfig::from_toml("[run]\nunknown_key = 1").is_err());
        assert!(RunConfig::from_toml("not toml at all [").is_err());
    }
}
