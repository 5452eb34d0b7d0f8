//! Run specification: one TOML document per experiment.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use noisediv::features::ExtractorId;
use noisediv::generator::{GeneratorKind, GeneratorSpec, RewardSpec};
use noisediv::noise_init::SpectralProfile;
use noisediv::objective::ObjectiveSpec;
use noisediv::optimizer::{Mode, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub seed: u64,
    /// Set size B.
    pub batch: usize,
    /// Spectral exponent of the initial noise.
    #[serde(default)]
    pub alpha: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub generator: GeneratorSpec,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "snake_case", deny_unknown_fields)]
pub enum BridgeSpec {
    Tcp {
        address: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
    Stdio {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}

impl BridgeSpec {
    pub fn timeout(&self) -> Duration {
        let (BridgeSpec::Tcp { timeout_secs, .. } | BridgeSpec::Stdio { timeout_secs, .. }) = self;
        Duration::from_secs_f64(*timeout_secs)
    }
}

/// Cartesian product of values that replace the top-level `alpha`/`seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let spec = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: RunSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            bail!("batch: must be positive");
        }
        if self.batch < 2 {
            bail!("batch: a diversity set needs at least 2 members, got {}", self.batch);
        }
        for (name, v) in [("channels", self.channels), ("height", self.height), ("width", self.width)] {
            if v == 0 {
                bail!("{name}: must be positive");
            }
        }
        SpectralProfile::new(self.alpha).context("alpha")?;
        self.objective.validate().context("objective")?;
        self.optimizer.validate().context("optimizer")?;
        if let Some(sweep) = &self.sweep {
            for &a in &sweep.alpha {
                SpectralProfile::new(a).context("sweep.alpha")?;
            }
        }
        if self.bridge.is_none() && self.needs_bridge() {
            bail!("bridge: the generator, reward or extractor is external but no [bridge] section is given");
        }
        Ok(())
    }

    pub fn needs_bridge(&self) -> bool {
        matches!(self.generator.kind, GeneratorKind::Bridge { .. })
            || self.objective.reward == RewardSpec::Bridge
            || matches!(self.objective.extractor, ExtractorId::External { .. })
    }

    pub fn mode(&self) -> Mode {
        self.optimizer.mode
    }

    /// Concrete runs with their subdirectory names. A spec without a sweep
    /// yields one run in the output directory itself.
    pub fn expand(&self) -> Vec<(Option<String>, RunSpec)> {
        let Some(sweep) = &self.sweep else {
            return vec![(None, self.clone())];
        };
        let alphas = if sweep.alpha.is_empty() { vec![self.alpha] } else { sweep.alpha.clone() };
        let seeds = if sweep.seeds.is_empty() { vec![self.seed] } else { sweep.seeds.clone() };
        let mut runs = Vec::new();
        for &alpha in &alphas {
            for &seed in &seeds {
                let mut run = self.clone();
                run.sweep = None;
                run.alpha = alpha;
                run.seed = seed;
                runs.push((Some(format!("alpha-{alpha}_seed-{seed}")), run));
            }
        }
        runs
    }
}
