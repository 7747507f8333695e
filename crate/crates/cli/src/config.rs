use std::path::{Path, PathBuf};

use clrsel_core::cpc::CpcConfig;
use clrsel_core::features::FeatureConfig;
use clrsel_core::gmm::EmConfig;
use clrsel_core::scoring::DEFAULT_ALPHA;
use clrsel_core::selection::{Budget, DEFAULT_GRID};
use clrsel_core::trainer::TrainConfig;
use clrsel_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const WORKDIR_ENV: &str = "CLRSEL_WORKDIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub cpc: CpcConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub gmm: EmConfig,
    #[serde(default)]
    pub selection: SelectionSection,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub target_manifest: PathBuf,
    pub pool_manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub domains: usize,
    pub utterances_per_domain: usize,
    pub duration_range_s: (f64, f64),
    pub target_domain: String,
    pub target_utterances: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            domains: 4,
            utterances_per_domain: 50,
            duration_range_s: (1.0, 4.0),
            target_domain: "A".into(),
            target_utterances: 50,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub alpha: f64,
    /// Budgets used by `baseline` and `report`, in `select --budget` syntax.
    pub budgets: Vec<String>,
    pub grid: Vec<f64>,
    pub random_seed: u64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            budgets: vec!["25%".into()],
            grid: DEFAULT_GRID.to_vec(),
            random_seed: 0,
        }
    }
}

/// Flags that override config values.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub alpha: Option<f64>,
}

impl RunConfig {
    /// Read a TOML file. Relative paths are resolved against the file's
    /// directory. The workdir comes from, in order: the flag, the
    /// environment, the file.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(w) = std::env::var_os(WORKDIR_ENV) {
            config.workdir = PathBuf::from(w);
        }
        if let Some(w) = &overrides.workdir {
            config.workdir = w.clone();
        }
        config.workdir = base.join(&config.workdir);
        config.paths.target_manifest = base.join(&config.paths.target_manifest);
        config.paths.pool_manifest = base.join(&config.paths.pool_manifest);
        if let Some(seed) = overrides.seed {
            config.apply_seed(seed);
        }
        if let Some(e) = overrides.max_epochs {
            config.train.max_epochs = e;
        }
        if let Some(a) = overrides.alpha {
            config.selection.alpha = a;
        }
        config.validate()?;
        Ok(config)
    }

    /// Derive every named seed from one number.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.cpc.seed = seed;
        self.train.seed = seed;
        self.gmm.seed = seed;
        self.selection.random_seed = seed;
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.cpc.validate()?;
        self.train.validate()?;
        if !(self.selection.alpha > 0.0 && self.selection.alpha.is_finite()) {
            return Err(Error::Config(format!("selection.alpha must be positive, got {}", self.selection.alpha)));
        }
        for b in &self.selection.budgets {
            b.parse::<Budget>()?;
        }
        if self.selection.grid.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("selection.grid fractions must be in (0, 1]".into()));
        }
        if self.gmm.components == 0 {
            return Err(Error::Config("gmm.components must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects outputs. Paths are excluded so the
    /// same experiment in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("workdir");
            map.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Human-readable list of differing leaves between two JSON values.
pub fn json_diff(expected: &Value, found: &Value) -> Vec<String> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{prefix}: expected {a}, found {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", expected, found, &mut out);
    out
}
