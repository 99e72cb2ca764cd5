//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvSpec, Family};
use crate::error::{Error, Result};
use crate::fields::{TestFunction, TestKind};
use crate::lattice::DEFAULT_CELL_BUDGET;
use crate::polymer::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Exponent,
    Tail,
    Overlap,
    Moments,
    Compare,
    Covariance,
    Doob,
    AppendixPhi,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Simulate,
        ExperimentKind::Exponent,
        ExperimentKind::Tail,
        ExperimentKind::Overlap,
        ExperimentKind::Moments,
        ExperimentKind::Compare,
        ExperimentKind::Covariance,
        ExperimentKind::Doob,
        ExperimentKind::AppendixPhi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Exponent => "exponent",
            ExperimentKind::Tail => "tail",
            ExperimentKind::Overlap => "overlap",
            ExperimentKind::Moments => "moments",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Covariance => "covariance",
            ExperimentKind::Doob => "doob",
            ExperimentKind::AppendixPhi => "appendix-phi",
        }
    }

    /// Smallest replica count the experiment accepts.
    pub fn min_replicas(&self) -> usize {
        match self {
            ExperimentKind::Simulate | ExperimentKind::Doob | ExperimentKind::AppendixPhi => 2,
            ExperimentKind::Exponent | ExperimentKind::Moments | ExperimentKind::Compare => 30,
            ExperimentKind::Overlap => 500,
            ExperimentKind::Covariance => 2000,
            ExperimentKind::Tail => 10_000,
        }
    }

    pub fn default_replicas(&self) -> usize {
        self.min_replicas().max(2000)
    }

    fn needs_injection(&self) -> bool {
        matches!(self, ExperimentKind::Exponent | ExperimentKind::Compare | ExperimentKind::Covariance | ExperimentKind::Doob)
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment kind `{s}`")))
    }
}

/// Environment block of a config. Family parameters are flat optional keys
/// so that the TOML stays readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// First seed of the measurement block.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

fn default_family() -> String {
    "gaussian".into()
}
fn default_beta() -> f64 {
    0.2
}
fn default_seed() -> u64 {
    1
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { family: default_family(), beta: default_beta(), seed: default_seed(), p: None, a: None, b: None }
    }
}

/// Parse a family name. Poisson environments are rejected outright.
pub fn parse_family(name: &str, p: Option<f64>, a: Option<f64>, b: Option<f64>) -> Result<Family> {
    let missing = |what: &str| Error::config(format!("family `{name}` needs parameter `{what}`"));
    let family = match name.to_ascii_lowercase().as_str() {
        "gaussian" | "normal" => Family::Gaussian,
        "rademacher" => Family::Rademacher,
        "bernoulli" => Family::Bernoulli { p: p.ok_or_else(|| missing("p"))? },
        "uniform" => Family::Uniform { a: a.ok_or_else(|| missing("a"))?, b: b.ok_or_else(|| missing("b"))? },
        "poisson" => {
            return Err(Error::config(
                "poisson environments are not supported: they fail the concentration property, and for them \
                 log Z_n has a lower tail that is only polynomially small, so the tail and fluctuation \
                 experiments would have no valid target",
            ))
        }
        other => return Err(Error::config(format!("unknown environment family `{other}`"))),
    };
    family.validate().map_err(|e| Error::config(e.to_string()))?;
    Ok(family)
}

impl EnvConfig {
    pub fn family(&self) -> Result<Family> {
        parse_family(&self.family, self.p, self.a, self.b)
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        EnvSpec::new(self.family()?, self.beta).map_err(|e| Error::config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default = "default_dim")]
    pub d: usize,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    /// Zero selects the kind's default.
    #[serde(default)]
    pub replicas: usize,
    #[serde(default = "default_window")]
    pub window: Window,
    #[serde(default = "default_test_function")]
    pub test_function: TestFunction,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Environments in the block used to estimate injected means. Zero
    /// selects 16 with a box, 1000 without.
    #[serde(default)]
    pub mean_replicas: usize,
    /// Half-width of the box of starting points averaged over in each
    /// injection environment; 0 uses the origin only. `doob` always uses
    /// the origin.
    #[serde(default = "default_mean_box")]
    pub mean_box: i64,
    /// Offset of the mean-injection seed block from `env.seed`.
    #[serde(default = "default_mean_offset")]
    pub mean_seed_offset: u64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_u_grid")]
    pub u_grid: Vec<f64>,
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    /// Separations for the covariance experiment; derived from `n` if empty.
    #[serde(default)]
    pub separations: Vec<i64>,
    #[serde(default)]
    pub covariance_statistic: CovStatistic,
    #[serde(default = "default_inner")]
    pub inner_samples: usize,
    #[serde(default = "default_atoms")]
    pub atoms: Vec<usize>,
    /// Draws per atom count in the appendix diagnostic.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Also compute the windowed decomposition in `compare`.
    #[serde(default)]
    pub decompose: bool,
    /// Also compute the martingale approximant in `compare` (implies `decompose`).
    #[serde(default)]
    pub martingale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

/// Which increment statistic the covariance experiment correlates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStatistic {
    /// `log(Z_n/Z_{n-1}) - E log(Z_n/Z_{n-1})`.
    #[default]
    Raw,
    /// `Δ^mg_n`, by inner Monte Carlo.
    Martingale,
    /// `Δ^prev_n`, by inner Monte Carlo.
    Previsible,
}

fn default_dim() -> usize {
    3
}
fn default_n_grid() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_window() -> Window {
    Window::Diffusive { sigmas: 5.0 }
}
fn default_test_function() -> TestFunction {
    TestFunction { kind: TestKind::SmoothBump, radius: 0.5 }
}
fn default_delta() -> f64 {
    0.1
}
fn default_mean_box() -> i64 {
    32
}
fn default_mean_offset() -> u64 {
    1 << 40
}
fn default_budget() -> usize {
    DEFAULT_CELL_BUDGET
}
fn default_threads() -> usize {
    1
}
fn default_bootstrap() -> usize {
    200
}
/// 49 geometric points from 2 to 50. A fine grid because at moderate β
/// only the first few points have any mass at 10^4 replicas.
fn default_u_grid() -> Vec<f64> {
    (0..=48).map(|k| 2.0 * 25f64.powf(k as f64 / 48.0)).collect()
}
fn default_p_grid() -> Vec<f64> {
    vec![1.0, 1.5, 2.0, 3.0]
}
fn default_inner() -> usize {
    1000
}
fn default_atoms() -> Vec<usize> {
    vec![4, 16, 64, 256]
}
fn default_samples() -> usize {
    100_000
}

impl ExperimentConfig {
    /// All defaults for the given kind.
    pub fn new(kind: ExperimentKind) -> Self {
        let mut cfg: Self = toml::from_str(&format!("kind = \"{}\"", kind.name())).expect("defaults deserialize");
        cfg.resolve_defaults();
        cfg
    }

    fn resolve_defaults(&mut self) {
        if self.replicas == 0 {
            self.replicas = self.kind.default_replicas();
        }
        if self.mean_replicas == 0 {
            self.mean_replicas = if self.point_injection() { 1000 } else { 16 };
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.resolve_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config for a known kind without validating it, so that
    /// command line overrides can be applied first. A `kind` key, if
    /// present, must agree.
    pub fn from_toml_for(text: &str, kind: ExperimentKind) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        match table.get("kind").and_then(|v| v.as_str()) {
            Some(k) if k != kind.name() => {
                return Err(Error::config(format!("config is for `{k}`, not `{}`", kind.name())));
            }
            _ => {
                table.insert("kind".into(), toml::Value::String(kind.name().into()));
            }
        }
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.resolve_defaults();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        self.env.spec()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.env_spec()?;
        if !(1..=8).contains(&self.d) {
            return err(format!("dimension must lie in 1..=8, got {}", self.d));
        }
        if self.kind != ExperimentKind::AppendixPhi {
            if self.n_grid.is_empty() {
                return err("n grid is empty".into());
            }
            if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
                return err(format!("n grid must be positive and strictly increasing, got {:?}", self.n_grid));
            }
        }
        if self.replicas < self.kind.min_replicas() {
            return Err(Error::Samples(format!(
                "{} needs at least {} replicas, got {}",
                self.kind.name(),
                self.kind.min_replicas(),
                self.replicas
            )));
        }
        if !(1..=1024).contains(&self.threads) {
            return err(format!("thread count must lie in 1..=1024, got {}", self.threads));
        }
        if let Window::Diffusive { sigmas } = self.window {
            if !(sigmas > 0.0 && sigmas.is_finite()) {
                return err(format!("window width must be positive, got {sigmas}"));
            }
        }
        TestFunction::new(self.test_function.kind, self.test_function.radius).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.delta > 0.0 && self.delta < 1.0 / 6.0) {
            return err(format!("δ must lie in (0, 1/6), got {}", self.delta));
        }
        match self.kind {
            ExperimentKind::Tail => {
                if self.u_grid.is_empty() || self.u_grid.iter().any(|&u| !(u > 1.0 && u.is_finite())) {
                    return err("u grid must be nonempty with every u > 1".into());
                }
                if self.u_grid.windows(2).any(|w| w[0] >= w[1]) {
                    return err("u grid must be strictly increasing".into());
                }
            }
            ExperimentKind::Moments => {
                if self.p_grid.is_empty() || self.p_grid.iter().any(|&p| !(1.0..=4.0).contains(&p)) {
                    return err("p grid must be nonempty and inside [1, 4]".into());
                }
            }
            ExperimentKind::Doob | ExperimentKind::Covariance => {
                if self.inner_samples < crate::fields::MIN_INNER_SAMPLES
                    && (self.kind == ExperimentKind::Doob || self.covariance_statistic != CovStatistic::Raw)
                {
                    return Err(Error::Samples(format!(
                        "inner Monte Carlo needs at least {} samples",
                        crate::fields::MIN_INNER_SAMPLES
                    )));
                }
                if self.separations.iter().any(|&r| r < 0) {
                    return err("separations must be nonnegative".into());
                }
            }
            ExperimentKind::AppendixPhi => {
                if self.atoms.is_empty() || self.atoms.contains(&0) {
                    return err("atom counts must be positive".into());
                }
                if self.samples < 2 {
                    return Err(Error::Samples("appendix diagnostic needs at least two samples".into()));
                }
            }
            _ => {}
        }
        if self.kind.needs_injection() {
            if self.mean_box < 0 {
                return err(format!("mean box half-width must be >= 0, got {}", self.mean_box));
            }
            if self.mean_replicas < 2 {
                return Err(Error::Samples("mean-injection block needs at least two replicas".into()));
            }
            self.check_disjoint_blocks()?;
        }
        let main_end = self.env.seed.checked_add(self.replicas as u64);
        if main_end.is_none() {
            return err("measurement seed block overflows u64".into());
        }
        Ok(())
    }

    /// Whether the injection block uses the origin alone.
    pub fn point_injection(&self) -> bool {
        self.mean_box == 0 || self.kind == ExperimentKind::Doob
    }

    /// Seed of replica `r` in the measurement block. The same replica seed
    /// is used at every `n`, so series over `n` are paired.
    pub fn replica_seed(&self, r: usize) -> u64 {
        self.env.seed + r as u64
    }

    /// Seed of replica `r` in the mean-injection block.
    pub fn injection_seed(&self, r: usize) -> u64 {
        self.env.seed.wrapping_add(self.mean_seed_offset).wrapping_add(r as u64)
    }

    fn check_disjoint_blocks(&self) -> Result<()> {
        let main = (self.env.seed as u128, self.env.seed as u128 + self.replicas as u128);
        let lo = self.env.seed as u128 + self.mean_seed_offset as u128;
        let inj = (lo, lo + self.mean_replicas as u128);
        if inj.1 > u64::MAX as u128 + 1 {
            return Err(Error::config("mean-injection seed block overflows u64"));
        }
        if main.0 < inj.1 && inj.0 < main.1 {
            return Err(Error::config(format!(
                "mean-injection seeds [{}, {}) overlap measurement seeds [{}, {})",
                inj.0, inj.1, main.0, main.1
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the thread count and the
    /// output path, neither of which affects results.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.threads = 1;
        canon.out = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
