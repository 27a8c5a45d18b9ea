//! Experiment configuration: TOML or JSON, dotted overrides, canonical form
//! and hash.

use std::path::{Path, PathBuf};

use epiwave::field::{RhoInit, SourceInit};
use epiwave::kernel::Kernel;
use epiwave::rates::{RatePreset, Survival, Table, TabulatedRates};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum RatesConfig {
    Constant {
        tau0: f64,
        gamma0: f64,
    },
    FiniteAge {
        tau0: f64,
        i_dagger: f64,
    },
    /// Two-column CSV tables; exactly one of `gamma_file` and `pi_file`.
    Tabulated {
        tau_file: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pi_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        i_dagger: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        i_max: Option<f64>,
    },
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig::Constant { tau0: 2.0, gamma0: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian { sigma: f64 },
    Laplace { b: f64 },
    /// CSV of (z, K0(z)) for z ≥ 0, extended evenly.
    Tabulated { file: PathBuf },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Gaussian { sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Shared time and age step.
    pub delta: f64,
    pub dx: f64,
    /// Spatial half-width X of [−X, X].
    pub half_width: f64,
    pub t_end: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            delta: 0.02,
            dx: 0.05,
            half_width: 330.0,
            t_end: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub rho0: RhoInit,
    pub source: SourceInit,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            rho0: RhoInit::Zero,
            source: SourceInit::Bump {
                age_range: (0.0, 1.0),
                x_range: (-1.0, 1.0),
                height: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Exponential recursion when the rates are constant, full history otherwise.
    Auto,
    Full,
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionConfig {
    Direct,
    Fft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub history: HistoryMode,
    pub convolution: ConvolutionConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            history: HistoryMode::Auto,
            convolution: ConvolutionConfig::Direct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Times of field snapshots; empty means t_end only.
    pub snapshot_times: Vec<f64>,
    /// Subsampling of the Φ trace and snapshots.
    pub time_stride: usize,
    pub x_stride: usize,
    pub age_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            snapshot_times: Vec::new(),
            time_stride: 50,
            x_stride: 10,
            age_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaryConfig {
    /// Distance at which λ is evaluated.
    pub x_norm: f64,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig { x_norm: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveConfig {
    /// Absolute speeds; empty means c* and 2c*.
    pub speeds: Vec<f64>,
    pub half_width: f64,
    pub dz: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        WaveConfig {
            speeds: Vec::new(),
            half_width: 200.0,
            dz: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpreadConfig {
    pub levels: Vec<f64>,
    pub window_fraction: f64,
    /// Region |x| ≤ radius, i ≤ age_max for the comparison with U.
    pub radius: f64,
    pub age_max: f64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        SpreadConfig {
            levels: vec![0.1, 0.5, 0.9],
            window_fraction: 0.5,
            radius: 10.0,
            age_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub s0: f64,
    /// Seed for randomized checks; the solvers themselves are deterministic.
    pub seed: u64,
    pub rates: RatesConfig,
    pub kernel: KernelConfig,
    pub grid: GridConfig,
    pub init: InitConfig,
    pub solver: SolverConfig,
    pub output: OutputConfig,
    pub stationary: StationaryConfig,
    pub wave: WaveConfig,
    pub spread: SpreadConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            s0: 1.0,
            seed: 0,
            rates: RatesConfig::default(),
            kernel: KernelConfig::default(),
            grid: GridConfig::default(),
            init: InitConfig::default(),
            solver: SolverConfig::default(),
            output: OutputConfig::default(),
            stationary: StationaryConfig::default(),
            wave: WaveConfig::default(),
            spread: SpreadConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parse the file (TOML, or JSON for a `.json` extension) into a generic tree.
fn read_tree(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(|e| config_err(e.to_string()))
    }
}

/// Parse the value of a `key=value` override as a TOML value, falling back
/// to a bare string.
fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t
            .remove("v")
            .and_then(|v| serde_json::to_value(v).ok())
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(tree: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(config_err(format!("override `{key}` descends into a non-table value")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| config_err(format!("override `{key}` descends into a non-table value")))?;
    let leaf = parts[parts.len() - 1];
    let value = parse_override_value(raw.trim());
    if TAGS.contains(&leaf) && obj.get(leaf) != Some(&value) {
        // A different variant: drop the fields of the old one.
        obj.clear();
    }
    obj.insert(leaf.to_string(), value);
    Ok(())
}

/// Keys selecting a variant of a tagged table.
const TAGS: [&str; 2] = ["preset", "kind"];

/// Merge `over` into `base`. Tables merge key by key, except that a table
/// naming a different variant replaces the base table wholesale.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let switches = TAGS
                .iter()
                .any(|t| o.get(*t).is_some_and(|v| b.get(*t) != Some(v)));
            if switches {
                b.clear();
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Load from an optional file and apply overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(ExperimentConfig::default()).map_err(|e| config_err(e.to_string()))?;
        if let Some(p) = path {
            merge(&mut tree, read_tree(p)?);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML: every field present, fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_err(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos("s0", self.s0)?;
        pos("grid.delta", self.grid.delta)?;
        pos("grid.dx", self.grid.dx)?;
        pos("grid.half_width", self.grid.half_width)?;
        pos("grid.t_end", self.grid.t_end)?;
        pos("wave.half_width", self.wave.half_width)?;
        pos("wave.dz", self.wave.dz)?;
        pos("stationary.x_norm", self.stationary.x_norm)?;
        match &self.rates {
            RatesConfig::Constant { tau0, gamma0 } => {
                pos("rates.tau0", *tau0)?;
                pos("rates.gamma0", *gamma0)?;
            }
            RatesConfig::FiniteAge { tau0, i_dagger } => {
                pos("rates.tau0", *tau0)?;
                pos("rates.i_dagger", *i_dagger)?;
            }
            RatesConfig::Tabulated {
                gamma_file, pi_file, ..
            } => {
                if gamma_file.is_some() == pi_file.is_some() {
                    return Err(config_err("tabulated rates need exactly one of gamma_file and pi_file"));
                }
            }
        }
        match &self.kernel {
            KernelConfig::Gaussian { sigma } => pos("kernel.sigma", *sigma)?,
            KernelConfig::Laplace { b } => pos("kernel.b", *b)?,
            KernelConfig::Tabulated { .. } => {}
        }
        if self.output.time_stride == 0 || self.output.x_stride == 0 || self.output.age_stride == 0 {
            return Err(config_err("output strides must be at least 1"));
        }
        if self.spread.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(config_err("spread.levels must lie in (0, 1)"));
        }
        if !(self.spread.window_fraction > 0.0 && self.spread.window_fraction <= 1.0) {
            return Err(config_err("spread.window_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn rate_preset(&self) -> Result<RatePreset, CliError> {
        Ok(match &self.rates {
            RatesConfig::Constant { tau0, gamma0 } => RatePreset::Constant {
                tau0: *tau0,
                gamma0: *gamma0,
            },
            RatesConfig::FiniteAge { tau0, i_dagger } => RatePreset::FiniteAge {
                tau0: *tau0,
                i_dagger: *i_dagger,
            },
            RatesConfig::Tabulated {
                tau_file,
                gamma_file,
                pi_file,
                i_dagger,
                i_max,
            } => {
                let survival = match (gamma_file, pi_file) {
                    (Some(g), None) => Survival::Gamma(Table::from_csv(g)?),
                    (None, Some(p)) => Survival::Pi(Table::from_csv(p)?),
                    _ => return Err(config_err("tabulated rates need exactly one of gamma_file and pi_file")),
                };
                RatePreset::Tabulated(TabulatedRates {
                    tau: Table::from_csv(tau_file)?,
                    survival,
                    i_dagger: *i_dagger,
                    i_max: *i_max,
                })
            }
        })
    }

    pub fn kernel(&self) -> Result<Kernel, CliError> {
        Ok(match &self.kernel {
            KernelConfig::Gaussian { sigma } => Kernel::gaussian(*sigma)?,
            KernelConfig::Laplace { b } => Kernel::laplace(*b)?,
            KernelConfig::Tabulated { file } => Kernel::tabulated_from_csv(file)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.canonical();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            "rates.tau0=3".to_string(),
            "grid.t_end = 5".to_string(),
            "output.dir=runs/a".to_string(),
            "rates.tau0=2.5".to_string(),
        ];
        let cfg = ExperimentConfig::load(None, &o).unwrap();
        assert_eq!(cfg.rates, RatesConfig::Constant { tau0: 2.5, gamma0: 1.0 });
        assert_eq!(cfg.grid.t_end, 5.0);
        assert_eq!(cfg.output.dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn switching_presets_drops_old_fields() {
        let cfg = ExperimentConfig::load(
            None,
            &["rates.preset=\"finite_age\"".into(), "rates.tau0=1.5".into(), "rates.i_dagger=4".into()],
        )
        .unwrap();
        assert_eq!(cfg.rates, RatesConfig::FiniteAge { tau0: 1.5, i_dagger: 4.0 });
        let cfg = ExperimentConfig::load(None, &["init.source.kind=\"zero\"".into()]).unwrap();
        assert_eq!(cfg.init.source, SourceInit::Zero);
    }

    #[test]
    fn partial_file_merges_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[grid]\nt_end = 7.0\n[kernel]\npreset = \"laplace\"\nb = 0.5\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &["rates.tau0=3".into()]).unwrap();
        assert_eq!(cfg.grid.t_end, 7.0);
        assert_eq!(cfg.grid.dx, 0.05);
        assert_eq!(cfg.kernel, KernelConfig::Laplace { b: 0.5 });
        assert_eq!(cfg.rates, RatesConfig::Constant { tau0: 3.0, gamma0: 1.0 });
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"s0": 0.8, "grid": {"dx": 0.1}}"#).unwrap();
        let cfg = ExperimentConfig::load(Some(&j), &[]).unwrap();
        assert_eq!((cfg.s0, cfg.grid.dx), (0.8, 0.1));
    }

    #[test]
    fn rejects_unknown_keys_and_presets() {
        assert!(ExperimentConfig::load(None, &["grid.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["kernel.preset=\"cauchy\"".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["s0=-1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.grid.dx = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
