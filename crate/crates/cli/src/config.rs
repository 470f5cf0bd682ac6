//! Experiment configuration: a TOML file of flat dotted keys
//! (`stream.rho = 0.05`) plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ticl::backbone::BackboneConfig;
use ticl::dap::{DapConfig, Mode};
use ticl::eval::ProbeConfig;
use ticl::fingerprint::Fingerprinter;
use ticl::streams::{canonical_json, Ordering, StreamSpec, SyntheticParams};

use crate::error::{CliError, CliResult};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "TICL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Modes swept besides the fixed-λ grid.
    pub modes: Vec<Mode>,
    pub orderings: Vec<Ordering>,
    pub lambda_grid: Vec<f64>,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Dap, Mode::GeneralOnly, Mode::BoostingOnly, Mode::StabilizingOnly],
            orderings: vec![Ordering::Shuffled, Ordering::Ascending, Ordering::Descending],
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Per-seed streams use `data_seed + seed` and `order_seed + seed`.
    pub stream: StreamSpec,
    pub data: SyntheticParams,
    pub backbone: BackboneConfig,
    /// Per-seed runs use `dap.seed + seed`.
    pub dap: DapConfig,
    pub probe: ProbeConfig,
    pub ablate: AblateConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamSpec::default(),
            data: SyntheticParams::default(),
            backbone: BackboneConfig::default(),
            dap: DapConfig::default(),
            probe: ProbeConfig::default(),
            ablate: AblateConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: Self = toml::from_str(&table.to_string()).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.stream.validate()?;
        self.data.validate()?;
        self.backbone.validate()?;
        self.dap.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("seeds must not repeat".into()));
        }
        if self.data.input_dim != self.backbone.input_dim {
            return Err(CliError::Config(format!(
                "data.input_dim ({}) must equal backbone.input_dim ({})",
                self.data.input_dim, self.backbone.input_dim
            )));
        }
        if self.stream.num_classes > self.backbone.num_classes_total {
            return Err(CliError::Config(format!(
                "stream.num_classes ({}) exceeds backbone.num_classes_total ({})",
                self.stream.num_classes, self.backbone.num_classes_total
            )));
        }
        if let Some(l) = self.ablate.lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(CliError::Config(format!("ablate.lambda_grid value {l} is outside [0, 1]")));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 {
            return Err(CliError::Config("probe.epochs and probe.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Stream spec for one seed.
    pub fn stream_for(&self, seed: u64, ordering: Ordering) -> StreamSpec {
        StreamSpec {
            ordering,
            data_seed: self.stream.data_seed.wrapping_add(seed),
            order_seed: self.stream.order_seed.wrapping_add(seed),
            ..self.stream.clone()
        }
    }

    pub fn dap_for(&self, seed: u64, mode: Mode) -> DapConfig {
        DapConfig {
            mode,
            seed: self.dap.seed.wrapping_add(seed),
            ..self.dap.clone()
        }
    }

    /// `output_dir`, placed under `$TICL_OUTPUT_ROOT` when that is set and
    /// the directory is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Hash of everything that affects results (the output location does not).
    pub fn fingerprint(&self) -> String {
        let normalized = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let mut fp = Fingerprinter::new();
        fp.bytes(canonical_json(&normalized).as_bytes());
        fp.finish()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        let loaded = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(loaded, ExperimentConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "stream.rho=0.1".into(),
                "stream.ordering=ascending".into(),
                "dap.mode=fixed_lambda(0.25)".into(),
                "dap.adam.lr=0.05".into(),
                "seeds=[7, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.stream.rho, 0.1);
        assert_eq!(cfg.stream.ordering, Ordering::Ascending);
        assert_eq!(cfg.dap.mode, Mode::FixedLambda(0.25));
        assert_eq!(cfg.dap.adam.lr, 0.05);
        assert_eq!(cfg.seeds, vec![7, 8]);
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = ExperimentConfig::load(None, &["stream.rho=1.5".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stream.rho"), "{err}");
        let err = ExperimentConfig::load(None, &["stream.rhoo=0.5".into()]).unwrap_err();
        assert!(err.to_string().contains("rhoo"), "{err}");
        assert!(ExperimentConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn per_seed_streams_shift_seeds() {
        let cfg = ExperimentConfig::default();
        let s = cfg.stream_for(3, Ordering::Descending);
        assert_eq!((s.data_seed, s.order_seed, s.ordering), (3, 3, Ordering::Descending));
        assert_eq!(cfg.dap_for(3, Mode::Dap).seed, 3);
    }
}
