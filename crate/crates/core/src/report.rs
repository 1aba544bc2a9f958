//! Report documents, run configuration, and the CSV schemas written by the
//! `rpy` binary (with readers for each, so outputs round-trip).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{LogRow, RunLog, TrainConfig};
use crate::envs::{EnvPair, RecSimConfig, RecSimPair, TabularEnvPair};
use crate::error::{Error, Result};
use crate::mdp::GroupPair;
use crate::parity::{prop1_counterexample, DisparityReport};
use crate::pca::ProjectedPoint;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    pub build_id: String,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    /// SHA-256 over the input file contents, in argument order.
    pub inputs_digest: String,
    pub results: serde_json::Value,
    pub provenance: Provenance,
}

pub fn build_id() -> String {
    option_env!("RPY_BUILD_ID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("rpy-{}", env!("CARGO_PKG_VERSION")))
}

/// Hex SHA-256 of each input's bytes, length-prefixed so boundaries count.
pub fn digest_inputs(contents: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for c in contents {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Report {
    pub fn new(command: &str, inputs: &[Vec<u8>], results: serde_json::Value, seeds: Vec<u64>, wall_clock_seconds: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            inputs_digest: digest_inputs(inputs),
            results,
            provenance: Provenance {
                seeds,
                build_id: build_id(),
                wall_clock_seconds,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Flat one-row view of a [`DisparityReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityRow {
    pub delta_ret: f64,
    pub return0: f64,
    pub return1: f64,
    pub thm1_reward_gap: f64,
    pub thm1_policy: f64,
    pub thm1_visitation_ipm: f64,
    pub thm1_total: f64,
    pub thm2_reward_gap: f64,
    pub thm2_occupancy_ipm: f64,
    pub thm2_total: f64,
}

impl From<&DisparityReport> for DisparityRow {
    fn from(r: &DisparityReport) -> Self {
        Self {
            delta_ret: r.delta_ret,
            return0: r.return0,
            return1: r.return1,
            thm1_reward_gap: r.bound_thm1.reward_gap_term,
            thm1_policy: r.bound_thm1.policy_term,
            thm1_visitation_ipm: r.bound_thm1.visitation_ipm_term,
            thm1_total: r.bound_thm1.total,
            thm2_reward_gap: r.bound_thm2.reward_gap_term,
            thm2_occupancy_ipm: r.bound_thm2.occupancy_ipm_term,
            thm2_total: r.bound_thm2.total,
        }
    }
}

/// Mean and standard error across seeds at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub ratio: String,
    pub iteration: usize,
    pub seeds: usize,
    pub overall_return_mean: f64,
    pub overall_return_se: f64,
    pub gap_mean: f64,
    pub gap_se: f64,
    pub return0_mean: f64,
    pub return1_mean: f64,
    pub alignment_loss_mean: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn ratio_label(ratio: [u32; 2]) -> String {
    format!("{}:{}", ratio[0], ratio[1])
}

/// Per-iteration mean and standard error across the runs of one ratio.
pub fn aggregate(ratio: [u32; 2], runs: &[RunLog]) -> Vec<AggregateRow> {
    let mut by_iter: BTreeMap<usize, Vec<&LogRow>> = BTreeMap::new();
    for run in runs {
        for row in &run.rows {
            by_iter.entry(row.iteration).or_default().push(row);
        }
    }
    by_iter
        .into_iter()
        .map(|(iteration, rows)| {
            let col = |f: fn(&LogRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (om, ose) = mean_se(&col(|r| r.overall_return));
            let (gm, gse) = mean_se(&col(|r| r.gap));
            AggregateRow {
                ratio: ratio_label(ratio),
                iteration,
                seeds: rows.len(),
                overall_return_mean: om,
                overall_return_se: ose,
                gap_mean: gm,
                gap_se: gse,
                return0_mean: mean_se(&col(|r| r.return0)).0,
                return1_mean: mean_se(&col(|r| r.return1)).0,
                alignment_loss_mean: mean_se(&col(|r| r.alignment_loss)).0,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse(format!("{} record {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_run_log(path: &Path) -> Result<RunLog> {
    Ok(RunLog { rows: read_csv(path)? })
}

pub fn read_points(path: &Path) -> Result<Vec<ProjectedPoint>> {
    read_csv(path)
}

/// Headerless numeric CSV, one point per line.
pub fn write_features<W: std::io::Write>(rows: &[Vec<f64>], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in rows {
        out.write_record(r.iter().map(|v| format!("{v:e}"))).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{} line {} field {}: {e}", path.display(), i + 1, j + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Environment block of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Recsim {
        #[serde(default)]
        recsim: RecSimConfig,
    },
    /// Group pair loaded from a JSON file (path relative to the config).
    Tabular { pair: PathBuf, horizon: usize },
    /// The absorbing two-state construction with disparity `c`.
    Prop1 { c: f64, gamma: f64, horizon: usize },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Recsim {
            recsim: RecSimConfig::default(),
        }
    }
}

impl EnvSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Box<dyn EnvPair>> {
        Ok(match self {
            EnvSpec::Recsim { recsim } => Box::new(RecSimPair::new(recsim.clone())?),
            EnvSpec::Tabular { pair, horizon } => {
                let path = if pair.is_absolute() { pair.clone() } else { base_dir.join(pair) };
                Box::new(TabularEnvPair::new(load_pair(&path)?, *horizon)?)
            }
            EnvSpec::Prop1 { c, gamma, horizon } => Box::new(TabularEnvPair::new(prop1_counterexample(*c, *gamma)?, *horizon)?),
        })
    }
}

pub fn load_pair(path: &Path) -> Result<GroupPair> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    GroupPair::from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_ratios() -> Vec<[u32; 2]> {
    vec![[1, 0], [4, 1], [2, 1], [1, 1]]
}

fn default_profile() -> String {
    "desk".into()
}

/// Top-level training run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<[u32; 2]>,
    /// Overrides applied on top of the profile.
    #[serde(default)]
    pub trainer: toml::Table,
    #[serde(default)]
    pub env: EnvSpec,
    /// Write final extractor outputs per group for PCA.
    #[serde(default)]
    pub export_features: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.trainer_config()?;
        if cfg.seeds.is_empty() || cfg.ratios.is_empty() {
            return Err(Error::Config("seeds and ratios must be nonempty".into()));
        }
        Ok(cfg)
    }

    /// Profile defaults overlaid with the `[trainer]` table; the ratio is
    /// set per run from `ratios`.
    pub fn trainer_config(&self) -> Result<TrainConfig> {
        let base = TrainConfig::profile(&self.profile)?;
        let mut value = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &self.trainer {
            value.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[trainer]: {e}")))?;
        cfg.validate()?;
        for r in &self.ratios {
            TrainConfig { ratio: *r, ..cfg.clone() }.validate()?;
        }
        Ok(cfg)
    }
}
