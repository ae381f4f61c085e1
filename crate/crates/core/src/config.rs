//! Experiment configuration: TOML with a `profile` key selecting default bundles,
//! deep-merged user values and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datasets::{ToyConfig, ToyWorld};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::EvalProtocol;
use crate::network::NetworkConfig;
use crate::trainer::{RunOutput, StageKind, StagesConfig, TrainContext};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "WSSHM_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Toy-world root used for any directory left unset.
    pub root: Option<PathBuf>,
    pub seg_dir: Option<PathBuf>,
    pub matte_dir: Option<PathBuf>,
    pub backgrounds_dir: Option<PathBuf>,
    pub eval: Vec<EvalSet>,
    /// Segmentation subset size; unset means the whole dataset.
    pub seg_n: Option<usize>,
    /// Matte subset size; unset means the whole dataset.
    pub mat_n: Option<usize>,
    /// Draw a new background for every composite instead of a fixed pairing.
    pub recomposite_each_step: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            seg_dir: None,
            matte_dir: None,
            backgrounds_dir: None,
            eval: Vec::new(),
            seg_n: None,
            mat_n: None,
            recomposite_each_step: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seg_counts: Vec<usize>,
    pub mat_counts: Vec<usize>,
    /// Run independent cells on parallel workers.
    pub parallel_cells: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seg_counts: vec![0, 64, 256],
            mat_counts: vec![0, 16, 64],
            parallel_cells: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub edge: usize,
    pub iters: usize,
    pub warmup: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            edge: 512,
            iters: 10,
            warmup: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub toy: ToyConfig,
    pub network: NetworkConfig,
    pub stages: StagesConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub eval: EvalProtocol,
    pub run: RunConfig,
    pub sweep: SweepConfig,
    pub benchmark: BenchmarkConfig,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                profile,
                seed: 0,
                output_dir: None,
                data: DataConfig::default(),
                toy: ToyConfig::default(),
                network: NetworkConfig::r101(),
                stages: StagesConfig::paper(),
                augment: AugmentConfig::default(),
                loss: LossConfig::default(),
                eval: EvalProtocol::default(),
                run: RunConfig {
                    checkpoint_every: 5_000,
                    log_every: 50,
                },
                sweep: SweepConfig {
                    seg_counts: vec![0, 2_000, 5_000, 10_000, 20_000, 50_000],
                    mat_counts: vec![0, 50, 200, 500, 1_000, 2_000],
                    parallel_cells: false,
                },
                benchmark: BenchmarkConfig::default(),
            },
            Profile::Toy => Self {
                profile,
                seed: 0,
                output_dir: None,
                data: DataConfig::default(),
                toy: ToyConfig::default(),
                network: NetworkConfig::r18().with_base_width(8),
                stages: StagesConfig::toy(),
                augment: AugmentConfig {
                    crop_min: 64,
                    crop_max: 64,
                    ..AugmentConfig::default()
                },
                // small nets see too few band pixels for the boundary head to
                // leave its all-zero optimum at the default weight
                loss: LossConfig {
                    lambda_boundary: 1.0,
                    ..LossConfig::default()
                },
                eval: EvalProtocol { edge: 128 },
                run: RunConfig::default(),
                sweep: SweepConfig::default(),
                benchmark: BenchmarkConfig {
                    edge: 128,
                    ..BenchmarkConfig::default()
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.augment.validate()?;
        for stage in StageKind::ALL {
            self.stages.get(stage).validate(stage)?;
        }
        if self.data.seg_n == Some(0) && self.data.mat_n == Some(0) {
            return Err(Error::config("data", "no training data: seg_n and mat_n are both 0"));
        }
        if self.eval.edge == 0 {
            return Err(Error::config("eval.edge", "must be positive"));
        }
        Ok(())
    }

    /// `output_dir`, else the environment default, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    /// Root of the generated toy world.
    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.output_root().join("toy_data"))
    }

    fn toy_world(&self) -> ToyWorld {
        ToyWorld::at(&self.data_root())
    }

    pub fn seg_dir(&self) -> PathBuf {
        self.data.seg_dir.clone().unwrap_or_else(|| self.toy_world().natural_dir)
    }

    pub fn matte_dir(&self) -> PathBuf {
        self.data.matte_dir.clone().unwrap_or_else(|| self.toy_world().matte_dir)
    }

    pub fn backgrounds_dir(&self) -> PathBuf {
        self.data
            .backgrounds_dir
            .clone()
            .unwrap_or_else(|| self.toy_world().backgrounds_dir)
    }

    pub fn eval_sets(&self) -> Vec<EvalSet> {
        if !self.data.eval.is_empty() {
            return self.data.eval.clone();
        }
        self.toy_world()
            .eval_dirs
            .into_iter()
            .map(|(name, dir)| EvalSet { name, dir })
            .collect()
    }

    pub fn train_context(&self, out_dir: Option<&Path>) -> TrainContext {
        TrainContext {
            seed: self.seed,
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            recomposite: self.data.recomposite_each_step,
            output: RunOutput {
                dir: out_dir.map(Path::to_path_buf),
                checkpoint_every: self.run.checkpoint_every,
                log_every: self.run.log_every,
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<config>", e.to_string()))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key=value` where the value is a TOML literal (bare words become strings).
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), parse_override_value(v.trim())))
}

/// Builds the effective configuration from an optional file and overrides.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut user = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut user, &k, v)?;
    }
    let profile: Profile = match user.get("profile") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("profile", e.message().to_string()))?,
        None => Profile::default(),
    };
    let defaults = ExperimentConfig::for_profile(profile);
    let mut merged = toml::Table::try_from(&defaults).map_err(|e| Error::config("<defaults>", e.to_string()))?;
    merge(&mut merged, user);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}
