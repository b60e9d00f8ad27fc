//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `data`, `[[autoencoder]]`,
//! `energy`, `train` (with optional `train.latent` and `train.visible`
//! chains), `metrics`, `sample` and `output`, plus a mandatory top-level
//! `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mpdr::data::{LabelColumn, ManifoldKind, PreprocessOp, EIGHT_GAUSSIANS_RADIUS, EIGHT_GAUSSIANS_STD};
use mpdr::diffcore::Activation;
use mpdr::manifold::{PretrainConfig, SigmaRange};
use mpdr::metrics::DensityGrid;
use mpdr::nets::{AutoencoderSpec, EnergyKind};
use mpdr::recovery::{RecoveryConfig, Space, DEFAULT_GAMMA};
use mpdr::sampler::{ChainSpec, Constraint, LmcPreset, SamplerConfig};
use mpdr::trainer::{MpdrTrainConfig, Regularization, DEFAULT_REG_COEF};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub autoencoder: Vec<AutoencoderSection>,
    pub energy: EnergySection,
    pub train: TrainSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    EightGaussians,
    ManifoldBenchmark,
    Csv,
}

/// Where the data come from. Which fields are required depends on `source`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    /// eight-gaussians: training set size.
    pub n: Option<usize>,
    pub radius: Option<f64>,
    pub std: Option<f64>,
    /// manifold-benchmark
    pub manifold: Option<ManifoldKind>,
    pub dim: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub n_outliers: Option<usize>,
    /// csv: paths are relative to the config file.
    pub train: Option<PathBuf>,
    pub test_inliers: Option<PathBuf>,
    pub test_outliers: Option<PathBuf>,
    pub label_col: Option<LabelColumn>,
    #[serde(default)]
    pub preprocess: Vec<PreprocessOp>,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
}

fn default_batch() -> usize {
    128
}

fn default_pretrain_lr() -> f64 {
    1e-4
}

fn default_pretrain_epochs() -> usize {
    30
}

fn default_true() -> bool {
    true
}

fn default_activation() -> Activation {
    Activation::LeakyRelu
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub spherical: bool,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay_enc: f64,
    pub seed: Option<u64>,
}

impl AutoencoderSection {
    pub fn spec(&self, input_dim: usize) -> AutoencoderSpec {
        AutoencoderSpec {
            input_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            spherical: self.spherical,
        }
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay_enc: self.weight_decay_enc,
            seed,
        }
    }
}

/// A scalar energy is an MLP `[D, hidden..., 1]`. A reconstruction energy
/// copies the first ensemble autoencoder when its architecture matches and
/// is otherwise pretrained by reconstruction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    pub kind: EnergyKind,
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub spherical: bool,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub steps: usize,
    #[serde(default)]
    pub step_size: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// `[lo, hi]` box for the visible chain.
    pub clamp: Option<[f64; 2]>,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    pub regularization: Option<Regularization>,
    #[serde(default = "default_reg_coef")]
    pub reg_coef: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    /// Chain settings of a reference experiment; explicit chain sections win.
    pub preset: Option<LmcPreset>,
    pub latent: Option<ChainSection>,
    pub visible: Option<ChainSection>,
    #[serde(default = "default_true")]
    pub reproject_latent: bool,
    /// Inliers and synthetic manifold outliers scored after every epoch; 0 disables.
    #[serde(default = "default_validation")]
    pub validation: usize,
    pub seed: Option<u64>,
}

fn default_reg_coef() -> f64 {
    DEFAULT_REG_COEF
}

fn default_sigma_min() -> f64 {
    SigmaRange::default().min
}

fn default_sigma_max() -> f64 {
    SigmaRange::default().max
}

fn default_validation() -> usize {
    512
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_true")]
    pub auroc: bool,
    #[serde(default = "default_pauroc")]
    pub pauroc: Vec<f64>,
    #[serde(default = "default_true")]
    pub aupr: bool,
    #[serde(default)]
    pub grid: DensityGrid,
}

fn default_pauroc() -> Vec<f64> {
    vec![0.1]
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            auroc: true,
            pauroc: default_pauroc(),
            aupr: true,
            grid: DensityGrid::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_sample_n")]
    pub n: usize,
}

fn default_sample_n() -> usize {
    256
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n: default_sample_n() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
        }
    }
}

/// Independent seed streams derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Autoencoder(u64),
    Energy,
    Train,
    Validation,
    Sample,
}

pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    let tag = match stream {
        Stream::Autoencoder(i) => 1 + i,
        Stream::Energy => 1 << 32,
        Stream::Train => 2 << 32,
        Stream::Validation => 3 << 32,
        Stream::Sample => 4 << 32,
    };
    seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// A parsed config together with where it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory that relative data paths are resolved against.
    pub base_dir: PathBuf,
    /// Hex SHA-256 of the canonical form of the effective config.
    pub hash: String,
}

/// Command-line settings that take precedence over the config file. They are
/// written into the config before hashing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub label_col: Option<LabelColumn>,
    pub no_latent_reproject: bool,
}

/// Reads and validates a config file after applying `overrides`.
pub fn load(path: &Path, overrides: Overrides) -> Result<LoadedConfig, CliError> {
    let Overrides {
        seed,
        label_col,
        no_latent_reproject,
    } = overrides;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("E_IO", format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value =
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    let table = value
        .as_table_mut()
        .ok_or_else(|| CliError::config("config root must be a table"))?;
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| CliError::config("seed must fit in a signed 64-bit integer"))?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    if let Some(l) = label_col {
        let data = table
            .get_mut("data")
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| CliError::config("missing section [data]"))?;
        let name = match l {
            LabelColumn::None => "none",
            LabelColumn::Last => "last",
        };
        data.insert("label_col".into(), toml::Value::String(name.into()));
    }
    if no_latent_reproject {
        let train = table
            .get_mut("train")
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| CliError::config("missing section [train]"))?;
        train.insert("reproject_latent".into(), toml::Value::Boolean(false));
    }
    let hash = canonical_hash(&value)?;
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir, hash })
}

/// SHA-256 of the config rendered as JSON with sorted keys.
pub fn canonical_hash(value: &toml::Value) -> Result<String, CliError> {
    let json = serde_json::to_value(value).map_err(|e| CliError::config(e.to_string()))?;
    let digest = Sha256::digest(json.to_string().as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn require<T: Copy>(v: Option<T>, field: &str, source: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::config(format!("data.{field} is required for source {source}")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        match d.source {
            SourceKind::EightGaussians => {
                if require(d.n, "n", "eight-gaussians")? == 0 {
                    return Err(CliError::config("data.n must be positive"));
                }
                if !(d.std.unwrap_or(EIGHT_GAUSSIANS_STD) > 0.0) || !(d.radius.unwrap_or(EIGHT_GAUSSIANS_RADIUS) >= 0.0)
                {
                    return Err(CliError::config("data.std must be > 0 and data.radius >= 0"));
                }
            }
            SourceKind::ManifoldBenchmark => {
                require(d.manifold, "manifold", "manifold-benchmark")?;
                require(d.dim, "dim", "manifold-benchmark")?;
                if require(d.n_train, "n_train", "manifold-benchmark")? == 0 {
                    return Err(CliError::config("data.n_train must be positive"));
                }
            }
            SourceKind::Csv => {
                if d.train.is_none() {
                    return Err(CliError::config("data.train is required for source csv"));
                }
            }
        }
        if self.autoencoder.is_empty() {
            return Err(CliError::config("at least one [[autoencoder]] section is required"));
        }
        for (i, ae) in self.autoencoder.iter().enumerate() {
            if ae.latent_dim == 0 || ae.hidden.contains(&0) {
                return Err(CliError::config(format!("autoencoder[{i}] widths must be positive")));
            }
            if ae.batch_size == 0 || !(ae.lr >= 0.0) || !(ae.weight_decay_enc >= 0.0) {
                return Err(CliError::config(format!(
                    "autoencoder[{i}] needs batch_size > 0, lr >= 0 and weight_decay_enc >= 0"
                )));
            }
        }
        if self.energy.hidden.contains(&0) {
            return Err(CliError::config("energy.hidden widths must be positive"));
        }
        if self.energy.latent_dim == Some(0) {
            return Err(CliError::config("energy.latent_dim must be positive"));
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(CliError::config(format!(
                "train.lr must be finite and >= 0, got {}",
                t.lr
            )));
        }
        if !(t.reg_coef >= 0.0) {
            return Err(CliError::config(format!(
                "train.reg_coef must be >= 0, got {}",
                t.reg_coef
            )));
        }
        if t.batch_size < self.autoencoder.len() {
            return Err(CliError::config(format!(
                "train.batch_size {} is smaller than the ensemble size {}",
                t.batch_size,
                self.autoencoder.len()
            )));
        }
        self.sampler()?;
        for &p in &self.metrics.pauroc {
            if !(p > 0.0 && p <= 1.0) {
                return Err(CliError::config(format!(
                    "metrics.pauroc values must lie in (0, 1], got {p}"
                )));
            }
        }
        self.metrics
            .grid
            .validate()
            .map_err(|e| CliError::config(format!("metrics.grid: {e}")))?;
        if self.sample.n == 0 {
            return Err(CliError::config("sample.n must be positive"));
        }
        Ok(())
    }

    pub fn sigma_range(&self) -> Result<SigmaRange, CliError> {
        SigmaRange::new(self.train.sigma_min, self.train.sigma_max)
            .map_err(|e| CliError::config(format!("train.sigma_min/sigma_max: {e}")))
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        let t = &self.train;
        let mut cfg = t.preset.map(LmcPreset::config).unwrap_or_default();
        cfg.reproject_latent = t.reproject_latent;
        if let Some(c) = t.latent {
            if c.clamp.is_some() {
                return Err(CliError::config(
                    "train.latent.clamp is not supported; latent chains use the sphere",
                ));
            }
            cfg.latent = chain(&c, Space::Latent, "train.latent")?;
            cfg.recovery.gamma_latent = c.gamma;
        }
        if let Some(c) = t.visible {
            cfg.visible = chain(&c, Space::Visible, "train.visible")?;
            cfg.recovery.gamma_visible = c.gamma;
        }
        cfg.recovery = RecoveryConfig::new(cfg.recovery.gamma_visible, cfg.recovery.gamma_latent)
            .map_err(|e| CliError::config(format!("train chain gamma: {e}")))?;
        cfg.validate()
            .map_err(|e| CliError::config(format!("train chains: {e}")))?;
        self.sigma_range()?;
        Ok(cfg)
    }

    pub fn train_config(&self, kind: EnergyKind) -> Result<MpdrTrainConfig, CliError> {
        let t = &self.train;
        Ok(MpdrTrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            regularization: t.regularization.unwrap_or(Regularization::for_energy(kind)),
            reg_coef: t.reg_coef,
            sampler: self.sampler()?,
            seed: t.seed.unwrap_or(sub_seed(self.seed, Stream::Train)),
        })
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn autoencoder_seed(&self, i: usize) -> u64 {
        self.autoencoder[i]
            .seed
            .unwrap_or(sub_seed(self.seed, Stream::Autoencoder(i as u64)))
    }

    pub fn energy_seed(&self) -> u64 {
        self.energy.seed.unwrap_or(sub_seed(self.seed, Stream::Energy))
    }
}

fn chain(c: &ChainSection, space: Space, field: &str) -> Result<ChainSpec, CliError> {
    let spec =
        ChainSpec::new(space, c.steps, c.step_size, c.noise).map_err(|e| CliError::config(format!("{field}: {e}")))?;
    match c.clamp {
        Some([lo, hi]) => spec
            .with_constraint(Constraint::Clamp { lo, hi })
            .map_err(|e| CliError::config(format!("{field}.clamp: {e}"))),
        None => Ok(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[data]
source = "eight-gaussians"
n = 100
[[autoencoder]]
latent_dim = 2
hidden = [8]
[energy]
kind = "scalar"
hidden = [8]
[train]
epochs = 1
lr = 1e-3
"#;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::config(e.message()))?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn minimal_config_parses() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.metrics.pauroc, vec![0.1]);
        let s = c.sampler().unwrap();
        assert_eq!(s.latent.steps, 0);
        assert_eq!(s.visible.steps, 0);
    }

    #[test]
    fn missing_seed_is_reported() {
        let text = MINIMAL.replace("seed = 3", "");
        let err = parse(&text).unwrap_err();
        assert!(err.message.contains("seed"), "{}", err.message);
    }

    #[test]
    fn unknown_field_is_reported() {
        let text = MINIMAL.replace("lr = 1e-3", "lr = 1e-3\nlearning_rate = 2");
        let err = parse(&text).unwrap_err();
        assert!(err.message.contains("learning_rate"), "{}", err.message);
    }

    #[test]
    fn chain_sections_override_preset() {
        let text = format!(
            "{MINIMAL}preset = \"adbench-reconstruction\"\n[train.visible]\nsteps = 3\nstep_size = 0.5\nnoise = 0.01\ngamma = 0.0\n"
        );
        let s = parse(&text).unwrap().sampler().unwrap();
        assert_eq!(
            (s.latent.steps, s.latent.step_size, s.latent.noise_scale),
            (1, 0.1, 0.05)
        );
        assert_eq!((s.visible.steps, s.visible.step_size), (3, 0.5));
        assert_eq!(s.recovery.gamma_visible, 0.0);
        assert_eq!(s.recovery.gamma_latent, 1e-4);
    }

    #[test]
    fn every_lmc_table_row_is_expressible() {
        for p in LmcPreset::ALL {
            let want = p.config();
            let clamp = match want.visible.constraint {
                Constraint::Clamp { lo, hi } => format!("clamp = [{lo:?}, {hi:?}]\n"),
                _ => String::new(),
            };
            let text = format!(
                "{MINIMAL}[train.latent]\nsteps = {}\nstep_size = {:?}\nnoise = {:?}\ngamma = {:?}\n[train.visible]\nsteps = {}\nstep_size = {:?}\nnoise = {:?}\ngamma = {:?}\n{clamp}",
                want.latent.steps,
                want.latent.step_size,
                want.latent.noise_scale,
                want.recovery.gamma_latent,
                want.visible.steps,
                want.visible.step_size,
                want.visible.noise_scale,
                want.recovery.gamma_visible,
            );
            assert_eq!(parse(&text).unwrap().sampler().unwrap(), want, "{p:?}");
        }
    }

    #[test]
    fn field_level_diagnostics() {
        let bad = MINIMAL.replace("lr = 1e-3", "lr = -1.0");
        assert!(parse(&bad).unwrap_err().message.contains("train.lr"));
        let bad = MINIMAL.replace("n = 100", "");
        assert!(parse(&bad).unwrap_err().message.contains("data.n"));
        let bad = MINIMAL.replace("lr = 1e-3", "lr = 1e-3\nbatch_size = 0");
        assert!(parse(&bad).unwrap_err().message.contains("train.batch_size"));
    }

    #[test]
    fn sub_seeds_differ() {
        let s: Vec<u64> = [
            Stream::Autoencoder(0),
            Stream::Autoencoder(1),
            Stream::Energy,
            Stream::Train,
            Stream::Validation,
            Stream::Sample,
        ]
        .into_iter()
        .map(|st| sub_seed(7, st))
        .collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
    }
}
