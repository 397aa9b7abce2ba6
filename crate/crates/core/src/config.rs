//! JSON run configuration: every experiment knob with documented
//! defaults, unknown keys rejected.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_synthetic, Dataset, Split, MAX_SYNTHETIC_CLASSES};
use crate::encoder::EncoderTrainConfig;
use crate::error::{Error, Result};
use crate::nn::GanArch;
use crate::optim::AdamHyper;
use crate::sgan::{LossWeights, SganSeeds, SganTrainSettings, Variant};

pub const DATA_DIR_ENV: &str = "SGANLAB_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// MNIST-style IDX files named train-images-idx3-ubyte etc. under a
    /// directory (falls back to $SGANLAB_DATA_DIR, then ./data).
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// Explicit IDX file quadruple.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Deterministic glyph dataset.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class_train")]
        per_class_train: usize,
        #[serde(default = "default_per_class_test")]
        per_class_test: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
}

fn default_classes() -> usize {
    8
}
fn default_per_class_train() -> usize {
    500
}
fn default_per_class_test() -> usize {
    125
}
fn default_image_size() -> usize {
    16
}
fn default_data_seed() -> u64 {
    7
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mnist { dir: None }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            l1: 1.0,
            l2: 1.0,
            l3: 10.0,
        }
    }
}

impl WeightsConfig {
    pub fn to_weights(self) -> LossWeights {
        LossWeights {
            adversarial: self.l1,
            conditional: self.l2,
            entropy: self.l3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub gan_lr: f64,
    pub gan_beta1: f64,
    pub gan_beta2: f64,
    pub eps: f64,
    pub encoder_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            gan_lr: AdamHyper::GAN.lr,
            gan_beta1: AdamHyper::GAN.beta1,
            gan_beta2: AdamHyper::GAN.beta2,
            eps: AdamHyper::GAN.eps,
            encoder_lr: AdamHyper::CLASSIFIER.lr,
        }
    }
}

impl OptimConfig {
    pub fn gan_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.gan_lr,
            beta1: self.gan_beta1,
            beta2: self.gan_beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub encoder_epochs: usize,
    pub independent_iterations: usize,
    pub joint_iterations: usize,
    pub d_steps_per_iter: usize,
    pub g_steps_per_iter: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            encoder_epochs: 5,
            independent_iterations: 8000,
            joint_iterations: 4000,
            d_steps_per_iter: 1,
            g_steps_per_iter: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub fc3_dim: usize,
    pub encoder_channels: (usize, usize),
    pub hflip: bool,
    pub g0_project_ch: usize,
    pub g0_mid_ch: usize,
    pub g1_hidden: Vec<usize>,
    pub d0_ch: (usize, usize),
    pub d1_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let gan = GanArch::default();
        ArchConfig {
            fc3_dim: 256,
            encoder_channels: (32, 64),
            hflip: false,
            g0_project_ch: gan.g0_project_ch,
            g0_mid_ch: gan.g0_mid_ch,
            g1_hidden: gan.g1_hidden,
            d0_ch: gan.d0_ch,
            d1_hidden: gan.d1_hidden,
        }
    }
}

impl ArchConfig {
    pub fn gan_arch(&self) -> GanArch {
        GanArch {
            g0_project_ch: self.g0_project_ch,
            g0_mid_ch: self.g0_mid_ch,
            g1_hidden: self.g1_hidden.clone(),
            d0_ch: self.d0_ch,
            d1_hidden: self.d1_hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub score_samples: usize,
    pub score_splits: usize,
    pub diversity_samples_per_condition: usize,
    pub nn_queries: usize,
    pub nn_k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            score_samples: 5000,
            score_splits: 10,
            diversity_samples_per_condition: 16,
            nn_queries: 8,
            nn_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SampleGridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for SampleGridConfig {
    fn default() -> Self {
        SampleGridConfig { rows: 8, cols: 8 }
    }
}

/// The full experiment description driving every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub variant: VariantName,
    pub loss_weights: WeightsConfig,
    pub noise_dim: NoiseDim,
    pub batch_size: BatchSize,
    pub optimizer: OptimConfig,
    pub schedule: ScheduleConfig,
    pub seeds: SganSeeds,
    pub arch: ArchConfig,
    pub metrics: MetricsConfig,
    pub sample_grid: SampleGridConfig,
    pub output_dir: OutputDir,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct VariantName(pub String);
impl Default for VariantName {
    fn default() -> Self {
        VariantName("SGAN".to_string())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct NoiseDim(pub usize);
impl Default for NoiseDim {
    fn default() -> Self {
        NoiseDim(50)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct BatchSize(pub usize);
impl Default for BatchSize {
    fn default() -> Self {
        BatchSize(64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct OutputDir(pub PathBuf);
impl Default for OutputDir {
    fn default() -> Self {
        OutputDir(PathBuf::from("runs/sganlab"))
    }
}

impl RunConfig {
    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant.0)
    }

    /// Semantic validation beyond JSON structure; names the offending key.
    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        self.loss_weights.to_weights().validate().map_err(|_| {
            Error::Config(format!(
                "loss_weights must be non-negative, got {:?}",
                self.loss_weights
            ))
        })?;
        if self.batch_size.0 < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.noise_dim.0 < 1 {
            return Err(Error::Config("noise_dim must be at least 1".into()));
        }
        if self.schedule.d_steps_per_iter < 1 || self.schedule.g_steps_per_iter < 1 {
            return Err(Error::Config(
                "schedule update ratios must be at least 1".into(),
            ));
        }
        self.optimizer.gan_hyper().validate().map_err(|_| {
            Error::Config(format!(
                "optimizer hyperparameters invalid: {:?}",
                self.optimizer
            ))
        })?;
        if let DatasetConfig::Synthetic {
            classes,
            image_size,
            per_class_train,
            per_class_test,
            ..
        } = &self.dataset
        {
            if *classes < 1 || *classes > MAX_SYNTHETIC_CLASSES {
                return Err(Error::Config(format!(
                    "dataset.classes must lie in 1..={MAX_SYNTHETIC_CLASSES}, got {classes}"
                )));
            }
            if *image_size < 12 || image_size % 4 != 0 {
                return Err(Error::Config(format!(
                    "dataset.image_size must be >= 12 and divisible by 4, got {image_size}"
                )));
            }
            if *per_class_train == 0 || *per_class_test == 0 {
                return Err(Error::Config(
                    "dataset per-class sample counts must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn encoder_train_config(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            epochs: self.schedule.encoder_epochs,
            batch_size: self.batch_size.0,
            lr: self.optimizer.encoder_lr,
            seed: self.seeds.init,
            fc3_dim: self.arch.fc3_dim,
            conv_channels: self.arch.encoder_channels,
            hflip: self.arch.hflip,
            cut_points: vec!["fc3".to_string()],
        }
    }

    pub fn sgan_settings(&self) -> SganTrainSettings {
        SganTrainSettings {
            batch_size: self.batch_size.0,
            independent_iterations: self.schedule.independent_iterations,
            joint_iterations: self.schedule.joint_iterations,
            weights: self.loss_weights.to_weights(),
            noise_dim: self.noise_dim.0,
            arch: self.arch.gan_arch(),
            hyper: self.optimizer.gan_hyper(),
            seeds: self.seeds,
            d_steps: self.schedule.d_steps_per_iter,
            g_steps: self.schedule.g_steps_per_iter,
        }
    }

    /// Load train and test splits; paths are checked here.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                per_class_train,
                per_class_test,
                image_size,
                seed,
            } => {
                let train = make_synthetic(*classes, *per_class_train, *image_size, *seed);
                let mut test =
                    make_synthetic(*classes, *per_class_test, *image_size, seed ^ 0x7E57);
                test.split = Split::Test;
                Ok((train, test))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                test.split = Split::Test;
                Ok((train, test))
            }
            DatasetConfig::Mnist { dir } => {
                let root = resolve_data_dir(dir.as_deref())?;
                let train = load_idx(
                    &root.join("train-images-idx3-ubyte"),
                    &root.join("train-labels-idx1-ubyte"),
                )?;
                let mut test = load_idx(
                    &root.join("t10k-images-idx3-ubyte"),
                    &root.join("t10k-labels-idx1-ubyte"),
                )?;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }
}

/// MNIST root: explicit dir, else $SGANLAB_DATA_DIR, else ./data.
pub fn resolve_data_dir(dir: Option<&Path>) -> Result<PathBuf> {
    let candidates: Vec<PathBuf> = match dir {
        Some(d) => vec![d.to_path_buf()],
        None => {
            let mut v = Vec::new();
            if let Ok(env_dir) = env::var(DATA_DIR_ENV) {
                v.push(PathBuf::from(env_dir));
            }
            v.push(PathBuf::from("data"));
            v
        }
    };
    for c in &candidates {
        if c.join("train-images-idx3-ubyte").exists() {
            return Ok(c.clone());
        }
    }
    Err(Error::Data(format!(
        "MNIST IDX files not found (looked in {:?}); set {DATA_DIR_ENV} or dataset.dir",
        candidates
    )))
}

/// Parse a config from a literal JSON document or a file path; unknown
/// keys are rejected and defaults fill the gaps.
pub fn parse_config(source: &str) -> Result<RunConfig> {
    let text = if source.trim_start().starts_with('{') {
        source.to_string()
    } else {
        fs::read_to_string(source)
            .map_err(|e| Error::Config(format!("cannot read config `{source}`: {e}")))?
    };
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Echo the fully resolved config next to the run artifacts.
pub fn write_resolved(cfg: &RunConfig, outdir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(outdir)?;
    let path = outdir.join("resolved_config.json");
    let pretty = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, pretty + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_full_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.variant().unwrap(), Variant::Sgan);
        let w = cfg.loss_weights.to_weights();
        assert_eq!((w.adversarial, w.conditional, w.entropy), (1.0, 1.0, 10.0));
        assert_eq!(cfg.noise_dim.0, 50);
        assert_eq!(cfg.batch_size.0, 64);
        assert_eq!(cfg.schedule.encoder_epochs, 5);
        assert_eq!(cfg.schedule.independent_iterations, 8000);
        assert_eq!(cfg.schedule.joint_iterations, 4000);
        assert_eq!(cfg.dataset, DatasetConfig::Mnist { dir: None });
    }

    #[test]
    fn partial_overrides_and_ablation_weights() {
        let cfg = parse_config(r#"{"loss_weights":{"l3":0}}"#).unwrap();
        let w = cfg.loss_weights.to_weights();
        assert_eq!(w.entropy, 0.0);
        assert_eq!(w.adversarial, 1.0);
        assert_eq!(w.conditional, 1.0);
    }

    #[test]
    fn bad_variant_and_unknown_keys_rejected() {
        assert!(parse_config(r#"{"variant":"bogus"}"#).is_err());
        assert!(parse_config(r#"{"varyant":"SGAN"}"#).is_err());
        assert!(parse_config(r#"{"loss_weights":{"l9":1}}"#).is_err());
        assert!(parse_config(r#"{"loss_weights":{"l1":-1}}"#).is_err());
        assert!(parse_config("not json").is_err());
    }

    #[test]
    fn parse_error_carries_line_info() {
        let err = parse_config("{\n \"variant\": 5\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn synthetic_dataset_roundtrip() {
        let cfg = parse_config(
            r#"{"dataset":{"kind":"synthetic","classes":4,"per_class_train":10,"per_class_test":5,"image_size":16,"seed":3}}"#,
        )
        .unwrap();
        let (train, test) = cfg.load_datasets().unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 20);
        assert_eq!(test.split, Split::Test);
        assert_eq!(train.num_classes, 4);

        assert!(parse_config(r#"{"dataset":{"kind":"synthetic","classes":40}}"#).is_err());
        assert!(parse_config(r#"{"dataset":{"kind":"synthetic","image_size":15}}"#).is_err());
    }

    #[test]
    fn resolved_echo_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(r#"{"variant":"DCGAN_adv","noise_dim":16}"#).unwrap();
        let path = write_resolved(&cfg, dir.path()).unwrap();
        let loaded = parse_config(path.to_str().unwrap()).unwrap();
        assert_eq!(cfg, loaded);
    }
}
