//! Run configuration in flat `key = value` text.
//!
//! Unknown and repeated keys are errors. Keys left out keep the desk-scale
//! defaults of [`RunConfig::default`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arfam::{key_value_lines, ArfamConfig};
use crate::candidates::{NoiseConfig, OpKind};
use crate::data::{self, gen_synthetic_split, Dataset, SyntheticSpec, CIFAR_MEAN, CIFAR_STD};
use crate::error::{Error, Result};
use crate::model::BackboneSpec;
use crate::rf::DEFAULT_ERF_SAMPLES;
use crate::search::SearchConfig;
use crate::tensor::Real;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Cifar10 { dir: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    pub n_test: usize,
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            n_test: 1024,
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }
    }
}

impl DatasetSpec {
    pub fn n_classes(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.synthetic.n_classes,
            DataSource::Cifar10 { .. } => 10,
        }
    }

    pub fn channels(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.synthetic.channels,
            DataSource::Cifar10 { .. } => 3,
        }
    }

    /// `(train, test)` sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.source {
            DataSource::Synthetic => {
                let test = SyntheticSpec { n_samples: self.n_test, ..self.synthetic.clone() };
                Ok((gen_synthetic_split(&self.synthetic, "train")?, gen_synthetic_split(&test, "test")?))
            }
            DataSource::Cifar10 { dir } => {
                let mut parts = Vec::new();
                for i in 1..=5 {
                    let p = dir.join(format!("data_batch_{i}.bin"));
                    if p.exists() {
                        parts.push(data::load_cifar10(&p)?);
                    }
                }
                let mut train = data::concat(parts)?;
                let mut test = data::load_cifar10(dir.join("test_batch.bin"))?;
                train.normalize(&self.mean, &self.std)?;
                test.normalize(&self.mean, &self.std)?;
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeConfig {
    pub erf_hw: (usize, usize),
    pub erf_samples: usize,
    pub verify_trials: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { erf_hw: (32, 32), erf_samples: DEFAULT_ERF_SAMPLES, verify_trials: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub sigmas: Vec<Real>,
    pub mus: Vec<Real>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { sigmas: vec![0.0, 2.0], mus: vec![0.0], seeds: (0..8).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub backbone: BackboneSpec,
    pub arfam: ArfamConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub analyze: AnalyzeConfig,
    pub sweep: SweepConfig,
    /// Genotype file for `retrain`, `eval` and `analyze`.
    pub genotype: Option<PathBuf>,
    /// Parameter snapshot for `eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            backbone: BackboneSpec::default(),
            arfam: ArfamConfig::default(),
            search: SearchConfig::desk(),
            train: TrainConfig::default(),
            analyze: AnalyzeConfig::default(),
            sweep: SweepConfig::default(),
            genotype: None,
            checkpoint: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split_whitespace().map(|s| s.parse::<T>().map_err(|_| format!("bad value `{s}`"))).collect()
}

fn parse_one<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("bad value `{v}`"))
}

fn parse_pair<T: std::str::FromStr + Copy>(v: &str) -> std::result::Result<(T, T), String> {
    match parse_list::<T>(v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two values, got `{v}`")),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_stages(v: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    v.split_whitespace()
        .map(|s| {
            let (c, b) = s.split_once('x').ok_or_else(|| format!("stage `{s}` is not CxB"))?;
            Ok((parse_one(c)?, parse_one(b)?))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

/// `None` for 0, which disables the option.
fn optional(v: Real) -> Option<Real> {
    (v > 0.0).then_some(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let (mut mu, mut sigma, mut noise_on) = (cfg.search.noise.mu, cfg.search.noise.sigma, cfg.search.noise.enabled);
        for item in key_value_lines(text) {
            let (line, key, v) = item?;
            if !seen.insert(key.to_string()) {
                return Err(Error::parse(line, format!("duplicate key `{key}`")));
            }
            let perr = |m: String| Error::parse(line, format!("{key}: {m}"));
            match key {
                "format_version" => {
                    let n: u32 = parse_one(v).map_err(perr)?;
                    if n != CONFIG_VERSION {
                        return Err(perr(format!("unsupported version {n}")));
                    }
                }
                "seed" => cfg.seed = parse_one(v).map_err(perr)?,
                "dataset" => {
                    cfg.dataset.source = match v {
                        "synthetic" => DataSource::Synthetic,
                        "cifar10" => DataSource::Cifar10 { dir: PathBuf::new() },
                        _ => return Err(perr(format!("unknown dataset `{v}`"))),
                    }
                }
                "data_path" => {
                    if let DataSource::Cifar10 { dir } = &mut cfg.dataset.source {
                        *dir = PathBuf::from(v);
                    } else {
                        return Err(perr("only valid after `dataset = cifar10`".into()));
                    }
                }
                "data_seed" => cfg.dataset.synthetic.seed = parse_one(v).map_err(perr)?,
                "image_hw" => cfg.dataset.synthetic.image_hw = parse_pair(v).map_err(perr)?,
                "image_channels" => cfg.dataset.synthetic.channels = parse_one(v).map_err(perr)?,
                "n_classes" => cfg.dataset.synthetic.n_classes = parse_one(v).map_err(perr)?,
                "n_train" => cfg.dataset.synthetic.n_samples = parse_one(v).map_err(perr)?,
                "n_test" => cfg.dataset.n_test = parse_one(v).map_err(perr)?,
                "data_noise_std" => cfg.dataset.synthetic.noise_std = parse_one(v).map_err(perr)?,
                "normalize_mean" => cfg.dataset.mean = parse_list(v).map_err(perr)?,
                "normalize_std" => cfg.dataset.std = parse_list(v).map_err(perr)?,
                "stem_channels" => cfg.backbone.stem_channels = parse_one(v).map_err(perr)?,
                "stages" => cfg.backbone.stages = parse_stages(v).map_err(perr)?,
                "n_nodes" => cfg.arfam.n_nodes = parse_one(v).map_err(perr)?,
                "r_spatial" => cfg.arfam.r_spatial = parse_one(v).map_err(perr)?,
                "r_channel" => cfg.arfam.r_channel = parse_one(v).map_err(perr)?,
                "candidates" => {
                    cfg.arfam.candidates = v
                        .split(',')
                        .map(|s| s.trim().parse::<OpKind>().map_err(&perr))
                        .collect::<Result<Vec<_>>>()?
                }
                "search_epochs" => cfg.search.epochs = parse_one(v).map_err(perr)?,
                "search_batch_size" => cfg.search.batch_size = parse_one(v).map_err(perr)?,
                "w_lr" => cfg.search.w_lr = parse_one(v).map_err(perr)?,
                "w_momentum" => cfg.search.w_momentum = parse_one(v).map_err(perr)?,
                "w_weight_decay" => cfg.search.w_weight_decay = parse_one(v).map_err(perr)?,
                "alpha_lr" => cfg.search.alpha_lr = parse_one(v).map_err(perr)?,
                "alpha_betas" => cfg.search.alpha_betas = parse_pair(v).map_err(perr)?,
                "alpha_weight_decay" => cfg.search.alpha_weight_decay = parse_one(v).map_err(perr)?,
                "noise_mu" => mu = parse_one(v).map_err(perr)?,
                "noise_sigma" => sigma = parse_one(v).map_err(perr)?,
                "noise_enabled" => noise_on = parse_bool(v).map_err(perr)?,
                "val_fraction" => cfg.search.val_fraction = parse_one(v).map_err(perr)?,
                "search_grad_clip" => cfg.search.grad_clip = optional(parse_one(v).map_err(perr)?),
                "train_epochs" => cfg.train.epochs = parse_one(v).map_err(perr)?,
                "train_batch_size" => cfg.train.batch_size = parse_one(v).map_err(perr)?,
                "train_lr" => cfg.train.lr = parse_one(v).map_err(perr)?,
                "train_momentum" => cfg.train.momentum = parse_one(v).map_err(perr)?,
                "train_weight_decay" => cfg.train.weight_decay = parse_one(v).map_err(perr)?,
                "label_smoothing" => cfg.train.label_smoothing = parse_one(v).map_err(perr)?,
                "cutout" => cfg.train.cutout = parse_one(v).map_err(perr)?,
                "train_grad_clip" => cfg.train.grad_clip = optional(parse_one(v).map_err(perr)?),
                "genotype" => cfg.genotype = Some(PathBuf::from(v)),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
                "erf_hw" => cfg.analyze.erf_hw = parse_pair(v).map_err(perr)?,
                "erf_samples" => cfg.analyze.erf_samples = parse_one(v).map_err(perr)?,
                "verify_trials" => cfg.analyze.verify_trials = parse_one(v).map_err(perr)?,
                "sweep_sigmas" => cfg.sweep.sigmas = parse_list(v).map_err(perr)?,
                "sweep_mus" => cfg.sweep.mus = parse_list(v).map_err(perr)?,
                "sweep_seeds" => cfg.sweep.seeds = parse_list(v).map_err(perr)?,
                _ => return Err(Error::parse(line, format!("unknown key `{key}`"))),
            }
        }
        cfg.search.noise = NoiseConfig { mu, sigma, enabled: noise_on };
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::parse(&text)?, text))
    }

    /// Sets the run seed, which also seeds search and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.search.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.arfam.validate()?;
        self.search.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train_batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Backbone with the class and channel counts of the dataset.
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec { in_channels: self.dataset.channels(), n_classes: self.dataset.n_classes(), ..self.backbone.clone() }
    }

    /// Every key with its effective value, in canonical order.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").unwrap();
        let d = &self.dataset;
        let s = &self.search;
        let t = &self.train;
        kv("format_version", CONFIG_VERSION.to_string());
        kv("seed", self.seed.to_string());
        match &d.source {
            DataSource::Synthetic => kv("dataset", "synthetic".into()),
            DataSource::Cifar10 { dir } => {
                kv("dataset", "cifar10".into());
                kv("data_path", dir.display().to_string());
            }
        }
        kv("data_seed", d.synthetic.seed.to_string());
        kv("image_hw", format!("{} {}", d.synthetic.image_hw.0, d.synthetic.image_hw.1));
        kv("image_channels", d.synthetic.channels.to_string());
        kv("n_classes", d.synthetic.n_classes.to_string());
        kv("n_train", d.synthetic.n_samples.to_string());
        kv("n_test", d.n_test.to_string());
        kv("data_noise_std", d.synthetic.noise_std.to_string());
        kv("normalize_mean", join(&d.mean));
        kv("normalize_std", join(&d.std));
        kv("stem_channels", self.backbone.stem_channels.to_string());
        kv("stages", self.backbone.stages.iter().map(|(c, b)| format!("{c}x{b}")).collect::<Vec<_>>().join(" "));
        kv("n_nodes", self.arfam.n_nodes.to_string());
        kv("r_spatial", self.arfam.r_spatial.to_string());
        kv("r_channel", self.arfam.r_channel.to_string());
        kv("candidates", self.arfam.candidates.iter().map(|o| o.name()).collect::<Vec<_>>().join(","));
        kv("search_epochs", s.epochs.to_string());
        kv("search_batch_size", s.batch_size.to_string());
        kv("w_lr", s.w_lr.to_string());
        kv("w_momentum", s.w_momentum.to_string());
        kv("w_weight_decay", s.w_weight_decay.to_string());
        kv("alpha_lr", s.alpha_lr.to_string());
        kv("alpha_betas", format!("{} {}", s.alpha_betas.0, s.alpha_betas.1));
        kv("alpha_weight_decay", s.alpha_weight_decay.to_string());
        kv("noise_mu", s.noise.mu.to_string());
        kv("noise_sigma", s.noise.sigma.to_string());
        kv("noise_enabled", s.noise.enabled.to_string());
        kv("val_fraction", s.val_fraction.to_string());
        kv("search_grad_clip", s.grad_clip.unwrap_or(0.0).to_string());
        kv("train_epochs", t.epochs.to_string());
        kv("train_batch_size", t.batch_size.to_string());
        kv("train_lr", t.lr.to_string());
        kv("train_momentum", t.momentum.to_string());
        kv("train_weight_decay", t.weight_decay.to_string());
        kv("label_smoothing", t.label_smoothing.to_string());
        kv("cutout", t.cutout.to_string());
        kv("train_grad_clip", t.grad_clip.unwrap_or(0.0).to_string());
        if let Some(g) = &self.genotype {
            kv("genotype", g.display().to_string());
        }
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        kv("erf_hw", format!("{} {}", self.analyze.erf_hw.0, self.analyze.erf_hw.1));
        kv("erf_samples", self.analyze.erf_samples.to_string());
        kv("verify_trials", self.analyze.verify_trials.to_string());
        kv("sweep_sigmas", join(&self.sweep.sigmas));
        kv("sweep_mus", join(&self.sweep.mus));
        kv("sweep_seeds", join(&self.sweep.seeds));
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn effective_text_round_trips() {
        let text = "seed = 7\nstages = 4x2 8x1\nnoise_sigma = 0\ncandidates = max3,zero\nsweep_seeds = 1 2 3\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.search.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.backbone.stages, vec![(4, 2), (8, 1)]);
        assert_eq!(cfg.search.noise.sigma, 0.0);
        assert_eq!(cfg.arfam.candidates, vec![OpKind::MaxPool3, OpKind::Zero]);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("w_lr = fast"), Err(Error::Parse { .. })));
        assert!(matches!(RunConfig::parse("format_version = 9"), Err(Error::Parse { .. })));
        assert!(matches!(RunConfig::parse("noise_sigma = -1"), Err(Error::NegativeSigma(_))));
        assert!(RunConfig::parse("data_path = /tmp").is_err());
        assert!(RunConfig::parse("n_nodes = 1").is_err());
        assert!(RunConfig::parse("stages = 8").is_err());
    }

    #[test]
    fn cifar_source() {
        let cfg = RunConfig::parse("dataset = cifar10\ndata_path = /data/cifar").unwrap();
        assert_eq!(cfg.dataset.source, DataSource::Cifar10 { dir: PathBuf::from("/data/cifar") });
        assert_eq!(cfg.backbone().n_classes, 10);
        assert!(cfg.to_text().contains("data_path = /data/cifar\n"));
    }

    #[test]
    fn synthetic_train_and_test_differ() {
        let cfg = RunConfig::parse("n_train = 32\nn_test = 16").unwrap();
        let (train, test) = cfg.dataset.load().unwrap();
        assert_eq!((train.len(), test.len()), (32, 16));
        assert_ne!(train.images.data()[..16], test.images.data()[..16]);
    }
}
