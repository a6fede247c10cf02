//! Experiment configuration files (TOML).
//!
//! Every key is optional; the defaults describe the two-layer MNIST model
//! trained with a MAP warm start followed by 50-particle SVGD.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttbnn_core::{
    Activation, Bandwidth, FactorizedShape, GammaHyper, LambdaInit, LambdaUpdate, LayerSpec,
    MapConfig, Network, Optimizer, Prior, RankVector, SvgdConfig, ThresholdPolicy,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `"map"` or `"svgd"`. SVGD starts from a MAP warm start run with the `[map]` settings.
    pub trainer: String,
    pub prior: PriorSection,
    pub layers: Vec<LayerSection>,
    pub map: MapSection,
    pub svgd: SvgdSection,
    pub threshold: ThresholdSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// Gamma shape of the rank scales.
    pub a: f64,
    /// Gamma rate of the rank scales.
    pub b: f64,
    pub weak_variance: f64,
    /// `"prior-mean"` or `"sample"`.
    pub lambda_init: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub max_rank: usize,
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub step_size: f64,
    /// Geometric decay target; defaults to `step_size` (constant).
    pub final_step_size: Option<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    /// `"adam"` or `"sgd"`.
    pub optimizer: String,
    /// `"gradient"` (optimizer step) or `"maximize"` (exact conditional
    /// maximizer after every step).
    pub lambda_update: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvgdSection {
    pub particles: usize,
    pub step_size: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Fixed RBF bandwidth; the median heuristic when absent.
    pub bandwidth: Option<f64>,
    /// `"adam"` or `"sgd"` (plain `x += step_size * phi`).
    pub optimizer: String,
    /// Move rank scales as `ln λ`.
    pub log_lambda: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub rel: f64,
    pub abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `"mnist"`, `"two-gaussians"` or `"xor"`.
    pub source: String,
    /// Directory with the four MNIST IDX files.
    pub dir: PathBuf,
    /// Use only the first `train_limit` training examples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Size of each generated toy split.
    pub toy_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            trainer: "svgd".into(),
            prior: PriorSection::default(),
            layers: vec![
                LayerSection {
                    rows: vec![7, 4, 7, 4],
                    cols: vec![5, 5, 5, 5],
                    max_rank: 20,
                    activation: "relu".into(),
                },
                LayerSection {
                    rows: vec![25, 25],
                    cols: vec![5, 2],
                    max_rank: 20,
                    activation: "softmax".into(),
                },
            ],
            map: MapSection::default(),
            svgd: SvgdSection::default(),
            threshold: ThresholdSection::default(),
            data: DataSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            a: 1.0,
            b: 5.0,
            weak_variance: 100.0,
            lambda_init: "prior-mean".into(),
        }
    }
}

impl Default for MapSection {
    fn default() -> Self {
        // 100 epochs of MNIST at batch size 100
        MapSection {
            step_size: 1e-3,
            final_step_size: None,
            iterations: 60_000,
            batch_size: 100,
            optimizer: "adam".into(),
            lambda_update: "gradient".into(),
        }
    }
}

impl Default for SvgdSection {
    fn default() -> Self {
        SvgdSection {
            particles: 50,
            step_size: 1e-3,
            iterations: 5000,
            batch_size: 100,
            bandwidth: None,
            optimizer: "adam".into(),
            log_lambda: false,
        }
    }
}

impl Default for ThresholdSection {
    fn default() -> Self {
        let p = ThresholdPolicy::default();
        ThresholdSection {
            rel: p.rel,
            abs: p.abs,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "mnist".into(),
            dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            toy_count: 200,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
        }
    }
}

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist { dir: PathBuf },
    TwoGaussians { count: usize },
    Xor { count: usize },
}

impl DataSource {
    /// Input width and class count of the source.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            DataSource::Mnist { .. } => (784, 10),
            _ => (2, 2),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Mnist { .. } => "mnist",
            DataSource::TwoGaussians { .. } => "two-gaussians",
            DataSource::Xor { .. } => "xor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    Map,
    Svgd,
}

impl TrainerKind {
    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::Map => "map",
            TrainerKind::Svgd => "svgd",
        }
    }
}

/// A validated configuration, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub trainer: TrainerKind,
    pub net: Network,
    pub prior: Prior,
    pub lambda_init: LambdaInit,
    pub map: MapConfig,
    pub svgd: SvgdConfig,
    pub particles: usize,
    pub policy: ThresholdPolicy,
    pub data: DataSource,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("{}: {}", path.display(), e)]))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<Experiment, CliError> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{} must be positive and finite, got {}", name, v));
            }
        };
        positive("prior.a", self.prior.a);
        positive("prior.b", self.prior.b);
        positive("prior.weak_variance", self.prior.weak_variance);
        positive("map.step_size", self.map.step_size);
        if let Some(f) = self.map.final_step_size {
            positive("map.final_step_size", f);
        }
        positive("svgd.step_size", self.svgd.step_size);
        if let Some(h) = self.svgd.bandwidth {
            positive("svgd.bandwidth", h);
        }

        let trainer = match self.trainer.as_str() {
            "map" => Some(TrainerKind::Map),
            "svgd" => Some(TrainerKind::Svgd),
            other => {
                errs.push(format!(
                    "trainer must be \"map\" or \"svgd\", got {:?}",
                    other
                ));
                None
            }
        };
        let lambda_init = match self.prior.lambda_init.as_str() {
            "prior-mean" => Some(LambdaInit::PriorMean),
            "sample" => Some(LambdaInit::Sample),
            other => {
                errs.push(format!(
                    "prior.lambda_init must be \"prior-mean\" or \"sample\", got {:?}",
                    other
                ));
                None
            }
        };
        let mut optimizer_of = |key: &str, name: &str| match name {
            "adam" => Some(Optimizer::adam()),
            "sgd" => Some(Optimizer::Sgd),
            other => {
                errs.push(format!(
                    "{} must be \"adam\" or \"sgd\", got {:?}",
                    key, other
                ));
                None
            }
        };
        let optimizer = optimizer_of("map.optimizer", &self.map.optimizer);
        let svgd_optimizer = optimizer_of("svgd.optimizer", &self.svgd.optimizer);
        let lambda_update = match self.map.lambda_update.as_str() {
            "gradient" => Some(LambdaUpdate::Gradient),
            "maximize" => Some(LambdaUpdate::Maximize),
            other => {
                errs.push(format!(
                    "map.lambda_update must be \"gradient\" or \"maximize\", got {:?}",
                    other
                ));
                None
            }
        };
        if self.map.batch_size == 0 {
            errs.push("map.batch_size must be at least 1".into());
        }
        if self.svgd.batch_size == 0 {
            errs.push("svgd.batch_size must be at least 1".into());
        }
        if self.svgd.particles == 0 {
            errs.push("svgd.particles must be at least 1".into());
        }
        for (name, v) in [
            ("threshold.rel", self.threshold.rel),
            ("threshold.abs", self.threshold.abs),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!(
                    "{} must be finite and nonnegative, got {}",
                    name, v
                ));
            }
        }
        let data = match self.data.source.as_str() {
            "mnist" => Some(DataSource::Mnist {
                dir: self.data.dir.clone(),
            }),
            "two-gaussians" => Some(DataSource::TwoGaussians {
                count: self.data.toy_count,
            }),
            "xor" => Some(DataSource::Xor {
                count: self.data.toy_count,
            }),
            other => {
                errs.push(format!(
                    "data.source must be \"mnist\", \"two-gaussians\" or \"xor\", got {:?}",
                    other
                ));
                None
            }
        };
        if matches!(
            data,
            Some(DataSource::TwoGaussians { .. } | DataSource::Xor { .. })
        ) && self.data.toy_count < 4
        {
            errs.push("data.toy_count must be at least 4".into());
        }
        if self.data.train_limit == Some(0) {
            errs.push("data.train_limit must be at least 1".into());
        }

        let net = self.build_network(&mut errs);
        if let (Some(net), Some(data)) = (&net, &data) {
            let (dim, classes) = data.dims();
            if net.input_dim() != dim || net.classes() != classes {
                errs.push(format!(
                    "the network maps {} -> {} but the {} data is {} -> {}",
                    net.input_dim(),
                    net.classes(),
                    data.name(),
                    dim,
                    classes
                ));
            }
        }

        if !errs.is_empty() {
            return Err(CliError::Config(errs));
        }
        let (trainer, lambda_init, optimizer, data, net) = (
            trainer.expect("checked"),
            lambda_init.expect("checked"),
            optimizer.expect("checked"),
            data.expect("checked"),
            net.expect("checked"),
        );
        Ok(Experiment {
            seed: self.seed,
            trainer,
            net,
            prior: Prior {
                hyper: GammaHyper::new(self.prior.a, self.prior.b)
                    .map_err(|e| CliError::Config(vec![e.to_string()]))?,
                weak_variance: self.prior.weak_variance,
            },
            lambda_init,
            map: MapConfig {
                step_size: self.map.step_size,
                final_step_size: self.map.final_step_size.unwrap_or(self.map.step_size),
                iterations: self.map.iterations,
                batch_size: self.map.batch_size,
                optimizer,
                lambda_update: lambda_update.expect("checked"),
                seed: self.seed,
            },
            svgd: SvgdConfig {
                step_size: self.svgd.step_size,
                iterations: self.svgd.iterations,
                batch_size: self.svgd.batch_size,
                bandwidth: self
                    .svgd
                    .bandwidth
                    .map_or(Bandwidth::Median, Bandwidth::Fixed),
                optimizer: svgd_optimizer.expect("checked"),
                log_lambda: self.svgd.log_lambda,
                seed: self.seed.wrapping_add(1),
            },
            particles: self.svgd.particles,
            policy: ThresholdPolicy {
                rel: self.threshold.rel,
                abs: self.threshold.abs,
            },
            data,
            train_limit: self.data.train_limit,
            test_limit: self.data.test_limit,
            out_dir: self.output.dir.clone(),
            checkpoint_every: self.output.checkpoint_every,
        })
    }

    fn build_network(&self, errs: &mut Vec<String>) -> Option<Network> {
        if self.layers.is_empty() {
            errs.push("at least one [[layers]] entry is required".into());
            return None;
        }
        let before = errs.len();
        let mut specs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let shape = match FactorizedShape::new(l.rows.clone(), l.cols.clone()) {
                Ok(s) => Some(s),
                Err(e) => {
                    errs.push(format!("layers[{}]: {}", i, e));
                    None
                }
            };
            let ranks = match (l.max_rank, &shape) {
                (0, _) => {
                    errs.push(format!("layers[{}].max_rank must be at least 1", i));
                    None
                }
                (r, Some(s)) => RankVector::uniform(s.order(), r)
                    .map_err(|e| errs.push(format!("layers[{}]: {}", i, e)))
                    .ok(),
                _ => None,
            };
            let activation = Activation::from_name(&l.activation);
            if activation.is_none() {
                errs.push(format!(
                    "layers[{}].activation must be relu, softmax or identity, got {:?}",
                    i, l.activation
                ));
            }
            if let (Some(shape), Some(ranks), Some(activation)) = (shape, ranks, activation) {
                specs.push(LayerSpec {
                    shape,
                    ranks,
                    activation,
                });
            }
        }
        if errs.len() > before {
            return None;
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                errs.push(format!(
                    "layers[{}] has {} outputs but layers[{}] has {} inputs",
                    i,
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                ));
            }
        }
        if errs.len() > before {
            return None;
        }
        Network::new(specs)
            .map_err(|e| errs.push(e.to_string()))
            .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_mnist_model() {
        let exp = ExperimentConfig::default().validate().unwrap();
        let l1 = &exp.net.layers()[0];
        assert_eq!(l1.shape.row_factors(), &[7, 4, 7, 4]);
        assert_eq!(l1.shape.col_factors(), &[5, 5, 5, 5]);
        assert_eq!(l1.ranks.as_slice(), &[1, 20, 20, 20, 1]);
        assert_eq!(exp.net.layers()[1].ranks.as_slice(), &[1, 20, 1]);
        assert_eq!(exp.prior.hyper.a, 1.0);
        assert_eq!(exp.prior.hyper.b, 5.0);
        assert_eq!(exp.particles, 50);
        assert_eq!(exp.svgd.iterations, 5000);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn all_errors_reported_together() {
        let text = r#"
trainer = "mcmc"
[prior]
a = -1.0
[map]
batch_size = 0
[[layers]]
rows = [7, 4, 7, 4]
cols = [5, 5, 5, 5]
max_rank = 20
activation = "relu"
[[layers]]
rows = [25, 24]
cols = [5, 2]
max_rank = 20
activation = "softmax"
"#;
        match ExperimentConfig::from_toml(text).unwrap().validate() {
            Err(CliError::Config(errs)) => {
                assert_eq!(errs.len(), 4, "{:?}", errs);
                assert!(errs.iter().any(|e| e.contains("trainer")));
                assert!(errs.iter().any(|e| e.contains("prior.a")));
                assert!(errs.iter().any(|e| e.contains("batch_size")));
                assert!(errs.iter().any(|e| e.contains("625 outputs")));
            }
            other => panic!("expected config errors, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn svgd_options_reach_the_trainer() {
        let cfg = ExperimentConfig::from_toml(
            "[svgd]\noptimizer = \"sgd\"\nlog_lambda = true\nbandwidth = 2.0\n",
        )
        .unwrap();
        let svgd = cfg.validate().unwrap().svgd;
        assert_eq!(svgd.optimizer, Optimizer::Sgd);
        assert!(svgd.log_lambda);
        assert_eq!(svgd.bandwidth, Bandwidth::Fixed(2.0));
        assert!(
            !ExperimentConfig::default()
                .validate()
                .unwrap()
                .svgd
                .log_lambda
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("sede = 3").is_err());
    }

    #[test]
    fn data_dims_must_match() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.source = "xor".into();
        assert!(cfg.validate().is_err());
    }
}
