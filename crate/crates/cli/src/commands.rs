//! The `train`, `evaluate`, `compress`, `predict` and `inspect` commands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttbnn_core::data::{load_idx, make_toy};
use ttbnn_core::inference::{
    evaluate_ensemble, predictive_distribution, EnsembleMetrics, Predictive,
};
use ttbnn_core::rank_prune::{estimate_ranks, posterior_mean_lambda, prune_model};
use ttbnn_core::{
    Dataset, Ensemble, MapTrainer, Particle, PruneReport, SvgdTrainer, ThresholdPolicy, ToyKind,
    TracePoint,
};

use crate::archive::{load_archive, save_archive, Metadata, ModelArchive};
use crate::config::{DataSource, Experiment, ExperimentConfig, TrainerKind};
use crate::error::CliError;

/// Salt mixed into the seed of generated toy test splits.
const TOY_TEST_SALT: u64 = 0x7e57_5eed;

pub const ARCHIVE_NAME: &str = "model.ttb";
pub const CHECKPOINT_NAME: &str = "checkpoint.ttb";
pub const METRICS_NAME: &str = "metrics.csv";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {}", path.display(), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads one split of a data source; toy splits are regenerated from `seed`.
pub fn load_split(
    source: &DataSource,
    split: Split,
    limit: Option<usize>,
    seed: u64,
) -> Result<Dataset, CliError> {
    let data = match source {
        DataSource::Mnist { dir } => {
            let (img, lab) = match split {
                Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            };
            load_idx(&dir.join(img), &dir.join(lab))?
        }
        DataSource::TwoGaussians { count } | DataSource::Xor { count } => {
            let kind = if matches!(source, DataSource::Xor { .. }) {
                ToyKind::Xor
            } else {
                ToyKind::TwoGaussians
            };
            let seed = match split {
                Split::Train => seed,
                Split::Test => seed ^ TOY_TEST_SALT,
            };
            make_toy(kind, *count, seed)?
        }
    };
    Ok(match limit {
        Some(n) => data.head(n),
        None => data,
    })
}

fn source_of(meta: &Metadata, data_dir: Option<&Path>) -> Result<DataSource, CliError> {
    let count = meta.toy_count as usize;
    match meta.dataset.as_str() {
        "mnist" => Ok(DataSource::Mnist {
            dir: data_dir
                .map(Path::to_path_buf)
                .unwrap_or_else(default_mnist_dir),
        }),
        "two-gaussians" => Ok(DataSource::TwoGaussians { count }),
        "xor" => Ok(DataSource::Xor { count }),
        other => Err(CliError::Data(format!(
            "archive names an unknown dataset {:?}",
            other
        ))),
    }
}

/// `$MNIST_DIR`, or `data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn read_archive(path: &Path) -> Result<ModelArchive, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(load_archive(&bytes)?)
}

/// Writes through a temporary file so a crash never leaves a partial archive.
pub fn write_archive(path: &Path, model: &ModelArchive) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, save_archive(model)).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Command-line overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub iterations: Option<usize>,
    pub out: Option<PathBuf>,
    pub tau_rel: Option<f64>,
    pub tau_abs: Option<f64>,
}

impl Overrides {
    /// `iterations` applies to the configured trainer's main phase.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.particles {
            cfg.svgd.particles = n;
        }
        if let Some(it) = self.iterations {
            if cfg.trainer == "map" {
                cfg.map.iterations = it;
            } else {
                cfg.svgd.iterations = it;
            }
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(r) = self.tau_rel {
            cfg.threshold.rel = r;
        }
        if let Some(a) = self.tau_abs {
            cfg.threshold.abs = a;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub archive_path: PathBuf,
    pub metrics_path: PathBuf,
    pub model: ModelArchive,
    pub test: Option<EnsembleMetrics>,
}

struct Checkpointer<'a> {
    exp: &'a Experiment,
    path: PathBuf,
    written: bool,
}

impl Checkpointer<'_> {
    fn due(&self, step: usize) -> bool {
        self.exp.checkpoint_every > 0 && step.is_multiple_of(self.exp.checkpoint_every)
    }

    fn save(
        &mut self,
        particles: &[Particle],
        trainer: &str,
        iterations: u64,
    ) -> Result<(), CliError> {
        write_archive(
            &self.path,
            &archive_for(self.exp, particles.to_vec(), trainer, iterations),
        )?;
        self.written = true;
        Ok(())
    }

    fn abort(&self, err: ttbnn_core::Error) -> CliError {
        match err {
            ttbnn_core::Error::Numeric { .. } => {
                let kept = if self.written {
                    format!("last good checkpoint: {}", self.path.display())
                } else {
                    "no checkpoint was written".to_string()
                };
                CliError::Numeric(format!("{}; {}", err, kept))
            }
            other => other.into(),
        }
    }
}

fn archive_for(
    exp: &Experiment,
    particles: Vec<Particle>,
    trainer: &str,
    iterations: u64,
) -> ModelArchive {
    let toy_count = match exp.data {
        DataSource::TwoGaussians { count } | DataSource::Xor { count } => count as u64,
        DataSource::Mnist { .. } => 0,
    };
    ModelArchive {
        meta: Metadata {
            seed: exp.seed,
            iterations,
            trainer: trainer.into(),
            dataset: exp.data.name().into(),
            toy_count,
            threshold: None,
        },
        prior: exp.prior,
        net: exp.net.clone(),
        particles,
    }
}

fn metrics_row(w: &mut impl Write, phase: &str, t: &TracePoint) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{}",
        phase, t.iteration, t.log_posterior, t.accuracy
    )
}

/// Trains per the configuration and writes the archive, metrics and checkpoints
/// into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let exp = cfg.validate()?;
    fs::create_dir_all(&exp.out_dir).map_err(|e| io_err(&exp.out_dir, e))?;
    let train = load_split(&exp.data, Split::Train, exp.train_limit, exp.seed)?;
    if train.is_empty() {
        return Err(CliError::Data("the training set is empty".into()));
    }

    let metrics_path = exp.out_dir.join(METRICS_NAME);
    let mut metrics =
        BufWriter::new(fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    writeln!(metrics, "phase,iteration,log_posterior,accuracy")?;
    let mut ckpt = Checkpointer {
        exp: &exp,
        path: exp.out_dir.join(CHECKPOINT_NAME),
        written: false,
    };

    let mut particle = Particle::init(&exp.net, &exp.prior, exp.lambda_init, exp.seed)?;
    let mut done: u64 = 0;
    if exp.map.iterations > 0 {
        let mut trainer = MapTrainer::new(&exp.net, exp.prior, &train, exp.map)?;
        for step in 1..=exp.map.iterations {
            let point = match trainer.step(&mut particle) {
                Ok(p) => p,
                Err(e) => {
                    metrics.flush()?;
                    return Err(ckpt.abort(e));
                }
            };
            metrics_row(&mut metrics, "map", &point)?;
            done += 1;
            if ckpt.due(step) {
                ckpt.save(std::slice::from_ref(&particle), "map", done)?;
            }
        }
        writeln!(log, "map: {} iterations", exp.map.iterations)?;
    }

    let particles = match exp.trainer {
        TrainerKind::Map => vec![particle],
        TrainerKind::Svgd => {
            let mut ensemble =
                Ensemble::from_warm_start(particle, exp.particles, exp.seed.wrapping_add(2))?;
            if exp.svgd.iterations > 0 {
                let mut trainer = SvgdTrainer::new(&exp.net, exp.prior, &train, exp.svgd)?;
                for step in 1..=exp.svgd.iterations {
                    let point = match trainer.step(&mut ensemble) {
                        Ok(p) => p,
                        Err(e) => {
                            metrics.flush()?;
                            return Err(ckpt.abort(e));
                        }
                    };
                    metrics_row(&mut metrics, "svgd", &point)?;
                    done += 1;
                    if ckpt.due(step) {
                        ckpt.save(ensemble.particles(), "svgd", done)?;
                    }
                }
                writeln!(
                    log,
                    "svgd: {} iterations, {} particles",
                    exp.svgd.iterations, exp.particles
                )?;
            }
            ensemble.into_particles()
        }
    };
    metrics.flush()?;

    let trainer_name = if done == 0 {
        "init"
    } else {
        exp.trainer.name()
    };
    let model = archive_for(&exp, particles, trainer_name, done);
    let archive_path = exp.out_dir.join(ARCHIVE_NAME);
    write_archive(&archive_path, &model)?;
    writeln!(log, "wrote {}", archive_path.display())?;

    let estimate = estimate_ranks(&posterior_mean_lambda(&model.particles)?, &exp.policy)?;
    let ranks: Vec<String> = estimate
        .layers
        .iter()
        .map(|l| format!("({})", join(l.ranks.as_slice())))
        .collect();
    writeln!(
        log,
        "ranks at tau_rel={} tau_abs={}: {}",
        exp.policy.rel,
        exp.policy.abs,
        ranks.join(" ")
    )?;

    let test = match load_split(&exp.data, Split::Test, exp.test_limit, exp.seed) {
        Ok(t) if !t.is_empty() => {
            let m = evaluate_ensemble(&Ensemble::new(model.particles.clone())?, &model.net, &t)?;
            writeln!(
                log,
                "test accuracy={} test_ll={}",
                m.accuracy, m.test_log_likelihood
            )?;
            Some(m)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        archive_path,
        metrics_path,
        model,
        test,
    })
}

/// Accuracy and Test LL of an archive on its dataset's test split.
pub fn cmd_evaluate(
    archive: &Path,
    data_dir: Option<&Path>,
    limit: Option<usize>,
    out: &mut dyn Write,
) -> Result<EnsembleMetrics, CliError> {
    let model = read_archive(archive)?;
    let source = source_of(&model.meta, data_dir)?;
    let test = load_split(&source, Split::Test, limit, model.meta.seed)?;
    evaluate_model(&model, &test, out)
}

pub fn evaluate_model(
    model: &ModelArchive,
    test: &Dataset,
    out: &mut dyn Write,
) -> Result<EnsembleMetrics, CliError> {
    if test.is_empty() {
        return Err(CliError::Usage("the test set is empty".into()));
    }
    if test.dim() != model.net.input_dim() || test.classes() != model.net.classes() {
        return Err(CliError::Data(format!(
            "test data is {} -> {} but the model is {} -> {}",
            test.dim(),
            test.classes(),
            model.net.input_dim(),
            model.net.classes()
        )));
    }
    let m = evaluate_ensemble(&Ensemble::new(model.particles.clone())?, &model.net, test)?;
    writeln!(out, "particles={}", model.particles.len())?;
    writeln!(out, "examples={}", test.len())?;
    writeln!(out, "accuracy={}", m.accuracy)?;
    writeln!(out, "test_ll={}", m.test_log_likelihood)?;
    Ok(m)
}

/// Uniform `[0, 1)` inputs used to measure how much pruning moves the outputs.
pub fn probe_inputs(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * dim).map(|_| rng.random::<f64>()).collect()
}

pub fn compress_model(
    model: &ModelArchive,
    policy: &ThresholdPolicy,
    probe_rows: usize,
) -> Result<(ModelArchive, PruneReport), CliError> {
    let mean = posterior_mean_lambda(&model.particles)?;
    let estimate = estimate_ranks(&mean, policy)?;
    let probe = probe_inputs(probe_rows, model.net.input_dim(), model.meta.seed);
    let probe = (probe_rows > 0).then_some(probe.as_slice());
    let (net, particles, report) = prune_model(&model.net, &model.particles, &estimate, probe)?;
    let mut meta = model.meta.clone();
    meta.threshold = Some(*policy);
    Ok((
        ModelArchive {
            meta,
            prior: model.prior,
            net,
            particles,
        },
        report,
    ))
}

/// Prunes an archive; writes the compact archive to `out_path` and the
/// key-value report next to it (`<out_path>.report`).
pub fn cmd_compress(
    archive: &Path,
    out_path: &Path,
    policy: &ThresholdPolicy,
    probe_rows: usize,
    out: &mut dyn Write,
) -> Result<PruneReport, CliError> {
    let model = read_archive(archive)?;
    let (pruned, report) = compress_model(&model, policy, probe_rows)?;
    write_archive(out_path, &pruned)?;
    let report_path = PathBuf::from(format!("{}.report", out_path.display()));
    fs::write(&report_path, report.to_key_values()).map_err(|e| io_err(&report_path, e))?;
    write!(out, "{}", report.to_text())?;
    writeln!(
        out,
        "wrote {} and {}",
        out_path.display(),
        report_path.display()
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictInput {
    /// Row of the archive dataset's test split.
    Index(usize),
    /// Text file of whitespace- or comma-separated input values.
    File(PathBuf),
}

pub fn parse_input_file(path: &Path, dim: usize) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}: {:?} is not a finite number",
                        path.display(),
                        t
                    ))
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != dim {
        return Err(CliError::Usage(format!(
            "{}: expected {} values, found {}",
            path.display(),
            dim,
            values.len()
        )));
    }
    Ok(values)
}

/// Writes the predictive distribution of one input as CSV: the mean, the
/// across-particle standard deviation, then one row per particle.
pub fn write_prediction(pred: &Predictive, out: &mut dyn Write) -> std::io::Result<()> {
    let s = pred.classes;
    let header: Vec<String> = (0..s).map(|c| format!("class_{}", c)).collect();
    writeln!(out, "row,{}", header.join(","))?;
    let row = |out: &mut dyn Write, name: &str, v: &[f64]| -> std::io::Result<()> {
        let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{},{}", name, cells.join(","))
    };
    row(out, "mean", &pred.mean)?;
    row(out, "std", &pred.std_dev())?;
    for (i, p) in pred.per_particle.iter().enumerate() {
        row(out, &format!("particle_{}", i), p)?;
    }
    Ok(())
}

pub fn cmd_predict(
    archive: &Path,
    input: &PredictInput,
    data_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Predictive, CliError> {
    let model = read_archive(archive)?;
    let dim = model.net.input_dim();
    let x = match input {
        PredictInput::File(path) => parse_input_file(path, dim)?,
        PredictInput::Index(i) => {
            let source = source_of(&model.meta, data_dir)?;
            let test = load_split(&source, Split::Test, None, model.meta.seed)?;
            if *i >= test.len() {
                return Err(CliError::Usage(format!(
                    "index {} is out of range for {} test examples",
                    i,
                    test.len()
                )));
            }
            test.input(*i).to_vec()
        }
    };
    let pred = predictive_distribution(&Ensemble::new(model.particles.clone())?, &model.net, &x)?;
    write_prediction(&pred, out)?;
    Ok(pred)
}

fn decade_histogram(values: &[f64]) -> Vec<(i32, usize)> {
    let mut buckets: Vec<(i32, usize)> = Vec::new();
    for v in values {
        let d = v.log10().floor() as i32;
        match buckets.iter_mut().find(|(k, _)| *k == d) {
            Some((_, c)) => *c += 1,
            None => buckets.push((d, 1)),
        }
    }
    buckets.sort_by_key(|b| std::cmp::Reverse(b.0));
    buckets
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Prints the architecture, ranks, parameter counts and a decade histogram
/// of every posterior-mean scale vector.
pub fn cmd_inspect(archive: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let model = read_archive(archive)?;
    inspect_model(&model, out)
}

pub fn inspect_model(model: &ModelArchive, out: &mut dyn Write) -> Result<(), CliError> {
    let m = &model.meta;
    writeln!(
        out,
        "trainer={} dataset={} seed={} iterations={} particles={}",
        m.trainer,
        m.dataset,
        m.seed,
        m.iterations,
        model.particles.len()
    )?;
    writeln!(
        out,
        "prior: a={} b={} weak_variance={}",
        model.prior.hyper.a, model.prior.hyper.b, model.prior.weak_variance
    )?;
    match m.threshold {
        Some(t) => writeln!(out, "pruned at tau_rel={} tau_abs={}", t.rel, t.abs)?,
        None => writeln!(out, "not pruned")?,
    }
    let mean = posterior_mean_lambda(&model.particles)?;
    let policy = m.threshold.unwrap_or_default();
    let estimate = estimate_ranks(&mean, &policy)?;
    for (i, spec) in model.net.layers().iter().enumerate() {
        let cores = ttbnn_core::tt::tt_param_count(&spec.shape, &spec.ranks)?;
        writeln!(
            out,
            "layer {}: ({}) x ({}) {}, ranks ({}), core params {}, dense {}, bias {}",
            i + 1,
            join(spec.shape.row_factors()),
            join(spec.shape.col_factors()),
            spec.activation.name(),
            join(spec.ranks.as_slice()),
            cores,
            spec.shape.dense_len(),
            spec.outputs()
        )?;
        writeln!(
            out,
            "  ranks at tau_rel={} tau_abs={}: ({})",
            policy.rel,
            policy.abs,
            join(estimate.layers[i].ranks.as_slice())
        )?;
        for (k, v) in mean[i].iter().enumerate() {
            let (lo, hi) = v
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                    (a.min(x), b.max(x))
                });
            writeln!(
                out,
                "  mean lambda {}: {} entries, min {:.3e}, max {:.3e}",
                k + 1,
                v.len(),
                lo,
                hi
            )?;
            for (d, c) in decade_histogram(v) {
                writeln!(out, "    [1e{}, 1e{}) {:>4} {}", d, d + 1, c, "#".repeat(c))?;
            }
        }
    }
    writeln!(out, "total core params {}", model.net.core_param_count())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets_by_decade() {
        assert_eq!(
            decade_histogram(&[0.5, 0.2, 0.05, 2e-5]),
            vec![(-1, 2), (-2, 1), (-5, 1)]
        );
    }

    #[test]
    fn probe_is_deterministic() {
        assert_eq!(probe_inputs(3, 4, 9), probe_inputs(3, 4, 9));
        assert!(probe_inputs(3, 4, 9).iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn overrides_target_the_trainer() {
        let mut cfg = ExperimentConfig::default();
        Overrides {
            iterations: Some(7),
            particles: Some(3),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.svgd.iterations, 7);
        assert_eq!(cfg.svgd.particles, 3);
        cfg.trainer = "map".into();
        Overrides {
            iterations: Some(5),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.map.iterations, 5);
    }
}
