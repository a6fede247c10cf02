//! MAP and Stein variational training, and ensemble predictions.
//!
//! SVGD moves every particle along
//!
//! ```text
//! phi(x_k) = 1/n sum_i [ k(x_i, x_k) grad log p(x_i | D) + grad_{x_i} k(x_i, x_k) ]
//! ```
//!
//! with the RBF kernel `k(u, v) = exp(-|u - v|^2 / h)`, whose gradient in the
//! first argument is `(2 / h) (x_k - x_i) k(x_i, x_k)`. Particles are compared
//! through their flat parameter vectors ([`Particle::flatten`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, evaluate_posterior, forward, Network, Particle, PosteriorEval, PROB_FLOOR,
};
use crate::priors::{perturb_cores, Prior, RankScaleVector};

/// Fraction of each core entry's prior standard deviation used as noise
/// when spreading a warm-started particle into an ensemble.
pub const WARM_START_NOISE: f64 = 0.1;

/// A set of structurally identical particles.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: Vec<Particle>,
}

impl Ensemble {
    pub fn new(particles: Vec<Particle>) -> Result<Self> {
        let first = particles
            .first()
            .ok_or_else(|| Error::shape("an ensemble needs at least one particle"))?;
        for p in &particles[1..] {
            let same = p.layers.len() == first.layers.len()
                && p.layers.iter().zip(&first.layers).all(|(a, b)| {
                    a.weights.shape() == b.weights.shape()
                        && a.weights.ranks() == b.weights.ranks()
                        && a.bias.len() == b.bias.len()
                        && a.lambdas.len() == b.lambdas.len()
                        && a.lambdas
                            .iter()
                            .zip(&b.lambdas)
                            .all(|(x, y)| x.len() == y.len())
                });
            if !same {
                return Err(Error::shape("ensemble particles differ in structure"));
            }
        }
        Ok(Ensemble { particles })
    }

    /// Spreads a warm-started particle into `n` particles: the first is kept
    /// as is, the others add [`WARM_START_NOISE`] times prior noise to every
    /// core (see [`perturb_cores`]). Scale vectors and biases are copied.
    pub fn from_warm_start(first: Particle, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::shape("an ensemble needs at least one particle"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut particles = Vec::with_capacity(n);
        for _ in 1..n {
            let mut p = first.clone();
            for layer in &mut p.layers {
                let seed = rng.random();
                perturb_cores(
                    layer.weights.cores_mut(),
                    &layer.lambdas,
                    WARM_START_NOISE,
                    seed,
                )?;
            }
            particles.push(p);
        }
        particles.insert(0, first);
        Ensemble::new(particles)
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [Particle] {
        &mut self.particles
    }

    pub fn into_particles(self) -> Vec<Particle> {
        self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn flatten(&self) -> Vec<Vec<f64>> {
        self.particles.iter().map(Particle::flatten).collect()
    }
}

/// RBF bandwidth policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `h = med^2 / log n`, recomputed every step.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvgdConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub bandwidth: Bandwidth,
    /// How the SVGD direction is turned into a step. `Sgd` is the plain
    /// `x += step_size * phi` rule; `Adam` rescales each coordinate, which
    /// keeps particles stable when some rank scales sit near the floor.
    pub optimizer: Optimizer,
    /// Run the particles over `u = ln λ` instead of λ, with the log-Jacobian
    /// added to the target density. Steps then change scales by a relative
    /// amount, so entries near the floor are not thrown up to the step size.
    pub log_lambda: bool,
    pub seed: u64,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        SvgdConfig {
            step_size: 1e-3,
            iterations: 5000,
            batch_size: 100,
            bandwidth: Bandwidth::Median,
            optimizer: Optimizer::adam(),
            log_lambda: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Plain gradient ascent on the log-posterior.
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    pub step_size: f64,
    /// Step size reached at the last iteration, approached geometrically;
    /// equal to `step_size` for a constant schedule.
    pub final_step_size: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lambda_update: LambdaUpdate,
    pub seed: u64,
}

/// How MAP training moves the rank-scale vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaUpdate {
    /// Same optimizer step as every other parameter.
    #[default]
    Gradient,
    /// After each step, set every scale vector to its exact conditional
    /// maximizer given the cores (block coordinate ascent).
    Maximize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            step_size: 1e-3,
            final_step_size: 1e-3,
            iterations: 1000,
            batch_size: 100,
            optimizer: Optimizer::adam(),
            lambda_update: LambdaUpdate::Gradient,
            seed: 0,
        }
    }
}

/// One row of a training trace, measured on the step's minibatch before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    /// Minibatch estimate of the log-posterior, averaged over particles.
    pub log_posterior: f64,
    /// Accuracy of the (ensemble-mean) prediction on the minibatch.
    pub accuracy: f64,
}

pub fn rbf_kernel(u: &[f64], v: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::domain(format!(
            "bandwidth must be positive, got {}",
            h
        )));
    }
    if u.len() != v.len() {
        return Err(Error::shape("kernel arguments differ in length"));
    }
    Ok((-squared_distance(u, v) / h).exp())
}

fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn pairwise_squared(flat: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = flat.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(&flat[i], &flat[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn median_from_squared(d2: &[Vec<f64>]) -> f64 {
    let n = d2.len();
    if n < 2 {
        return 1.0;
    }
    let mut dist: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[i][j].sqrt())
        .collect();
    dist.sort_by(f64::total_cmp);
    let mid = dist.len() / 2;
    let med = if dist.len() % 2 == 1 {
        dist[mid]
    } else {
        0.5 * (dist[mid - 1] + dist[mid])
    };
    let h = med * med / (n as f64).ln();
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1.0
    }
}

/// Median heuristic `med^2 / log n` over pairwise flat-vector distances;
/// 1 when there are fewer than two particles or they all coincide.
pub fn median_bandwidth(flat: &[Vec<f64>]) -> f64 {
    median_from_squared(&pairwise_squared(flat))
}

/// The SVGD direction `phi` for every particle, given flat positions and
/// log-density gradients. Returns the directions and the bandwidth used.
pub fn svgd_direction(
    flat: &[Vec<f64>],
    grads: &[Vec<f64>],
    bandwidth: Bandwidth,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let n = flat.len();
    if n == 0 || grads.len() != n {
        return Err(Error::shape("need one gradient per particle"));
    }
    let dim = flat[0].len();
    if flat.iter().chain(grads).any(|v| v.len() != dim) {
        return Err(Error::shape("particles and gradients differ in length"));
    }
    let d2 = pairwise_squared(flat);
    let h = match bandwidth {
        Bandwidth::Median => median_from_squared(&d2),
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::domain(format!(
                "bandwidth must be positive, got {}",
                h
            )))
        }
    };
    let kernel: Vec<Vec<f64>> = d2
        .iter()
        .map(|row| row.iter().map(|v| (-v / h).exp()).collect())
        .collect();
    let inv_n = 1.0 / n as f64;
    let phi = (0..n)
        .map(|k| {
            let mut out = vec![0.0; dim];
            for i in 0..n {
                let kik = kernel[i][k];
                let rep = 2.0 / h * kik;
                let (xk, xi, gi) = (&flat[k], &flat[i], &grads[i]);
                for t in 0..dim {
                    out[t] += kik * gi[t] + rep * (xk[t] - xi[t]);
                }
            }
            if n > 1 {
                out.iter_mut().for_each(|v| *v *= inv_n);
            }
            out
        })
        .collect();
    Ok((phi, h))
}

/// Moves flat particles by `step * phi` in place; returns the bandwidth used.
pub fn svgd_update(
    flat: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    step: f64,
    bandwidth: Bandwidth,
) -> Result<f64> {
    let (phi, h) = svgd_direction(flat, grads, bandwidth)?;
    for (x, p) in flat.iter_mut().zip(phi) {
        for (v, d) in x.iter_mut().zip(p) {
            *v += step * d;
        }
    }
    Ok(h)
}

fn evaluate_all(
    particles: &[Particle],
    net: &Network,
    prior: &Prior,
    batch: &crate::data::DataBatch,
    n_total: usize,
) -> Result<Vec<PosteriorEval>> {
    particles
        .par_iter()
        .map(|p| evaluate_posterior(net, prior, p, batch, n_total))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn with_iteration(err: Error, iteration: usize) -> Error {
    match err {
        Error::Numeric { detail, .. } => Error::Numeric { iteration, detail },
        other => other,
    }
}

fn mean_rows(per_particle: &[&[f64]]) -> Vec<f64> {
    let n = per_particle.len();
    let mut mean = vec![0.0; per_particle[0].len()];
    for p in per_particle {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    if n > 1 {
        mean.iter_mut().for_each(|v| *v /= n as f64);
    }
    mean
}

/// Statistics of a single SVGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub log_posterior: f64,
    pub accuracy: f64,
    pub bandwidth: f64,
}

/// One SVGD update of every particle on a shared minibatch.
pub fn svgd_step(
    ensemble: &mut Ensemble,
    net: &Network,
    prior: &Prior,
    batch: &crate::data::DataBatch,
    n_total: usize,
    step_size: f64,
    bandwidth: Bandwidth,
) -> Result<StepStats> {
    svgd_step_with(
        ensemble, net, prior, batch, n_total, step_size, bandwidth, false, None,
    )
}

/// Flags the scale-vector entries of a particle's flat layout.
fn lambda_mask(p: &Particle) -> Vec<bool> {
    let mut mask = Vec::with_capacity(p.param_count());
    for l in &p.layers {
        let cores: usize = l.weights.cores().iter().map(|c| c.data().len()).sum();
        let scales: usize = l.lambdas.iter().map(RankScaleVector::len).sum();
        mask.extend(std::iter::repeat_n(false, cores));
        mask.extend(std::iter::repeat_n(true, scales));
        mask.extend(std::iter::repeat_n(false, l.bias.len()));
    }
    mask
}

#[allow(clippy::too_many_arguments)]
fn svgd_step_with(
    ensemble: &mut Ensemble,
    net: &Network,
    prior: &Prior,
    batch: &crate::data::DataBatch,
    n_total: usize,
    step_size: f64,
    bandwidth: Bandwidth,
    log_lambda: bool,
    steppers: Option<&mut [Stepper]>,
) -> Result<StepStats> {
    let evals = evaluate_all(&ensemble.particles, net, prior, batch, n_total)?;
    let mut grads: Vec<Vec<f64>> = evals.iter().map(|e| e.grad.flatten()).collect();
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric(0, "non-finite log-posterior gradient"));
    }
    let mut flat = ensemble.flatten();
    let mask = if log_lambda {
        lambda_mask(&ensemble.particles[0])
    } else {
        Vec::new()
    };
    for (x, g) in flat.iter_mut().zip(&mut grads) {
        for ((v, d), _) in x
            .iter_mut()
            .zip(g.iter_mut())
            .zip(&mask)
            .filter(|(_, &m)| m)
        {
            // d/du log p(e^u) + u
            *d = *v * *d + 1.0;
            *v = v.ln();
        }
    }
    let h = match steppers {
        None => svgd_update(&mut flat, &grads, step_size, bandwidth)?,
        Some(steppers) => {
            let (phi, h) = svgd_direction(&flat, &grads, bandwidth)?;
            for ((x, d), st) in flat.iter_mut().zip(&phi).zip(steppers.iter_mut()) {
                st.apply(x, d, step_size);
            }
            h
        }
    };
    for x in &mut flat {
        for (v, _) in x.iter_mut().zip(&mask).filter(|(_, &m)| m) {
            *v = v.exp();
        }
    }
    for (p, x) in ensemble.particles.iter_mut().zip(&flat) {
        p.assign_flat(x)?;
        p.project_lambdas();
        if !p.is_finite() {
            return Err(Error::numeric(
                0,
                "particle left the finite range after the update",
            ));
        }
    }
    let probs: Vec<&[f64]> = evals.iter().map(|e| e.probs.as_slice()).collect();
    let mean = mean_rows(&probs);
    Ok(StepStats {
        log_posterior: evals.iter().map(|e| e.log_posterior).sum::<f64>() / evals.len() as f64,
        accuracy: accuracy(&mean, batch.labels(), batch.classes()),
        bandwidth: h,
    })
}

/// Applies an ascent direction to a parameter vector, keeping optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Stepper {
    optimizer: Optimizer,
    steps: i32,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Stepper {
    pub fn new(optimizer: Optimizer) -> Self {
        Stepper {
            optimizer,
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Moves `theta` along `direction` (an ascent direction) with step `lr`.
    pub fn apply(&mut self, theta: &mut [f64], direction: &[f64], lr: f64) {
        self.steps += 1;
        match self.optimizer {
            Optimizer::Sgd => {
                for (x, g) in theta.iter_mut().zip(direction) {
                    *x += lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.first_moment.len() != theta.len() {
                    self.first_moment = vec![0.0; theta.len()];
                    self.second_moment = vec![0.0; theta.len()];
                }
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for (((x, g), m), v) in theta
                    .iter_mut()
                    .zip(direction)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    // written as minimization of the negated objective
                    let g = -g;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Stepwise SVGD over shuffled minibatches of a dataset.
#[derive(Debug, Clone)]
pub struct SvgdTrainer<'a> {
    net: &'a Network,
    prior: Prior,
    data: &'a Dataset,
    cfg: SvgdConfig,
    stream: BatchStream,
    iteration: usize,
    steppers: Vec<Stepper>,
}

impl<'a> SvgdTrainer<'a> {
    pub fn new(net: &'a Network, prior: Prior, data: &'a Dataset, cfg: SvgdConfig) -> Result<Self> {
        if !(cfg.step_size > 0.0) {
            return Err(Error::domain("SVGD step size must be positive"));
        }
        let stream = BatchStream::new(data.len(), cfg.batch_size, cfg.seed)?;
        Ok(SvgdTrainer {
            net,
            prior,
            data,
            cfg,
            stream,
            iteration: 0,
            steppers: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self, ensemble: &mut Ensemble) -> Result<TracePoint> {
        let idx = self.stream.next_indices();
        let batch = self.data.batch(&idx);
        if self.steppers.len() != ensemble.len() {
            self.steppers = vec![Stepper::new(self.cfg.optimizer); ensemble.len()];
        }
        let stats = svgd_step_with(
            ensemble,
            self.net,
            &self.prior,
            &batch,
            self.data.len(),
            self.cfg.step_size,
            self.cfg.bandwidth,
            self.cfg.log_lambda,
            Some(&mut self.steppers),
        )
        .map_err(|e| with_iteration(e, self.iteration))?;
        let point = TracePoint {
            iteration: self.iteration,
            log_posterior: stats.log_posterior,
            accuracy: stats.accuracy,
        };
        self.iteration += 1;
        Ok(point)
    }
}

/// Runs `cfg.iterations` SVGD steps; the trace has one point per step.
pub fn svgd_train(
    mut ensemble: Ensemble,
    net: &Network,
    prior: &Prior,
    dataset: &Dataset,
    cfg: &SvgdConfig,
) -> Result<(Ensemble, Vec<TracePoint>)> {
    if cfg.iterations == 0 {
        return Ok((ensemble, Vec::new()));
    }
    let mut trainer = SvgdTrainer::new(net, *prior, dataset, *cfg)?;
    let trace = (0..cfg.iterations)
        .map(|_| trainer.step(&mut ensemble))
        .collect::<Result<Vec<_>>>()?;
    Ok((ensemble, trace))
}

/// Stepwise MAP training: ascent on the log-posterior with SGD or Adam.
#[derive(Debug, Clone)]
pub struct MapTrainer<'a> {
    net: &'a Network,
    prior: Prior,
    data: &'a Dataset,
    cfg: MapConfig,
    stream: BatchStream,
    iteration: usize,
    stepper: Stepper,
}

impl<'a> MapTrainer<'a> {
    pub fn new(net: &'a Network, prior: Prior, data: &'a Dataset, cfg: MapConfig) -> Result<Self> {
        if !(cfg.step_size > 0.0 && cfg.final_step_size > 0.0) {
            return Err(Error::domain("MAP step sizes must be positive"));
        }
        let stream = BatchStream::new(data.len(), cfg.batch_size, cfg.seed)?;
        Ok(MapTrainer {
            net,
            prior,
            data,
            cfg,
            stream,
            iteration: 0,
            stepper: Stepper::new(cfg.optimizer),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Geometric interpolation between the initial and final step sizes.
    pub fn step_size_at(&self, iteration: usize) -> f64 {
        let MapConfig {
            step_size,
            final_step_size,
            iterations,
            ..
        } = self.cfg;
        if final_step_size == step_size || iterations < 2 {
            return step_size;
        }
        let frac = (iteration.min(iterations - 1)) as f64 / (iterations - 1) as f64;
        step_size * (final_step_size / step_size).powf(frac)
    }

    pub fn step(&mut self, particle: &mut Particle) -> Result<TracePoint> {
        let it = self.iteration;
        let idx = self.stream.next_indices();
        let batch = self.data.batch(&idx);
        let eval = evaluate_posterior(self.net, &self.prior, particle, &batch, self.data.len())
            .map_err(|e| with_iteration(e, it))?;
        if !eval.log_posterior.is_finite() {
            return Err(Error::numeric(it, "log-posterior is not finite"));
        }
        let grad = eval.grad.flatten();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(it, "non-finite log-posterior gradient"));
        }
        let mut theta = particle.flatten();
        let lr = self.step_size_at(it);
        self.stepper.apply(&mut theta, &grad, lr);
        particle.assign_flat(&theta)?;
        particle.project_lambdas();
        if !particle.is_finite() {
            return Err(Error::numeric(
                it,
                "parameters left the finite range after the update",
            ));
        }
        if self.cfg.lambda_update == LambdaUpdate::Maximize {
            particle
                .maximize_lambdas(&self.prior)
                .map_err(|e| with_iteration(e, it))?;
        }
        if !particle.is_finite() {
            return Err(Error::numeric(
                it,
                "parameters left the finite range after the update",
            ));
        }
        self.iteration += 1;
        Ok(TracePoint {
            iteration: it,
            log_posterior: eval.log_posterior,
            accuracy: accuracy(&eval.probs, batch.labels(), batch.classes()),
        })
    }
}

/// Runs `cfg.iterations` MAP steps; the trace has one point per step.
pub fn map_train(
    mut particle: Particle,
    net: &Network,
    prior: &Prior,
    dataset: &Dataset,
    cfg: &MapConfig,
) -> Result<(Particle, Vec<TracePoint>)> {
    net.check_particle(&particle)?;
    if cfg.iterations == 0 {
        return Ok((particle, Vec::new()));
    }
    let mut trainer = MapTrainer::new(net, *prior, dataset, *cfg)?;
    let trace = (0..cfg.iterations)
        .map(|_| trainer.step(&mut particle))
        .collect::<Result<Vec<_>>>()?;
    Ok((particle, trace))
}

/// Per-particle and ensemble-mean class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub classes: usize,
    /// `rows x classes`.
    pub mean: Vec<f64>,
    /// One `rows x classes` block per particle.
    pub per_particle: Vec<Vec<f64>>,
}

impl Predictive {
    pub fn rows(&self) -> usize {
        self.mean.len() / self.classes
    }

    /// Across-particle standard deviation of each entry (population form).
    pub fn std_dev(&self) -> Vec<f64> {
        let n = self.per_particle.len() as f64;
        (0..self.mean.len())
            .map(|i| {
                let m = self.mean[i];
                (self
                    .per_particle
                    .iter()
                    .map(|p| (p[i] - m).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt()
            })
            .collect()
    }
}

pub fn predictive_distribution(
    ensemble: &Ensemble,
    net: &Network,
    inputs: &[f64],
) -> Result<Predictive> {
    let per_particle = ensemble
        .particles
        .par_iter()
        .map(|p| forward(net, p, inputs))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = per_particle.iter().map(Vec::as_slice).collect();
    Ok(Predictive {
        classes: net.classes(),
        mean: mean_rows(&refs),
        per_particle,
    })
}

const EVAL_CHUNK: usize = 1000;

/// `1/N sum_i log( 1/n sum_j p(y_i | x_i, theta_j) )`, probabilities clamped at 1e-12.
pub fn test_log_likelihood(ensemble: &Ensemble, net: &Network, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate_ensemble(ensemble, net, dataset)?.test_log_likelihood)
}

/// Held-out metrics of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleMetrics {
    pub accuracy: f64,
    pub test_log_likelihood: f64,
}

pub fn evaluate_ensemble(
    ensemble: &Ensemble,
    net: &Network,
    dataset: &Dataset,
) -> Result<EnsembleMetrics> {
    if dataset.is_empty() {
        return Err(Error::shape("empty evaluation set"));
    }
    let classes = net.classes();
    let mut log_lik = 0.0;
    let mut hits = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk);
        let pred = predictive_distribution(ensemble, net, batch.inputs())?;
        for (row, label) in pred
            .mean
            .chunks(classes)
            .zip(batch.labels().chunks(classes))
        {
            let truth = label.iter().position(|&v| v == 1.0).expect("one-hot");
            log_lik += row[truth].max(PROB_FLOOR).ln();
        }
        let acc = accuracy(&pred.mean, batch.labels(), classes);
        hits += (acc * chunk.len() as f64).round() as usize;
    }
    Ok(EnsembleMetrics {
        accuracy: hits as f64 / dataset.len() as f64,
        test_log_likelihood: log_lik / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy, DataBatch, ToyKind};
    use crate::model::{cross_entropy, Activation, LayerSpec};
    use crate::priors::LambdaInit;
    use crate::tt::{FactorizedShape, RankVector};

    fn toy_net(hidden: usize) -> Network {
        Network::new(vec![
            LayerSpec {
                shape: FactorizedShape::new(vec![2, 1], vec![hidden, 2]).unwrap(),
                ranks: RankVector::uniform(2, 3).unwrap(),
                activation: Activation::Relu,
            },
            LayerSpec {
                shape: FactorizedShape::new(vec![hidden, 2], vec![2, 1]).unwrap(),
                ranks: RankVector::uniform(2, 3).unwrap(),
                activation: Activation::Softmax,
            },
        ])
        .unwrap()
    }

    #[test]
    fn kernel_basics() {
        let u = [0.5, -1.0, 2.0];
        assert_eq!(rbf_kernel(&u, &u, 0.7).unwrap(), 1.0);
        let v = [1.5, -1.0, 2.0];
        assert!((rbf_kernel(&u, &v, 1.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(
            rbf_kernel(&u, &v, 0.3).unwrap(),
            rbf_kernel(&v, &u, 0.3).unwrap()
        );
        assert!(matches!(rbf_kernel(&u, &v, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn bandwidth_heuristic() {
        assert_eq!(median_bandwidth(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 1.0);
        assert_eq!(median_bandwidth(&[vec![1.0, 2.0]]), 1.0);
        let h = median_bandwidth(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert!((h - 4.0 / 2f64.ln()).abs() < 1e-12);
        let pts = vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(median_bandwidth(&pts), median_bandwidth(&rev));
    }

    #[test]
    fn single_particle_is_gradient_ascent() {
        let x = vec![vec![0.3, -1.2, 4.0]];
        let g = vec![vec![1.0, 0.25, -3.0]];
        let (phi, _) = svgd_direction(&x, &g, Bandwidth::Median).unwrap();
        assert_eq!(phi[0], g[0]);
    }

    #[test]
    fn identical_particles_stay_together() {
        let mut x = vec![vec![0.3, -1.2]; 2];
        let g = vec![vec![0.0, 0.0]; 2];
        svgd_update(&mut x, &g, 0.1, Bandwidth::Median).unwrap();
        assert_eq!(x[0], x[1]);
        assert_eq!(x[0], vec![0.3, -1.2]);
    }

    #[test]
    fn repulsion_separates_particles() {
        let mut x = vec![vec![0.0, 0.0], vec![0.5, 0.1], vec![-0.2, 0.4]];
        let g = vec![vec![0.0, 0.0]; 3];
        let before = pairwise_squared(&x);
        svgd_update(&mut x, &g, 0.05, Bandwidth::Median).unwrap();
        let after = pairwise_squared(&x);
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(after[i][j] > before[i][j]);
            }
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let mut x = vec![vec![0.0, 1.0], vec![0.5, 0.1]];
        let orig = x.clone();
        svgd_update(
            &mut x,
            &[vec![1.0, 2.0], vec![3.0, 4.0]],
            0.0,
            Bandwidth::Median,
        )
        .unwrap();
        assert_eq!(x, orig);
    }

    #[test]
    fn zero_iterations_leave_everything_alone() {
        let net = toy_net(4);
        let prior = Prior::default();
        let data = make_toy(ToyKind::TwoGaussians, 20, 0).unwrap();
        let p = Particle::init(&net, &prior, LambdaInit::PriorMean, 1).unwrap();
        let cfg = MapConfig {
            iterations: 0,
            ..MapConfig::default()
        };
        let (q, trace) = map_train(p.clone(), &net, &prior, &data, &cfg).unwrap();
        assert_eq!(q, p);
        assert!(trace.is_empty());
        let ens = Ensemble::from_warm_start(p, 3, 2).unwrap();
        let svgd = SvgdConfig {
            iterations: 0,
            ..SvgdConfig::default()
        };
        let (e2, trace) = svgd_train(ens.clone(), &net, &prior, &data, &svgd).unwrap();
        assert_eq!(e2, ens);
        assert!(trace.is_empty());
    }

    #[test]
    fn adam_overfits_small_toy_set() {
        let net = toy_net(4);
        let prior = Prior::default();
        let data = make_toy(ToyKind::TwoGaussians, 50, 4).unwrap();
        let p = Particle::init(&net, &prior, LambdaInit::PriorMean, 5).unwrap();
        let cfg = MapConfig {
            step_size: 0.01,
            final_step_size: 0.01,
            iterations: 300,
            batch_size: 50,
            optimizer: Optimizer::adam(),
            lambda_update: LambdaUpdate::Gradient,
            seed: 1,
        };
        let (p, trace) = map_train(p, &net, &prior, &data, &cfg).unwrap();
        assert_eq!(trace.len(), 300);
        let probs = forward(&net, &p, data.inputs()).unwrap();
        assert_eq!(accuracy(&probs, data.onehot(), 2), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let net = toy_net(4);
        let prior = Prior::default();
        let data = make_toy(ToyKind::Xor, 40, 1).unwrap();
        let p = Particle::init(&net, &prior, LambdaInit::PriorMean, 5).unwrap();
        let ens = Ensemble::from_warm_start(p, 4, 9).unwrap();
        let cfg = SvgdConfig {
            step_size: 1e-3,
            iterations: 20,
            batch_size: 8,
            bandwidth: Bandwidth::Median,
            optimizer: Optimizer::adam(),
            log_lambda: true,
            seed: 3,
        };
        let a = svgd_train(ens.clone(), &net, &prior, &data, &cfg).unwrap();
        let b = svgd_train(ens, &net, &prior, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 20);
    }

    #[test]
    fn predictive_and_test_ll_identities() {
        let net = toy_net(4);
        let prior = Prior::default();
        let data = make_toy(ToyKind::TwoGaussians, 30, 2).unwrap();
        let p = Particle::init(&net, &prior, LambdaInit::PriorMean, 7).unwrap();
        let single = Ensemble::new(vec![p.clone()]).unwrap();
        let pred = predictive_distribution(&single, &net, data.inputs()).unwrap();
        assert_eq!(pred.mean, pred.per_particle[0]);

        let same = Ensemble::new(vec![p.clone(), p.clone(), p.clone()]).unwrap();
        let pred = predictive_distribution(&same, &net, data.inputs()).unwrap();
        assert!(pred.std_dev().iter().all(|&s| s < 1e-15));

        let ll = test_log_likelihood(&single, &net, &data).unwrap();
        let probs = forward(&net, &p, data.inputs()).unwrap();
        let ce = cross_entropy(&probs, data.onehot());
        assert!((ll + ce / 30.0).abs() < 1e-12);
        assert!(ll <= 0.0);

        let spread = Ensemble::from_warm_start(p, 5, 3).unwrap();
        let pred = predictive_distribution(&spread, &net, data.inputs()).unwrap();
        for row in pred.mean.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_schedule_endpoints() {
        let net = toy_net(2);
        let data = make_toy(ToyKind::Xor, 8, 0).unwrap();
        let cfg = MapConfig {
            step_size: 1e-2,
            final_step_size: 1e-4,
            iterations: 11,
            ..MapConfig::default()
        };
        let t = MapTrainer::new(&net, Prior::default(), &data, cfg).unwrap();
        assert_eq!(t.step_size_at(0), 1e-2);
        assert!((t.step_size_at(5) - 1e-3).abs() < 1e-15);
        assert!((t.step_size_at(10) - 1e-4).abs() < 1e-18);
        assert!((t.step_size_at(50) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn uniform_predictor_test_ll() {
        // one softmax layer with zero weights predicts uniformly over 10 classes
        let net = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 2], vec![5, 2]).unwrap(),
            ranks: RankVector::uniform(2, 2).unwrap(),
            activation: Activation::Softmax,
        }])
        .unwrap();
        let p = Particle::init(&net, &Prior::default(), LambdaInit::PriorMean, 0)
            .unwrap()
            .zeros_like();
        let labels: Vec<usize> = vec![0, 3, 9];
        let ds =
            Dataset::from_labels(vec![0.5; 12], 4, &labels, 10, crate::data::Split::Test).unwrap();
        let ens = Ensemble::new(vec![p]).unwrap();
        let ll = test_log_likelihood(&ens, &net, &ds).unwrap();
        assert!((ll + 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn numeric_failure_reports_iteration() {
        let net = toy_net(4);
        let prior = Prior::default();
        let data = make_toy(ToyKind::TwoGaussians, 20, 0).unwrap();
        let p = Particle::init(&net, &prior, LambdaInit::PriorMean, 1).unwrap();
        let cfg = MapConfig {
            step_size: 1e300,
            final_step_size: 1e300,
            iterations: 5,
            batch_size: 20,
            optimizer: Optimizer::Sgd,
            lambda_update: LambdaUpdate::Gradient,
            seed: 0,
        };
        match map_train(p, &net, &prior, &data, &cfg) {
            Err(Error::Numeric { .. }) => {}
            other => panic!("expected numeric failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn structure_mismatch_rejected() {
        let prior = Prior::default();
        let a = Particle::init(&toy_net(4), &prior, LambdaInit::PriorMean, 0).unwrap();
        let b = Particle::init(&toy_net(2), &prior, LambdaInit::PriorMean, 0).unwrap();
        assert!(Ensemble::new(vec![a, b]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn batch_shape_checked() {
        let net = toy_net(4);
        let p = Particle::init(&net, &Prior::default(), LambdaInit::PriorMean, 0).unwrap();
        let batch = DataBatch::new(vec![0.0; 3], vec![1.0, 0.0], 3, 2).unwrap();
        assert!(evaluate_posterior(&net, &Prior::default(), &p, &batch, 1).is_err());
    }
}
