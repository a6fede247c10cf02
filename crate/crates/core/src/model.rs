//! Tensorized classifiers: TT fully connected layers, the multinomial
//! likelihood and reverse-mode gradients of the log-posterior.
//!
//! A layer maps `a` (length `M`) to `act(W^T a + bias)` where `W` is the
//! layer's `M x J` TT-matrix, i.e. `z_j = sum_m W(m, j) a_m + bias_j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DataBatch;
use crate::error::{Error, Result};
use crate::priors::{
    grad_log_prior_core, grad_log_prior_extras, grad_log_prior_lambda, init_cores, init_lambdas,
    log_prior, maximize_lambda, CorePosition, InitConfig, LambdaInit, Prior, RankScaleVector,
    LAMBDA_FLOOR,
};
use crate::tt::{
    tt_matmul, tt_matmul_backward, tt_matmul_taped, FactorizedShape, MatvecTape, RankVector,
    TtCore, TtMatrix,
};

/// Probabilities are clamped below at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "softmax" => Some(Activation::Softmax),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Structure of one TT fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub shape: FactorizedShape,
    pub ranks: RankVector,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn inputs(&self) -> usize {
        self.shape.rows()
    }

    pub fn outputs(&self) -> usize {
        self.shape.cols()
    }
}

/// A stack of TT layers ending in a softmax over `classes` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::shape("network needs at least one layer"))?;
        if last.activation != Activation::Softmax {
            return Err(Error::shape("the final layer must use softmax"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    l,
                    pair[0].outputs(),
                    l + 1,
                    pair[1].inputs()
                )));
            }
            if pair[0].activation == Activation::Softmax {
                return Err(Error::shape("softmax is only supported on the final layer"));
            }
        }
        for spec in &layers {
            if spec.ranks.order() != spec.shape.order() {
                return Err(Error::shape(
                    "rank vector order does not match the layer shape",
                ));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Checks that a particle has exactly this network's structure.
    pub fn check_particle(&self, particle: &Particle) -> Result<()> {
        if particle.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "particle has {} layers, network has {}",
                particle.layers.len(),
                self.layers.len()
            )));
        }
        for (l, (spec, params)) in self.layers.iter().zip(&particle.layers).enumerate() {
            if params.weights.shape() != &spec.shape || params.weights.ranks() != &spec.ranks {
                return Err(Error::shape(format!(
                    "layer {} weights do not match the network",
                    l
                )));
            }
            let internal = spec.ranks.internal();
            if params.lambdas.len() != internal.len()
                || params
                    .lambdas
                    .iter()
                    .zip(internal)
                    .any(|(lam, &r)| lam.len() != r)
            {
                return Err(Error::shape(format!(
                    "layer {} scale vectors do not match its ranks",
                    l
                )));
            }
            if params.bias.len() != spec.outputs() {
                return Err(Error::shape(format!(
                    "layer {} bias has the wrong length",
                    l
                )));
            }
        }
        Ok(())
    }

    /// Total TT core entries across layers.
    pub fn core_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|s| crate::tt::tt_param_count(&s.shape, &s.ranks).expect("validated"))
            .sum()
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: TtMatrix,
    pub lambdas: Vec<RankScaleVector>,
    pub bias: Vec<f64>,
}

/// One complete parameter assignment: cores, scale vectors and biases of every layer.
///
/// The flat layout, used for kernels, optimizers and serialization, is layer
/// by layer: each core's entries in storage order, then each scale vector,
/// then the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub layers: Vec<LayerParams>,
}

impl Particle {
    /// Fresh parameters: Gaussian cores scaled for the layer size, scale
    /// vectors per `lambda_init`, zero biases.
    pub fn init(net: &Network, prior: &Prior, lambda_init: LambdaInit, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(net.layers.len());
        for spec in &net.layers {
            let cfg = InitConfig::for_layer(&spec.shape, spec.ranks.max_internal(), rng.random());
            let cores = init_cores(&spec.shape, &spec.ranks, &cfg)?;
            layers.push(LayerParams {
                weights: TtMatrix::new(spec.shape.clone(), spec.ranks.clone(), cores)?,
                lambdas: init_lambdas(&spec.ranks, &prior.hyper, lambda_init, rng.random()),
                bias: vec![0.0; spec.outputs()],
            });
        }
        Ok(Particle { layers })
    }

    /// Zero cores and biases with every scale entry at the floor; a
    /// container to [`assign_flat`](Self::assign_flat) into.
    pub fn zeros(net: &Network) -> Self {
        Particle {
            layers: net
                .layers
                .iter()
                .map(|spec| LayerParams {
                    weights: TtMatrix::zeros(spec.shape.clone(), spec.ranks.clone())
                        .expect("validated layer"),
                    lambdas: spec
                        .ranks
                        .internal()
                        .iter()
                        .map(|&r| RankScaleVector::filled(r, LAMBDA_FLOOR).expect("floor is valid"))
                        .collect(),
                    bias: vec![0.0; spec.outputs()],
                })
                .collect(),
        }
    }

    /// Same structure, every entry zero. Used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        Particle {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: TtMatrix::zeros(l.weights.shape().clone(), l.weights.ranks().clone())
                        .expect("same structure"),
                    lambdas: l
                        .lambdas
                        .iter()
                        .map(|v| {
                            let mut z = v.clone();
                            z.values_mut().fill(0.0);
                            z
                        })
                        .collect(),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.param_count()
                    + l.lambdas.iter().map(RankScaleVector::len).sum::<usize>()
                    + l.bias.len()
            })
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for core in l.weights.cores() {
                out.extend_from_slice(core.data());
            }
            for lam in &l.lambdas {
                out.extend_from_slice(lam.values());
            }
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites every parameter from a flat vector in [`Particle::flatten`] order.
    /// Scale entries are written as given; callers project afterwards.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, particle has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        };
        for l in &mut self.layers {
            for core in l.weights.cores_mut() {
                take(core.data_mut());
            }
            for lam in &mut l.lambdas {
                take(lam.values_mut());
            }
            take(&mut l.bias);
        }
        Ok(())
    }

    /// Replaces every scale vector, in order, by its conditional maximizer of
    /// the log-prior given the cores and the other scale vectors.
    pub fn maximize_lambdas(&mut self, prior: &Prior) -> Result<()> {
        for l in &mut self.layers {
            for k in 0..l.lambdas.len() {
                let best = maximize_lambda(k, l.weights.cores(), &l.lambdas, &prior.hyper)?;
                l.lambdas[k] = RankScaleVector::new(best)?;
            }
        }
        Ok(())
    }

    pub fn project_lambdas(&mut self) {
        for l in &mut self.layers {
            for lam in &mut l.lambdas {
                lam.project();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights
                .cores()
                .iter()
                .all(|c| c.data().iter().all(|v| v.is_finite()))
                && l.lambdas
                    .iter()
                    .all(|lam| lam.values().iter().all(|v| v.is_finite()))
                && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

fn softmax_rows(z: &mut [f64], width: usize) {
    for row in z.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn add_bias(z: &mut [f64], bias: &[f64]) {
    for row in z.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(0, format!("non-finite {}", what)))
    }
}

/// Class probabilities (`batch x classes`) for a `batch x input_dim` input.
pub fn forward(net: &Network, particle: &Particle, inputs: &[f64]) -> Result<Vec<f64>> {
    net.check_particle(particle)?;
    let dim = net.input_dim();
    if !inputs.len().is_multiple_of(dim) {
        return Err(Error::shape(format!(
            "input length {} is not a multiple of {}",
            inputs.len(),
            dim
        )));
    }
    let batch = inputs.len() / dim;
    let mut a = inputs.to_vec();
    for (spec, params) in net.layers.iter().zip(&particle.layers) {
        let mut z = tt_matmul(&params.weights, &a, batch)?;
        add_bias(&mut z, &params.bias);
        match spec.activation {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Softmax => {
                check_finite(&z, "logits")?;
                softmax_rows(&mut z, spec.outputs());
            }
            Activation::Identity => {}
        }
        a = z;
    }
    check_finite(&a, "probabilities")?;
    Ok(a)
}

/// `-sum_i sum_s y_is log max(g_s, 1e-12)`.
pub fn cross_entropy(probs: &[f64], labels: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| y * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Result of one likelihood (and optionally gradient) evaluation on a batch.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    /// `sum_i sum_s y_is log g_s` over the batch.
    pub log_likelihood: f64,
    pub probs: Vec<f64>,
    pub grad: Option<Particle>,
}

/// Forward pass over a batch, with reverse-mode gradients of the batch
/// log-likelihood when `want_grad` is set. Scale-vector gradients are zero.
pub fn likelihood(
    net: &Network,
    particle: &Particle,
    batch: &DataBatch,
    want_grad: bool,
) -> Result<LikelihoodEval> {
    net.check_particle(particle)?;
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    if batch.dim() != net.input_dim() || batch.classes() != net.classes() {
        return Err(Error::shape(format!(
            "batch is {} -> {}, network is {} -> {}",
            batch.dim(),
            batch.classes(),
            net.input_dim(),
            net.classes()
        )));
    }
    let n = batch.len();
    let mut tapes: Vec<MatvecTape> = Vec::with_capacity(net.layers.len());
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    let mut a = batch.inputs().to_vec();
    for (spec, params) in net.layers.iter().zip(&particle.layers) {
        let (mut z, tape) = tt_matmul_taped(&params.weights, &a, n)?;
        add_bias(&mut z, &params.bias);
        let mut out = z.clone();
        match spec.activation {
            Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Softmax => {
                check_finite(&out, "logits")?;
                softmax_rows(&mut out, spec.outputs());
            }
            Activation::Identity => {}
        }
        tapes.push(tape);
        pre.push(z);
        a = out;
    }
    check_finite(&a, "probabilities")?;
    let probs = a;
    let log_likelihood = -cross_entropy(&probs, batch.labels());

    if !want_grad {
        return Ok(LikelihoodEval {
            log_likelihood,
            probs,
            grad: None,
        });
    }

    let mut grad = particle.zeros_like();
    // d/dz of sum y log softmax(z) is y - p
    let mut dz: Vec<f64> = batch
        .labels()
        .iter()
        .zip(&probs)
        .map(|(y, p)| y - p)
        .collect();
    for l in (0..net.layers.len()).rev() {
        let params = &particle.layers[l];
        let width = net.layers[l].outputs();
        let gl = &mut grad.layers[l];
        for row in dz.chunks(width) {
            for (b, v) in gl.bias.iter_mut().zip(row) {
                *b += v;
            }
        }
        let (core_grads, d_input) = tt_matmul_backward(&params.weights, &tapes[l], &dz, l > 0)?;
        for (core, g) in gl.weights.cores_mut().iter_mut().zip(core_grads) {
            core.data_mut().copy_from_slice(&g);
        }
        if l > 0 {
            let mut da = d_input.expect("requested");
            match net.layers[l - 1].activation {
                Activation::Relu => {
                    for (d, z) in da.iter_mut().zip(&pre[l - 1]) {
                        if *z <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Identity => {}
                Activation::Softmax => unreachable!("validated by Network::new"),
            }
            dz = da;
        }
    }
    Ok(LikelihoodEval {
        log_likelihood,
        probs,
        grad: Some(grad),
    })
}

/// Gradient of `sum_i sum_s y_is log g_s` over the batch.
pub fn grad_log_likelihood(
    net: &Network,
    particle: &Particle,
    batch: &DataBatch,
) -> Result<Particle> {
    Ok(likelihood(net, particle, batch, true)?
        .grad
        .expect("requested"))
}

/// Log-prior of every layer (cores, scale vectors, biases).
pub fn log_prior_particle(particle: &Particle, prior: &Prior) -> Result<f64> {
    particle.layers.iter().try_fold(0.0, |acc, l| {
        Ok(acc
            + log_prior(
                l.weights.cores(),
                &l.lambdas,
                &prior.hyper,
                &l.bias,
                prior.weak_variance,
            )?)
    })
}

/// Gradient of [`log_prior_particle`].
pub fn grad_log_prior_particle(particle: &Particle, prior: &Prior) -> Result<Particle> {
    let mut grad = particle.zeros_like();
    for (l, g) in particle.layers.iter().zip(&mut grad.layers) {
        add_layer_prior_grad(l, g, prior, 1.0)?;
    }
    Ok(grad)
}

fn add_layer_prior_grad(
    layer: &LayerParams,
    out: &mut LayerParams,
    prior: &Prior,
    scale_likelihood: f64,
) -> Result<()> {
    let cores: &[TtCore] = layer.weights.cores();
    let d = cores.len();
    for (k, core) in cores.iter().enumerate() {
        let left = k.checked_sub(1).map(|i| &layer.lambdas[i]);
        let right = layer.lambdas.get(k);
        let g = grad_log_prior_core(core, left, right, CorePosition::of(k, d))?;
        for (o, gv) in out.weights.cores_mut()[k].data_mut().iter_mut().zip(g) {
            *o = scale_likelihood * *o + gv;
        }
    }
    for k in 0..layer.lambdas.len() {
        let g = grad_log_prior_lambda(k, cores, &layer.lambdas, &prior.hyper)?;
        for (o, gv) in out.lambdas[k].values_mut().iter_mut().zip(g) {
            *o = scale_likelihood * *o + gv;
        }
    }
    let g = grad_log_prior_extras(&layer.bias, prior.weak_variance);
    for (o, gv) in out.bias.iter_mut().zip(g) {
        *o = scale_likelihood * *o + gv;
    }
    Ok(())
}

/// Log-posterior, likelihood and gradient of one particle on a minibatch.
#[derive(Debug, Clone)]
pub struct PosteriorEval {
    /// Batch log-likelihood, unscaled.
    pub log_likelihood: f64,
    pub log_prior: f64,
    /// `(n_total / batch) * log_likelihood + log_prior`.
    pub log_posterior: f64,
    pub probs: Vec<f64>,
    pub grad: Particle,
}

/// Evaluates the unnormalized log-posterior and its gradient on a minibatch,
/// rescaling the likelihood by `n_total / batch_len`.
pub fn evaluate_posterior(
    net: &Network,
    prior: &Prior,
    particle: &Particle,
    batch: &DataBatch,
    n_total: usize,
) -> Result<PosteriorEval> {
    let eval = likelihood(net, particle, batch, true)?;
    let scale = n_total as f64 / batch.len() as f64;
    let mut grad = eval.grad.expect("requested");
    for (l, g) in particle.layers.iter().zip(&mut grad.layers) {
        add_layer_prior_grad(l, g, prior, scale)?;
    }
    let log_prior = log_prior_particle(particle, prior)?;
    Ok(PosteriorEval {
        log_likelihood: eval.log_likelihood,
        log_prior,
        log_posterior: scale * eval.log_likelihood + log_prior,
        probs: eval.probs,
        grad,
    })
}

/// `(n_total / batch) * log p(batch | theta) + log p(theta)`.
pub fn log_posterior_unnorm(
    net: &Network,
    prior: &Prior,
    particle: &Particle,
    batch: &DataBatch,
    n_total: usize,
) -> Result<f64> {
    let eval = likelihood(net, particle, batch, false)?;
    let scale = n_total as f64 / batch.len() as f64;
    Ok(scale * eval.log_likelihood + log_prior_particle(particle, prior)?)
}

/// Gradient of [`log_posterior_unnorm`]; never forms a dense weight matrix.
pub fn grad_log_posterior(
    net: &Network,
    prior: &Prior,
    particle: &Particle,
    batch: &DataBatch,
    n_total: usize,
) -> Result<Particle> {
    Ok(evaluate_posterior(net, prior, particle, batch, n_total)?.grad)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax matches the one-hot label.
pub fn accuracy(probs: &[f64], labels: &[f64], classes: usize) -> f64 {
    let pred = argmax_rows(probs, classes);
    let truth = argmax_rows(labels, classes);
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy, ToyKind};

    fn tiny_net() -> Network {
        Network::new(vec![
            LayerSpec {
                shape: FactorizedShape::new(vec![4, 2], vec![2, 2]).unwrap(),
                ranks: RankVector::uniform(2, 3).unwrap(),
                activation: Activation::Relu,
            },
            LayerSpec {
                shape: FactorizedShape::new(vec![2, 2], vec![2, 1]).unwrap(),
                ranks: RankVector::uniform(2, 2).unwrap(),
                activation: Activation::Softmax,
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let net = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 2], vec![5, 2]).unwrap(),
            ranks: RankVector::uniform(2, 2).unwrap(),
            activation: Activation::Softmax,
        }])
        .unwrap();
        let p = Particle::init(&net, &Prior::default(), LambdaInit::PriorMean, 0)
            .unwrap()
            .zeros_like();
        let probs = forward(&net, &p, &[0.3, 0.1, -2.0, 4.0]).unwrap();
        assert_eq!(probs.len(), 10);
        for v in probs {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        let uniform = vec![0.1; 10];
        let mut label = vec![0.0; 10];
        label[3] = 1.0;
        assert!((cross_entropy(&uniform, &label) - 10f64.ln()).abs() < 1e-12);
        let two: Vec<f64> = uniform.iter().chain(&uniform).copied().collect();
        let labels2: Vec<f64> = label.iter().chain(&label).copied().collect();
        assert_eq!(
            cross_entropy(&two, &labels2),
            2.0 * cross_entropy(&uniform, &label)
        );
        // clamped, never infinite
        assert!((cross_entropy(&[1.0, 0.0], &[0.0, 1.0]) - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn architecture_validation() {
        let bad_chain = Network::new(vec![
            LayerSpec {
                shape: FactorizedShape::new(vec![2, 2], vec![3, 1]).unwrap(),
                ranks: RankVector::uniform(2, 1).unwrap(),
                activation: Activation::Relu,
            },
            LayerSpec {
                shape: FactorizedShape::new(vec![2, 2], vec![2, 1]).unwrap(),
                ranks: RankVector::uniform(2, 1).unwrap(),
                activation: Activation::Softmax,
            },
        ]);
        assert!(bad_chain.is_err());
        let no_softmax = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 2], vec![2, 1]).unwrap(),
            ranks: RankVector::uniform(2, 1).unwrap(),
            activation: Activation::Relu,
        }]);
        assert!(no_softmax.is_err());
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let net = tiny_net();
        let p = Particle::init(&net, &Prior::default(), LambdaInit::Sample, 4).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(flat[0], p.layers[0].weights.cores()[0].data()[0]);
        assert_eq!(*flat.last().unwrap(), *p.layers[1].bias.last().unwrap());
    }

    #[test]
    fn zero_input_gives_zero_first_layer_core_gradient() {
        let net = tiny_net();
        let p = Particle::init(&net, &Prior::default(), LambdaInit::PriorMean, 2).unwrap();
        let labels: Vec<f64> = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0].to_vec();
        let batch = DataBatch::new(vec![0.0; 24], labels, 8, 2).unwrap();
        let g = grad_log_likelihood(&net, &p, &batch).unwrap();
        for core in g.layers[0].weights.cores() {
            assert!(core.data().iter().all(|&v| v == 0.0));
        }
        assert!(g
            .layers
            .iter()
            .flat_map(|l| &l.lambdas)
            .all(|lam| lam.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn minibatch_gradients_add_up() {
        let net = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 1], vec![2, 1]).unwrap(),
            ranks: RankVector::uniform(2, 2).unwrap(),
            activation: Activation::Softmax,
        }])
        .unwrap();
        let prior = Prior::default();
        let data = make_toy(ToyKind::TwoGaussians, 12, 1).unwrap();
        let p = Particle::init(&net, &prior, LambdaInit::PriorMean, 3).unwrap();
        let full = grad_log_posterior(&net, &prior, &p, &data.as_batch(), data.len())
            .unwrap()
            .flatten();
        let a = grad_log_likelihood(&net, &p, &data.batch(&(0..5).collect::<Vec<_>>()))
            .unwrap()
            .flatten();
        let b = grad_log_likelihood(&net, &p, &data.batch(&(5..12).collect::<Vec<_>>()))
            .unwrap()
            .flatten();
        let pr = grad_log_prior_particle(&p, &prior).unwrap().flatten();
        for i in 0..full.len() {
            let sum = a[i] + b[i] + pr[i];
            assert!((full[i] - sum).abs() < 1e-10 * full[i].abs().max(1.0));
        }
    }

    #[test]
    fn lambda_gradient_is_prior_only() {
        let net = tiny_net();
        let prior = Prior::default();
        let p = Particle::init(&net, &prior, LambdaInit::Sample, 8).unwrap();
        let data = Dataset8::new();
        let g = grad_log_posterior(&net, &prior, &p, &data.0, 100).unwrap();
        for (l, layer) in p.layers.iter().enumerate() {
            for k in 0..layer.lambdas.len() {
                let want =
                    grad_log_prior_lambda(k, layer.weights.cores(), &layer.lambdas, &prior.hyper)
                        .unwrap();
                assert_eq!(g.layers[l].lambdas[k].values(), &want[..]);
            }
        }
    }

    struct Dataset8(DataBatch);

    impl Dataset8 {
        fn new() -> Self {
            let inputs: Vec<f64> = (0..32)
                .map(|i| ((i * 37 % 17) as f64) / 17.0 - 0.4)
                .collect();
            let labels = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
            Dataset8(DataBatch::new(inputs, labels, 8, 2).unwrap())
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.2, 0.1, 0.3, 0.3], 3), vec![0, 1]);
        assert_eq!(
            accuracy(
                &[0.1; 10],
                &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                10
            ),
            0.0
        );
    }
}
