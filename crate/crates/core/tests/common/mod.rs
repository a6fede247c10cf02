//! Random tiny networks and an independent dense re-implementation of the
//! forward pass and log-posterior, shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttbnn_core::data::{DataBatch, Split};
use ttbnn_core::model::log_posterior_unnorm;
use ttbnn_core::{
    Activation, Dataset, FactorizedShape, LayerSpec, Network, Particle, Prior, RankScaleVector,
    RankVector, TtCore,
};

/// A random classifier whose layers all have `order` cores, with random
/// factors, ranks, cores, scale vectors in `[0.3, 1.5)` and biases.
pub fn random_model(order: usize, seed: u64) -> (Network, Particle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(1..=2);
    let mut cols: Vec<usize> = (0..order).map(|_| rng.random_range(1..=3)).collect();
    let mut specs = Vec::new();
    for l in 0..layers {
        let rows = cols.clone();
        cols = (0..order).map(|_| rng.random_range(1..=3)).collect();
        if l + 1 == layers {
            // at least two classes
            cols[0] = cols[0].max(2);
        }
        let mut ranks = vec![1];
        ranks.extend((1..order).map(|_| rng.random_range(1..=3)));
        ranks.push(1);
        specs.push(LayerSpec {
            shape: FactorizedShape::new(rows, cols.clone()).unwrap(),
            ranks: RankVector::new(ranks).unwrap(),
            activation: if l + 1 == layers {
                Activation::Softmax
            } else if rng.random_bool(0.5) {
                Activation::Relu
            } else {
                Activation::Identity
            },
        });
    }
    let net = Network::new(specs).unwrap();
    let mut particle = Particle::zeros(&net);
    for layer in &mut particle.layers {
        let mut cores: Vec<TtCore> = layer.weights.cores().to_vec();
        for core in &mut cores {
            for v in core.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        layer.weights = ttbnn_core::TtMatrix::new(
            layer.weights.shape().clone(),
            layer.weights.ranks().clone(),
            cores,
        )
        .unwrap();
        for lam in &mut layer.lambdas {
            *lam =
                RankScaleVector::new((0..lam.len()).map(|_| rng.random_range(0.3..1.5)).collect())
                    .unwrap();
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    (net, particle)
}

pub fn random_batch(net: &Network, rows: usize, seed: u64) -> DataBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = net.input_dim();
    let inputs = (0..rows * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(0..net.classes()))
        .collect();
    let data = Dataset::from_labels(inputs, dim, &labels, net.classes(), Split::Other).unwrap();
    data.batch(&(0..rows).collect::<Vec<_>>())
}

/// Mixed-radix digits of `index`, most significant first.
fn digits(mut index: usize, radices: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radices.len()];
    for k in (0..radices.len()).rev() {
        out[k] = index % radices[k];
        index /= radices[k];
    }
    out
}

/// `W(m, j)` by multiplying the core slices `G_k[:, m_k, j_k, :]` left to right.
pub fn dense_weights(cores: &[TtCore], rows: &[usize], cols: &[usize]) -> Vec<Vec<f64>> {
    let m_total: usize = rows.iter().product();
    let j_total: usize = cols.iter().product();
    let mut w = vec![vec![0.0; j_total]; m_total];
    for (m, row) in w.iter_mut().enumerate() {
        let md = digits(m, rows);
        for (j, cell) in row.iter_mut().enumerate() {
            let jd = digits(j, cols);
            let mut acc = vec![1.0];
            for (k, core) in cores.iter().enumerate() {
                let [_, _, _, r1] = core.dims();
                let next: Vec<f64> = (0..r1)
                    .map(|b| {
                        acc.iter()
                            .enumerate()
                            .map(|(a, x)| x * core.get(a, md[k], jd[k], b))
                            .sum()
                    })
                    .collect();
                acc = next;
            }
            *cell = acc[0];
        }
    }
    w
}

/// Class probabilities computed from explicitly reconstructed dense weights.
pub fn dense_forward(net: &Network, particle: &Particle, inputs: &[f64]) -> Vec<f64> {
    let batch = inputs.len() / net.input_dim();
    let mut a = inputs.to_vec();
    for (spec, params) in net.layers().iter().zip(&particle.layers) {
        let w = dense_weights(
            params.weights.cores(),
            spec.shape.row_factors(),
            spec.shape.col_factors(),
        );
        let (m_total, j_total) = (w.len(), w[0].len());
        let mut z = vec![0.0; batch * j_total];
        for i in 0..batch {
            for j in 0..j_total {
                z[i * j_total + j] = params.bias[j]
                    + (0..m_total)
                        .map(|m| w[m][j] * a[i * m_total + m])
                        .sum::<f64>();
            }
            let row = &mut z[i * j_total..(i + 1) * j_total];
            match spec.activation {
                Activation::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Identity => {}
                Activation::Softmax => {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    row.iter_mut().for_each(|v| *v = (*v - mx).exp() / s);
                }
            }
        }
        a = z;
    }
    a
}

/// Central differences of the log-posterior over every flat coordinate.
pub fn numeric_gradient(
    net: &Network,
    prior: &Prior,
    particle: &Particle,
    batch: &DataBatch,
    n_total: usize,
    h: f64,
) -> Vec<f64> {
    let base = particle.flatten();
    let mut p = particle.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        p.assign_flat(&x).unwrap();
        let up = log_posterior_unnorm(net, prior, &p, batch, n_total).unwrap();
        x[i] = base[i] - h;
        p.assign_flat(&x).unwrap();
        let down = log_posterior_unnorm(net, prior, &p, batch, n_total).unwrap();
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest `|a - n| / max(|a|, |n|, 1)` over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
