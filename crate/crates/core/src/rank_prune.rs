//! Rank determination from posterior-mean scale vectors, and truncation of
//! trained models to the inferred ranks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{forward, LayerParams, LayerSpec, Network, Particle};
use crate::priors::RankScaleVector;
use crate::tt::{tt_param_count, tt_truncate, RankVector};

/// Keep entry `r` of a scale vector iff `lambda_r >= max(rel * max(lambda), abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPolicy {
    pub rel: f64,
    pub abs: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            rel: 0.01,
            abs: 1e-5,
        }
    }
}

impl ThresholdPolicy {
    pub fn new(rel: f64, abs: f64) -> Result<Self> {
        if !(rel >= 0.0 && rel.is_finite() && abs >= 0.0 && abs.is_finite()) {
            return Err(Error::domain(format!(
                "thresholds must be finite and nonnegative, got rel={} abs={}",
                rel, abs
            )));
        }
        Ok(ThresholdPolicy { rel, abs })
    }

    /// The cut-off for one vector.
    pub fn cutoff(&self, values: &[f64]) -> f64 {
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.rel * max).max(self.abs)
    }

    /// Sorted kept indices; never empty for a nonempty input.
    pub fn keep_set(&self, values: &[f64]) -> Vec<usize> {
        let tau = self.cutoff(values);
        let keep: Vec<usize> = (0..values.len()).filter(|&r| values[r] >= tau).collect();
        if keep.is_empty() && !values.is_empty() {
            let mut best = 0;
            for (r, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = r;
                }
            }
            return vec![best];
        }
        keep
    }
}

/// Componentwise mean of every scale vector over the particles:
/// `result[layer][k]` is the mean of the k-th internal-rank vector.
pub fn posterior_mean_lambda(particles: &[Particle]) -> Result<Vec<Vec<Vec<f64>>>> {
    let first = particles
        .first()
        .ok_or_else(|| Error::shape("posterior mean needs at least one particle"))?;
    let n = particles.len() as f64;
    let mut mean: Vec<Vec<Vec<f64>>> = first
        .layers
        .iter()
        .map(|l| l.lambdas.iter().map(|v| vec![0.0; v.len()]).collect())
        .collect();
    for p in particles {
        if p.layers.len() != mean.len() {
            return Err(Error::shape("particles differ in layer count"));
        }
        for (ml, layer) in mean.iter_mut().zip(&p.layers) {
            if ml.len() != layer.lambdas.len() {
                return Err(Error::shape("particles differ in scale-vector count"));
            }
            for (m, v) in ml.iter_mut().zip(&layer.lambdas) {
                if m.len() != v.len() {
                    return Err(Error::shape("particles differ in rank"));
                }
                for (a, b) in m.iter_mut().zip(v.values()) {
                    *a += b;
                }
            }
        }
    }
    if particles.len() > 1 {
        mean.iter_mut().flatten().flatten().for_each(|v| *v /= n);
    }
    Ok(mean)
}

/// Inferred ranks and keep-sets of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRankEstimate {
    pub ranks: RankVector,
    /// 0-based kept indices, one sorted set per internal rank.
    pub keep: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankEstimate {
    pub layers: Vec<LayerRankEstimate>,
    pub policy: ThresholdPolicy,
}

impl RankEstimate {
    /// Keeps every index of every rank.
    pub fn keep_all(net: &Network) -> Self {
        RankEstimate {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRankEstimate {
                    ranks: l.ranks.clone(),
                    keep: l
                        .ranks
                        .internal()
                        .iter()
                        .map(|&r| (0..r).collect())
                        .collect(),
                })
                .collect(),
            policy: ThresholdPolicy { rel: 0.0, abs: 0.0 },
        }
    }
}

/// `R_k = #{r : mean_lambda_r >= cutoff}` for every internal rank of every layer.
pub fn estimate_ranks(
    mean_lambda: &[Vec<Vec<f64>>],
    policy: &ThresholdPolicy,
) -> Result<RankEstimate> {
    let mut layers = Vec::with_capacity(mean_lambda.len());
    for vectors in mean_lambda {
        if vectors
            .iter()
            .flatten()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::domain("scale means must be finite and nonnegative"));
        }
        let keep: Vec<Vec<usize>> = vectors.iter().map(|v| policy.keep_set(v)).collect();
        let mut ranks = vec![1];
        ranks.extend(keep.iter().map(Vec::len));
        ranks.push(1);
        layers.push(LayerRankEstimate {
            ranks: RankVector::new(ranks)?,
            keep,
        });
    }
    Ok(RankEstimate {
        layers,
        policy: *policy,
    })
}

/// Parameter counts of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub ranks_before: RankVector,
    pub ranks_after: RankVector,
    pub params_before: usize,
    pub params_after: usize,
    /// Entries of the equivalent dense weight matrix.
    pub dense: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
    pub policy: ThresholdPolicy,
    /// Largest absolute change of any output probability on the probe batch.
    pub max_output_deviation: Option<f64>,
}

impl PruneReport {
    pub fn params_before(&self) -> usize {
        self.layers.iter().map(|l| l.params_before).sum()
    }

    pub fn params_after(&self) -> usize {
        self.layers.iter().map(|l| l.params_after).sum()
    }

    pub fn dense_params(&self) -> usize {
        self.layers.iter().map(|l| l.dense).sum()
    }

    pub fn bias_params(&self) -> usize {
        self.layers.iter().map(|l| l.bias).sum()
    }

    /// Core parameters before over after.
    pub fn ratio_vs_tt(&self) -> f64 {
        self.params_before() as f64 / self.params_after() as f64
    }

    /// Dense weight entries over pruned core parameters.
    pub fn ratio_vs_dense(&self) -> f64 {
        self.dense_params() as f64 / self.params_after() as f64
    }

    /// Same ratios with the biases counted on both sides.
    pub fn ratio_vs_tt_with_bias(&self) -> f64 {
        let b = self.bias_params();
        (self.params_before() + b) as f64 / (self.params_after() + b) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "threshold: rel={} abs={}",
            self.policy.rel, self.policy.abs
        );
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "layer {}: ranks {:?} -> {:?}, params {} -> {} (dense {}, bias {})",
                i + 1,
                l.ranks_before.as_slice(),
                l.ranks_after.as_slice(),
                l.params_before,
                l.params_after,
                l.dense,
                l.bias
            );
        }
        let _ = writeln!(
            s,
            "total TT params: {} -> {}",
            self.params_before(),
            self.params_after()
        );
        let _ = writeln!(s, "compression vs max-rank TT: {:.3}x", self.ratio_vs_tt());
        let _ = writeln!(
            s,
            "compression vs max-rank TT incl. biases: {:.3}x",
            self.ratio_vs_tt_with_bias()
        );
        let _ = writeln!(s, "compression vs dense: {:.3}x", self.ratio_vs_dense());
        if let Some(dev) = self.max_output_deviation {
            let _ = writeln!(s, "max output deviation on probe: {:e}", dev);
        }
        s
    }

    /// One `key=value` pair per line.
    pub fn to_key_values(&self) -> String {
        let join = |r: &RankVector| {
            r.as_slice()
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "tau_rel={}", self.policy.rel);
        let _ = writeln!(s, "tau_abs={}", self.policy.abs);
        let _ = writeln!(s, "layers={}", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer{}.ranks_before={}", i + 1, join(&l.ranks_before));
            let _ = writeln!(s, "layer{}.ranks_after={}", i + 1, join(&l.ranks_after));
            let _ = writeln!(s, "layer{}.params_before={}", i + 1, l.params_before);
            let _ = writeln!(s, "layer{}.params_after={}", i + 1, l.params_after);
            let _ = writeln!(s, "layer{}.dense={}", i + 1, l.dense);
            let _ = writeln!(s, "layer{}.bias={}", i + 1, l.bias);
        }
        let _ = writeln!(s, "params_before={}", self.params_before());
        let _ = writeln!(s, "params_after={}", self.params_after());
        let _ = writeln!(s, "dense_params={}", self.dense_params());
        let _ = writeln!(s, "ratio_vs_tt={}", self.ratio_vs_tt());
        let _ = writeln!(s, "ratio_vs_tt_with_bias={}", self.ratio_vs_tt_with_bias());
        let _ = writeln!(s, "ratio_vs_dense={}", self.ratio_vs_dense());
        if let Some(dev) = self.max_output_deviation {
            let _ = writeln!(s, "max_output_deviation={}", dev);
        }
        s
    }
}

/// Truncates every particle with the same keep-sets and reports the new
/// parameter counts. With a probe batch (row-major inputs), the largest
/// output change over all particles is measured.
pub fn prune_model(
    net: &Network,
    particles: &[Particle],
    estimate: &RankEstimate,
    probe: Option<&[f64]>,
) -> Result<(Network, Vec<Particle>, PruneReport)> {
    if estimate.layers.len() != net.layers().len() {
        return Err(Error::shape(format!(
            "estimate has {} layers, network has {}",
            estimate.layers.len(),
            net.layers().len()
        )));
    }
    let mut specs = Vec::with_capacity(net.layers().len());
    let mut reports = Vec::with_capacity(net.layers().len());
    for (spec, est) in net.layers().iter().zip(&estimate.layers) {
        let internal = spec.ranks.internal();
        let consistent = est.keep.len() == internal.len()
            && est
                .keep
                .iter()
                .zip(internal)
                .all(|(set, &r)| set.iter().all(|&i| i < r))
            && est.ranks.order() == spec.ranks.order()
            && est
                .keep
                .iter()
                .map(Vec::len)
                .eq(est.ranks.internal().iter().copied());
        if !consistent {
            return Err(Error::shape("rank estimate does not match the network"));
        }
        let after = tt_param_count(&spec.shape, &est.ranks)?;
        reports.push(LayerReport {
            ranks_before: spec.ranks.clone(),
            ranks_after: est.ranks.clone(),
            params_before: tt_param_count(&spec.shape, &spec.ranks)?,
            params_after: after,
            dense: spec.shape.dense_len(),
            bias: spec.outputs(),
        });
        specs.push(LayerSpec {
            shape: spec.shape.clone(),
            ranks: est.ranks.clone(),
            activation: spec.activation,
        });
    }
    let pruned_net = Network::new(specs)?;

    let mut pruned = Vec::with_capacity(particles.len());
    for p in particles {
        net.check_particle(p)?;
        let layers = p
            .layers
            .iter()
            .zip(&estimate.layers)
            .map(|(layer, est)| {
                let lambdas = layer
                    .lambdas
                    .iter()
                    .zip(&est.keep)
                    .map(|(v, set)| {
                        RankScaleVector::new(set.iter().map(|&i| v.values()[i]).collect())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerParams {
                    weights: tt_truncate(&layer.weights, &est.keep)?,
                    lambdas,
                    bias: layer.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pruned.push(Particle { layers });
    }

    let max_output_deviation = match probe {
        Some(inputs) => {
            let mut worst: f64 = 0.0;
            for (a, b) in particles.iter().zip(&pruned) {
                let ya = forward(net, a, inputs)?;
                let yb = forward(&pruned_net, b, inputs)?;
                for (u, v) in ya.iter().zip(&yb) {
                    worst = worst.max((u - v).abs());
                }
            }
            Some(worst)
        }
        None => None,
    };

    Ok((
        pruned_net,
        pruned,
        PruneReport {
            layers: reports,
            policy: estimate.policy,
            max_output_deviation,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::priors::{LambdaInit, Prior};
    use crate::tt::FactorizedShape;
    use proptest::prelude::*;

    #[test]
    fn threshold_examples() {
        let p = ThresholdPolicy::default();
        assert_eq!(p.keep_set(&[0.5, 1e-6, 0.3]), vec![0, 2]);
        assert_eq!(p.keep_set(&[0.2; 5]), vec![0, 1, 2, 3, 4]);
        assert_eq!(p.keep_set(&[1e-7, 3e-6, 2e-6]), vec![1]);
        assert!(ThresholdPolicy::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn posterior_mean_examples() {
        let net = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 2], vec![2, 2]).unwrap(),
            ranks: RankVector::uniform(2, 2).unwrap(),
            activation: Activation::Softmax,
        }])
        .unwrap();
        let mut a = Particle::init(&net, &Prior::default(), LambdaInit::PriorMean, 0).unwrap();
        let mut b = a.clone();
        a.layers[0].lambdas[0] = RankScaleVector::new(vec![0.1, 0.3]).unwrap();
        b.layers[0].lambdas[0] = RankScaleVector::new(vec![0.3, 0.1]).unwrap();
        assert_eq!(
            posterior_mean_lambda(&[a.clone()]).unwrap()[0][0],
            vec![0.1, 0.3]
        );
        let m = posterior_mean_lambda(&[a, b]).unwrap();
        assert!((m[0][0][0] - 0.2).abs() < 1e-15 && (m[0][0][1] - 0.2).abs() < 1e-15);
        assert!(posterior_mean_lambda(&[]).is_err());
    }

    #[test]
    fn keep_all_is_identity() {
        let net = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 3], vec![2, 2]).unwrap(),
            ranks: RankVector::uniform(2, 3).unwrap(),
            activation: Activation::Softmax,
        }])
        .unwrap();
        let p = Particle::init(&net, &Prior::default(), LambdaInit::PriorMean, 1).unwrap();
        let probe = vec![0.3; 12];
        let (n2, ps, rep) = prune_model(
            &net,
            std::slice::from_ref(&p),
            &RankEstimate::keep_all(&net),
            Some(&probe),
        )
        .unwrap();
        assert_eq!(n2, net);
        assert_eq!(ps[0], p);
        assert_eq!(rep.ratio_vs_tt(), 1.0);
        assert_eq!(rep.max_output_deviation, Some(0.0));
    }

    #[test]
    fn inconsistent_estimate_rejected() {
        let net = Network::new(vec![LayerSpec {
            shape: FactorizedShape::new(vec![2, 3], vec![2, 2]).unwrap(),
            ranks: RankVector::uniform(2, 3).unwrap(),
            activation: Activation::Softmax,
        }])
        .unwrap();
        let mut est = RankEstimate::keep_all(&net);
        est.layers[0].keep[0] = vec![0, 5];
        est.layers[0].ranks = RankVector::new(vec![1, 2, 1]).unwrap();
        assert!(matches!(
            prune_model(&net, &[], &est, None),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn stricter_threshold_never_keeps_more(
            v in prop::collection::vec(0.0f64..1.0, 1..20),
            r1 in 0.0f64..0.5,
            dr in 0.0f64..0.5,
            a1 in 0.0f64..0.1,
            da in 0.0f64..0.1,
        ) {
            let loose = ThresholdPolicy::new(r1, a1).unwrap().keep_set(&v);
            let strict = ThresholdPolicy::new(r1 + dr, a1 + da).unwrap().keep_set(&v);
            prop_assert!(strict.len() <= loose.len());
            prop_assert!(!strict.is_empty());
        }

        #[test]
        fn relative_threshold_is_scale_invariant(
            v in prop::collection::vec(1e-6f64..1.0, 1..20),
            c in 1e-3f64..1e3,
            rel in 0.0f64..0.9,
        ) {
            let p = ThresholdPolicy::new(rel, 0.0).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            // exact scaling can flip entries sitting exactly on the cut-off
            let tau = p.cutoff(&v);
            prop_assume!(v.iter().all(|x| ((x - tau) / tau.max(1e-300)).abs() > 1e-9));
            prop_assert_eq!(p.keep_set(&v), p.keep_set(&scaled));
        }
    }
}
