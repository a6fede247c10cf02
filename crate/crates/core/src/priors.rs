//! The rank-shrinking prior over TT cores.
//!
//! Each internal rank `R_k` owns a positive scale vector `lambda^(k)`. An
//! entry `G_k(a, m, j, b)` of an intermediate core is `N(0, lambda^(k-1)_a *
//! lambda^(k)_b)`; the first and last cores, which touch only one scale
//! vector, use `N(0, (lambda^(1)_b)^2)` and `N(0, (lambda^(d-1)_a)^2)`. Every
//! scale entry is `Gamma(a, b)` (shape/rate). Non-tensorized parameters get
//! a broad `N(0, weak_variance)`.
//!
//! All densities carry their normalization constants. Scale vectors are
//! kept above [`LAMBDA_FLOOR`] by projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::tt::{FactorizedShape, RankVector, TtCore};

/// Smallest admissible scale entry.
pub const LAMBDA_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A rank-scale vector `lambda^(k)`, one entry per rank index of `R_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankScaleVector(Vec<f64>);

impl RankScaleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("scale vector must be nonempty"));
        }
        check_floor(&values)?;
        Ok(RankScaleVector(values))
    }

    pub fn filled(len: usize, value: f64) -> Result<Self> {
        RankScaleVector::new(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Raw access for optimizers; call [`RankScaleVector::project`] afterwards.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Clamps every entry to `[LAMBDA_FLOOR, inf)`. NaN entries are left
    /// untouched so that divergence stays visible.
    pub fn project(&mut self) {
        for v in &mut self.0 {
            if *v < LAMBDA_FLOOR {
                *v = LAMBDA_FLOOR;
            }
        }
    }
}

fn check_floor(values: &[f64]) -> Result<()> {
    match values
        .iter()
        .find(|v| !(v.is_finite() && **v >= LAMBDA_FLOOR))
    {
        Some(bad) => Err(Error::domain(format!(
            "scale entry {} is below the floor {} or not finite",
            bad, LAMBDA_FLOOR
        ))),
        None => Ok(()),
    }
}

/// Gamma shape/rate hyperparameters of the scale entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaHyper {
    pub a: f64,
    pub b: f64,
}

impl GammaHyper {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::domain(format!(
                "gamma hyperparameters must be positive, got a={}, b={}",
                a, b
            )));
        }
        Ok(GammaHyper { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / self.b
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.a * self.b.ln() - ln_gamma(self.a) + (self.a - 1.0) * x.ln() - self.b * x
    }

    pub fn grad_log_density(&self, x: f64) -> f64 {
        (self.a - 1.0) / x - self.b
    }
}

impl Default for GammaHyper {
    fn default() -> Self {
        GammaHyper { a: 1.0, b: 5.0 }
    }
}

/// Prior hyperparameters shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub hyper: GammaHyper,
    /// Variance of the Gaussian prior on non-tensorized parameters (biases).
    pub weak_variance: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Prior {
            hyper: GammaHyper::default(),
            weak_variance: 100.0,
        }
    }
}

/// Where a core sits in the train; decides which scale vectors set its variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorePosition {
    First,
    Middle,
    Last,
}

impl CorePosition {
    pub fn of(k: usize, order: usize) -> Self {
        if k == 0 {
            CorePosition::First
        } else if k + 1 == order {
            CorePosition::Last
        } else {
            CorePosition::Middle
        }
    }
}

fn gaussian_log_density(x: f64, variance: f64) -> f64 {
    -0.5 * (LN_2PI + variance.ln()) - x * x / (2.0 * variance)
}

/// Per-entry prior variance of a core, as a function of `(r_left, r_right)`.
fn entry_variance<'a>(
    position: CorePosition,
    left: Option<&'a [f64]>,
    right: Option<&'a [f64]>,
) -> Result<impl Fn(usize, usize) -> f64 + 'a> {
    let need = |v: Option<&'a [f64]>, side: &str| {
        v.ok_or_else(|| Error::shape(format!("{:?} core needs a {} scale vector", position, side)))
    };
    let (left, right) = match position {
        CorePosition::First => (None, Some(need(right, "right")?)),
        CorePosition::Last => (Some(need(left, "left")?), None),
        CorePosition::Middle => (Some(need(left, "left")?), Some(need(right, "right")?)),
    };
    for v in left.iter().chain(right.iter()) {
        check_floor(v)?;
    }
    Ok(move |a: usize, b: usize| match (left, right) {
        (None, Some(r)) => r[b] * r[b],
        (Some(l), None) => l[a] * l[a],
        (Some(l), Some(r)) => l[a] * r[b],
        (None, None) => unreachable!(),
    })
}

fn check_core_scales(
    core: &TtCore,
    position: CorePosition,
    left: Option<&[f64]>,
    right: Option<&[f64]>,
) -> Result<()> {
    let [r0, _, _, r1] = core.dims();
    let bad_left = position != CorePosition::First && left.is_none_or(|l| l.len() != r0);
    let bad_right = position != CorePosition::Last && right.is_none_or(|r| r.len() != r1);
    if bad_left || bad_right {
        return Err(Error::shape(format!(
            "scale vectors do not match core of shape {:?}",
            core.dims()
        )));
    }
    if position == CorePosition::First && r0 != 1 || position == CorePosition::Last && r1 != 1 {
        return Err(Error::shape(format!(
            "boundary core has shape {:?}",
            core.dims()
        )));
    }
    Ok(())
}

fn core_log_density(
    core: &TtCore,
    position: CorePosition,
    left: Option<&[f64]>,
    right: Option<&[f64]>,
) -> Result<f64> {
    check_core_scales(core, position, left, right)?;
    let var = entry_variance(position, left, right)?;
    let [r0, mk, jk, r1] = core.dims();
    let mut total = 0.0;
    for a in 0..r0 {
        for m in 0..mk {
            for j in 0..jk {
                for b in 0..r1 {
                    total += gaussian_log_density(core.get(a, m, j, b), var(a, b));
                }
            }
        }
    }
    Ok(total)
}

fn scales_for(k: usize, lambdas: &[RankScaleVector]) -> (Option<&[f64]>, Option<&[f64]>) {
    let left = k
        .checked_sub(1)
        .and_then(|i| lambdas.get(i))
        .map(|l| l.values());
    let right = lambdas.get(k).map(|l| l.values());
    (left, right)
}

fn check_layer(cores: &[TtCore], lambdas: &[RankScaleVector]) -> Result<()> {
    if cores.is_empty() {
        return Ok(());
    }
    if cores.len() < 2 || lambdas.len() + 1 != cores.len() {
        return Err(Error::shape(format!(
            "{} cores need {} scale vectors, got {}",
            cores.len(),
            cores.len().saturating_sub(1),
            lambdas.len()
        )));
    }
    Ok(())
}

/// Log-density of one layer's cores and scale vectors.
pub fn log_prior_layer(
    cores: &[TtCore],
    lambdas: &[RankScaleVector],
    hyper: &GammaHyper,
) -> Result<f64> {
    check_layer(cores, lambdas)?;
    let d = cores.len();
    let mut total = 0.0;
    for (k, core) in cores.iter().enumerate() {
        let (left, right) = scales_for(k, lambdas);
        total += core_log_density(core, CorePosition::of(k, d), left, right)?;
    }
    for lambda in lambdas {
        check_floor(lambda.values())?;
        total += lambda
            .values()
            .iter()
            .map(|&x| hyper.log_density(x))
            .sum::<f64>();
    }
    Ok(total)
}

/// Log-density of `N(0, weak_variance)` over plain parameters.
pub fn log_prior_extras(extras: &[f64], weak_variance: f64) -> f64 {
    extras
        .iter()
        .map(|&x| gaussian_log_density(x, weak_variance))
        .sum()
}

/// Full log-prior of one layer plus its non-tensorized parameters.
///
/// `cores` may be empty, in which case `lambdas` contribute only their Gamma
/// terms.
pub fn log_prior(
    cores: &[TtCore],
    lambdas: &[RankScaleVector],
    hyper: &GammaHyper,
    extras: &[f64],
    weak_variance: f64,
) -> Result<f64> {
    if !(weak_variance > 0.0) {
        return Err(Error::domain("weak variance must be positive"));
    }
    Ok(log_prior_layer(cores, lambdas, hyper)? + log_prior_extras(extras, weak_variance))
}

/// Gradient of the log-prior with respect to one core: `-G / variance` entrywise.
pub fn grad_log_prior_core(
    core: &TtCore,
    lambda_left: Option<&RankScaleVector>,
    lambda_right: Option<&RankScaleVector>,
    position: CorePosition,
) -> Result<Vec<f64>> {
    let left = lambda_left.map(|l| l.values());
    let right = lambda_right.map(|l| l.values());
    check_core_scales(core, position, left, right)?;
    let var = entry_variance(position, left, right)?;
    let [r0, mk, jk, r1] = core.dims();
    let mut out = Vec::with_capacity(core.len());
    for a in 0..r0 {
        for m in 0..mk {
            for j in 0..jk {
                for b in 0..r1 {
                    out.push(-core.get(a, m, j, b) / var(a, b));
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the log-prior with respect to `lambdas[k]` (the scale vector
/// between cores `k` and `k + 1`, 0-based).
///
/// A middle-core entry with variance `lambda_l * lambda'` contributes
/// `-1 / (2 lambda_l) + G^2 / (2 lambda_l^2 lambda')`; a first- or last-core
/// entry with variance `lambda_l^2` contributes `-1 / lambda_l + G^2 / lambda_l^3`.
/// The Gamma prior adds `(a - 1) / lambda_l - b`.
pub fn grad_log_prior_lambda(
    k: usize,
    cores: &[TtCore],
    lambdas: &[RankScaleVector],
    hyper: &GammaHyper,
) -> Result<Vec<f64>> {
    let lambda = lambdas
        .get(k)
        .ok_or_else(|| Error::shape(format!("no scale vector {}", k)))?
        .values();
    check_floor(lambda)?;
    let mut grad: Vec<f64> = lambda.iter().map(|&x| hyper.grad_log_density(x)).collect();
    if cores.is_empty() {
        return Ok(grad);
    }
    check_layer(cores, lambdas)?;
    let d = cores.len();

    // core k: lambda indexes its right rank
    let core = &cores[k];
    let [r0, mk, jk, r1] = core.dims();
    if r1 != lambda.len() {
        return Err(Error::shape("scale vector does not match core rank"));
    }
    match CorePosition::of(k, d) {
        CorePosition::First => {
            for m in 0..mk {
                for j in 0..jk {
                    for (b, g) in grad.iter_mut().enumerate() {
                        let lb = lambda[b];
                        let x = core.get(0, m, j, b);
                        *g += -1.0 / lb + x * x / (lb * lb * lb);
                    }
                }
            }
        }
        _ => {
            let left = lambdas[k - 1].values();
            check_floor(left)?;
            for (a, &la) in left.iter().enumerate().take(r0) {
                for m in 0..mk {
                    for j in 0..jk {
                        for (b, g) in grad.iter_mut().enumerate() {
                            let lb = lambda[b];
                            let x = core.get(a, m, j, b);
                            *g += -0.5 / lb + x * x / (2.0 * la * lb * lb);
                        }
                    }
                }
            }
        }
    }

    // core k + 1: lambda indexes its left rank
    let core = &cores[k + 1];
    let [r0, mk, jk, r1] = core.dims();
    if r0 != lambda.len() {
        return Err(Error::shape("scale vector does not match core rank"));
    }
    match CorePosition::of(k + 1, d) {
        CorePosition::Last => {
            for (a, g) in grad.iter_mut().enumerate() {
                let la = lambda[a];
                for m in 0..mk {
                    for j in 0..jk {
                        let x = core.get(a, m, j, 0);
                        *g += -1.0 / la + x * x / (la * la * la);
                    }
                }
            }
        }
        _ => {
            let right = lambdas[k + 1].values();
            check_floor(right)?;
            for (a, g) in grad.iter_mut().enumerate() {
                let la = lambda[a];
                for m in 0..mk {
                    for j in 0..jk {
                        for (b, &lb) in right.iter().enumerate().take(r1) {
                            let x = core.get(a, m, j, b);
                            *g += -0.5 / la + x * x / (2.0 * la * la * lb);
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// The value of `lambdas[k]` that maximizes the layer log-prior with the
/// cores and every other scale vector held fixed.
///
/// Each entry solves `b x^3 + c x^2 - A x - B = 0`, where `c` counts the
/// `ln x` terms (less `a - 1`), `A` collects middle-core `G^2 / (2 lambda')`
/// and `B` first/last-core `G^2`. The positive root is unique; entries whose
/// optimum lies below the floor are set to [`LAMBDA_FLOOR`].
pub fn maximize_lambda(
    k: usize,
    cores: &[TtCore],
    lambdas: &[RankScaleVector],
    hyper: &GammaHyper,
) -> Result<Vec<f64>> {
    let lambda = lambdas
        .get(k)
        .ok_or_else(|| Error::shape(format!("no scale vector {}", k)))?
        .values();
    check_layer(cores, lambdas)?;
    let n = lambda.len();
    let mut c = vec![1.0 - hyper.a; n];
    let mut lin = vec![0.0; n];
    let mut cubic = vec![0.0; n];
    if !cores.is_empty() {
        let d = cores.len();
        // core k: lambda indexes the right rank
        let core = &cores[k];
        let [r0, mk, jk, r1] = core.dims();
        if r1 != n {
            return Err(Error::shape("scale vector does not match core rank"));
        }
        let boundary = CorePosition::of(k, d) == CorePosition::First;
        let left = if boundary {
            &[][..]
        } else {
            lambdas[k - 1].values()
        };
        for a in 0..r0 {
            for m in 0..mk {
                for j in 0..jk {
                    for b in 0..n {
                        let x = core.get(a, m, j, b);
                        if boundary {
                            c[b] += 1.0;
                            cubic[b] += x * x;
                        } else {
                            c[b] += 0.5;
                            lin[b] += x * x / (2.0 * left[a]);
                        }
                    }
                }
            }
        }
        // core k + 1: lambda indexes the left rank
        let core = &cores[k + 1];
        let [r0, mk, jk, r1] = core.dims();
        if r0 != n {
            return Err(Error::shape("scale vector does not match core rank"));
        }
        let boundary = CorePosition::of(k + 1, d) == CorePosition::Last;
        let right = if boundary {
            &[][..]
        } else {
            lambdas[k + 1].values()
        };
        for a in 0..n {
            for m in 0..mk {
                for j in 0..jk {
                    for b in 0..r1 {
                        let x = core.get(a, m, j, b);
                        if boundary {
                            c[a] += 1.0;
                            cubic[a] += x * x;
                        } else {
                            c[a] += 0.5;
                            lin[a] += x * x / (2.0 * right[b]);
                        }
                    }
                }
            }
        }
    }
    Ok((0..n)
        .map(|r| stationary_point(hyper.b, c[r], lin[r], cubic[r]))
        .collect())
}

/// Largest maximizer on `[LAMBDA_FLOOR, inf)` of
/// `-c ln x - lin / x - cubic / (2 x^2) - b x`.
fn stationary_point(b: f64, c: f64, lin: f64, cubic: f64) -> f64 {
    // x^3 times the derivative; positive below the optimum, negative above
    let g = |x: f64| ((-b * x - c) * x + lin) * x + cubic;
    if g(LAMBDA_FLOOR) <= 0.0 {
        return LAMBDA_FLOOR;
    }
    let (mut lo, mut hi) = (LAMBDA_FLOOR, 1.0);
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Gradient of `N(0, weak_variance)` over plain parameters.
pub fn grad_log_prior_extras(extras: &[f64], weak_variance: f64) -> Vec<f64> {
    extras.iter().map(|&x| -x / weak_variance).collect()
}

/// Core initialization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Element count of the uncompressed matrix.
    pub q: usize,
    /// Common internal rank.
    pub rank: usize,
    pub order: usize,
    pub seed: u64,
}

impl InitConfig {
    pub fn for_layer(shape: &FactorizedShape, rank: usize, seed: u64) -> Self {
        InitConfig {
            q: shape.dense_len(),
            rank,
            order: shape.order(),
            seed,
        }
    }

    /// Per-entry core variance `(2/Q)^(1/2d) R^(1/d - 1)`, chosen so that
    /// reconstructed entries have variance `sqrt(2/Q)`.
    pub fn core_variance(&self) -> f64 {
        let d = self.order as f64;
        (2.0 / self.q as f64).powf(1.0 / (2.0 * d)) * (self.rank as f64).powf(1.0 / d - 1.0)
    }
}

/// Draws i.i.d. `N(0, sigma^2)` cores with the variance of [`InitConfig::core_variance`].
pub fn init_cores(
    shape: &FactorizedShape,
    ranks: &RankVector,
    cfg: &InitConfig,
) -> Result<Vec<TtCore>> {
    if cfg.q == 0 || cfg.rank == 0 || cfg.order < 2 {
        return Err(Error::domain(format!("invalid init config {:?}", cfg)));
    }
    if cfg.order != shape.order() || ranks.order() != shape.order() {
        return Err(Error::shape("init config order does not match the layer"));
    }
    if ranks.internal().iter().any(|&r| r != cfg.rank) {
        return Err(Error::shape(format!(
            "initialization assumes equal internal ranks {}, got {:?}",
            cfg.rank,
            ranks.as_slice()
        )));
    }
    let std = cfg.core_variance().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = ranks.as_slice();
    (0..shape.order())
        .map(|k| {
            let dims = [
                r[k],
                shape.row_factors()[k],
                shape.col_factors()[k],
                r[k + 1],
            ];
            let n = dims.iter().product();
            let data = (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
            TtCore::new(dims, data)
        })
        .collect()
}

/// Adds `scale` times prior-distributed noise to every core entry, so each
/// entry moves by a fraction of its own prior standard deviation. Components
/// whose scales sit at the floor stay negligible.
pub fn perturb_cores(
    cores: &mut [TtCore],
    lambdas: &[RankScaleVector],
    scale: f64,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = cores.len();
    for (k, core) in cores.iter_mut().enumerate() {
        let (left, right) = scales_for(k, lambdas);
        let position = CorePosition::of(k, order);
        check_core_scales(core, position, left, right)?;
        let var = entry_variance(position, left, right)?;
        let [r0, mk, jk, r1] = core.dims();
        for a in 0..r0 {
            for m in 0..mk {
                for j in 0..jk {
                    for b in 0..r1 {
                        let at = core.offset(a, m, j, b);
                        let z: f64 = Distribution::sample(&StandardNormal, &mut rng);
                        core.data_mut()[at] += scale * var(a, b).sqrt() * z;
                    }
                }
            }
        }
    }
    Ok(())
}

/// How scale vectors start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaInit {
    /// Every entry at the prior mean `a / b`.
    #[default]
    PriorMean,
    /// Independent `Gamma(a, b)` draws.
    Sample,
}

pub fn init_lambdas(
    ranks: &RankVector,
    hyper: &GammaHyper,
    mode: LambdaInit,
    seed: u64,
) -> Vec<RankScaleVector> {
    match mode {
        LambdaInit::PriorMean => ranks
            .internal()
            .iter()
            .map(|&r| RankScaleVector(vec![hyper.mean().max(LAMBDA_FLOOR); r]))
            .collect(),
        LambdaInit::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Gamma::new(hyper.a, 1.0 / hyper.b).expect("validated hyperparameters");
            ranks
                .internal()
                .iter()
                .map(|&r| {
                    RankScaleVector(
                        (0..r)
                            .map(|_| dist.sample(&mut rng).max(LAMBDA_FLOOR))
                            .collect(),
                    )
                })
                .collect()
        }
    }
}
