//! Tensor-train matrices.
//!
//! A weight matrix `W` of size `M x J` with `M = M_1 ... M_d` and
//! `J = J_1 ... J_d` is stored as `d` four-way cores `G_k` of shape
//! `(R_{k-1}, M_k, J_k, R_k)` with `R_0 = R_d = 1`:
//!
//! ```text
//! W(m, j) = G_1[:, mu_1(m), nu_1(j), :] G_2[:, mu_2(m), nu_2(j), :] ... G_d[:, mu_d(m), nu_d(j), :]
//! ```
//!
//! The digit maps `mu` and `nu` are row-major mixed-radix decompositions:
//! the first factor is the most significant digit. Every index in this crate
//! is 0-based. Cores are stored row-major in `(r_{k-1}, m_k, j_k, r_k)` order,
//! which is also the order used by flattening and serialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};

/// Row and column factorizations `(M_1..M_d)` and `(J_1..J_d)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactorizedShape {
    row_factors: Vec<usize>,
    col_factors: Vec<usize>,
}

impl FactorizedShape {
    pub fn new(row_factors: Vec<usize>, col_factors: Vec<usize>) -> Result<Self> {
        if row_factors.len() != col_factors.len() {
            return Err(Error::shape(format!(
                "row factorization has {} modes but column factorization has {}",
                row_factors.len(),
                col_factors.len()
            )));
        }
        if row_factors.len() < 2 {
            return Err(Error::shape("a TT-matrix needs at least two modes"));
        }
        if row_factors.iter().chain(&col_factors).any(|&f| f == 0) {
            return Err(Error::shape("factors must be positive"));
        }
        Ok(FactorizedShape {
            row_factors,
            col_factors,
        })
    }

    pub fn order(&self) -> usize {
        self.row_factors.len()
    }

    pub fn row_factors(&self) -> &[usize] {
        &self.row_factors
    }

    pub fn col_factors(&self) -> &[usize] {
        &self.col_factors
    }

    /// Full row count `M`.
    pub fn rows(&self) -> usize {
        self.row_factors.iter().product()
    }

    /// Full column count `J`.
    pub fn cols(&self) -> usize {
        self.col_factors.iter().product()
    }

    /// Element count of the uncompressed matrix.
    pub fn dense_len(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// TT-rank `(R_0, ..., R_d)` with `R_0 = R_d = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.len() < 3 {
            return Err(Error::shape("rank vector needs at least three entries"));
        }
        if ranks[0] != 1 || ranks[ranks.len() - 1] != 1 {
            return Err(Error::shape(format!(
                "boundary ranks must be 1, got {:?}",
                ranks
            )));
        }
        if ranks.contains(&0) {
            return Err(Error::shape(format!(
                "ranks must be positive, got {:?}",
                ranks
            )));
        }
        Ok(RankVector(ranks))
    }

    /// `(1, r, ..., r, 1)` for a TT of order `order`.
    pub fn uniform(order: usize, rank: usize) -> Result<Self> {
        let mut ranks = vec![rank; order + 1];
        ranks[0] = 1;
        ranks[order] = 1;
        RankVector::new(ranks)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// The internal ranks `R_1..R_{d-1}`.
    pub fn internal(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }

    pub fn order(&self) -> usize {
        self.0.len() - 1
    }

    pub fn max_internal(&self) -> usize {
        self.internal().iter().copied().max().unwrap_or(1)
    }
}

/// One four-way core of shape `(R_{k-1}, M_k, J_k, R_k)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TtCore {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl TtCore {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "core of shape {:?} needs {} entries, got {}",
                dims,
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite core entry {}", bad)));
        }
        Ok(TtCore { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        TtCore {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn left_rank(&self) -> usize {
        self.dims[0]
    }

    pub fn right_rank(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, r_left: usize, m: usize, j: usize, r_right: usize) -> usize {
        let [_, mm, jj, rr] = self.dims;
        ((r_left * mm + m) * jj + j) * rr + r_right
    }

    #[inline]
    pub fn get(&self, r_left: usize, m: usize, j: usize, r_right: usize) -> f64 {
        self.data[self.offset(r_left, m, j, r_right)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable entries. Callers that write non-finite values are responsible
    /// for catching them; training loops check after every update.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// A matrix in TT-matrix format.
#[derive(Debug, Clone, PartialEq)]
pub struct TtMatrix {
    shape: FactorizedShape,
    ranks: RankVector,
    cores: Vec<TtCore>,
}

impl TtMatrix {
    pub fn new(shape: FactorizedShape, ranks: RankVector, cores: Vec<TtCore>) -> Result<Self> {
        let d = shape.order();
        if ranks.order() != d || cores.len() != d {
            return Err(Error::shape(format!(
                "order mismatch: shape has {} modes, ranks describe {}, {} cores given",
                d,
                ranks.order(),
                cores.len()
            )));
        }
        let r = ranks.as_slice();
        for (k, core) in cores.iter().enumerate() {
            let want = [r[k], shape.row_factors[k], shape.col_factors[k], r[k + 1]];
            if core.dims != want {
                return Err(Error::shape(format!(
                    "core {} has shape {:?}, expected {:?}",
                    k, core.dims, want
                )));
            }
        }
        Ok(TtMatrix {
            shape,
            ranks,
            cores,
        })
    }

    pub fn zeros(shape: FactorizedShape, ranks: RankVector) -> Result<Self> {
        let cores = core_dims(&shape, &ranks)?
            .into_iter()
            .map(TtCore::zeros)
            .collect();
        TtMatrix::new(shape, ranks, cores)
    }

    /// Cores with i.i.d. `N(0, std^2)` entries.
    pub fn random<R: Rng + ?Sized>(
        shape: FactorizedShape,
        ranks: RankVector,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cores = core_dims(&shape, &ranks)?
            .into_iter()
            .map(|dims| {
                let n = dims.iter().product();
                let data = (0..n)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect::<Vec<f64>>();
                TtCore { dims, data }
            })
            .collect();
        TtMatrix::new(shape, ranks, cores)
    }

    pub fn shape(&self) -> &FactorizedShape {
        &self.shape
    }

    pub fn ranks(&self) -> &RankVector {
        &self.ranks
    }

    pub fn cores(&self) -> &[TtCore] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [TtCore] {
        &mut self.cores
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    /// Number of stored core entries.
    pub fn param_count(&self) -> usize {
        self.cores.iter().map(TtCore::len).sum()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        tt_reconstruct(self)
    }
}

fn core_dims(shape: &FactorizedShape, ranks: &RankVector) -> Result<Vec<[usize; 4]>> {
    if ranks.order() != shape.order() {
        return Err(Error::shape(format!(
            "rank vector of order {} does not fit a shape of order {}",
            ranks.order(),
            shape.order()
        )));
    }
    let r = ranks.as_slice();
    Ok((0..shape.order())
        .map(|k| [r[k], shape.row_factors[k], shape.col_factors[k], r[k + 1]])
        .collect())
}

/// An uncompressed `rows x cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, m: usize, j: usize) -> f64 {
        self.data[m * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `y_j = sum_m W(m, j) x_m`.
    pub fn transpose_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(format!(
                "input has length {}, matrix has {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut y = vec![0.0; self.cols];
        for (m, &xm) in x.iter().enumerate() {
            let row = &self.data[m * self.cols..(m + 1) * self.cols];
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += w * xm;
            }
        }
        Ok(y)
    }
}

/// Per-mode digits of a matrix entry, 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndex {
    pub row_digits: Vec<usize>,
    pub col_digits: Vec<usize>,
}

fn to_digits(mut index: usize, factors: &[usize]) -> Vec<usize> {
    let mut digits = vec![0; factors.len()];
    for (digit, &f) in digits.iter_mut().zip(factors).rev() {
        *digit = index % f;
        index /= f;
    }
    digits
}

fn from_digits(digits: &[usize], factors: &[usize]) -> usize {
    digits
        .iter()
        .zip(factors)
        .fold(0, |acc, (&d, &f)| acc * f + d)
}

pub fn index_to_multi(m: usize, j: usize, shape: &FactorizedShape) -> Result<MultiIndex> {
    if m >= shape.rows() || j >= shape.cols() {
        return Err(Error::Range(format!(
            "({}, {}) outside a {}x{} matrix",
            m,
            j,
            shape.rows(),
            shape.cols()
        )));
    }
    Ok(MultiIndex {
        row_digits: to_digits(m, &shape.row_factors),
        col_digits: to_digits(j, &shape.col_factors),
    })
}

pub fn multi_to_index(idx: &MultiIndex, shape: &FactorizedShape) -> Result<(usize, usize)> {
    let d = shape.order();
    if idx.row_digits.len() != d || idx.col_digits.len() != d {
        return Err(Error::shape("multi-index order does not match shape"));
    }
    let in_range =
        |digits: &[usize], factors: &[usize]| digits.iter().zip(factors).all(|(a, b)| a < b);
    if !in_range(&idx.row_digits, &shape.row_factors)
        || !in_range(&idx.col_digits, &shape.col_factors)
    {
        return Err(Error::Range(format!(
            "digits {:?} exceed the factorization",
            idx
        )));
    }
    Ok((
        from_digits(&idx.row_digits, &shape.row_factors),
        from_digits(&idx.col_digits, &shape.col_factors),
    ))
}

/// Expands the TT-matrix into its dense `M x J` matrix.
///
/// Builds partial products `A_k[(m_1..m_k), (j_1..j_k), r_k]` mode by mode,
/// so the work is dominated by the last core rather than by `M J sum(R^2)`.
pub fn tt_reconstruct(tt: &TtMatrix) -> DenseMatrix {
    let data = reconstruct_prefixes(tt).pop().expect("at least one core");
    DenseMatrix {
        rows: tt.shape.rows(),
        cols: tt.shape.cols(),
        data,
    }
}

/// All partial products `A_0 = [1], A_1, ..., A_d`; `A_d` is the dense matrix.
fn reconstruct_prefixes(tt: &TtMatrix) -> Vec<Vec<f64>> {
    let mut prefixes = Vec::with_capacity(tt.order() + 1);
    prefixes.push(vec![1.0]);
    let (mut rows, mut cols) = (1, 1);
    for core in &tt.cores {
        let [r0, mk, jk, r1] = core.dims;
        let prev = prefixes.last().expect("seeded");
        let mut next = vec![0.0; rows * mk * cols * jk * r1];
        for pm in 0..rows {
            let a = View::new(&prev[pm * cols * r0..], cols, r0, r0, 1);
            for m in 0..mk {
                let g = View::new(&core.data[m * jk * r1..], r0, jk * r1, mk * jk * r1, 1);
                let at = (pm * mk + m) * cols * jk * r1;
                gemm(a, g, 0.0, &mut next[at..], jk * r1, 1);
            }
        }
        prefixes.push(next);
        rows *= mk;
        cols *= jk;
    }
    prefixes
}

/// Reverse pass through [`reconstruct_prefixes`]: core gradients from `dW`.
fn reconstruct_backward(tt: &TtMatrix, prefixes: &[Vec<f64>], d_dense: Vec<f64>) -> Vec<Vec<f64>> {
    let d = tt.order();
    let mut grads: Vec<Vec<f64>> = tt.cores.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut rows: usize = tt.shape.rows();
    let mut cols: usize = tt.shape.cols();
    let mut d_next = d_dense;
    for k in (0..d).rev() {
        let core = &tt.cores[k];
        let [r0, mk, jk, r1] = core.dims;
        rows /= mk;
        cols /= jk;
        let prev = &prefixes[k];
        let mut d_prev = if k > 0 {
            vec![0.0; rows * cols * r0]
        } else {
            Vec::new()
        };
        for pm in 0..rows {
            let a = View::new(&prev[pm * cols * r0..], cols, r0, r0, 1);
            for m in 0..mk {
                let at = (pm * mk + m) * cols * jk * r1;
                let dout = View::new(&d_next[at..], cols, jk * r1, jk * r1, 1);
                let off = m * jk * r1;
                gemm(a.t(), dout, 1.0, &mut grads[k][off..], mk * jk * r1, 1);
                if k > 0 {
                    let g = View::new(&core.data[off..], r0, jk * r1, mk * jk * r1, 1);
                    gemm(dout, g.t(), 1.0, &mut d_prev[pm * cols * r0..], r0, 1);
                }
            }
        }
        d_next = d_prev;
    }
    grads
}

/// `y_j = sum_m W(m, j) x_m` without forming `W`.
pub fn tt_matvec(tt: &TtMatrix, x: &[f64]) -> Result<Vec<f64>> {
    tt_matmul(tt, x, 1)
}

/// How a batched product is evaluated. Both routes give the same result up
/// to rounding; `Auto` picks the one with fewer flops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProductRoute {
    #[default]
    Auto,
    /// Contract the cores into the input one at a time.
    Sequential,
    /// Expand `W` once and multiply densely; cheaper for large batches and ranks.
    Dense,
}

impl ProductRoute {
    fn resolve(self, tt: &TtMatrix, batch: usize) -> ProductRoute {
        if self != ProductRoute::Auto {
            return self;
        }
        let mut per_sample = 0usize;
        let mut p = 1usize;
        let mut recon = 0usize;
        let (mut rows, mut cols) = (1usize, 1usize);
        for k in 0..tt.order() {
            let step = Step::new(tt, k, p);
            per_sample += 2 * step.p * step.a * step.c * step.q;
            p *= step.cols_out;
            let [r0, mk, jk, r1] = tt.cores[k].dims;
            recon += 2 * rows * mk * cols * r0 * jk * r1;
            rows *= mk;
            cols *= jk;
        }
        let dense = batch * 2 * rows * cols + recon;
        if dense < batch * per_sample {
            ProductRoute::Dense
        } else {
            ProductRoute::Sequential
        }
    }
}

fn dense_product(w: &[f64], x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * cols];
    gemm(
        View::new(x, batch, rows, rows, 1),
        View::new(w, rows, cols, cols, 1),
        0.0,
        &mut y,
        cols,
        1,
    );
    y
}

/// Row-wise [`tt_matvec`] over a `batch x M` row-major input; returns `batch x J`.
pub fn tt_matmul(tt: &TtMatrix, x: &[f64], batch: usize) -> Result<Vec<f64>> {
    tt_matmul_with(tt, x, batch, ProductRoute::Auto)
}

/// [`tt_matmul`] with an explicit evaluation route.
pub fn tt_matmul_with(
    tt: &TtMatrix,
    x: &[f64],
    batch: usize,
    route: ProductRoute,
) -> Result<Vec<f64>> {
    check_input(tt, x, batch)?;
    if route.resolve(tt, batch) == ProductRoute::Dense {
        let w = tt_reconstruct(tt);
        return Ok(dense_product(&w.data, x, batch, w.rows, w.cols));
    }
    let mut state = x.to_vec();
    let mut p = batch;
    for k in 0..tt.order() {
        let step = Step::new(tt, k, p);
        state = step.forward(&tt.cores[k], &state);
        p *= step.cols_out;
    }
    Ok(state)
}

fn check_input(tt: &TtMatrix, x: &[f64], batch: usize) -> Result<()> {
    if x.len() != batch * tt.shape.rows() {
        return Err(Error::shape(format!(
            "input of length {} is not a batch of {} rows of width {}",
            x.len(),
            batch,
            tt.shape.rows()
        )));
    }
    Ok(())
}

/// Geometry of contracting core `k` into the carried state.
///
/// The state entering step `k` is laid out as `(P, R_{k-1} M_k, Q)` with
/// `P = batch * J_1 ... J_{k-1}` and `Q = M_{k+1} ... M_d`; the core is read
/// as an `(R_{k-1} M_k) x (J_k R_k)` matrix and the output is `(P, J_k R_k, Q)`,
/// which is exactly the next step's `(P J_k, R_k M_{k+1}, Q / M_{k+1})`.
#[derive(Debug, Clone, Copy)]
struct Step {
    p: usize,
    a: usize,
    c: usize,
    q: usize,
    cols_out: usize,
}

impl Step {
    fn new(tt: &TtMatrix, k: usize, p: usize) -> Self {
        let [r0, mk, jk, r1] = tt.cores[k].dims;
        let q = tt.shape.row_factors[k + 1..].iter().product();
        Step {
            p,
            a: r0 * mk,
            c: jk * r1,
            q,
            cols_out: jk,
        }
    }

    fn forward(&self, core: &TtCore, state: &[f64]) -> Vec<f64> {
        let Step { p, a, c, q, .. } = *self;
        debug_assert_eq!(state.len(), p * a * q);
        let g = View::new(&core.data, a, c, c, 1);
        let mut out = vec![0.0; p * c * q];
        if p <= q {
            for i in 0..p {
                let s = View::new(&state[i * a * q..(i + 1) * a * q], a, q, q, 1);
                gemm(g.t(), s, 0.0, &mut out[i * c * q..(i + 1) * c * q], q, 1);
            }
        } else {
            for l in 0..q {
                let s = View::new(&state[l..], p, a, a * q, q);
                gemm(s, g, 0.0, &mut out[l..], c * q, q);
            }
        }
        out
    }

    /// Returns the state gradient (if requested) and accumulates the core gradient.
    fn backward(
        &self,
        core: &TtCore,
        state: &[f64],
        d_out: &[f64],
        d_core: &mut [f64],
        want_state_grad: bool,
    ) -> Option<Vec<f64>> {
        let Step { p, a, c, q, .. } = *self;
        let g = View::new(&core.data, a, c, c, 1);
        if p <= q {
            for i in 0..p {
                let s = View::new(&state[i * a * q..(i + 1) * a * q], a, q, q, 1);
                let d = View::new(&d_out[i * c * q..(i + 1) * c * q], c, q, q, 1);
                gemm(s, d.t(), 1.0, d_core, c, 1);
            }
        } else {
            for l in 0..q {
                let s = View::new(&state[l..], p, a, a * q, q);
                let d = View::new(&d_out[l..], p, c, c * q, q);
                gemm(s.t(), d, 1.0, d_core, c, 1);
            }
        }
        if !want_state_grad {
            return None;
        }
        let mut d_state = vec![0.0; p * a * q];
        if p <= q {
            for i in 0..p {
                let d = View::new(&d_out[i * c * q..(i + 1) * c * q], c, q, q, 1);
                gemm(g, d, 0.0, &mut d_state[i * a * q..(i + 1) * a * q], q, 1);
            }
        } else {
            for l in 0..q {
                let d = View::new(&d_out[l..], p, c, c * q, q);
                gemm(d, g.t(), 0.0, &mut d_state[l..], a * q, q);
            }
        }
        Some(d_state)
    }
}

/// Intermediate results of a batched TT product, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MatvecTape {
    batch: usize,
    kind: TapeKind,
}

#[derive(Debug, Clone)]
enum TapeKind {
    /// State entering each sequential contraction step.
    Sequential(Vec<Vec<f64>>),
    /// The input and the reconstruction prefixes `A_0..A_d`.
    Dense {
        input: Vec<f64>,
        prefixes: Vec<Vec<f64>>,
    },
}

impl MatvecTape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// [`tt_matmul`] that also records what [`tt_matmul_backward`] needs.
pub fn tt_matmul_taped(tt: &TtMatrix, x: &[f64], batch: usize) -> Result<(Vec<f64>, MatvecTape)> {
    tt_matmul_taped_with(tt, x, batch, ProductRoute::Auto)
}

/// [`tt_matmul_taped`] with an explicit evaluation route.
pub fn tt_matmul_taped_with(
    tt: &TtMatrix,
    x: &[f64],
    batch: usize,
    route: ProductRoute,
) -> Result<(Vec<f64>, MatvecTape)> {
    check_input(tt, x, batch)?;
    if route.resolve(tt, batch) == ProductRoute::Dense {
        let prefixes = reconstruct_prefixes(tt);
        let y = dense_product(
            prefixes.last().expect("nonempty"),
            x,
            batch,
            tt.shape.rows(),
            tt.shape.cols(),
        );
        let kind = TapeKind::Dense {
            input: x.to_vec(),
            prefixes,
        };
        return Ok((y, MatvecTape { batch, kind }));
    }
    let mut states = Vec::with_capacity(tt.order());
    let mut state = x.to_vec();
    let mut p = batch;
    for k in 0..tt.order() {
        let step = Step::new(tt, k, p);
        let next = step.forward(&tt.cores[k], &state);
        states.push(state);
        state = next;
        p *= step.cols_out;
    }
    Ok((
        state,
        MatvecTape {
            batch,
            kind: TapeKind::Sequential(states),
        },
    ))
}

/// Reverse-mode pass of [`tt_matmul_taped`].
///
/// Given `dy` (`batch x J`), returns the gradient with respect to every core
/// and, when `want_input_grad` is set, with respect to the input (`batch x M`).
pub fn tt_matmul_backward(
    tt: &TtMatrix,
    tape: &MatvecTape,
    dy: &[f64],
    want_input_grad: bool,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let (rows, cols) = (tt.shape.rows(), tt.shape.cols());
    if dy.len() != tape.batch * cols {
        return Err(Error::shape(
            "output gradient does not match the recorded product",
        ));
    }
    let states = match &tape.kind {
        TapeKind::Sequential(states) if states.len() == tt.order() => states,
        TapeKind::Sequential(_) => {
            return Err(Error::shape("tape was recorded for a different TT-matrix"))
        }
        TapeKind::Dense { input, prefixes } => {
            if prefixes.len() != tt.order() + 1 || prefixes[tt.order()].len() != rows * cols {
                return Err(Error::shape("tape was recorded for a different TT-matrix"));
            }
            let b = tape.batch;
            let dyv = View::new(dy, b, cols, cols, 1);
            let mut d_w = vec![0.0; rows * cols];
            gemm(
                View::new(input, b, rows, rows, 1).t(),
                dyv,
                0.0,
                &mut d_w,
                cols,
                1,
            );
            let d_input = want_input_grad.then(|| {
                let mut dx = vec![0.0; b * rows];
                let w = View::new(&prefixes[tt.order()], rows, cols, cols, 1);
                gemm(dyv, w.t(), 0.0, &mut dx, rows, 1);
                dx
            });
            return Ok((reconstruct_backward(tt, prefixes, d_w), d_input));
        }
    };
    let d = tt.order();
    let mut ps = Vec::with_capacity(d);
    let mut p = tape.batch;
    for k in 0..d {
        ps.push(p);
        p *= tt.shape.col_factors[k];
    }
    let mut grads: Vec<Vec<f64>> = tt.cores.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut d_out = dy.to_vec();
    let mut d_input = None;
    for k in (0..d).rev() {
        let step = Step::new(tt, k, ps[k]);
        let want = k > 0 || want_input_grad;
        let d_state = step.backward(&tt.cores[k], &states[k], &d_out, &mut grads[k], want);
        match d_state {
            Some(ds) if k > 0 => d_out = ds,
            Some(ds) => d_input = Some(ds),
            None => {}
        }
    }
    Ok((grads, d_input))
}

/// Number of core entries for the given shape and ranks: `sum_k R_{k-1} M_k J_k R_k`.
pub fn tt_param_count(shape: &FactorizedShape, ranks: &RankVector) -> Result<usize> {
    Ok(core_dims(shape, ranks)?
        .iter()
        .map(|dims| dims.iter().product::<usize>())
        .sum())
}

/// Keeps only the selected rank indices of every internal rank.
///
/// `keep[k]` lists the retained indices of `R_{k+1}` (0-based, strictly
/// increasing after normalization); core `k` keeps the selected right slices
/// and core `k + 1` the matching left slices.
pub fn tt_truncate(tt: &TtMatrix, keep: &[Vec<usize>]) -> Result<TtMatrix> {
    let d = tt.order();
    if keep.len() != d - 1 {
        return Err(Error::Prune(format!(
            "expected {} keep-sets, got {}",
            d - 1,
            keep.len()
        )));
    }
    let r = tt.ranks.as_slice();
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(d + 1);
    sets.push(vec![0]);
    for (k, set) in keep.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Prune(format!(
                "keep-set for rank {} is empty",
                k + 1
            )));
        }
        let mut set = set.clone();
        set.sort_unstable();
        set.dedup();
        if let Some(&bad) = set.iter().find(|&&i| i >= r[k + 1]) {
            return Err(Error::Prune(format!(
                "index {} exceeds rank R_{} = {}",
                bad,
                k + 1,
                r[k + 1]
            )));
        }
        sets.push(set);
    }
    sets.push(vec![0]);

    let ranks = RankVector::new(sets.iter().map(Vec::len).collect())?;
    let cores = tt
        .cores
        .iter()
        .enumerate()
        .map(|(k, core)| {
            let [_, mk, jk, _] = core.dims;
            let (left, right) = (&sets[k], &sets[k + 1]);
            let mut data = Vec::with_capacity(left.len() * mk * jk * right.len());
            for &a in left {
                for m in 0..mk {
                    for j in 0..jk {
                        data.extend(right.iter().map(|&b| core.get(a, m, j, b)));
                    }
                }
            }
            TtCore {
                dims: [left.len(), mk, jk, right.len()],
                data,
            }
        })
        .collect();
    TtMatrix::new(tt.shape.clone(), ranks, cores)
}

/// A row-major n-way array used for convolution-kernel relayouts.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "array of shape {:?} cannot hold {} entries",
                shape,
                data.len()
            )));
        }
        Ok(NdArray { shape, data })
    }
}

/// Relayouts a `t x t x C x S` kernel into `t^2 x c_1 x .. x c_d x s_1 x .. x s_d`.
///
/// With row-major storage and most-significant-first digits this is a pure
/// reinterpretation of the shape; the entry order is unchanged.
pub fn conv_kernel_reshape(
    kernel: &NdArray,
    c_factors: &[usize],
    s_factors: &[usize],
) -> Result<NdArray> {
    let [t1, t2, c, s] = match kernel.shape[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::shape("convolution kernel must be 4-way")),
    };
    if t1 != t2 {
        return Err(Error::shape(format!(
            "kernel is {}x{}, expected square",
            t1, t2
        )));
    }
    if c_factors.iter().product::<usize>() != c || s_factors.iter().product::<usize>() != s {
        return Err(Error::shape(format!(
            "factors {:?} / {:?} do not multiply to channels {} / {}",
            c_factors, s_factors, c, s
        )));
    }
    let mut shape = vec![t1 * t2];
    shape.extend_from_slice(c_factors);
    shape.extend_from_slice(s_factors);
    NdArray::new(shape, kernel.data.clone())
}

/// Inverse of [`conv_kernel_reshape`].
pub fn conv_kernel_unreshape(tensor: &NdArray, t: usize, order: usize) -> Result<NdArray> {
    if tensor.shape.len() != 1 + 2 * order || tensor.shape[0] != t * t {
        return Err(Error::shape(format!(
            "tensor of shape {:?} is not a reshaped {}x{} kernel of order {}",
            tensor.shape, t, t, order
        )));
    }
    let c = tensor.shape[1..=order].iter().product();
    let s = tensor.shape[order + 1..].iter().product();
    NdArray::new(vec![t, t, c, s], tensor.data.clone())
}
