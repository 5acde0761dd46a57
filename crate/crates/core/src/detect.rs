//! Receivers.
//!
//! Downlink detection is two-stage: an LMMSE equalizer undoes the
//! delay-Doppler channel on the superimposed grid, then every `K`-cell block
//! is handed to an SCMA message-passing detector over an AWGN model.
//!
//! Uplink detection is a single message-passing stage over the effective
//! factor graph built from the compressed concatenation of every user's
//! coefficient matrix.
//!
//! Both message-passing stages share one engine, [`MpaDetector`]. Messages
//! are kept as normalized log-probabilities and every marginalization is an
//! exact log-sum-exp, so the products of the linear-domain formulation never
//! underflow.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::CoefficientMatrix;
use crate::dd::{DelayDopplerGrid, GridSpec};
use crate::scma::{extract_blocks, AllocationScheme, ScmaCodebookSet};
use crate::{Complex, Error, Result};

/// Smallest noise variance used anywhere in detection.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub max_iter: usize,
    /// Stop once no posterior probability moves by more than this.
    pub convergence_tol: f64,
    /// Weight of the fresh observation message; 1.0 disables damping.
    pub damping: f64,
    /// Largest observation-node degree the uplink detector will enumerate.
    pub degree_cap: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { max_iter: 10, convergence_tol: 1e-6, damping: 1.0, degree_cap: 12 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidConfig("damping must lie in (0, 1]".into()));
        }
        if self.degree_cap == 0 {
            return Err(Error::InvalidConfig("degree_cap must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// LMMSE
// ---------------------------------------------------------------------------

/// Equalizer output with the statistics the SCMA stage needs.
///
/// Writing `A = H H* + n0 I`, the estimate in cell `i` is
/// `beta_i x_i + e_i`. The AWGN-equivalent view divides the whole grid by
/// the mean bias and treats what is left as white noise of variance
/// [`LmmseOutput::effective_noise`]. Both quantities follow from `tr(A^-1)`
/// and `||A^-1||_F^2`, which a unitary change of basis leaves unchanged.
#[derive(Debug, Clone)]
pub struct LmmseOutput {
    pub estimate: Vec<Complex>,
    /// Mean squared error per cell for unit-power inputs, `n0 tr(A^-1) / MN`.
    pub error_variance: f64,
    n0: f64,
    trace_inv: f64,
    frobenius_inv_sq: f64,
}

impl LmmseOutput {
    /// Mean of `beta_i`.
    pub fn mean_bias(&self) -> f64 {
        1.0 - self.error_variance
    }

    /// Noise variance of `estimate / mean_bias` around the transmitted grid,
    /// for inputs of mean power `signal_power` per cell. Cell-to-cell
    /// differences in `beta_i` count as noise.
    pub fn effective_noise(&self, signal_power: f64) -> f64 {
        let n = self.estimate.len() as f64;
        let bias = self.mean_bias();
        if bias <= 1e-12 {
            return BLIND_VARIANCE;
        }
        let gain = self.trace_inv - self.n0 * self.frobenius_inv_sq;
        let total = self.n0 * gain + signal_power * (n * bias - self.n0 * gain - n * bias * bias);
        (total.max(0.0) / (n * bias * bias)).clamp(NOISE_FLOOR, BLIND_VARIANCE)
    }

    /// `estimate / mean_bias`.
    pub fn unbiased(&self) -> Vec<Complex> {
        let bias = self.mean_bias();
        if bias <= 1e-12 {
            return vec![Complex::new(0.0, 0.0); self.estimate.len()];
        }
        self.estimate.iter().map(|v| v / bias).collect()
    }
}

/// `H* (H H* + n0 I)^-1 y`.
pub fn lmmse_detect(h: &CoefficientMatrix, y: &[Complex], n0: f64) -> Result<Vec<Complex>> {
    let n = h.dim();
    check_lmmse_inputs(n, y, n0)?;
    let mut gram = sparse_gram(h);
    for i in 0..n {
        gram[(i, i)] += n0.max(NOISE_FLOOR);
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Numerical("H H* + N0 I is not positive definite".into()))?;
    let w = chol.solve(&DVector::from_column_slice(y));
    if w.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numerical("LMMSE solve produced non-finite values".into()));
    }
    Ok(adjoint_apply(h, w.as_slice()))
}

/// [`lmmse_detect`] plus error statistics.
pub fn lmmse_equalize(h: &CoefficientMatrix, y: &[Complex], n0: f64) -> Result<LmmseOutput> {
    let n = h.dim();
    check_lmmse_inputs(n, y, n0)?;
    let n0 = n0.max(NOISE_FLOOR);
    let ainv = regularized_inverse(sparse_gram(h), n0)?;
    let w = hermitian_apply(&ainv, n, y);
    Ok(summarize(adjoint_apply(h, &w), &ainv, n, n0))
}

/// Same estimator for an arbitrary dense square channel matrix.
pub fn lmmse_equalize_dense(h: &DMatrix<Complex>, y: &[Complex], n0: f64) -> Result<LmmseOutput> {
    if !h.is_square() {
        return Err(Error::Dimension(format!("channel matrix is {}x{}", h.nrows(), h.ncols())));
    }
    let n = h.nrows();
    check_lmmse_inputs(n, y, n0)?;
    let n0 = n0.max(NOISE_FLOOR);
    let ainv = regularized_inverse(h * h.adjoint(), n0)?;
    let w = hermitian_apply(&ainv, n, y);
    let estimate = h.adjoint() * DVector::from_vec(w);
    Ok(summarize(estimate.as_slice().to_vec(), &ainv, n, n0))
}

fn summarize(estimate: Vec<Complex>, ainv: &[Complex], n: usize, n0: f64) -> LmmseOutput {
    let trace_inv: f64 = (0..n).map(|i| ainv[i * n + i].re).sum();
    let frobenius_inv_sq = ainv.iter().map(|v| v.norm_sqr()).sum();
    LmmseOutput { estimate, error_variance: n0 * trace_inv / n as f64, n0, trace_inv, frobenius_inv_sq }
}

/// `H H*` accumulated column by column from the sparse structure.
fn sparse_gram(h: &CoefficientMatrix) -> DMatrix<Complex> {
    let n = h.dim();
    let mut gram = DMatrix::<Complex>::zeros(n, n);
    for col in h.columns() {
        for &(r1, v1) in &col {
            for &(r2, v2) in &col {
                gram[(r1, r2)] += v1 * v2.conj();
            }
        }
    }
    gram
}

fn adjoint_apply(h: &CoefficientMatrix, w: &[Complex]) -> Vec<Complex> {
    let mut out = vec![Complex::new(0.0, 0.0); h.dim()];
    for (r, wr) in w.iter().enumerate() {
        for &(c, v) in h.row(r) {
            out[c] += v.conj() * wr;
        }
    }
    out
}

/// `B y` for a row-major Hermitian `B`.
fn hermitian_apply(b: &[Complex], n: usize, y: &[Complex]) -> Vec<Complex> {
    (0..n).map(|r| b[r * n..(r + 1) * n].iter().zip(y).map(|(a, v)| a * v).sum()).collect()
}

fn check_lmmse_inputs(n: usize, y: &[Complex], n0: f64) -> Result<()> {
    if y.len() != n {
        return Err(Error::Dimension(format!("observation of length {} for a {n}x{n} channel", y.len())));
    }
    if !(n0 >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {n0}")));
    }
    Ok(())
}

/// Rows of `L^-1` for lower-triangular `L`, packed row-major as an `n x n`
/// array whose upper triangle stays zero.
fn lower_inverse_rows(l: &DMatrix<Complex>) -> Vec<Complex> {
    let n = l.nrows();
    let zero = Complex::new(0.0, 0.0);
    let mut inv = vec![zero; n * n];
    let mut row = vec![zero; n];
    for i in 0..n {
        row[..=i].iter_mut().for_each(|v| *v = zero);
        row[i] = Complex::new(1.0, 0.0);
        for k in 0..i {
            let f = l[(i, k)];
            if f.norm_sqr() == 0.0 {
                continue;
            }
            for (r, v) in row[..=k].iter_mut().zip(&inv[k * n..k * n + k + 1]) {
                *r -= f * v;
            }
        }
        let d = l[(i, i)];
        for (dst, v) in inv[i * n..i * n + i + 1].iter_mut().zip(&row[..=i]) {
            *dst = v / d;
        }
    }
    inv
}

/// `(L L*)^-1 = L^-* L^-1`, row-major.
fn inverse_from_cholesky(l: &DMatrix<Complex>) -> Vec<Complex> {
    let n = l.nrows();
    let li = lower_inverse_rows(l);
    let mut out = vec![Complex::new(0.0, 0.0); n * n];
    // Lower triangle as a sum of rank-one terms from the rows of L^-1.
    for k in 0..n {
        let row = &li[k * n..k * n + k + 1];
        for r in 0..=k {
            let c = row[r].conj();
            if c.norm_sqr() == 0.0 {
                continue;
            }
            for (dst, v) in out[r * n..r * n + r + 1].iter_mut().zip(row) {
                *dst += c * v;
            }
        }
    }
    for r in 0..n {
        for s in 0..r {
            out[s * n + r] = out[r * n + s].conj();
        }
    }
    out
}

/// Bias-corrected LMMSE estimate with a residual variance per cell.
///
/// The estimator of [`lmmse_detect`] returns `beta_i x_i + e_i` in cell `i`
/// with `beta_i = (H* A^-1 H)_ii < 1`. Dividing by `beta_i` removes the
/// shrinkage, and `variance[i]` is the power of `e_i / beta_i` counting
/// noise and residual inter-symbol interference, for inputs of mean power
/// `signal_power` per cell.
#[derive(Debug, Clone)]
pub struct UnbiasedEstimate {
    pub estimate: Vec<Complex>,
    pub variance: Vec<f64>,
}

/// Variance reported for cells the equalizer cannot see at all.
pub const BLIND_VARIANCE: f64 = 1e12;

pub fn lmmse_unbiased(h: &CoefficientMatrix, y: &[Complex], n0: f64, signal_power: f64) -> Result<UnbiasedEstimate> {
    let n = h.dim();
    check_lmmse_inputs(n, y, n0)?;
    let n0 = n0.max(NOISE_FLOOR);
    let columns = h.columns();
    let ainv = regularized_inverse(sparse_gram(h), n0)?;
    Ok(unbias(&ainv, n, y, n0, signal_power, |i| columns[i].clone()))
}

pub fn lmmse_unbiased_dense(h: &DMatrix<Complex>, y: &[Complex], n0: f64, signal_power: f64) -> Result<UnbiasedEstimate> {
    if !h.is_square() {
        return Err(Error::Dimension(format!("channel matrix is {}x{}", h.nrows(), h.ncols())));
    }
    let n = h.nrows();
    check_lmmse_inputs(n, y, n0)?;
    let n0 = n0.max(NOISE_FLOOR);
    let ainv = regularized_inverse(h * h.adjoint(), n0)?;
    Ok(unbias(&ainv, n, y, n0, signal_power, |i| h.column(i).iter().copied().enumerate().collect()))
}

fn regularized_inverse(mut gram: DMatrix<Complex>, n0: f64) -> Result<Vec<Complex>> {
    for i in 0..gram.nrows() {
        gram[(i, i)] += n0;
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Numerical("H H* + N0 I is not positive definite".into()))?;
    let inv = inverse_from_cholesky(&chol.l());
    if inv.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numerical("LMMSE inverse produced non-finite values".into()));
    }
    Ok(inv)
}

fn unbias(
    ainv: &[Complex],
    n: usize,
    y: &[Complex],
    n0: f64,
    signal_power: f64,
    column: impl Fn(usize) -> Vec<(usize, Complex)>,
) -> UnbiasedEstimate {
    let mut estimate = Vec::with_capacity(n);
    let mut variance = Vec::with_capacity(n);
    let mut u = vec![Complex::new(0.0, 0.0); n];
    for i in 0..n {
        // u = A^-1 h_i, read off conjugated rows since A^-1 is Hermitian.
        u.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        let col = column(i);
        for &(r, hv) in &col {
            if hv.norm_sqr() == 0.0 {
                continue;
            }
            for (dst, a) in u.iter_mut().zip(&ainv[r * n..(r + 1) * n]) {
                *dst += a.conj() * hv;
            }
        }
        let beta: f64 = col.iter().map(|&(r, hv)| (hv.conj() * u[r]).re).sum();
        let gain: f64 = u.iter().map(|v| v.norm_sqr()).sum();
        let xhat: Complex = u.iter().zip(y).map(|(a, b)| a.conj() * b).sum();
        if beta <= 1e-12 {
            estimate.push(Complex::new(0.0, 0.0));
            variance.push(BLIND_VARIANCE);
            continue;
        }
        let err = (n0 * gain + signal_power * (beta - n0 * gain - beta * beta)).max(0.0);
        estimate.push(xhat / beta);
        variance.push((err / (beta * beta)).clamp(NOISE_FLOOR, BLIND_VARIANCE));
    }
    UnbiasedEstimate { estimate, variance }
}

// ---------------------------------------------------------------------------
// Factor graph and message passing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEdge {
    pub variable: usize,
    /// The `1 x dv` slice `h_dc`.
    pub coefficients: Vec<Complex>,
}

/// Bipartite graph between observation nodes `y_d` and variable nodes
/// `x_c` (each a group of `dv` compressed entries).
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveFactorGraph {
    dv: usize,
    observations: Vec<Vec<ObservationEdge>>,
    /// For each variable: `(observation, position within that observation)`.
    variables: Vec<Vec<(usize, usize)>>,
}

impl EffectiveFactorGraph {
    /// Builds the graph from per-observation edge lists.
    pub fn from_edges(dv: usize, variable_count: usize, observations: Vec<Vec<ObservationEdge>>) -> Result<Self> {
        let mut variables = vec![Vec::new(); variable_count];
        for (d, edges) in observations.iter().enumerate() {
            for (pos, e) in edges.iter().enumerate() {
                if e.variable >= variable_count {
                    return Err(Error::Structure(format!(
                        "observation {d} references variable {} of {variable_count}",
                        e.variable
                    )));
                }
                if e.coefficients.len() != dv {
                    return Err(Error::Structure(format!(
                        "edge ({d}, {}) has {} coefficients, expected {dv}",
                        e.variable,
                        e.coefficients.len()
                    )));
                }
                variables[e.variable].push((d, pos));
            }
        }
        Ok(Self { dv, observations, variables })
    }

    pub fn observation_count(&self) -> usize {
        self.observations.len()
    }

    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }

    pub fn dv(&self) -> usize {
        self.dv
    }

    /// `M_d`, the edges of observation `d`.
    pub fn observation_edges(&self, d: usize) -> &[ObservationEdge] {
        &self.observations[d]
    }

    /// `N_c`, the observations connected to variable `c`.
    pub fn variable_neighbors(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        self.variables[c].iter().map(|&(d, _)| d)
    }

    pub fn observation_degrees(&self) -> Vec<usize> {
        self.observations.iter().map(Vec::len).collect()
    }

    pub fn variable_degrees(&self) -> Vec<usize> {
        self.variables.iter().map(Vec::len).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.observations.iter().map(Vec::len).sum()
    }

    /// Interferer assignments summed over when updating one edge of
    /// observation `d`: `A^(deg - 1)`.
    pub fn interferer_combinations(&self, d: usize, alphabet: usize) -> u128 {
        (alphabet as u128).pow(self.observations[d].len().saturating_sub(1) as u32)
    }
}

/// Groups every consecutive `dv` columns of the compressed uplink matrix into
/// one variable node. An edge `(d, c)` exists iff the slice `h_dc` is not
/// all zero.
pub fn build_effective_graph(h_compr: &DMatrix<Complex>, dv: usize) -> Result<EffectiveFactorGraph> {
    if dv == 0 || h_compr.ncols() % dv != 0 {
        return Err(Error::Structure(format!(
            "{} columns cannot be grouped into variables of {dv}",
            h_compr.ncols()
        )));
    }
    let variable_count = h_compr.ncols() / dv;
    let observations = (0..h_compr.nrows())
        .map(|d| {
            (0..variable_count)
                .filter_map(|c| {
                    let coefficients: Vec<Complex> = (0..dv).map(|i| h_compr[(d, c * dv + i)]).collect();
                    coefficients
                        .iter()
                        .any(|v| v.norm_sqr() != 0.0)
                        .then_some(ObservationEdge { variable: c, coefficients })
                })
                .collect()
        })
        .collect();
    EffectiveFactorGraph::from_edges(dv, variable_count, observations)
}

/// Per-edge message tables of a running detector.
#[derive(Debug, Clone)]
pub struct MpaState {
    /// Edge offsets into the flat message arrays, one per observation.
    offsets: Vec<usize>,
    alphabet: usize,
    /// `log U_{d->c}`, normalized.
    obs_to_var: Vec<f64>,
    /// `log V_{c->d}`, normalized.
    var_to_obs: Vec<f64>,
    /// Posterior probabilities `V_c`, normalized.
    posteriors: Vec<Vec<f64>>,
    iterations: usize,
}

impl MpaState {
    fn new(graph: &EffectiveFactorGraph, alphabet: usize) -> Self {
        let mut offsets = Vec::with_capacity(graph.observation_count() + 1);
        let mut acc = 0;
        for edges in &graph.observations {
            offsets.push(acc);
            acc += edges.len();
        }
        offsets.push(acc);
        let uniform = -(alphabet as f64).ln();
        Self {
            offsets,
            alphabet,
            obs_to_var: vec![uniform; acc * alphabet],
            var_to_obs: vec![uniform; acc * alphabet],
            posteriors: vec![vec![1.0 / alphabet as f64; alphabet]; graph.variable_count()],
            iterations: 0,
        }
    }

    #[inline]
    fn edge(&self, d: usize, pos: usize) -> usize {
        self.offsets[d] + pos
    }

    /// `U_{d->c}` as probabilities for the `pos`-th edge of observation `d`.
    pub fn observation_message(&self, d: usize, pos: usize) -> Vec<f64> {
        let e = self.edge(d, pos) * self.alphabet;
        self.obs_to_var[e..e + self.alphabet].iter().map(|v| v.exp()).collect()
    }

    /// `V_{c->d}` as probabilities for the `pos`-th edge of observation `d`.
    pub fn variable_message(&self, d: usize, pos: usize) -> Vec<f64> {
        let e = self.edge(d, pos) * self.alphabet;
        self.var_to_obs[e..e + self.alphabet].iter().map(|v| v.exp()).collect()
    }

    pub fn posteriors(&self) -> &[Vec<f64>] {
        &self.posteriors
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Largest deviation from a proper distribution over every message and
    /// posterior (negative entries count as their magnitude).
    pub fn max_normalization_error(&self) -> f64 {
        let tables = self.obs_to_var.chunks(self.alphabet).chain(self.var_to_obs.chunks(self.alphabet));
        let mut worst: f64 = 0.0;
        for t in tables {
            let sum: f64 = t.iter().map(|v| v.exp()).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        for p in &self.posteriors {
            let sum: f64 = p.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            worst = worst.max(p.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max));
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpaOutcome {
    /// Most probable symbol per variable; ties go to the lowest index.
    pub decisions: Vec<usize>,
    pub posteriors: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize_log(values: &mut [f64]) {
    let z = log_sum_exp(values);
    values.iter_mut().for_each(|v| *v -= z);
}

/// Iterative sum-product detector over an [`EffectiveFactorGraph`].
///
/// Each variable `c` draws from its own alphabet of `A` length-`dv` vectors;
/// the received sample at observation `d` is modelled as
/// `y_d = sum_{c in M_d} h_dc x_c + CN(0, n0)`.
pub struct MpaDetector<'a> {
    graph: &'a EffectiveFactorGraph,
    y: &'a [Complex],
    /// `1 / N0` per observation node.
    inv_noise: Vec<f64>,
    cfg: DetectorConfig,
    alphabet: usize,
    /// Scalar `h_dc x_c(m)` per edge and symbol, flat like the messages.
    contributions: Vec<Complex>,
    state: MpaState,
    converged: bool,
    scratch: Scratch,
}

#[derive(Default)]
struct Scratch {
    base: Vec<f64>,
    peak: Vec<f64>,
    sums: Vec<f64>,
    totals: Vec<f64>,
}

impl<'a> MpaDetector<'a> {
    /// `alphabets[c]` lists the `A` compressed codewords variable `c` may take.
    pub fn new(
        graph: &'a EffectiveFactorGraph,
        alphabets: &[&[Vec<Complex>]],
        y: &'a [Complex],
        n0: f64,
        cfg: DetectorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if y.len() != graph.observation_count() {
            return Err(Error::Dimension(format!(
                "{} observations for a graph with {} observation nodes",
                y.len(),
                graph.observation_count()
            )));
        }
        if alphabets.len() != graph.variable_count() {
            return Err(Error::Dimension(format!(
                "{} alphabets for {} variables",
                alphabets.len(),
                graph.variable_count()
            )));
        }
        let alphabet = alphabets.first().map_or(2, |a| a.len());
        if alphabets.iter().any(|a| a.len() != alphabet || a.iter().any(|x| x.len() != graph.dv)) {
            return Err(Error::Dimension("alphabets must share size A and length dv".into()));
        }
        if !(n0 >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {n0}")));
        }

        let state = MpaState::new(graph, alphabet);
        let mut contributions = Vec::with_capacity(graph.edge_count() * alphabet);
        for edges in &graph.observations {
            for e in edges {
                for x in alphabets[e.variable] {
                    contributions.push(e.coefficients.iter().zip(x).map(|(h, v)| h * v).sum());
                }
            }
        }
        Ok(Self {
            graph,
            y,
            inv_noise: vec![1.0 / n0.max(NOISE_FLOOR); graph.observation_count()],
            cfg,
            alphabet,
            contributions,
            state,
            converged: false,
            scratch: Scratch::default(),
        })
    }

    /// Replaces the common noise variance by one per observation node.
    pub fn with_noise_profile(mut self, noise: &[f64]) -> Result<Self> {
        if noise.len() != self.graph.observation_count() {
            return Err(Error::Dimension(format!(
                "{} noise variances for {} observations",
                noise.len(),
                self.graph.observation_count()
            )));
        }
        if let Some(v) = noise.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {v}")));
        }
        self.inv_noise = noise.iter().map(|v| 1.0 / v.max(NOISE_FLOOR)).collect();
        Ok(self)
    }

    pub fn state(&self) -> &MpaState {
        &self.state
    }

    /// One full sweep: observation updates, variable updates, posteriors.
    /// Returns the largest absolute posterior change.
    pub fn step(&mut self) -> f64 {
        for d in 0..self.graph.observation_count() {
            self.update_observation(d);
        }
        let change = self.update_variables();
        self.state.iterations += 1;
        change
    }

    /// Iterates until the posteriors settle or `max_iter` sweeps have run.
    pub fn run(mut self) -> MpaOutcome {
        while self.state.iterations < self.cfg.max_iter {
            if self.step() < self.cfg.convergence_tol {
                self.converged = true;
                break;
            }
        }
        self.outcome()
    }

    fn outcome(self) -> MpaOutcome {
        let decisions = self
            .state
            .posteriors
            .iter()
            .map(|p| {
                let mut best = 0;
                for (m, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = m;
                    }
                }
                best
            })
            .collect();
        MpaOutcome {
            decisions,
            posteriors: self.state.posteriors,
            iterations: self.state.iterations,
            converged: self.converged,
        }
    }

    /// `U_{d->c}(m)` for every edge of `d`: marginalize the Gaussian
    /// likelihood over all interferer assignments, weighted by the incoming
    /// variable messages.
    fn update_observation(&mut self, d: usize) {
        let degree = self.graph.observations[d].len();
        if degree == 0 {
            return;
        }
        let a = self.alphabet;
        let first = self.state.offsets[d];
        let combos = a.pow(degree as u32);
        let inv_n0 = self.inv_noise[d];
        let y = self.y[d];

        let base = &mut self.scratch.base;
        base.clear();
        base.reserve(combos);
        let mut digits = vec![0usize; degree];
        for _ in 0..combos {
            let mut s = Complex::new(0.0, 0.0);
            let mut prior = 0.0;
            for (i, &m) in digits.iter().enumerate() {
                let idx = (first + i) * a + m;
                s += self.contributions[idx];
                prior += self.state.var_to_obs[idx];
            }
            base.push(-(y - s).norm_sqr() * inv_n0 + prior);
            advance(&mut digits, a);
        }

        // Two passes per edge: running max, then shifted exponential sums.
        let peak = &mut self.scratch.peak;
        let sums = &mut self.scratch.sums;
        peak.clear();
        peak.resize(degree * a, f64::NEG_INFINITY);
        sums.clear();
        sums.resize(degree * a, 0.0);
        digits.iter_mut().for_each(|v| *v = 0);
        for &b in base.iter() {
            for (i, &m) in digits.iter().enumerate() {
                let v = b - self.state.var_to_obs[(first + i) * a + m];
                let p = &mut peak[i * a + m];
                if v > *p {
                    *p = v;
                }
            }
            advance(&mut digits, a);
        }
        digits.iter_mut().for_each(|v| *v = 0);
        for &b in base.iter() {
            for (i, &m) in digits.iter().enumerate() {
                let v = b - self.state.var_to_obs[(first + i) * a + m];
                sums[i * a + m] += (v - peak[i * a + m]).exp();
            }
            advance(&mut digits, a);
        }

        for i in 0..degree {
            let mut fresh: Vec<f64> = (0..a).map(|m| peak[i * a + m] + sums[i * a + m].ln()).collect();
            normalize_log(&mut fresh);
            let slot = &mut self.state.obs_to_var[(first + i) * a..(first + i + 1) * a];
            if self.cfg.damping < 1.0 {
                let w = self.cfg.damping;
                for (old, new) in slot.iter_mut().zip(&fresh) {
                    *old = (w * new.exp() + (1.0 - w) * old.exp()).ln();
                }
                normalize_log(slot);
            } else {
                slot.copy_from_slice(&fresh);
            }
        }
    }

    /// `V_{c->d}` as the product of the other incoming messages, and the
    /// posterior as the product of all of them.
    fn update_variables(&mut self) -> f64 {
        let a = self.alphabet;
        let mut change: f64 = 0.0;
        for (c, edges) in self.graph.variables.iter().enumerate() {
            let totals = &mut self.scratch.totals;
            totals.clear();
            totals.resize(a, 0.0);
            for &(d, pos) in edges {
                let e = self.state.offsets[d] + pos;
                for m in 0..a {
                    totals[m] += self.state.obs_to_var[e * a + m];
                }
            }
            for &(d, pos) in edges {
                let e = self.state.offsets[d] + pos;
                let mut out: Vec<f64> = (0..a).map(|m| totals[m] - self.state.obs_to_var[e * a + m]).collect();
                normalize_log(&mut out);
                self.state.var_to_obs[e * a..(e + 1) * a].copy_from_slice(&out);
            }
            normalize_log(totals);
            let posterior = &mut self.state.posteriors[c];
            for m in 0..a {
                let p = totals[m].exp();
                change = change.max((p - posterior[m]).abs());
                posterior[m] = p;
            }
        }
        change
    }
}

/// Mixed-radix odometer over `digits`, least significant first.
#[inline]
fn advance(digits: &mut [usize], radix: usize) {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < radix {
            return;
        }
        *d = 0;
    }
}

// ---------------------------------------------------------------------------
// Downlink
// ---------------------------------------------------------------------------

/// Per-block SCMA detector: the `J`-user AWGN case of the message-passing
/// engine, with one observation per resource and unit coefficient vectors
/// selecting each user's entry on that resource.
#[derive(Debug, Clone)]
pub struct BlockDetector {
    graph: EffectiveFactorGraph,
    alphabets: Vec<Vec<Vec<Complex>>>,
    resources: usize,
}

impl BlockDetector {
    pub fn new(set: &ScmaCodebookSet) -> Self {
        let dv = set.dv();
        let observations = (0..set.resources())
            .map(|k| {
                (0..set.users())
                    .filter_map(|j| {
                        let pos = set.support(j).iter().position(|&s| s == k)?;
                        let mut coefficients = vec![Complex::new(0.0, 0.0); dv];
                        coefficients[pos] = Complex::new(1.0, 0.0);
                        Some(ObservationEdge { variable: j, coefficients })
                    })
                    .collect()
            })
            .collect();
        let graph = EffectiveFactorGraph::from_edges(dv, set.users(), observations)
            .expect("block graph is consistent by construction");
        let alphabets = (0..set.users())
            .map(|j| (0..set.alphabet()).map(|a| set.compressed_codeword(j, a)).collect())
            .collect();
        Self { graph, alphabets, resources: set.resources() }
    }

    pub fn graph(&self) -> &EffectiveFactorGraph {
        &self.graph
    }

    /// Detects all users' symbols from one length-`K` block.
    pub fn detect(&self, y_block: &[Complex], n0: f64, cfg: DetectorConfig) -> Result<MpaOutcome> {
        if y_block.len() != self.resources {
            return Err(Error::Dimension(format!(
                "block of {} samples, expected K={}",
                y_block.len(),
                self.resources
            )));
        }
        let alphabets: Vec<&[Vec<Complex>]> = self.alphabets.iter().map(Vec::as_slice).collect();
        Ok(MpaDetector::new(&self.graph, &alphabets, y_block, n0, cfg)?.run())
    }

    /// [`BlockDetector::detect`] with a noise variance per resource.
    pub fn detect_with_noise(&self, y_block: &[Complex], noise: &[f64], cfg: DetectorConfig) -> Result<MpaOutcome> {
        if y_block.len() != self.resources {
            return Err(Error::Dimension(format!(
                "block of {} samples, expected K={}",
                y_block.len(),
                self.resources
            )));
        }
        let alphabets: Vec<&[Vec<Complex>]> = self.alphabets.iter().map(Vec::as_slice).collect();
        Ok(MpaDetector::new(&self.graph, &alphabets, y_block, 1.0, cfg)?
            .with_noise_profile(noise)?
            .run())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDecisions {
    /// `[user][block]`.
    pub symbols: Vec<Vec<usize>>,
    /// Sum of MPA sweeps over all detector invocations.
    pub iterations: usize,
    /// Number of MPA invocations.
    pub runs: usize,
    /// Set when the supplied noise variance was raised to [`NOISE_FLOOR`].
    pub noise_floored: bool,
}

impl SymbolDecisions {
    pub fn mean_iterations(&self) -> f64 {
        if self.runs == 0 {
            0.0
        } else {
            self.iterations as f64 / self.runs as f64
        }
    }
}

/// Runs the block detector over every `K`-cell block of an equalized grid.
pub fn scma_mpa_downlink(
    x_sum_hat: &DelayDopplerGrid,
    set: &ScmaCodebookSet,
    scheme: AllocationScheme,
    n0_eff: f64,
    cfg: DetectorConfig,
) -> Result<SymbolDecisions> {
    scma_mpa_downlink_with(&BlockDetector::new(set), x_sum_hat, set, scheme, n0_eff, cfg)
}

/// [`scma_mpa_downlink`] with a prebuilt [`BlockDetector`].
pub fn scma_mpa_downlink_with(
    detector: &BlockDetector,
    x_sum_hat: &DelayDopplerGrid,
    set: &ScmaCodebookSet,
    scheme: AllocationScheme,
    n0_eff: f64,
    cfg: DetectorConfig,
) -> Result<SymbolDecisions> {
    let noise_floored = !(n0_eff > 0.0);
    if noise_floored {
        log::warn!("effective noise variance {n0_eff} raised to {NOISE_FLOOR}");
    }
    let n0 = if noise_floored { NOISE_FLOOR } else { n0_eff };
    let blocks = extract_blocks(x_sum_hat, scheme, set.resources())?;
    let mut symbols = vec![Vec::with_capacity(blocks.len()); set.users()];
    let mut iterations = 0;
    for block in &blocks {
        let out = detector.detect(block, n0, cfg)?;
        iterations += out.iterations;
        for (j, s) in out.decisions.into_iter().enumerate() {
            symbols[j].push(s);
        }
    }
    Ok(SymbolDecisions { symbols, iterations, runs: blocks.len(), noise_floored })
}

/// Per-block detection of an equalized grid whose cells carry individual
/// noise variances (row-wise vectorized, like the grid).
pub fn scma_mpa_downlink_profile(
    detector: &BlockDetector,
    estimate: &UnbiasedEstimate,
    spec: GridSpec,
    set: &ScmaCodebookSet,
    scheme: AllocationScheme,
    cfg: DetectorConfig,
) -> Result<SymbolDecisions> {
    if estimate.estimate.len() != spec.slots() || estimate.variance.len() != spec.slots() {
        return Err(Error::Dimension(format!(
            "estimate of {} cells for a {}x{} grid",
            estimate.estimate.len(),
            spec.n,
            spec.m
        )));
    }
    let k = set.resources();
    let blocks = scheme.blocks(spec, k)?;
    let mut symbols = vec![Vec::with_capacity(blocks); set.users()];
    let mut iterations = 0;
    let mut y = vec![Complex::new(0.0, 0.0); k];
    let mut noise = vec![0.0; k];
    for b in 0..blocks {
        for i in 0..k {
            let (kk, ll) = scheme.cell(spec, k, b, i);
            let idx = spec.index(kk, ll);
            y[i] = estimate.estimate[idx];
            noise[i] = estimate.variance[idx];
        }
        let out = detector.detect_with_noise(&y, &noise, cfg)?;
        iterations += out.iterations;
        for (j, s) in out.decisions.into_iter().enumerate() {
            symbols[j].push(s);
        }
    }
    Ok(SymbolDecisions { symbols, iterations, runs: blocks, noise_floored: false })
}

// ---------------------------------------------------------------------------
// Uplink
// ---------------------------------------------------------------------------

/// What a surviving column of the compressed uplink matrix stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnTag {
    pub user: usize,
    pub block: usize,
    /// Position within the user's support, `0..dv`.
    pub entry: usize,
    /// Row-wise index of the grid cell carrying this entry.
    pub cell: usize,
}

/// `H_all` with the structurally-zero input positions removed.
///
/// Columns are ordered by user, then block, then support entry, so every
/// consecutive `dv` columns belong to one codeword and variable `c` belongs
/// to user `c / (MN / K)`.
#[derive(Debug, Clone)]
pub struct CompressedUplink {
    pub matrix: DMatrix<Complex>,
    pub columns: Vec<ColumnTag>,
    pub dv: usize,
    pub users: usize,
    pub blocks: usize,
}

impl CompressedUplink {
    pub fn variable_count(&self) -> usize {
        self.users * self.blocks
    }

    /// `(user, block)` of variable `c`.
    pub fn variable(&self, c: usize) -> (usize, usize) {
        let tag = self.columns[c * self.dv];
        (tag.user, tag.block)
    }

    /// Alphabet of every variable node: its user's compressed codewords.
    pub fn alphabets(&self, set: &ScmaCodebookSet) -> Vec<Vec<Vec<Complex>>> {
        let per_user: Vec<Vec<Vec<Complex>>> = (0..set.users())
            .map(|j| (0..set.alphabet()).map(|a| set.compressed_codeword(j, a)).collect())
            .collect();
        (0..self.variable_count()).map(|c| per_user[self.variable(c).0].clone()).collect()
    }

    /// Compressed input vector for given per-user symbols.
    pub fn input_vector(&self, set: &ScmaCodebookSet, symbols: &[Vec<usize>]) -> Vec<Complex> {
        self.columns
            .iter()
            .map(|t| set.compressed_codeword(t.user, symbols[t.user][t.block])[t.entry])
            .collect()
    }
}

/// Concatenates `[H_1 .. H_J]` and keeps only the columns that can carry a
/// nonzero codeword entry under the allocation.
pub fn compress_uplink(
    h_list: &[CoefficientMatrix],
    set: &ScmaCodebookSet,
    scheme: AllocationScheme,
    spec: GridSpec,
) -> Result<CompressedUplink> {
    if h_list.len() != set.users() {
        return Err(Error::Dimension(format!(
            "{} channel matrices for {} users",
            h_list.len(),
            set.users()
        )));
    }
    if let Some(h) = h_list.iter().find(|h| h.spec() != spec) {
        return Err(Error::Dimension(format!(
            "channel for a {}x{} grid used with {}x{}",
            h.spec().n,
            h.spec().m,
            spec.n,
            spec.m
        )));
    }
    let k = set.resources();
    let blocks = scheme.blocks(spec, k)?;
    let dv = set.dv();
    let mut columns = Vec::with_capacity(set.users() * blocks * dv);
    for user in 0..set.users() {
        for block in 0..blocks {
            for (entry, &resource) in set.support(user).iter().enumerate() {
                let (kk, ll) = scheme.cell(spec, k, block, resource);
                columns.push(ColumnTag { user, block, entry, cell: spec.index(kk, ll) });
            }
        }
    }

    let mn = spec.slots();
    let mut matrix = DMatrix::<Complex>::zeros(mn, columns.len());
    let sparse_columns: Vec<Vec<Vec<(usize, Complex)>>> = h_list.iter().map(CoefficientMatrix::columns).collect();
    for (c, tag) in columns.iter().enumerate() {
        for &(r, v) in &sparse_columns[tag.user][tag.cell] {
            matrix[(r, c)] = v;
        }
    }
    Ok(CompressedUplink { matrix, columns, dv, users: set.users(), blocks })
}

/// Single-stage uplink detection over the effective factor graph.
pub fn uplink_mpa_detect(
    y: &[Complex],
    graph: &EffectiveFactorGraph,
    compressed: &CompressedUplink,
    set: &ScmaCodebookSet,
    n0: f64,
    cfg: DetectorConfig,
) -> Result<(SymbolDecisions, MpaOutcome)> {
    cfg.validate()?;
    if graph.variable_count() != compressed.variable_count() {
        return Err(Error::Structure(format!(
            "graph has {} variables, compressed matrix {}",
            graph.variable_count(),
            compressed.variable_count()
        )));
    }
    for (node, &degree) in graph.observation_degrees().iter().enumerate() {
        if degree > cfg.degree_cap {
            return Err(Error::ComplexityCap { node, degree, cap: cfg.degree_cap });
        }
    }
    let owned = compressed.alphabets(set);
    let alphabets: Vec<&[Vec<Complex>]> = owned.iter().map(Vec::as_slice).collect();
    let outcome = MpaDetector::new(graph, &alphabets, y, n0, cfg)?.run();

    let mut symbols = vec![vec![0; compressed.blocks]; compressed.users];
    for (c, &s) in outcome.decisions.iter().enumerate() {
        let (user, block) = compressed.variable(c);
        symbols[user][block] = s;
    }
    let decisions = SymbolDecisions {
        symbols,
        iterations: outcome.iterations,
        runs: 1,
        noise_floored: !(n0 > 0.0),
    };
    Ok((decisions, outcome))
}
