//! Sparse delay-Doppler channels and the coefficient matrix of `y = Hx + z`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dd::GridSpec;
use crate::{Complex, Error, Result};

/// Number of neighbouring Doppler taps each side of a fractional path.
pub const DEFAULT_NEIGHBOR_SPAN: usize = 2;

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPath {
    pub gain: Complex,
    pub delay_tap: usize,
    pub doppler_tap: i64,
    /// Fractional Doppler offset in `[-0.5, 0.5]`.
    pub doppler_frac: f64,
}

impl ChannelPath {
    pub fn integer(gain: Complex, delay_tap: usize, doppler_tap: i64) -> Self {
        Self { gain, delay_tap, doppler_tap, doppler_frac: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub paths: Vec<ChannelPath>,
    /// Neighbour span `N_i`, shared across paths. Zero in integer mode.
    pub neighbor_span: usize,
}

impl ChannelRealization {
    /// Builds a realization, checking path distinctness and offsets.
    pub fn new(paths: Vec<ChannelPath>, neighbor_span: usize) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::InvalidChannel("a channel needs at least one path".into()));
        }
        for (i, p) in paths.iter().enumerate() {
            if !(p.doppler_frac.abs() <= 0.5) {
                return Err(Error::InvalidChannel(format!(
                    "path {i} has fractional Doppler {} outside [-0.5, 0.5]",
                    p.doppler_frac
                )));
            }
            if paths[..i]
                .iter()
                .any(|o| o.delay_tap == p.delay_tap && o.doppler_tap == p.doppler_tap)
            {
                return Err(Error::InvalidChannel(format!(
                    "path {i} repeats the tap pair ({}, {})",
                    p.delay_tap, p.doppler_tap
                )));
            }
        }
        Ok(Self { paths, neighbor_span })
    }

    pub fn is_integer(&self) -> bool {
        self.neighbor_span == 0 && self.paths.iter().all(|p| p.doppler_frac == 0.0)
    }

    pub fn total_power(&self) -> f64 {
        self.paths.iter().map(|p| p.gain.norm_sqr()).sum()
    }

    /// CSV dump, one row per path.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gain_re,gain_im,delay_tap,doppler_tap,doppler_frac\n");
        for p in &self.paths {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.gain.re, p.gain.im, p.delay_tap, p.doppler_tap, p.doppler_frac
            );
        }
        out
    }
}

/// How channels are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelOptions {
    pub fractional: bool,
    pub neighbor_span: usize,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self { fractional: false, neighbor_span: DEFAULT_NEIGHBOR_SPAN }
    }
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex {
    let sigma = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex::new(sigma * re, sigma * im)
}

/// Draws a `P`-path channel. The first path is the line-of-sight path with
/// zero delay and Doppler; the remaining tap pairs are drawn uniformly from
/// `{0..P-1}^2` without repetition. Gains are i.i.d. `CN(0, 1/P)`.
pub fn sample_channel<R: Rng + ?Sized>(
    path_count: usize,
    spec: GridSpec,
    options: ChannelOptions,
    rng: &mut R,
) -> Result<ChannelRealization> {
    if path_count == 0 {
        return Err(Error::InvalidConfig("path count must be at least 1".into()));
    }
    if path_count > spec.m || path_count > spec.n {
        return Err(Error::InvalidConfig(format!(
            "{path_count} paths need taps up to {} but the grid is {}x{}",
            path_count - 1,
            spec.n,
            spec.m
        )));
    }

    let mut taps: Vec<(usize, i64)> = vec![(0, 0)];
    while taps.len() < path_count {
        let pair = (rng.random_range(0..path_count), rng.random_range(0..path_count) as i64);
        if !taps.contains(&pair) {
            taps.push(pair);
        }
    }

    let variance = 1.0 / path_count as f64;
    let paths = taps
        .into_iter()
        .map(|(delay_tap, doppler_tap)| {
            let gain = complex_gaussian(rng, variance);
            let doppler_frac = if options.fractional { rng.random_range(-0.5..=0.5) } else { 0.0 };
            ChannelPath { gain, delay_tap, doppler_tap, doppler_frac }
        })
        .collect();

    let neighbor_span = if options.fractional { options.neighbor_span } else { 0 };
    Ok(ChannelRealization { paths, neighbor_span })
}

/// Sparse `MN x MN` matrix stored by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    spec: GridSpec,
    rows: Vec<Vec<(usize, Complex)>>,
}

impl CoefficientMatrix {
    pub fn identity(spec: GridSpec) -> Self {
        let rows = (0..spec.slots()).map(|i| vec![(i, Complex::new(1.0, 0.0))]).collect();
        Self { spec, rows }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Stored entries of row `i` as `(column, value)`, sorted by column.
    pub fn row(&self, i: usize) -> &[(usize, Complex)] {
        &self.rows[i]
    }

    pub fn get(&self, row: usize, col: usize) -> Complex {
        self.rows[row]
            .iter()
            .find(|(c, _)| *c == col)
            .map_or(Complex::new(0.0, 0.0), |(_, v)| *v)
    }

    /// `H x`.
    pub fn apply(&self, x: &[Complex]) -> Result<Vec<Complex>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} applied to a {}x{} coefficient matrix",
                x.len(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|(c, v)| v * x[*c]).sum())
            .collect())
    }

    /// Count of exactly-nonzero entries in each row.
    pub fn row_nonzeros(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|(_, v)| v.norm_sqr() != 0.0).count())
            .collect()
    }

    /// Count of exactly-nonzero entries in each column.
    pub fn column_nonzeros(&self) -> Vec<usize> {
        let mut counts = vec![0; self.dim()];
        for row in &self.rows {
            for (c, v) in row {
                if v.norm_sqr() != 0.0 {
                    counts[*c] += 1;
                }
            }
        }
        counts
    }

    /// Columns of `H` as sparse `(row, value)` lists.
    pub fn columns(&self) -> Vec<Vec<(usize, Complex)>> {
        let mut cols = vec![Vec::new(); self.dim()];
        for (r, row) in self.rows.iter().enumerate() {
            for (c, v) in row {
                cols[*c].push((r, *v));
            }
        }
        cols
    }

    pub fn to_dense(&self) -> DMatrix<Complex> {
        let n = self.dim();
        let mut d = DMatrix::zeros(n, n);
        for (r, row) in self.rows.iter().enumerate() {
            for (c, v) in row {
                d[(r, *c)] += *v;
            }
        }
        d
    }
}

/// `beta_i(q)` as the geometric sum `sum_{n<N} exp(j 2 pi n (q + kappa) / N)`,
/// which equals `N` at the removable singularity `q + kappa = 0`.
pub(crate) fn doppler_beta(q: i64, kappa: f64, n: usize) -> Complex {
    let step = 2.0 * PI * (q as f64 + kappa) / n as f64;
    (0..n).map(|i| Complex::from_polar(1.0, step * i as f64)).sum()
}

/// Builds `H` for rectangular pulses from the delay-Doppler input-output
/// relation, including the fractional-Doppler neighbour terms.
pub fn build_coefficient_matrix(ch: &ChannelRealization, spec: GridSpec) -> Result<CoefficientMatrix> {
    let (n, m) = (spec.n, spec.m);
    let span = ch.neighbor_span as i64;
    if 2 * ch.neighbor_span + 1 > n {
        return Err(Error::InvalidChannel(format!(
            "neighbour span {} wraps around a Doppler axis of {n} bins",
            ch.neighbor_span
        )));
    }
    if let Some(p) = ch.paths.iter().find(|p| p.delay_tap >= m) {
        return Err(Error::InvalidChannel(format!(
            "delay tap {} does not fit in {m} delay bins",
            p.delay_tap
        )));
    }

    let inv_n = 1.0 / n as f64;
    // beta depends only on (path, q); tabulate it once.
    let betas: Vec<Vec<Complex>> = ch
        .paths
        .iter()
        .map(|p| (-span..=span).map(|q| doppler_beta(q, p.doppler_frac, n)).collect())
        .collect();

    let mut rows = Vec::with_capacity(spec.slots());
    for k in 0..n {
        for l in 0..m {
            let mut row: Vec<(usize, Complex)> = Vec::with_capacity(ch.paths.len() * (2 * ch.neighbor_span + 1));
            for (path, beta_row) in ch.paths.iter().zip(&betas) {
                let nu = (path.doppler_tap as f64 + path.doppler_frac) * inv_n;
                let shift = (l as f64 - path.delay_tap as f64) / m as f64;
                let phase = Complex::from_polar(1.0, 2.0 * PI * shift * nu);
                let src_l = (l + m - path.delay_tap) % m;
                for (qi, q) in (-span..=span).enumerate() {
                    let src_k = (k as i64 - path.doppler_tap + q).rem_euclid(n as i64) as usize;
                    let beta = beta_row[qi];
                    let alpha = if l >= path.delay_tap {
                        beta * inv_n
                    } else {
                        (beta - 1.0) * inv_n * Complex::from_polar(1.0, -2.0 * PI * src_k as f64 * inv_n)
                    };
                    let col = spec.index(src_k, src_l);
                    let value = path.gain * phase * alpha;
                    match row.iter_mut().find(|(c, _)| *c == col) {
                        Some((_, v)) => *v += value,
                        None => row.push((col, value)),
                    }
                }
            }
            row.sort_by_key(|(c, _)| *c);
            rows.push(row);
        }
    }
    Ok(CoefficientMatrix { spec, rows })
}

/// Adds i.i.d. `CN(0, n0)` noise to every entry.
pub fn apply_awgn<R: Rng + ?Sized>(y_clean: &[Complex], n0: f64, rng: &mut R) -> Result<Vec<Complex>> {
    if !(n0 >= 0.0) || !n0.is_finite() {
        return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {n0}")));
    }
    if n0 == 0.0 {
        return Ok(y_clean.to_vec());
    }
    Ok(y_clean.iter().map(|y| y + complex_gaussian(rng, n0)).collect())
}
