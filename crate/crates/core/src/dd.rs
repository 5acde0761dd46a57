//! Delay-Doppler grids and the symplectic finite Fourier transform pair.
//!
//! A grid has `N` Doppler bins (rows, index `k`) and `M` delay bins
//! (columns, index `l`). The same container is reused for time-frequency
//! grids `X[n, m]`, where `n` indexes time slots and `m` subcarriers.
//!
//! Vectorization is row-wise: cell `(k, l)` maps to index `k * M + l`.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Complex, Error, Result};

/// Grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of Doppler bins.
    pub n: usize,
    /// Number of delay bins.
    pub m: usize,
}

impl GridSpec {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid dimensions must be positive, got N={n}, M={m}"
            )));
        }
        Ok(Self { n, m })
    }

    /// Total number of slots `N * M`.
    pub fn slots(&self) -> usize {
        self.n * self.m
    }

    /// Row-wise vector index of cell `(k, l)`.
    #[inline]
    pub fn index(&self, k: usize, l: usize) -> usize {
        debug_assert!(k < self.n && l < self.m);
        k * self.m + l
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.m, index % self.m)
    }
}

/// An `N x M` array of complex values indexed `[k][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDopplerGrid {
    spec: GridSpec,
    cells: Vec<Complex>,
}

impl DelayDopplerGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            cells: vec![Complex::new(0.0, 0.0); spec.slots()],
        }
    }

    /// Builds a grid from row-major cells, rejecting non-finite values.
    pub fn from_cells(spec: GridSpec, cells: Vec<Complex>) -> Result<Self> {
        if cells.len() != spec.slots() {
            return Err(Error::Dimension(format!(
                "expected {} cells for a {}x{} grid, got {}",
                spec.slots(),
                spec.n,
                spec.m,
                cells.len()
            )));
        }
        if cells.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidParameter("grid cells must be finite".into()));
        }
        Ok(Self { spec, cells })
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> Complex) -> Self {
        let mut cells = Vec::with_capacity(spec.slots());
        for k in 0..spec.n {
            for l in 0..spec.m {
                cells.push(f(k, l));
            }
        }
        Self { spec, cells }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> Complex {
        self.cells[self.spec.index(k, l)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, l: usize, value: Complex) {
        let i = self.spec.index(k, l);
        self.cells[i] = value;
    }

    /// Row-major view of the cells.
    pub fn cells(&self) -> &[Complex] {
        &self.cells
    }

    pub fn energy(&self) -> f64 {
        self.cells.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Row-wise vectorization, index `k * M + l`.
pub fn vectorize(grid: &DelayDopplerGrid) -> Vec<Complex> {
    grid.cells.clone()
}

pub fn devectorize(v: &[Complex], spec: GridSpec) -> Result<DelayDopplerGrid> {
    DelayDopplerGrid::from_cells(spec, v.to_vec())
}

/// Sign of the exponent applied along one grid axis.
#[derive(Clone, Copy)]
enum Sign {
    Negative,
    Positive,
}

/// One-dimensional unnormalized DFTs along the two grid axes.
struct Axes {
    doppler: Arc<dyn Fft<f64>>,
    delay: Arc<dyn Fft<f64>>,
}

impl Axes {
    fn plan(spec: GridSpec, doppler: Sign, delay: Sign) -> Self {
        let mut planner = FftPlanner::new();
        let mut plan = |len, sign| match sign {
            Sign::Negative => planner.plan_fft_forward(len),
            Sign::Positive => planner.plan_fft_inverse(len),
        };
        Self {
            doppler: plan(spec.n, doppler),
            delay: plan(spec.m, delay),
        }
    }

    fn apply(&self, spec: GridSpec, cells: &mut [Complex]) {
        // Rows are contiguous, so the delay axis is a batched transform.
        self.delay.process(cells);
        let mut column = vec![Complex::new(0.0, 0.0); spec.n];
        for l in 0..spec.m {
            for k in 0..spec.n {
                column[k] = cells[k * spec.m + l];
            }
            self.doppler.process(&mut column);
            for k in 0..spec.n {
                cells[k * spec.m + l] = column[k];
            }
        }
    }
}

/// Inverse SFFT, delay-Doppler to time-frequency:
///
/// `X[n,m] = 1/(NM) sum_k sum_l x[k,l] exp(j2pi(nk/N - ml/M))`.
pub fn isfft(x: &DelayDopplerGrid) -> DelayDopplerGrid {
    let spec = x.spec;
    let mut cells = x.cells.clone();
    Axes::plan(spec, Sign::Positive, Sign::Negative).apply(spec, &mut cells);
    let scale = 1.0 / spec.slots() as f64;
    cells.iter_mut().for_each(|c| *c *= scale);
    DelayDopplerGrid { spec, cells }
}

/// SFFT, time-frequency to delay-Doppler, no normalization:
///
/// `y[k,l] = sum_n sum_m Y[n,m] exp(-j2pi(nk/N - ml/M))`.
pub fn sfft(y: &DelayDopplerGrid) -> DelayDopplerGrid {
    let spec = y.spec;
    let mut cells = y.cells.clone();
    Axes::plan(spec, Sign::Negative, Sign::Positive).apply(spec, &mut cells);
    DelayDopplerGrid { spec, cells }
}
