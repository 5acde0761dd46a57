//! Monte Carlo bit-error-rate harness.
//!
//! Every frame draws symbols, channel(s) and noise from a private ChaCha
//! stream selected by `(snr index, frame index)` under the run seed, so the
//! result of a run does not depend on how frames are scheduled over worker
//! threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::channel::{
    apply_awgn, build_coefficient_matrix, sample_channel, ChannelOptions, CoefficientMatrix, DEFAULT_NEIGHBOR_SPAN,
};
use crate::dd::{devectorize, isfft, sfft, vectorize, DelayDopplerGrid, GridSpec};
use crate::detect::{
    build_effective_graph, compress_uplink, lmmse_equalize, lmmse_equalize_dense, lmmse_unbiased,
    lmmse_unbiased_dense, scma_mpa_downlink_profile, scma_mpa_downlink_with, uplink_mpa_detect, BlockDetector, DetectorConfig,
};
use crate::scma::{allocate_grid, bit_errors, encode, qpsk_points, superimpose, AllocationScheme, ScmaCodebookSet};
use crate::{Complex, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Downlink,
    Uplink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    OtfsScma,
    /// Two users on disjoint halves of the delay axis.
    OtfsOma2,
    /// Four users on interleaved Doppler rows.
    OtfsOma4,
    /// SCMA codewords placed directly on the time-frequency grid.
    OfdmScma,
}

impl System {
    pub fn name(&self) -> &'static str {
        match self {
            System::OtfsScma => "otfs_scma",
            System::OtfsOma2 => "otfs_oma2",
            System::OtfsOma4 => "otfs_oma4",
            System::OfdmScma => "ofdm_scma",
        }
    }

    pub fn oma_users(&self) -> Option<usize> {
        match self {
            System::OtfsOma2 => Some(2),
            System::OtfsOma4 => Some(4),
            _ => None,
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::InvalidConfig(format!("unknown system '{s}'")))
    }
}

impl std::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::InvalidConfig(format!("unknown link '{s}'")))
    }
}

/// Run description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub link: Link,
    pub system: System,
    pub scheme: AllocationScheme,
    /// Codebook JSON; the built-in 6x4 set when absent.
    pub codebook: Option<PathBuf>,
    /// Path counts to simulate. A bare number is accepted in JSON.
    #[serde(rename = "P", deserialize_with = "one_or_many")]
    pub paths: Vec<usize>,
    pub fractional: bool,
    pub neighbor_span: usize,
    /// `E_b/N_0` points in dB.
    pub snr_points: Vec<f64>,
    pub frames: usize,
    pub seed: u64,
    pub detector: DetectorConfig,
    /// Fixed noise variance used at every SNR point instead of the
    /// `E_b/N_0` conversion.
    pub noise_override: Option<f64>,
    /// Feed the MPA the error variance of every equalized cell instead of
    /// one effective noise level for the whole frame.
    pub per_cell_noise: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 8,
            link: Link::Downlink,
            system: System::OtfsScma,
            scheme: AllocationScheme::DopplerBlocks,
            codebook: None,
            paths: vec![2],
            fractional: false,
            neighbor_span: DEFAULT_NEIGHBOR_SPAN,
            snr_points: (0..=7).map(|i| 2.0 * i as f64).collect(),
            frames: 50_000,
            seed: 0,
            detector: DetectorConfig::default(),
            noise_override: None,
            per_cell_noise: false,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(p) => vec![p],
        OneOrMany::Many(v) => v,
    })
}

impl SimConfig {
    pub fn from_json_str(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.n, self.m)
    }

    pub fn codebook_set(&self) -> Result<ScmaCodebookSet> {
        match &self.codebook {
            Some(path) => ScmaCodebookSet::load(path),
            None => Ok(ScmaCodebookSet::default_6x4()),
        }
    }

    pub fn channel_options(&self) -> ChannelOptions {
        ChannelOptions { fractional: self.fractional, neighbor_span: self.neighbor_span }
    }

    /// Checks everything a run could trip over before any frame is drawn.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be at least 1".into()));
        }
        if self.snr_points.is_empty() {
            return Err(Error::InvalidConfig("snr_points must not be empty".into()));
        }
        if let Some(s) = self.snr_points.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite SNR point {s}")));
        }
        if self.paths.is_empty() {
            return Err(Error::InvalidConfig("at least one path count is required".into()));
        }
        for &p in &self.paths {
            if p == 0 || p > spec.m || p > spec.n {
                return Err(Error::InvalidConfig(format!(
                    "P={p} needs 1 <= P <= min(M, N) = {}",
                    spec.m.min(spec.n)
                )));
            }
        }
        if self.fractional && 2 * self.neighbor_span + 1 > spec.n {
            return Err(Error::InvalidConfig(format!(
                "neighbor span {} needs N >= {}",
                self.neighbor_span,
                2 * self.neighbor_span + 1
            )));
        }
        if let Some(n0) = self.noise_override {
            if !(n0 >= 0.0) {
                return Err(Error::InvalidConfig(format!("noise_override must be >= 0, got {n0}")));
            }
        }
        self.detector.validate()?;
        match self.system.oma_users() {
            Some(users) => {
                oma_cells(users, spec)?;
            }
            None => {
                if self.system == System::OfdmScma && self.link == Link::Uplink {
                    return Err(Error::UnsupportedExtension("ofdm_scma is simulated on the downlink only".into()));
                }
                let set = self.codebook_set()?;
                self.scheme.blocks(spec, set.resources())?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub paths: usize,
    pub snr_db: f64,
    pub frames_run: usize,
    pub bit_errors: u64,
    pub total_bits: u64,
    pub ber: f64,
    pub per_user_ber: Vec<f64>,
    /// Mean MPA sweeps per detector invocation; zero for OMA.
    pub mean_mpa_iterations: f64,
}

pub const CSV_HEADER: &str = "snr_db,frames,bit_errors,total_bits,ber,mean_iters";

pub fn records_to_csv(records: &[BerRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{}",
            r.snr_db, r.frames_run, r.bit_errors, r.total_bits, r.ber, r.mean_mpa_iterations
        );
    }
    out
}

/// `N0` for an `E_b/N_0` in dB, with `E_b = E_s / log2(A)` and `E_s` the
/// average energy of one user's codeword. Both links use per-user `E_b`:
/// the downlink superposition carries `J` times the energy and `J` times
/// the bits.
pub fn noise_from_snr(snr_db: f64, set: &ScmaCodebookSet, _link: Link) -> f64 {
    noise_from_energy(snr_db, set.average_codeword_energy(), set.bits_per_symbol())
}

pub fn noise_from_energy(snr_db: f64, symbol_energy: f64, bits_per_symbol: u32) -> f64 {
    symbol_energy / bits_per_symbol as f64 * 10f64.powf(-snr_db / 10.0)
}

/// Cells owned by each user of an OMA layout, in placement order.
///
/// Two users split the delay axis in half and fill their half row by row;
/// four users take the Doppler rows `k = u mod 4` and fill them column by
/// column.
pub fn oma_cells(user_count: usize, spec: GridSpec) -> Result<Vec<Vec<(usize, usize)>>> {
    match user_count {
        2 => {
            if spec.m % 2 != 0 {
                return Err(Error::Allocation(format!("two-user OMA needs an even M, got {}", spec.m)));
            }
            let half = spec.m / 2;
            Ok((0..2)
                .map(|u| {
                    (0..spec.n)
                        .flat_map(|k| (u * half..(u + 1) * half).map(move |l| (k, l)))
                        .collect()
                })
                .collect())
        }
        4 => {
            if spec.n % 4 != 0 {
                return Err(Error::Allocation(format!("four-user OMA needs N divisible by 4, got {}", spec.n)));
            }
            Ok((0..4)
                .map(|u| {
                    (0..spec.m)
                        .flat_map(|l| (u..spec.n).step_by(4).map(move |k| (k, l)))
                        .collect()
                })
                .collect())
        }
        other => Err(Error::Allocation(format!("OMA is defined for 2 or 4 users, got {other}"))),
    }
}

/// One grid per user with its symbols on its own cells.
pub fn oma_allocate(user_count: usize, user_symbols: &[Vec<Complex>], spec: GridSpec) -> Result<Vec<DelayDopplerGrid>> {
    let cells = oma_cells(user_count, spec)?;
    if user_symbols.len() != user_count {
        return Err(Error::Dimension(format!(
            "{} symbol streams for {user_count} users",
            user_symbols.len()
        )));
    }
    cells
        .iter()
        .zip(user_symbols)
        .map(|(cells, symbols)| {
            if symbols.len() != cells.len() {
                return Err(Error::Dimension(format!(
                    "{} symbols for {} cells",
                    symbols.len(),
                    cells.len()
                )));
            }
            let mut grid = DelayDopplerGrid::zeros(spec);
            for (&(k, l), &v) in cells.iter().zip(symbols) {
                grid.set(k, l, v);
            }
            Ok(grid)
        })
        .collect()
}

/// Channel seen by symbols placed on the time-frequency grid: `G^-1 H G`
/// with `G` the SFFT map, built column by column.
pub fn ofdm_effective_channel(h: &CoefficientMatrix) -> Result<DMatrix<Complex>> {
    let spec = h.spec();
    let n = spec.slots();
    let mut out = DMatrix::<Complex>::zeros(n, n);
    let mut unit = vec![Complex::new(0.0, 0.0); n];
    for i in 0..n {
        unit[i] = Complex::new(1.0, 0.0);
        let dd = vectorize(&sfft(&devectorize(&unit, spec)?));
        let tf = vectorize(&isfft(&devectorize(&h.apply(&dd)?, spec)?));
        out.set_column(i, &nalgebra::DVector::from_vec(tf));
        unit[i] = Complex::new(0.0, 0.0);
    }
    Ok(out)
}

/// Dense matrix of the SFFT acting on row-wise vectorized grids.
pub fn sfft_matrix(spec: GridSpec) -> Result<DMatrix<Complex>> {
    transform_matrix(spec, sfft)
}

/// Dense matrix of the ISFFT acting on row-wise vectorized grids.
pub fn isfft_matrix(spec: GridSpec) -> Result<DMatrix<Complex>> {
    transform_matrix(spec, isfft)
}

fn transform_matrix(spec: GridSpec, f: fn(&DelayDopplerGrid) -> DelayDopplerGrid) -> Result<DMatrix<Complex>> {
    let n = spec.slots();
    let mut out = DMatrix::<Complex>::zeros(n, n);
    let mut unit = vec![Complex::new(0.0, 0.0); n];
    for i in 0..n {
        unit[i] = Complex::new(1.0, 0.0);
        out.set_column(i, &nalgebra::DVector::from_vec(vectorize(&f(&devectorize(&unit, spec)?))));
        unit[i] = Complex::new(0.0, 0.0);
    }
    Ok(out)
}

/// Private generator of one frame.
pub fn frame_rng(seed: u64, snr_index: usize, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((snr_index as u64) << 40) ^ frame as u64);
    rng
}

fn worker_count() -> usize {
    std::env::var("SIM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Default)]
struct Tally {
    errors: Vec<u64>,
    iterations: u64,
    runs: u64,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        if self.errors.is_empty() {
            return other;
        }
        for (a, b) in self.errors.iter_mut().zip(other.errors) {
            *a += b;
        }
        self.iterations += other.iterations;
        self.runs += other.runs;
        self
    }
}

/// Everything shared read-only by the frames of one run.
struct Context {
    spec: GridSpec,
    cfg: SimConfig,
    set: ScmaCodebookSet,
    block_detector: BlockDetector,
    oma: Option<Vec<Vec<(usize, usize)>>>,
    /// Mean power of one cell of the superimposed SCMA grid.
    cell_power: f64,
    /// SFFT and ISFFT matrices, for the time-frequency system only.
    transforms: Option<(DMatrix<Complex>, DMatrix<Complex>)>,
}

impl Context {
    fn users(&self) -> usize {
        self.oma.as_ref().map_or(self.set.users(), Vec::len)
    }

    /// `(symbols per user, bits per symbol)`.
    fn load(&self) -> (usize, u32) {
        match &self.oma {
            Some(cells) => (cells[0].len(), 2),
            None => (self.spec.slots() / self.set.resources(), self.set.bits_per_symbol()),
        }
    }

    fn n0(&self, snr_db: f64) -> f64 {
        if let Some(n0) = self.cfg.noise_override {
            return n0;
        }
        match self.oma {
            Some(_) => noise_from_energy(snr_db, 1.0, 2),
            None => noise_from_snr(snr_db, &self.set, self.cfg.link),
        }
    }

    fn channel(&self, paths: usize, rng: &mut ChaCha8Rng) -> Result<CoefficientMatrix> {
        build_coefficient_matrix(&sample_channel(paths, self.spec, self.cfg.channel_options(), rng)?, self.spec)
    }

    fn frame(&self, paths: usize, n0: f64, rng: &mut ChaCha8Rng) -> Result<Tally> {
        let users = self.users();
        let (per_user, _) = self.load();
        let alphabet = if self.oma.is_some() { 4 } else { self.set.alphabet() };
        let symbols: Vec<Vec<usize>> = (0..users)
            .map(|_| (0..per_user).map(|_| rng.random_range(0..alphabet)).collect())
            .collect();

        let (decided, iterations, runs) = match (self.cfg.system, self.cfg.link) {
            (System::OtfsScma, Link::Downlink) => self.scma_downlink(&symbols, paths, n0, rng, false)?,
            (System::OfdmScma, Link::Downlink) => self.scma_downlink(&symbols, paths, n0, rng, true)?,
            (System::OtfsScma, Link::Uplink) => self.scma_uplink(&symbols, paths, n0, rng)?,
            (System::OtfsOma2 | System::OtfsOma4, link) => (self.oma_frame(&symbols, paths, n0, rng, link)?, 0, 0),
            (System::OfdmScma, Link::Uplink) => {
                return Err(Error::UnsupportedExtension("ofdm_scma is simulated on the downlink only".into()))
            }
        };

        let errors = symbols
            .iter()
            .zip(&decided)
            .map(|(tx, rx)| tx.iter().zip(rx).map(|(&a, &b)| bit_errors(a, b) as u64).sum())
            .collect();
        Ok(Tally { errors, iterations: iterations as u64, runs: runs as u64 })
    }

    /// Broadcast downlink. One channel is drawn per frame and all users'
    /// symbols are detected from the single observation it produces.
    fn scma_downlink(
        &self,
        symbols: &[Vec<usize>],
        paths: usize,
        n0: f64,
        rng: &mut ChaCha8Rng,
        ofdm: bool,
    ) -> Result<(Vec<Vec<usize>>, usize, usize)> {
        let scheme = self.cfg.scheme;
        let grids = encode(symbols, &self.set)?
            .iter()
            .map(|cw| allocate_grid(cw, scheme, self.spec))
            .collect::<Result<Vec<_>>>()?;
        let x = vectorize(&superimpose(&grids)?);
        let h = self.channel(paths, rng)?;
        let out = if self.cfg.per_cell_noise {
            let estimate = if ofdm {
                let (g, g_inv) = self.transforms.as_ref().expect("time-frequency context");
                let effective = g_inv * sparse_times_dense(&h, g);
                let clean = &effective * nalgebra::DVector::from_column_slice(&x);
                let y = apply_awgn(clean.as_slice(), n0, rng)?;
                lmmse_unbiased_dense(&effective, &y, n0, self.cell_power)?
            } else {
                let y = apply_awgn(&h.apply(&x)?, n0, rng)?;
                lmmse_unbiased(&h, &y, n0, self.cell_power)?
            };
            scma_mpa_downlink_profile(&self.block_detector, &estimate, self.spec, &self.set, scheme, self.cfg.detector)?
        } else {
            // The time-frequency system is equalized in the delay-Doppler
            // domain and rotated back: the unitary SFFT leaves both the
            // estimator and its statistics unchanged.
            let sent = if ofdm { unitary(&x, self.spec, false)? } else { x };
            let y = apply_awgn(&h.apply(&sent)?, n0, rng)?;
            let eq = lmmse_equalize(&h, &y, n0)?;
            let n0_eff = eq.effective_noise(self.cell_power);
            let mut estimate = eq.unbiased();
            if ofdm {
                estimate = unitary(&estimate, self.spec, true)?;
            }
            let grid = devectorize(&estimate, self.spec)?;
            scma_mpa_downlink_with(&self.block_detector, &grid, &self.set, scheme, n0_eff, self.cfg.detector)?
        };
        Ok((out.symbols, out.iterations, out.runs))
    }

    fn scma_uplink(
        &self,
        symbols: &[Vec<usize>],
        paths: usize,
        n0: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Vec<usize>>, usize, usize)> {
        let hs = (0..self.set.users()).map(|_| self.channel(paths, rng)).collect::<Result<Vec<_>>>()?;
        let compressed = compress_uplink(&hs, &self.set, self.cfg.scheme, self.spec)?;
        let x = compressed.input_vector(&self.set, symbols);
        let clean = &compressed.matrix * nalgebra::DVector::from_vec(x);
        let y = apply_awgn(clean.as_slice(), n0, rng)?;
        let graph = build_effective_graph(&compressed.matrix, self.set.dv())?;
        let (out, _) = uplink_mpa_detect(&y, &graph, &compressed, &self.set, n0, self.cfg.detector)?;
        Ok((out.symbols, out.iterations, out.runs))
    }

    fn oma_frame(
        &self,
        symbols: &[Vec<usize>],
        paths: usize,
        n0: f64,
        rng: &mut ChaCha8Rng,
        link: Link,
    ) -> Result<Vec<Vec<usize>>> {
        let cells = self.oma.as_ref().expect("OMA context");
        let points = qpsk_points();
        let mapped: Vec<Vec<Complex>> = symbols.iter().map(|s| s.iter().map(|&i| points[i]).collect()).collect();
        let grids = oma_allocate(cells.len(), &mapped, self.spec)?;
        let estimate = match link {
            Link::Downlink => {
                let h = self.channel(paths, rng)?;
                let y = apply_awgn(&h.apply(&vectorize(&superimpose(&grids)?))?, n0, rng)?;
                lmmse_equalize(&h, &y, n0)?.estimate
            }
            Link::Uplink => {
                let hs = (0..cells.len()).map(|_| self.channel(paths, rng)).collect::<Result<Vec<_>>>()?;
                let mut clean = vec![Complex::new(0.0, 0.0); self.spec.slots()];
                for (h, g) in hs.iter().zip(&grids) {
                    for (acc, v) in clean.iter_mut().zip(h.apply(&vectorize(g))?) {
                        *acc += v;
                    }
                }
                let y = apply_awgn(&clean, n0, rng)?;
                // Each cell belongs to one user, so the stacked channel is square.
                let n = self.spec.slots();
                let mut joint = DMatrix::<Complex>::zeros(n, n);
                for (u, user_cells) in cells.iter().enumerate() {
                    let cols = hs[u].columns();
                    for &(k, l) in user_cells {
                        let i = self.spec.index(k, l);
                        for &(r, v) in &cols[i] {
                            joint[(r, i)] = v;
                        }
                    }
                }
                lmmse_equalize_dense(&joint, &y, n0)?.estimate
            }
        };
        Ok(cells
            .iter()
            .map(|user_cells| {
                user_cells
                    .iter()
                    .map(|&(k, l)| nearest_point(&points, estimate[self.spec.index(k, l)]))
                    .collect()
            })
            .collect())
    }
}

/// Unit-norm SFFT of a vectorized grid, or its inverse.
fn unitary(v: &[Complex], spec: GridSpec, inverse: bool) -> Result<Vec<Complex>> {
    let grid = devectorize(v, spec)?;
    let root = (spec.slots() as f64).sqrt();
    let (out, scale) = if inverse { (isfft(&grid), root) } else { (sfft(&grid), 1.0 / root) };
    Ok(out.cells().iter().map(|c| c * scale).collect())
}

fn sparse_times_dense(h: &CoefficientMatrix, g: &DMatrix<Complex>) -> DMatrix<Complex> {
    let n = h.dim();
    let mut out = DMatrix::<Complex>::zeros(n, g.ncols());
    for j in 0..g.ncols() {
        let col = g.column(j);
        for r in 0..n {
            out[(r, j)] = h.row(r).iter().map(|&(c, v)| v * col[c]).sum();
        }
    }
    out
}

#[cfg(test)]
fn scale_vec(mut v: Vec<Complex>, s: f64) -> Vec<Complex> {
    v.iter_mut().for_each(|x| *x *= s);
    v
}

fn nearest_point(points: &[Complex], v: Complex) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if (v - p).norm_sqr() < (v - points[best]).norm_sqr() {
            best = i;
        }
    }
    best
}

/// Runs every `(P, SNR)` point of the configuration, in that order.
pub fn run_ber(config: &SimConfig) -> Result<Vec<BerRecord>> {
    config.validate()?;
    let spec = config.spec()?;
    let set = match config.system.oma_users() {
        Some(_) => ScmaCodebookSet::default_6x4(),
        None => config.codebook_set()?,
    };
    let oma = config.system.oma_users().map(|u| oma_cells(u, spec)).transpose()?;
    let transforms = match config.system {
        System::OfdmScma if config.per_cell_noise => Some((sfft_matrix(spec)?, isfft_matrix(spec)?)),
        _ => None,
    };
    let cell_power = set.average_codeword_energy() * set.users() as f64 / set.resources() as f64;
    let ctx = Context {
        spec,
        block_detector: BlockDetector::new(&set),
        cfg: config.clone(),
        set,
        oma,
        cell_power,
        transforms,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start workers: {e}")))?;

    let users = ctx.users();
    let (per_user, bits) = ctx.load();
    let user_bits = (per_user as u64) * bits as u64;
    let mut records = Vec::new();
    for &paths in &config.paths {
        for (si, &snr_db) in config.snr_points.iter().enumerate() {
            let n0 = ctx.n0(snr_db);
            let tally = pool.install(|| {
                (0..config.frames)
                    .into_par_iter()
                    .map(|f| ctx.frame(paths, n0, &mut frame_rng(config.seed, si, f)))
                    .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))
            })?;
            let frames = config.frames as u64;
            let bit_errors: u64 = tally.errors.iter().sum();
            let total_bits = user_bits * users as u64 * frames;
            let record = BerRecord {
                paths,
                snr_db,
                frames_run: config.frames,
                bit_errors,
                total_bits,
                ber: bit_errors as f64 / total_bits as f64,
                per_user_ber: tally.errors.iter().map(|&e| e as f64 / (user_bits * frames) as f64).collect(),
                mean_mpa_iterations: if tally.runs == 0 { 0.0 } else { tally.iterations as f64 / tally.runs as f64 },
            };
            log::info!(
                "{} {:?} P={paths} snr={snr_db} dB: ber={:e}",
                config.system.name(),
                config.link,
                record.ber
            );
            records.push(record);
        }
    }
    Ok(records)
}

/// [`run_ber`] with the system forced to OFDM-SCMA on the downlink.
pub fn ofdm_scma_run(config: &SimConfig) -> Result<Vec<BerRecord>> {
    let mut cfg = config.clone();
    cfg.system = System::OfdmScma;
    run_ber(&cfg)
}

/// Transmitted energy per user symbol in one frame of the SCMA systems.
pub fn frame_symbol_energy(set: &ScmaCodebookSet, scheme: AllocationScheme, spec: GridSpec, symbols: &[Vec<usize>]) -> Result<f64> {
    let grids = encode(symbols, set)?
        .iter()
        .map(|cw| allocate_grid(cw, scheme, spec))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = symbols.iter().map(Vec::len).sum();
    Ok(grids.iter().map(DelayDopplerGrid::energy).sum::<f64>() / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelPath, ChannelRealization};

    fn small(system: System, link: Link) -> SimConfig {
        SimConfig {
            m: 4,
            n: 4,
            system,
            link,
            paths: vec![2],
            snr_points: vec![6.0],
            frames: 8,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn noise_conversion() {
        let set = ScmaCodebookSet::default_6x4();
        assert!((noise_from_snr(0.0, &set, Link::Downlink) - 0.5).abs() < 1e-15);
        assert!((noise_from_snr(10.0, &set, Link::Uplink) - 0.05).abs() < 1e-15);
        let doubled = set.scaled(2f64.sqrt()).unwrap();
        let ratio = noise_from_snr(7.0, &doubled, Link::Downlink) / noise_from_snr(7.0, &set, Link::Downlink);
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn config_json_accepts_scalar_and_list_paths() {
        let a = SimConfig::from_json_str(r#"{"M": 8, "N": 8, "P": 3}"#).unwrap();
        assert_eq!(a.paths, vec![3]);
        let b = SimConfig::from_json_str(r#"{"P": [2, 4], "scheme": "scheme2", "system": "otfs_oma4"}"#).unwrap();
        assert_eq!(b.paths, vec![2, 4]);
        assert_eq!(b.scheme, AllocationScheme::DelayBlocks);
        assert!(SimConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
        let round = SimConfig::from_json_str(&serde_json::to_string(&b).unwrap()).unwrap();
        assert_eq!(round, b);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = small(System::OtfsScma, Link::Downlink);
        assert!(base.validate().is_ok());
        for bad in [
            SimConfig { frames: 0, ..base.clone() },
            SimConfig { snr_points: vec![], ..base.clone() },
            SimConfig { paths: vec![5], ..base.clone() },
            SimConfig { n: 6, ..base.clone() },
            SimConfig { system: System::OfdmScma, link: Link::Uplink, ..base.clone() },
            SimConfig { system: System::OtfsOma2, m: 3, ..base.clone() },
            SimConfig { noise_override: Some(-1.0), ..base.clone() },
        ] {
            let err = run_ber(&bad).unwrap_err();
            assert!(err.is_validation(), "{err}");
        }
    }

    #[test]
    fn oma_layouts() {
        let spec = GridSpec::new(8, 8).unwrap();
        for users in [2, 4] {
            let cells = oma_cells(users, spec).unwrap();
            assert!(cells.iter().all(|c| c.len() == 64 / users));
            let mut all: Vec<_> = cells.concat();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 64);
        }
        let four = oma_cells(4, spec).unwrap();
        assert!(four[1].iter().all(|&(k, _)| k % 4 == 1));
        let two = oma_cells(2, spec).unwrap();
        assert!(two[1].iter().all(|&(_, l)| l >= 4));
        assert!(matches!(oma_cells(3, spec), Err(Error::Allocation(_))));
        assert!(matches!(oma_cells(4, GridSpec::new(6, 8).unwrap()), Err(Error::Allocation(_))));

        let syms: Vec<Vec<Complex>> = (0..2).map(|u| vec![Complex::new(u as f64 + 1.0, 0.0); 32]).collect();
        let grids = oma_allocate(2, &syms, spec).unwrap();
        assert_eq!(grids[0].get(5, 3), Complex::new(1.0, 0.0));
        assert_eq!(grids[0].get(5, 4), Complex::new(0.0, 0.0));
        assert_eq!(grids[1].get(5, 4), Complex::new(2.0, 0.0));
    }

    #[test]
    fn transform_matrices_are_inverse() {
        let spec = GridSpec::new(4, 8).unwrap();
        let g = sfft_matrix(spec).unwrap();
        let gi = isfft_matrix(spec).unwrap();
        let id = &g * &gi;
        let err = (id - DMatrix::<Complex>::identity(32, 32)).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn ofdm_channel_is_similarity_transform() {
        let spec = GridSpec::new(4, 4).unwrap();
        let mut rng = frame_rng(1, 0, 0);
        let h = build_coefficient_matrix(&sample_channel(3, spec, ChannelOptions::default(), &mut rng).unwrap(), spec).unwrap();
        let eff = ofdm_effective_channel(&h).unwrap();
        let expected = isfft_matrix(spec).unwrap() * h.to_dense() * sfft_matrix(spec).unwrap();
        assert!((eff - expected).iter().all(|v| v.norm() < 1e-10));

        let los = ChannelRealization::new(vec![ChannelPath::integer(Complex::new(1.0, 0.0), 0, 0)], 0).unwrap();
        let eff = ofdm_effective_channel(&build_coefficient_matrix(&los, spec).unwrap()).unwrap();
        assert!((eff - DMatrix::<Complex>::identity(16, 16)).iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn ofdm_equalizer_shortcut_matches_dense_channel() {
        let spec = GridSpec::new(4, 8).unwrap();
        let mut rng = frame_rng(2, 0, 0);
        let h = build_coefficient_matrix(&sample_channel(3, spec, ChannelOptions::default(), &mut rng).unwrap(), spec).unwrap();
        let eff = ofdm_effective_channel(&h).unwrap();
        let x: Vec<Complex> = (0..32).map(|_| crate::channel::complex_gaussian(&mut rng, 1.0)).collect();
        let z: Vec<Complex> = (0..32).map(|_| crate::channel::complex_gaussian(&mut rng, 0.2)).collect();
        let y: Vec<Complex> = (&eff * nalgebra::DVector::from_vec(x)).iter().zip(&z).map(|(a, b)| a + b).collect();
        let dense = lmmse_equalize_dense(&eff, &y, 0.2).unwrap();

        let scale = (32f64).sqrt();
        let y_dd = scale_vec(vectorize(&sfft(&devectorize(&y, spec).unwrap())), 1.0 / scale);
        let eq = lmmse_equalize(&h, &y_dd, 0.2).unwrap();
        let back = scale_vec(vectorize(&isfft(&devectorize(&eq.estimate, spec).unwrap())), scale);
        for (a, b) in back.iter().zip(&dense.estimate) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!((eq.error_variance - dense.error_variance).abs() < 1e-9);
    }

    #[test]
    fn frame_energy_matches_noise_model() {
        let set = ScmaCodebookSet::default_6x4();
        let spec = GridSpec::new(8, 8).unwrap();
        let mut rng = frame_rng(4, 0, 0);
        let symbols: Vec<Vec<usize>> = (0..6).map(|_| (0..16).map(|_| rng.random_range(0..4)).collect()).collect();
        let e = frame_symbol_energy(&set, AllocationScheme::DelayBlocks, spec, &symbols).unwrap();
        assert!((e - set.average_codeword_energy()).abs() < 1e-9);
        let n0 = noise_from_snr(3.0, &set, Link::Downlink);
        assert!((n0 - e / 2.0 * 10f64.powf(-0.3)).abs() < 1e-9);
    }

    #[test]
    fn every_system_runs_and_is_deterministic() {
        for (system, link) in [
            (System::OtfsScma, Link::Downlink),
            (System::OtfsScma, Link::Uplink),
            (System::OtfsOma2, Link::Downlink),
            (System::OtfsOma4, Link::Uplink),
            (System::OfdmScma, Link::Downlink),
        ] {
            let cfg = small(system, link);
            let a = run_ber(&cfg).unwrap();
            let b = run_ber(&cfg).unwrap();
            assert_eq!(a, b);
            let r = &a[0];
            assert!(r.ber >= 0.0 && r.ber <= 1.0);
            assert_eq!(r.ber, r.bit_errors as f64 / r.total_bits as f64);
            let users = system.oma_users().unwrap_or(6);
            assert_eq!(r.per_user_ber.len(), users);
            assert_eq!(r.total_bits, 8 * 2 * if users == 6 { 6 * 4 } else { 16 });
        }
    }

    #[test]
    fn noiseless_los_is_error_free() {
        for system in [System::OtfsScma, System::OfdmScma, System::OtfsOma4] {
            let cfg = SimConfig { paths: vec![1], noise_override: Some(0.0), ..small(system, Link::Downlink) };
            assert_eq!(run_ber(&cfg).unwrap()[0].bit_errors, 0);
        }
    }

    #[test]
    fn frame_streams_differ() {
        let a: u64 = frame_rng(1, 0, 0).random();
        let b: u64 = frame_rng(1, 0, 1).random();
        let c: u64 = frame_rng(1, 1, 0).random();
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn csv_layout() {
        let r = BerRecord {
            paths: 2,
            snr_db: 4.0,
            frames_run: 10,
            bit_errors: 3,
            total_bits: 1000,
            ber: 0.003,
            per_user_ber: vec![],
            mean_mpa_iterations: 2.5,
        };
        assert_eq!(records_to_csv(&[r]), "snr_db,frames,bit_errors,total_bits,ber,mean_iters\n4,10,3,1000,3e-3,2.5\n");
    }
}
