//! SCMA codebooks, factor matrices and placement of codewords on the
//! delay-Doppler grid.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dd::{DelayDopplerGrid, GridSpec};
use crate::{Complex, Error, Result};

/// Factor matrix of the six-user, four-resource system, one row per resource.
pub const FACTOR_6X4: [[u8; 6]; 4] = [
    [1, 0, 1, 0, 1, 0],
    [0, 1, 1, 0, 0, 1],
    [1, 0, 0, 1, 0, 1],
    [0, 1, 0, 1, 1, 0],
];

/// Factor matrix of the eight-user extension (200% overloading).
pub const FACTOR_8X4: [[u8; 8]; 4] = [
    [1, 0, 1, 0, 1, 0, 1, 0],
    [0, 1, 1, 0, 0, 1, 1, 0],
    [1, 0, 0, 1, 0, 1, 0, 1],
    [0, 1, 0, 1, 1, 0, 0, 1],
];

/// Binary `K x J` matrix; entry `(k, j)` is set when user `j` uses resource `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorMatrix {
    resources: usize,
    users: usize,
    entries: Vec<bool>,
}

impl FactorMatrix {
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let resources = rows.len();
        let users = rows.first().map_or(0, |r| r.as_ref().len());
        let entries = rows.iter().flat_map(|r| r.as_ref().iter().map(|&b| b != 0)).collect();
        Self { resources, users, entries }
    }

    pub fn resources(&self) -> usize {
        self.resources
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn get(&self, resource: usize, user: usize) -> bool {
        self.entries[resource * self.users + user]
    }

    pub fn column(&self, user: usize) -> Vec<bool> {
        (0..self.resources).map(|k| self.get(k, user)).collect()
    }

    pub fn row_weights(&self) -> Vec<usize> {
        (0..self.resources)
            .map(|k| (0..self.users).filter(|&j| self.get(k, j)).count())
            .collect()
    }

    pub fn column_weights(&self) -> Vec<usize> {
        (0..self.users)
            .map(|j| (0..self.resources).filter(|&k| self.get(k, j)).count())
            .collect()
    }

    /// Users sharing resource `k`.
    pub fn users_on(&self, resource: usize) -> Vec<usize> {
        (0..self.users).filter(|&j| self.get(resource, j)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.resources)
            .map(|k| (0..self.users).map(|j| u8::from(self.get(k, j))).collect())
            .collect()
    }
}

impl fmt::Display for FactorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.to_rows() {
            let cells: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// A validated set of `J` codebooks, each holding `A` sparse codewords of
/// length `K` with a common per-user support of size `dv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmaCodebookSet {
    resources: usize,
    alphabet: usize,
    codebooks: Vec<Vec<Vec<Complex>>>,
    supports: Vec<Vec<usize>>,
    dv: usize,
    df: usize,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    #[serde(rename = "J")]
    users: usize,
    #[serde(rename = "K")]
    resources: usize,
    #[serde(rename = "A")]
    alphabet: usize,
    codebooks: Vec<Vec<Vec<Entry>>>,
}

impl ScmaCodebookSet {
    /// Validates codebooks given as `[user][codeword][resource]`.
    pub fn new(resources: usize, codebooks: Vec<Vec<Vec<Complex>>>) -> Result<Self> {
        let users = codebooks.len();
        if users == 0 || resources == 0 {
            return Err(Error::Validation("need at least one user and one resource".into()));
        }
        let alphabet = codebooks[0].len();
        if alphabet < 2 {
            return Err(Error::Validation(format!("alphabet size must be >= 2, got {alphabet}")));
        }

        let mut supports = Vec::with_capacity(users);
        for (j, book) in codebooks.iter().enumerate() {
            if book.len() != alphabet {
                return Err(Error::Validation(format!(
                    "user {j} has {} codewords, expected {alphabet}",
                    book.len()
                )));
            }
            for (a, cw) in book.iter().enumerate() {
                if cw.len() != resources {
                    return Err(Error::Dimension(format!(
                        "user {j} codeword {a} has {} entries, expected K={resources}",
                        cw.len()
                    )));
                }
                if cw.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                    return Err(Error::Validation(format!("user {j} codeword {a} is not finite")));
                }
            }
            let support = nonzero_positions(&book[0]);
            if support.is_empty() {
                return Err(Error::Validation(format!("user {j} codeword 0 is all zero")));
            }
            for (a, cw) in book.iter().enumerate().skip(1) {
                if nonzero_positions(cw) != support {
                    return Err(Error::Validation(format!(
                        "user {j} codeword {a} has support {:?}, expected {:?}",
                        nonzero_positions(cw),
                        support
                    )));
                }
            }
            for a in 0..alphabet {
                if book[..a].iter().any(|other| *other == book[a]) {
                    return Err(Error::Validation(format!("user {j} repeats codeword {a}")));
                }
            }
            supports.push(support);
        }

        let dv = supports[0].len();
        if let Some(j) = supports.iter().position(|s| s.len() != dv) {
            return Err(Error::Validation(format!(
                "user {j} uses {} resources but user 0 uses {dv}",
                supports[j].len()
            )));
        }
        let df = (0..resources)
            .map(|k| supports.iter().filter(|s| s.contains(&k)).count())
            .max()
            .unwrap_or(0);

        Ok(Self { resources, alphabet, codebooks, supports, dv, df })
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let file: CodebookFile = serde_json::from_str(json)?;
        if file.codebooks.len() != file.users {
            return Err(Error::Validation(format!(
                "declared J={} but {} codebooks present",
                file.users,
                file.codebooks.len()
            )));
        }
        if let Some(j) = file.codebooks.iter().position(|b| b.len() != file.alphabet) {
            return Err(Error::Validation(format!(
                "declared A={} but user {j} has {} codewords",
                file.alphabet,
                file.codebooks[j].len()
            )));
        }
        let codebooks = file
            .codebooks
            .into_iter()
            .map(|book| {
                book.into_iter()
                    .map(|cw| cw.into_iter().map(|e| Complex::new(e.re, e.im)).collect())
                    .collect()
            })
            .collect();
        Self::new(file.resources, codebooks)
    }

    /// Reads and validates a codebook file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let file = CodebookFile {
            users: self.users(),
            resources: self.resources,
            alphabet: self.alphabet,
            codebooks: self
                .codebooks
                .iter()
                .map(|b| b.iter().map(|cw| cw.iter().map(|c| Entry { re: c.re, im: c.im }).collect()).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("codebook serialization cannot fail")
    }

    /// The shipped default for the six-user, four-resource system.
    ///
    /// Not a published codebook: every user repeats a QPSK point
    /// `{+-1 +-j}/sqrt(2)` on both of its resources, rotated by
    /// `exp(j pi u / J)` for user index `u`, scaled to unit codeword energy.
    pub fn default_6x4() -> Self {
        let users = 6;
        let qpsk = qpsk_points();
        let codebooks = (0..users)
            .map(|u| {
                let rotation = Complex::from_polar(1.0, PI * u as f64 / users as f64);
                (0..4)
                    .map(|a| {
                        (0..4)
                            .map(|k| {
                                if FACTOR_6X4[k][u] == 1 {
                                    qpsk[a] * rotation * std::f64::consts::FRAC_1_SQRT_2
                                } else {
                                    Complex::new(0.0, 0.0)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::new(4, codebooks).expect("default codebook is valid")
    }

    /// Grows the six-user system to eight users by reusing the supports of
    /// users 3 and 4 (1-based). User 7 carries user 4's codeword values on
    /// user 3's resources and user 8 carries user 3's values on user 4's.
    pub fn extend_to_eight_users(&self) -> Result<Self> {
        if self.users() != 6 || self.resources != 4 || self.factor_matrix() != FactorMatrix::from_rows(&FACTOR_6X4) {
            return Err(Error::UnsupportedExtension(format!(
                "extension needs the 6x4 system with the standard factor matrix, got {}x{}",
                self.users(),
                self.resources
            )));
        }
        let (third, fourth) = (2, 3);
        if self.supports[third].iter().any(|k| self.supports[fourth].contains(k)) {
            return Err(Error::UnsupportedExtension("users 3 and 4 overlap".into()));
        }
        let mut codebooks = self.codebooks.clone();
        codebooks.push(self.transplant(fourth, third));
        codebooks.push(self.transplant(third, fourth));
        Self::new(self.resources, codebooks)
    }

    /// Codewords of `values_from` moved onto the support of `support_of`.
    fn transplant(&self, values_from: usize, support_of: usize) -> Vec<Vec<Complex>> {
        (0..self.alphabet)
            .map(|a| {
                let mut cw = vec![Complex::new(0.0, 0.0); self.resources];
                for (&k, v) in self.supports[support_of].iter().zip(self.compressed_codeword(values_from, a)) {
                    cw[k] = v;
                }
                cw
            })
            .collect()
    }

    pub fn users(&self) -> usize {
        self.codebooks.len()
    }

    pub fn resources(&self) -> usize {
        self.resources
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn dv(&self) -> usize {
        self.dv
    }

    pub fn df(&self) -> usize {
        self.df
    }

    /// Overloading factor `J / K`.
    pub fn overloading(&self) -> f64 {
        self.users() as f64 / self.resources as f64
    }

    pub fn bits_per_symbol(&self) -> u32 {
        bits_per_symbol(self.alphabet)
    }

    pub fn codeword(&self, user: usize, symbol: usize) -> &[Complex] {
        &self.codebooks[user][symbol]
    }

    /// Sorted resource indices used by `user`.
    pub fn support(&self, user: usize) -> &[usize] {
        &self.supports[user]
    }

    /// The `dv` nonzero entries of a codeword, in support order.
    pub fn compressed_codeword(&self, user: usize, symbol: usize) -> Vec<Complex> {
        self.supports[user].iter().map(|&k| self.codebooks[user][symbol][k]).collect()
    }

    pub fn factor_matrix(&self) -> FactorMatrix {
        let users = self.users();
        let mut entries = vec![false; self.resources * users];
        for (j, support) in self.supports.iter().enumerate() {
            for &k in support {
                entries[k * users + j] = true;
            }
        }
        FactorMatrix { resources: self.resources, users, entries }
    }

    /// Mean codeword energy over all users and symbols.
    pub fn average_codeword_energy(&self) -> f64 {
        let total: f64 = self
            .codebooks
            .iter()
            .flatten()
            .map(|cw| cw.iter().map(|c| c.norm_sqr()).sum::<f64>())
            .sum();
        total / (self.users() * self.alphabet) as f64
    }

    /// Symbol whose codeword is closest to `y` in Euclidean distance.
    /// Ties go to the lowest index.
    pub fn nearest_symbol(&self, user: usize, y: &[Complex]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (a, cw) in self.codebooks[user].iter().enumerate() {
            let d: f64 = cw.iter().zip(y).map(|(c, v)| (c - v).norm_sqr()).sum();
            if d < best.0 {
                best = (d, a);
            }
        }
        best.1
    }

    /// A copy with every codeword multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let codebooks = self
            .codebooks
            .iter()
            .map(|b| b.iter().map(|cw| cw.iter().map(|c| c * factor).collect()).collect())
            .collect();
        Self::new(self.resources, codebooks)
    }
}

fn nonzero_positions(cw: &[Complex]) -> Vec<usize> {
    cw.iter()
        .enumerate()
        .filter(|(_, c)| c.re != 0.0 || c.im != 0.0)
        .map(|(k, _)| k)
        .collect()
}

/// QPSK constellation in natural-binary index order.
pub fn qpsk_points() -> [Complex; 4] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [
        Complex::new(s, s),
        Complex::new(-s, s),
        Complex::new(-s, -s),
        Complex::new(s, -s),
    ]
}

/// Bits carried by one symbol of an `alphabet`-ary constellation.
pub fn bits_per_symbol(alphabet: usize) -> u32 {
    usize::BITS - (alphabet.max(2) - 1).leading_zeros()
}

/// Bit errors between two symbol indices under natural-binary labelling.
#[inline]
pub fn bit_errors(a: usize, b: usize) -> u32 {
    (a ^ b).count_ones()
}

/// Maps symbols to codewords, one list per user.
pub fn encode(symbols: &[Vec<usize>], set: &ScmaCodebookSet) -> Result<Vec<Vec<Vec<Complex>>>> {
    if symbols.len() != set.users() {
        return Err(Error::Dimension(format!(
            "{} symbol streams for {} users",
            symbols.len(),
            set.users()
        )));
    }
    let len = symbols.first().map_or(0, Vec::len);
    if symbols.iter().any(|s| s.len() != len) {
        return Err(Error::Dimension("symbol streams differ in length".into()));
    }
    symbols
        .iter()
        .enumerate()
        .map(|(j, stream)| {
            stream
                .iter()
                .map(|&s| {
                    if s >= set.alphabet() {
                        Err(Error::InvalidSymbol { symbol: s, alphabet: set.alphabet() })
                    } else {
                        Ok(set.codeword(j, s).to_vec())
                    }
                })
                .collect()
        })
        .collect()
}

/// Placement of length-`K` codewords on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationScheme {
    /// `K x 1` blocks running along the Doppler axis (scheme 1).
    #[serde(alias = "scheme1")]
    DopplerBlocks,
    /// `1 x K` blocks running along the delay axis (scheme 2).
    #[serde(alias = "scheme2")]
    DelayBlocks,
}

impl std::str::FromStr for AllocationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::InvalidConfig(format!("unknown allocation scheme '{s}'")))
    }
}

impl AllocationScheme {
    pub fn name(&self) -> &'static str {
        match self {
            AllocationScheme::DopplerBlocks => "doppler_blocks",
            AllocationScheme::DelayBlocks => "delay_blocks",
        }
    }

    /// Number of codewords per user per frame, `MN / K`, after checking that
    /// blocks tile the grid.
    pub fn blocks(&self, spec: GridSpec, resources: usize) -> Result<usize> {
        if resources == 0 {
            return Err(Error::Allocation("codeword length must be positive".into()));
        }
        let (axis, len) = match self {
            AllocationScheme::DopplerBlocks => ("N", spec.n),
            AllocationScheme::DelayBlocks => ("M", spec.m),
        };
        if len % resources != 0 {
            return Err(Error::Allocation(format!(
                "{} needs K={resources} to divide {axis}={len}",
                self.name()
            )));
        }
        Ok(spec.slots() / resources)
    }

    /// Grid cell `(k, l)` holding entry `entry` of block `block`.
    ///
    /// Scheme 1 fills delay columns first: block `b` sits in column `b mod M`
    /// at Doppler rows starting from `K * floor(b / M)`. Scheme 2 is the
    /// transpose: row `b mod N`, delay columns from `K * floor(b / N)`.
    #[inline]
    pub fn cell(&self, spec: GridSpec, resources: usize, block: usize, entry: usize) -> (usize, usize) {
        match self {
            AllocationScheme::DopplerBlocks => {
                (resources * (block / spec.m) + entry, block % spec.m)
            }
            AllocationScheme::DelayBlocks => {
                (block % spec.n, resources * (block / spec.n) + entry)
            }
        }
    }
}

impl fmt::Display for AllocationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Places one user's codewords on a grid.
pub fn allocate_grid(codewords: &[Vec<Complex>], scheme: AllocationScheme, spec: GridSpec) -> Result<DelayDopplerGrid> {
    let resources = codewords.first().map_or(0, Vec::len);
    let blocks = scheme.blocks(spec, resources)?;
    if codewords.len() != blocks {
        return Err(Error::Dimension(format!(
            "{} codewords for {blocks} blocks",
            codewords.len()
        )));
    }
    if codewords.iter().any(|c| c.len() != resources) {
        return Err(Error::Dimension("codewords differ in length".into()));
    }
    let mut grid = DelayDopplerGrid::zeros(spec);
    for (b, cw) in codewords.iter().enumerate() {
        for (i, &v) in cw.iter().enumerate() {
            let (k, l) = scheme.cell(spec, resources, b, i);
            grid.set(k, l, v);
        }
    }
    Ok(grid)
}

/// Reads the length-`K` observation of every block back off a grid.
pub fn extract_blocks(
    grid: &DelayDopplerGrid,
    scheme: AllocationScheme,
    resources: usize,
) -> Result<Vec<Vec<Complex>>> {
    let spec = grid.spec();
    let blocks = scheme.blocks(spec, resources)?;
    Ok((0..blocks)
        .map(|b| {
            (0..resources)
                .map(|i| {
                    let (k, l) = scheme.cell(spec, resources, b, i);
                    grid.get(k, l)
                })
                .collect()
        })
        .collect())
}

/// Bin-wise sum of user grids.
pub fn superimpose(grids: &[DelayDopplerGrid]) -> Result<DelayDopplerGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Dimension("nothing to superimpose".into()))?;
    let spec = first.spec();
    if let Some(g) = grids.iter().find(|g| g.spec() != spec) {
        return Err(Error::Dimension(format!(
            "grid {}x{} does not match {}x{}",
            g.spec().n,
            g.spec().m,
            spec.n,
            spec.m
        )));
    }
    let mut sum = first.cells().to_vec();
    for g in &grids[1..] {
        for (acc, v) in sum.iter_mut().zip(g.cells()) {
            *acc += v;
        }
    }
    DelayDopplerGrid::from_cells(spec, sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEFAULT_JSON: &str = include_str!("../data/default_6x4.json");

    fn c(re: f64, im: f64) -> Complex {
        Complex::new(re, im)
    }

    #[test]
    fn default_set_parameters() {
        let set = ScmaCodebookSet::default_6x4();
        assert_eq!((set.users(), set.resources(), set.alphabet()), (6, 4, 4));
        assert_eq!((set.dv(), set.df()), (2, 3));
        assert!((set.average_codeword_energy() - 1.0).abs() < 1e-12);
        assert!((set.overloading() - 1.5).abs() < 1e-12);
        assert_eq!(set.bits_per_symbol(), 2);
    }

    #[test]
    fn shipped_file_matches_builtin_default() {
        let loaded = ScmaCodebookSet::from_json_str(DEFAULT_JSON).unwrap();
        let builtin = ScmaCodebookSet::default_6x4();
        assert_eq!(loaded.factor_matrix(), builtin.factor_matrix());
        for j in 0..6 {
            for a in 0..4 {
                for (x, y) in loaded.codeword(j, a).iter().zip(builtin.codeword(j, a)) {
                    assert!((x - y).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let set = ScmaCodebookSet::default_6x4();
        assert_eq!(ScmaCodebookSet::from_json_str(&set.to_json_string()).unwrap(), set);
    }

    #[test]
    fn default_factor_matrix() {
        let f = ScmaCodebookSet::default_6x4().factor_matrix();
        assert_eq!(f, FactorMatrix::from_rows(&FACTOR_6X4));
        assert_eq!(f.column_weights(), vec![2; 6]);
        assert_eq!(f.row_weights(), vec![3; 4]);
    }

    #[test]
    fn off_support_entry_is_rejected() {
        let mut books = vec![vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(-1.0, 0.0), c(0.0, 0.0)]]];
        books[0][1][1] = c(0.1, 0.0);
        assert!(matches!(ScmaCodebookSet::new(2, books), Err(Error::Validation(_))));
    }

    #[test]
    fn short_codeword_is_a_dimension_error() {
        let mut json: serde_json::Value = serde_json::from_str(DEFAULT_JSON).unwrap();
        json["codebooks"][1][2].as_array_mut().unwrap().pop();
        let err = ScmaCodebookSet::from_json_str(&json.to_string()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }

    #[test]
    fn alphabet_mismatch_is_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(DEFAULT_JSON).unwrap();
        json["codebooks"][3].as_array_mut().unwrap().pop();
        assert!(matches!(
            ScmaCodebookSet::from_json_str(&json.to_string()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn repeated_codeword_is_rejected() {
        let books = vec![vec![vec![c(1.0, 0.0)], vec![c(1.0, 0.0)]]];
        assert!(matches!(ScmaCodebookSet::new(1, books), Err(Error::Validation(_))));
    }

    #[test]
    fn single_full_support_user() {
        let books = vec![vec![vec![c(1.0, 0.0), c(1.0, 1.0)], vec![c(-1.0, 0.0), c(2.0, 0.5)]]];
        let set = ScmaCodebookSet::new(2, books).unwrap();
        assert_eq!(set.factor_matrix().column(0), vec![true, true]);
        assert_eq!((set.dv(), set.df()), (2, 1));
    }

    #[test]
    fn irregular_matrix_reports_max_row_weight() {
        let z = c(0.0, 0.0);
        let books = vec![
            vec![vec![c(1.0, 0.0), z, z], vec![c(-1.0, 0.0), z, z]],
            vec![vec![c(1.0, 0.0), z, z], vec![c(0.0, 1.0), z, z]],
            vec![vec![z, c(1.0, 0.0), z], vec![z, c(-1.0, 0.0), z]],
        ];
        let set = ScmaCodebookSet::new(3, books).unwrap();
        assert_eq!(set.df(), 2);
        assert_eq!(set.factor_matrix().row_weights(), vec![2, 1, 0]);
    }

    #[test]
    fn factor_matrix_matches_direct_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let users = rng.random_range(1..8);
            let resources = rng.random_range(2..7);
            let dv = rng.random_range(1..=resources);
            let books: Vec<Vec<Vec<Complex>>> = (0..users)
                .map(|_| {
                    let mut support: Vec<usize> = (0..resources).collect();
                    while support.len() > dv {
                        support.remove(rng.random_range(0..support.len()));
                    }
                    (0..4)
                        .map(|a| {
                            (0..resources)
                                .map(|k| if support.contains(&k) { c(a as f64 + 1.0, rng.random()) } else { c(0.0, 0.0) })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let set = ScmaCodebookSet::new(resources, books.clone()).unwrap();
            let f = set.factor_matrix();
            for k in 0..resources {
                for j in 0..users {
                    let any = books[j].iter().any(|cw| cw[k] != c(0.0, 0.0));
                    assert_eq!(f.get(k, j), any);
                }
            }
        }
    }

    #[test]
    fn extension_matches_eight_user_matrix() {
        let base = ScmaCodebookSet::default_6x4();
        let f = base.factor_matrix();
        assert!((0..4).all(|k| !(f.get(k, 2) && f.get(k, 3))));

        let ext = base.extend_to_eight_users().unwrap();
        let fe = ext.factor_matrix();
        assert_eq!(fe, FactorMatrix::from_rows(&FACTOR_8X4));
        assert_eq!(fe.column(6), fe.column(2));
        assert_eq!(fe.column(7), fe.column(3));
        assert!((ext.overloading() - 2.0).abs() < 1e-12);
        for a in 0..4 {
            assert_eq!(ext.compressed_codeword(6, a), base.compressed_codeword(3, a));
            assert_eq!(ext.compressed_codeword(7, a), base.compressed_codeword(2, a));
        }
    }

    #[test]
    fn extension_rejects_other_systems() {
        let ext = ScmaCodebookSet::default_6x4().extend_to_eight_users().unwrap();
        assert!(matches!(ext.extend_to_eight_users(), Err(Error::UnsupportedExtension(_))));
    }

    #[test]
    fn encode_selects_codewords() {
        let set = ScmaCodebookSet::default_6x4();
        let symbols = vec![vec![0; 16]; 6];
        let cws = encode(&symbols, &set).unwrap();
        for (j, user) in cws.iter().enumerate() {
            assert_eq!(user.len(), 16);
            assert!(user.iter().all(|cw| cw.as_slice() == set.codeword(j, 0)));
        }
    }

    #[test]
    fn encode_rejects_bad_symbol() {
        let set = ScmaCodebookSet::default_6x4();
        let mut symbols = vec![vec![1; 4]; 6];
        symbols[2][3] = 4;
        assert!(matches!(encode(&symbols, &set), Err(Error::InvalidSymbol { symbol: 4, alphabet: 4 })));
    }

    #[test]
    fn nearest_codeword_round_trip() {
        let set = ScmaCodebookSet::default_6x4();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let symbols: Vec<Vec<usize>> = (0..6).map(|_| (0..16).map(|_| rng.random_range(0..4)).collect()).collect();
        let cws = encode(&symbols, &set).unwrap();
        for j in 0..6 {
            let decoded: Vec<usize> = cws[j].iter().map(|cw| set.nearest_symbol(j, cw)).collect();
            assert_eq!(decoded, symbols[j]);
        }
    }

    #[test]
    fn scheme_one_first_block_is_a_column() {
        let spec = GridSpec::new(8, 8).unwrap();
        let s = AllocationScheme::DopplerBlocks;
        assert_eq!(s.blocks(spec, 4).unwrap(), 16);
        let cells: Vec<_> = (0..4).map(|i| s.cell(spec, 4, 0, i)).collect();
        assert_eq!(cells, vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn scheme_two_block_nine() {
        let spec = GridSpec::new(8, 8).unwrap();
        let s = AllocationScheme::DelayBlocks;
        let cells: Vec<_> = (0..4).map(|i| s.cell(spec, 4, 9, i)).collect();
        assert_eq!(cells, vec![(1, 4), (1, 5), (1, 6), (1, 7)]);
    }

    #[test]
    fn allocation_tiles_grid_exactly_once() {
        for (n, m) in [(8, 8), (8, 16), (4, 4), (12, 8)] {
            let spec = GridSpec::new(n, m).unwrap();
            for scheme in [AllocationScheme::DopplerBlocks, AllocationScheme::DelayBlocks] {
                let blocks = scheme.blocks(spec, 4).unwrap();
                let mut hits = vec![0; spec.slots()];
                for b in 0..blocks {
                    for i in 0..4 {
                        let (k, l) = scheme.cell(spec, 4, b, i);
                        hits[spec.index(k, l)] += 1;
                    }
                }
                assert!(hits.iter().all(|&h| h == 1), "{scheme} {n}x{m}");
            }
        }
    }

    #[test]
    fn allocation_divisibility_errors() {
        let spec = GridSpec::new(6, 8).unwrap();
        assert!(matches!(AllocationScheme::DopplerBlocks.blocks(spec, 4), Err(Error::Allocation(_))));
        assert!(AllocationScheme::DelayBlocks.blocks(spec, 4).is_ok());
        let cws = vec![vec![Complex::new(1.0, 0.0); 4]; 11];
        assert!(matches!(
            allocate_grid(&cws, AllocationScheme::DelayBlocks, spec),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn extract_inverts_allocate() {
        let spec = GridSpec::new(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for scheme in [AllocationScheme::DopplerBlocks, AllocationScheme::DelayBlocks] {
            let cws: Vec<Vec<Complex>> = (0..32).map(|_| (0..4).map(|_| c(rng.random(), rng.random())).collect()).collect();
            let grid = allocate_grid(&cws, scheme, spec).unwrap();
            assert_eq!(extract_blocks(&grid, scheme, 4).unwrap(), cws);
        }
    }

    #[test]
    fn superimpose_sums_bins() {
        let spec = GridSpec::new(2, 2).unwrap();
        let ones = DelayDopplerGrid::from_fn(spec, |_, _| c(1.0, 0.0));
        assert_eq!(superimpose(std::slice::from_ref(&ones)).unwrap(), ones);
        let six = superimpose(&vec![ones.clone(); 6]).unwrap();
        assert!(six.cells().iter().all(|&v| v == c(6.0, 0.0)));
        let other = DelayDopplerGrid::zeros(GridSpec::new(2, 3).unwrap());
        assert!(matches!(superimpose(&[ones, other]), Err(Error::Dimension(_))));
    }

    #[test]
    fn every_cell_collects_df_users() {
        let set = ScmaCodebookSet::default_6x4();
        let spec = GridSpec::new(8, 8).unwrap();
        let f = set.factor_matrix();
        let symbols = vec![vec![0; 16]; 6];
        let grids: Vec<DelayDopplerGrid> = encode(&symbols, &set)
            .unwrap()
            .iter()
            .map(|cws| allocate_grid(cws, AllocationScheme::DopplerBlocks, spec).unwrap())
            .collect();
        let sum = superimpose(&grids).unwrap();
        for b in 0..16 {
            for i in 0..4 {
                let (k, l) = AllocationScheme::DopplerBlocks.cell(spec, 4, b, i);
                let contributors = (0..6).filter(|&j| f.get(i, j)).count();
                assert_eq!(contributors, 3);
                let expected: Complex = f.users_on(i).iter().map(|&j| set.codeword(j, 0)[i]).sum();
                assert!((sum.get(k, l) - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn overloading_accounting() {
        let set = ScmaCodebookSet::default_6x4();
        let spec = GridSpec::new(8, 16).unwrap();
        let placed = set.users() * AllocationScheme::DopplerBlocks.blocks(spec, 4).unwrap();
        assert_eq!(placed * set.resources(), set.users() * spec.slots());
        assert!((placed as f64 / spec.slots() as f64 - set.overloading()).abs() < 1e-12);
    }

    #[test]
    fn natural_binary_bits() {
        assert_eq!(bits_per_symbol(4), 2);
        assert_eq!(bits_per_symbol(2), 1);
        assert_eq!(bits_per_symbol(8), 3);
        assert_eq!(bit_errors(0, 3), 2);
        assert_eq!(bit_errors(2, 3), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn extract_inverts_allocate_for_any_symbols(
                symbols in proptest::collection::vec(0usize..4, 16),
                delay_axis in any::<bool>(),
            ) {
                let set = ScmaCodebookSet::default_6x4();
                let spec = GridSpec::new(8, 8).unwrap();
                let scheme = if delay_axis { AllocationScheme::DelayBlocks } else { AllocationScheme::DopplerBlocks };
                let per_user: Vec<Vec<usize>> = (0..6).map(|j| symbols.iter().map(|s| (s + j) % 4).collect()).collect();
                let cws = encode(&per_user, &set).unwrap();
                for cw in &cws {
                    let grid = allocate_grid(cw, scheme, spec).unwrap();
                    prop_assert_eq!(&extract_blocks(&grid, scheme, 4).unwrap(), cw);
                }
            }

            #[test]
            fn bit_errors_is_a_metric(a in 0usize..16, b in 0usize..16, c in 0usize..16) {
                prop_assert_eq!(bit_errors(a, b), bit_errors(b, a));
                prop_assert_eq!(bit_errors(a, a), 0);
                prop_assert!(bit_errors(a, c) <= bit_errors(a, b) + bit_errors(b, c));
            }
        }
    }
}
