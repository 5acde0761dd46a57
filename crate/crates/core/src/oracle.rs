//! Exhaustive maximum-a-posteriori references for small instances.
//!
//! With uniform priors the MAP assignment minimizes `||y - H x||^2`, so the
//! searches below never evaluate probabilities at all; the noise variance
//! is accepted only to mirror the detector interface. Nothing here calls
//! into [`crate::detect`].

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::scma::ScmaCodebookSet;
use crate::{Complex, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBudget {
    pub max_enumerations: u64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self { max_enumerations: 20_000_000 }
    }
}

impl OracleBudget {
    /// `A^variables`, or an error if that exceeds the budget.
    pub fn check(&self, alphabet: usize, variables: usize) -> Result<u128> {
        let required = (alphabet as u128).checked_pow(variables as u32).unwrap_or(u128::MAX);
        if required > self.max_enumerations as u128 {
            return Err(Error::BudgetExceeded { required, budget: self.max_enumerations });
        }
        Ok(required)
    }
}

fn check_noise(n0: f64) -> Result<()> {
    if !(n0 > 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance must be positive, got {n0}")));
    }
    Ok(())
}

/// Joint MAP over every variable of the compressed uplink system.
///
/// Column `c * dv + i` of `h_compr` multiplies entry `i` of variable `c`'s
/// compressed codeword; `variable_users[c]` names the user whose codebook
/// variable `c` draws from. Among equally good assignments the
/// lexicographically smallest wins.
pub fn brute_force_map_uplink(
    y: &[Complex],
    h_compr: &DMatrix<Complex>,
    variable_users: &[usize],
    set: &ScmaCodebookSet,
    n0: f64,
    budget: OracleBudget,
) -> Result<Vec<usize>> {
    check_noise(n0)?;
    let dv = set.dv();
    let vars = variable_users.len();
    if h_compr.nrows() != y.len() || h_compr.ncols() != vars * dv {
        return Err(Error::Dimension(format!(
            "{}x{} matrix for {} observations and {vars} variables of {dv}",
            h_compr.nrows(),
            h_compr.ncols(),
            y.len()
        )));
    }
    if let Some(&u) = variable_users.iter().find(|&&u| u >= set.users()) {
        return Err(Error::Dimension(format!("variable assigned to user {u} of {}", set.users())));
    }
    let a = set.alphabet();
    budget.check(a, vars)?;
    if vars == 0 {
        return Ok(Vec::new());
    }

    // Received-domain image of every (variable, symbol) pair.
    let rows = y.len();
    let images: Vec<Vec<Vec<Complex>>> = (0..vars)
        .map(|c| {
            (0..a)
                .map(|m| {
                    let x: Vec<Complex> = support_entries(set, variable_users[c], m);
                    (0..rows)
                        .map(|r| (0..dv).map(|i| h_compr[(r, c * dv + i)] * x[i]).sum())
                        .collect()
                })
                .collect()
        })
        .collect();

    let search = Search { images: &images, alphabet: a, rows };
    let best = (0..a)
        .into_par_iter()
        .map(|lead| {
            let mut residual: Vec<Complex> = y.iter().zip(&images[0][lead]).map(|(y, v)| y - v).collect();
            let mut path = vec![0; vars];
            path[0] = lead;
            let mut best = (f64::INFINITY, path.clone());
            search.descend(1, &mut residual, &mut path, &mut best);
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, Vec::new()), |acc, cand| if cand.0 < acc.0 { cand } else { acc });
    Ok(best.1)
}

fn support_entries(set: &ScmaCodebookSet, user: usize, symbol: usize) -> Vec<Complex> {
    let cw = set.codeword(user, symbol);
    set.support(user).iter().map(|&k| cw[k]).collect()
}

struct Search<'a> {
    images: &'a [Vec<Vec<Complex>>],
    alphabet: usize,
    rows: usize,
}

impl Search<'_> {
    /// Depth-first walk in lexicographic order; strict improvement keeps
    /// the first (smallest) of tied assignments.
    fn descend(&self, depth: usize, residual: &mut [Complex], path: &mut [usize], best: &mut (f64, Vec<usize>)) {
        if depth == path.len() {
            let cost: f64 = residual.iter().map(|v| v.norm_sqr()).sum();
            if cost < best.0 {
                best.0 = cost;
                best.1.copy_from_slice(path);
            }
            return;
        }
        for m in 0..self.alphabet {
            let img = &self.images[depth][m];
            for r in 0..self.rows {
                residual[r] -= img[r];
            }
            path[depth] = m;
            self.descend(depth + 1, residual, path, best);
            for r in 0..self.rows {
                residual[r] += img[r];
            }
        }
    }
}

/// Joint MAP over one `K`-resource block of the downlink AWGN model
/// `y = sum_j x_j + n`.
pub fn brute_force_map_downlink_block(y_block: &[Complex], set: &ScmaCodebookSet, n0: f64) -> Result<Vec<usize>> {
    check_noise(n0)?;
    let k = set.resources();
    if y_block.len() != k {
        return Err(Error::Dimension(format!("block of {} samples, expected K={k}", y_block.len())));
    }
    let (a, j) = (set.alphabet(), set.users());
    OracleBudget::default().check(a, j)?;

    let mut best_cost = f64::INFINITY;
    let mut best = vec![0; j];
    let mut symbols = vec![0; j];
    let total = a.pow(j as u32);
    for index in 0..total {
        // Most significant digit is user 0, so the walk is lexicographic.
        let mut rest = index;
        for u in (0..j).rev() {
            symbols[u] = rest % a;
            rest /= a;
        }
        let cost: f64 = (0..k)
            .map(|r| {
                let s: Complex = (0..j).map(|u| set.codeword(u, symbols[u])[r]).sum();
                (y_block[r] - s).norm_sqr()
            })
            .sum();
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&symbols);
        }
    }
    Ok(best)
}
