//! Reversed cumulative sum-product over cotangents and residual Jacobians:
//!
//! ```text
//! u_i = a_i + u_{i+1}·K_{i+1}        (u_{n-1} = a_{n-1})
//!     = Σ_{j ≥ i} a_j K_j K_{j-1} … K_{i+1}
//! ```
//!
//! Chain entry `i` maps a cotangent at position `i` back to position `i − 1`;
//! entry 0 never takes part in the sum.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::ResidualJacobian;
use crate::numkit::{Cotangent, Vec64};

/// Ordered residual Jacobians of uniform dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct KChain {
    entries: Vec<ResidualJacobian>,
    dim: usize,
}

impl KChain {
    pub fn new(entries: Vec<ResidualJacobian>) -> Result<Self> {
        let dim = entries
            .first()
            .map(ResidualJacobian::dim)
            .ok_or_else(|| Error::shape("KChain", "at least one entry", 0))?;
        if let Some(bad) = entries.iter().find(|k| k.dim() != dim) {
            return Err(Error::shape("KChain", dim, bad.dim()));
        }
        Ok(Self { entries, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[ResidualJacobian] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ResidualJacobian] {
        &mut self.entries
    }
}

/// `outer · inner` as matrices, i.e. a row vector crosses `outer` first.
pub fn compose_k(outer: &ResidualJacobian, inner: &ResidualJacobian) -> Result<ResidualJacobian> {
    ResidualJacobian::compose(outer, inner)
}

/// `w·K`.
pub fn apply_k(k: &ResidualJacobian, w: &Cotangent) -> Result<Cotangent> {
    k.apply(w)
}

fn check_inputs(a: &[Vec64], chain: &KChain) -> Result<()> {
    if a.len() != chain.len() {
        return Err(Error::shape("cumsumprod", chain.len(), a.len()));
    }
    if let Some(bad) = a.iter().find(|v| v.len() != chain.dim()) {
        return Err(Error::shape("cumsumprod", chain.dim(), bad.len()));
    }
    Ok(())
}

/// Single-threaded right-to-left recurrence. Reference for the parallel form.
pub fn cumsumprod_seq(a: &[Vec64], chain: &KChain) -> Result<Vec<Vec64>> {
    check_inputs(a, chain)?;
    let n = a.len();
    let mut u = a.to_vec();
    for i in (0..n - 1).rev() {
        let (lo, hi) = u.split_at_mut(i + 1);
        chain.entries[i + 1].apply_add_into(hi[0].as_slice(), lo[i].as_mut_slice());
    }
    Ok(u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    pub values: Vec<Vec64>,
    /// Number of doubling levels executed, `⌈log₂ n⌉`.
    pub levels: usize,
}

/// In-place Hillis–Steele state: running sums `u` and running products `p`.
///
/// `p[i]` maps position `i + 2^m` back to `i` at level `m`. The last entry
/// is never read by any sum and is kept only so both arrays have length `n`.
#[derive(Debug)]
pub struct ScanWorkspace {
    u: Vec<Vec64>,
    p: Vec<ResidualJacobian>,
}

impl ScanWorkspace {
    pub fn new(a: Vec<Vec64>, chain: &KChain) -> Result<Self> {
        check_inputs(&a, chain)?;
        let mut p: Vec<ResidualJacobian> = chain.entries[1..].to_vec();
        p.push(ResidualJacobian::identity(chain.dim()));
        Ok(Self { u: a, p })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn levels_needed(&self) -> usize {
        ceil_log2(self.u.len())
    }

    /// One doubling level with stride `s`. Ascending order keeps the
    /// in-place update correct: index `i` only reads `i + s`, which has not
    /// been touched yet at this level.
    fn level_in_place(&mut self, s: usize) -> Result<()> {
        let n = self.u.len();
        for i in 0..n.saturating_sub(s) {
            let (lo, hi) = self.u.split_at_mut(i + s);
            self.p[i].apply_add_into(hi[0].as_slice(), lo[i].as_mut_slice());
            self.p[i] = ResidualJacobian::compose(&self.p[i + s], &self.p[i])?;
        }
        Ok(())
    }

    /// Same arithmetic as [`Self::level_in_place`], with every index computed
    /// concurrently from the previous level and written back afterwards.
    fn level_parallel(&mut self, s: usize) -> Result<()> {
        let n = self.u.len();
        let (u, p) = (&self.u, &self.p);
        let updates: Vec<(Vec64, ResidualJacobian)> = (0..n.saturating_sub(s))
            .into_par_iter()
            .map(|i| {
                let mut ui = u[i].clone();
                p[i].apply_add_into(u[i + s].as_slice(), ui.as_mut_slice());
                Ok((ui, ResidualJacobian::compose(&p[i + s], &p[i])?))
            })
            .collect::<Result<_>>()?;
        for (i, (ui, pi)) in updates.into_iter().enumerate() {
            self.u[i] = ui;
            self.p[i] = pi;
        }
        Ok(())
    }

    pub fn run(mut self, parallel: bool) -> Result<ScanOutput> {
        let levels = self.levels_needed();
        for m in 0..levels {
            let s = 1usize << m;
            if parallel {
                self.level_parallel(s)?;
            } else {
                self.level_in_place(s)?;
            }
        }
        Ok(ScanOutput {
            values: self.u,
            levels,
        })
    }
}

pub(crate) fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Parallel cumulative sum-product (Hillis–Steele). Runs the per-level
/// updates on the rayon pool when more than one worker is available.
pub fn cumsumprod_par(a: Vec<Vec64>, chain: &KChain) -> Result<ScanOutput> {
    let parallel = rayon::current_num_threads() > 1;
    ScanWorkspace::new(a, chain)?.run(parallel)
}

/// Cumulative sum-product picking the cheaper schedule for the current pool:
/// Hillis–Steele with more than one worker, otherwise the O(n) recurrence in
/// place (reported as zero doubling levels).
pub fn cumsumprod(mut a: Vec<Vec64>, chain: &KChain) -> Result<ScanOutput> {
    if rayon::current_num_threads() > 1 {
        return cumsumprod_par(a, chain);
    }
    check_inputs(&a, chain)?;
    for i in (0..a.len() - 1).rev() {
        let (lo, hi) = a.split_at_mut(i + 1);
        chain.entries[i + 1].apply_add_into(hi[0].as_slice(), lo[i].as_mut_slice());
    }
    Ok(ScanOutput { values: a, levels: 0 })
}
