//! Synthetic low-rank-plus-noise designs.

use nalgebra::DMatrix;
use rand::Rng;

use super::rng::{log_uniform, standard_normal};
use crate::error::{Error, Result};
use crate::linalg::SvdTriple;
use crate::linked::{embed_submatrix, enumerate_modules, BlockGrid, Footprint, GridLayout, ModuleGrid};

/// `X = c·U·Vᵀ + E` with standard normal `U` (m×rank), `V` (n×rank), `E`.
/// Returns `(X, S)`.
pub fn gen_single_fixed(
    c: f64,
    m: usize,
    n: usize,
    rank: usize,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::domain(format!("signal scale must be positive, got {c}")));
    }
    let s = fixed_signal(c, m, n, rank, rng);
    let x = &s + standard_normal(rng, m, n);
    Ok((x, s))
}

fn fixed_signal(c: f64, m: usize, n: usize, rank: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let u = standard_normal(rng, m, rank);
    let v = standard_normal(rng, n, rank);
    u * v.transpose() * c
}

/// Rank-`rank` matrix with the singular vectors of a Gaussian product and
/// singular values drawn log-uniformly from `[lo, hi]` (absolute values).
pub fn het_signal(m: usize, n: usize, rank: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::domain(format!("need 0 < lo < hi, got [{lo}, {hi}]")));
    }
    if rank == 0 || rank > m.min(n) {
        return Err(Error::domain(format!("rank {rank} is not in 1..={}", m.min(n))));
    }
    let prime = standard_normal(rng, m, rank) * standard_normal(rng, n, rank).transpose();
    let basis = SvdTriple::compute(&prime)?.truncated(rank);
    let values: Vec<f64> = (0..rank).map(|_| log_uniform(rng, lo, hi)).collect();
    Ok(basis.reconstruct_with(&values))
}

/// Heterogeneous-signal design: singular values log-uniform in
/// `[lo·√(mn), hi·√(mn)]`. Returns `(X, S)`.
pub fn gen_hetero(
    m: usize,
    n: usize,
    rank: usize,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let scale = ((m * n) as f64).sqrt();
    let s = het_signal(m, n, rank, lo * scale, hi * scale, rng)?;
    let x = &s + standard_normal(rng, m, n);
    Ok((x, s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TwoLinkedSignal {
    /// All three components `c·U·Vᵀ`.
    Fixed(f64),
    /// Log-uniform singular values, `[0.05, 1]·√(rows·N)` per component.
    Hetero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoLinkedDesign {
    pub m1: usize,
    pub m2: usize,
    pub n: usize,
    pub rank: usize,
}

impl Default for TwoLinkedDesign {
    fn default() -> Self {
        TwoLinkedDesign {
            m1: 500,
            m2: 500,
            n: 100,
            rank: 5,
        }
    }
}

/// Truth of the two-source design: shared `S0` over all rows, `S1` and
/// `S2` on the first and second row set.
#[derive(Debug, Clone)]
pub struct TwoLinkedTruth {
    pub modules: ModuleGrid,
    /// Footprint submatrices in module order: shared, first, second.
    pub parts: Vec<DMatrix<f64>>,
}

impl TwoLinkedTruth {
    pub fn total(&self, layout: &GridLayout) -> DMatrix<f64> {
        total_of(layout, &self.modules, &self.parts)
    }
}

fn total_of(layout: &GridLayout, modules: &ModuleGrid, parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut total = DMatrix::zeros(layout.nrows(), layout.ncols());
    for (k, part) in parts.iter().enumerate() {
        Footprint::new(layout, modules.module(k)).add_into(&mut total, part, 1.0);
    }
    total
}

/// Two vertically stacked sources sharing columns: `X = S0 + [S1; S2] + E`.
pub fn gen_two_linked(
    signal: TwoLinkedSignal,
    design: TwoLinkedDesign,
    rng: &mut impl Rng,
) -> Result<(BlockGrid, TwoLinkedTruth)> {
    let layout = GridLayout::new(vec![design.m1, design.m2], vec![design.n])?;
    let modules = enumerate_modules(2, 1)?;
    let mut parts = Vec::with_capacity(3);
    for k in 0..modules.len() {
        let (m, n) = Footprint::new(&layout, modules.module(k)).shape();
        let part = match signal {
            TwoLinkedSignal::Fixed(c) => {
                if !(c > 0.0) {
                    return Err(Error::domain(format!("signal scale must be positive, got {c}")));
                }
                fixed_signal(c, m, n, design.rank, rng)
            }
            TwoLinkedSignal::Hetero => {
                let scale = ((m * n) as f64).sqrt();
                het_signal(m, n, design.rank, 0.05 * scale, scale, rng)?
            }
        };
        parts.push(part);
    }
    let truth = TwoLinkedTruth { modules, parts };
    let x = truth.total(&layout) + standard_normal(rng, layout.nrows(), layout.ncols());
    Ok((BlockGrid::new(layout, x, None)?, truth))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BidimDesign {
    pub row_set_sizes: Vec<usize>,
    pub col_set_sizes: Vec<usize>,
    pub rank: usize,
    pub active: usize,
}

impl Default for BidimDesign {
    fn default() -> Self {
        BidimDesign {
            row_set_sizes: vec![500, 500],
            col_set_sizes: vec![50, 50],
            rank: 2,
            active: 5,
        }
    }
}

/// Truth of a bidimensional design, module by module.
#[derive(Debug, Clone)]
pub struct BidimTruth {
    pub modules: ModuleGrid,
    /// Footprint submatrices; zero for inactive modules.
    pub parts: Vec<DMatrix<f64>>,
    pub active: Vec<bool>,
}

impl BidimTruth {
    pub fn total(&self, layout: &GridLayout) -> DMatrix<f64> {
        total_of(layout, &self.modules, &self.parts)
    }

    /// Each module as a full `M×N` matrix.
    pub fn full_parts(&self, layout: &GridLayout) -> Result<Vec<DMatrix<f64>>> {
        self.parts
            .iter()
            .enumerate()
            .map(|(k, p)| embed_submatrix(p, self.modules.module(k), layout))
            .collect()
    }
}

/// Fully enumerated grid where `design.active` modules, chosen uniformly,
/// carry heterogeneous rank-`design.rank` structure on their footprints and
/// the rest are exactly zero; unit Gaussian noise is added.
pub fn gen_bidim(design: &BidimDesign, rng: &mut impl Rng) -> Result<(BlockGrid, BidimTruth)> {
    let layout = GridLayout::new(design.row_set_sizes.clone(), design.col_set_sizes.clone())?;
    let modules = enumerate_modules(layout.n_row_sets(), layout.n_col_sets())?;
    if design.active > modules.len() {
        return Err(Error::domain(format!(
            "{} active modules requested but only {} exist",
            design.active,
            modules.len()
        )));
    }
    let mut active = vec![false; modules.len()];
    for k in rand::seq::index::sample(rng, modules.len(), design.active) {
        active[k] = true;
    }
    let mut parts = Vec::with_capacity(modules.len());
    for (k, &on) in active.iter().enumerate() {
        let (m, n) = Footprint::new(&layout, modules.module(k)).shape();
        parts.push(if on {
            let scale = ((m * n) as f64).sqrt();
            het_signal(m, n, design.rank, 0.05 * scale, scale, rng)?
        } else {
            DMatrix::zeros(m, n)
        });
    }
    let truth = BidimTruth { modules, parts, active };
    let x = truth.total(&layout) + standard_normal(rng, layout.nrows(), layout.ncols());
    Ok((BlockGrid::new(layout, x, None)?, truth))
}
