//! Missing-data imputation: EM-style decompositions over masked grids and
//! single-matrix thresholding baselines.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::decompose::{warm_start, FitOptions, SigmaInflation};
use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::linked::{BlockGrid, Decomposition, ModuleGrid};
use crate::shrinkage::{estimate_sigma_with, hard_threshold_matrix, soft_threshold_matrix, KappaEquation};
use crate::sweep::{self, Operator, Plan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingKind {
    Complete,
    /// Scattered entries only.
    Entrywise,
    /// Only whole rows or columns of blocks.
    Blockwise,
    Mixed,
}

/// Missingness inside one block, in block-local indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockMissing {
    pub i: usize,
    pub j: usize,
    pub count: usize,
    pub missing_rows: Vec<usize>,
    pub missing_cols: Vec<usize>,
    /// Missing entries outside the fully missing rows and columns.
    pub scattered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingPattern {
    pub kind: MissingKind,
    #[serde(skip)]
    pub mask: DMatrix<bool>,
    /// Row-major over the `I×J` grid.
    pub blocks: Vec<BlockMissing>,
}

impl MissingPattern {
    /// Classifies the grid's mask. A block with every entry missing is
    /// rejected since nothing about it can be estimated.
    pub fn from_grid(grid: &BlockGrid) -> Result<Self> {
        let layout = grid.layout();
        let mask = grid
            .mask()
            .cloned()
            .unwrap_or_else(|| DMatrix::from_element(layout.nrows(), layout.ncols(), false));
        let mut blocks = Vec::new();
        for (i, j) in layout.blocks() {
            let b = layout.block(&mask, i, j);
            let (m, n) = b.shape();
            let count = b.iter().filter(|&&x| x).count();
            if count == m * n {
                return Err(Error::validation(format!("block ({i},{j}) is entirely missing")));
            }
            let missing_rows: Vec<usize> = (0..m).filter(|&r| b.row(r).iter().all(|&x| x)).collect();
            let missing_cols: Vec<usize> = (0..n).filter(|&c| b.column(c).iter().all(|&x| x)).collect();
            let covered = missing_rows.len() * n + missing_cols.len() * m - missing_rows.len() * missing_cols.len();
            blocks.push(BlockMissing {
                i,
                j,
                count,
                scattered: count - covered,
                missing_rows,
                missing_cols,
            });
        }
        let any_scattered = blocks.iter().any(|b| b.scattered > 0);
        let any_blockwise = blocks.iter().any(|b| !b.missing_rows.is_empty() || !b.missing_cols.is_empty());
        let kind = match (any_scattered, any_blockwise) {
            (false, false) => MissingKind::Complete,
            (true, false) => MissingKind::Entrywise,
            (false, true) => MissingKind::Blockwise,
            (true, true) => MissingKind::Mixed,
        };
        Ok(MissingPattern { kind, mask, blocks })
    }

    /// `|missing|` per block as an `I×J` matrix.
    pub fn per_block_counts(&self, i_sets: usize, j_sets: usize) -> DMatrix<usize> {
        let mut out = DMatrix::zeros(i_sets, j_sets);
        for b in &self.blocks {
            out[(b.i, b.j)] = b.count;
        }
        out
    }

    fn has_scattered(&self) -> bool {
        self.blocks.iter().any(|b| b.scattered > 0)
    }
}

/// Per-block noise scales for masked data, given the data with missing
/// entries filled by the current imputation.
///
/// Fully missing rows and columns of a block are dropped and the noise is
/// estimated on the remaining submatrix. Scattered missing entries inside
/// that submatrix deflate the estimate, which is compensated by the factor
/// `size / (size − scattered)` applied to σ (or to σ² under
/// [`SigmaInflation::Variance`]).
pub fn sigma_for_missing(
    grid: &BlockGrid,
    pattern: &MissingPattern,
    filled: &DMatrix<f64>,
    equation: KappaEquation,
    inflation: SigmaInflation,
) -> Result<DMatrix<f64>> {
    block_sigmas(grid, pattern, filled, equation, Some(inflation))
}

fn block_sigmas(
    grid: &BlockGrid,
    pattern: &MissingPattern,
    filled: &DMatrix<f64>,
    equation: KappaEquation,
    inflation: Option<SigmaInflation>,
) -> Result<DMatrix<f64>> {
    let layout = grid.layout();
    let mut sigma = DMatrix::zeros(layout.n_row_sets(), layout.n_col_sets());
    for b in &pattern.blocks {
        let block = layout.block(filled, b.i, b.j);
        let rows: Vec<usize> = (0..block.nrows()).filter(|r| !b.missing_rows.contains(r)).collect();
        let cols: Vec<usize> = (0..block.ncols()).filter(|c| !b.missing_cols.contains(c)).collect();
        if rows.len() < 2 || cols.len() < 2 {
            return Err(Error::validation(format!(
                "block ({},{}) has fewer than two complete rows or columns; supply sigma values explicitly",
                b.i, b.j
            )));
        }
        let sub = block.select_rows(&rows).select_columns(&cols);
        let base = estimate_sigma_with(&sub, equation)
            .map_err(|e| Error::numerical(format!("noise estimate for block ({},{}) failed: {e}", b.i, b.j)))?
            .sigma_hat;
        let size = (rows.len() * cols.len()) as f64;
        let ratio = size / (size - b.scattered as f64);
        sigma[(b.i, b.j)] = match inflation {
            Some(SigmaInflation::Scale) => base * ratio,
            Some(SigmaInflation::Variance) => base * ratio.sqrt(),
            None => base,
        };
    }
    Ok(sigma)
}

fn impute_output(grid: &BlockGrid, structure: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = grid.data().clone();
    if let Some(mask) = grid.mask() {
        for ((v, &missing), &s) in out.iter_mut().zip(mask.iter()).zip(structure.iter()) {
            if missing {
                *v = s;
            }
        }
    }
    out
}

/// EVB decomposition of a masked grid, alternating between filling the
/// missing entries with the current structure and a module sweep.
///
/// Returns the decomposition and the data with missing entries replaced by
/// the fitted structure. With no mask this is exactly the complete-data fit.
pub fn ev_bidifac_impute(
    grid: &BlockGrid,
    modules: &ModuleGrid,
    opts: &FitOptions,
) -> Result<(Decomposition, DMatrix<f64>)> {
    opts.validate()?;
    modules.check_layout(grid.layout())?;
    let pattern = MissingPattern::from_grid(grid)?;
    let eq = opts.kappa_equation;
    let user = opts.user_sigma(grid.layout())?;
    // The inflation assumes filled entries carry signal without noise. A
    // zero fill carries neither, and the missing signal leaks into the
    // estimate, so the first cycle runs on the plain estimate; inflation
    // starts with the first end-of-cycle update.
    let sigma = match &user {
        Some(s) => s.clone(),
        None => block_sigmas(grid, &pattern, grid.data(), eq, None)?,
    };
    let update = |filled: &DMatrix<f64>| sigma_for_missing(grid, &pattern, filled, eq, opts.sigma_inflation);
    let sigma_update: Option<&sweep::SigmaUpdate<'_>> = if user.is_none() && pattern.has_scattered() {
        Some(&update)
    } else {
        None
    };
    let run = sweep::run(Plan {
        layout: grid.layout(),
        modules,
        data: grid.data(),
        mask: grid.mask(),
        sigma,
        sigma_update,
        warm_start: warm_start(grid, modules, opts),
        operator: Operator::Evb(eq),
        max_iterations: opts.max_iterations,
        rel_tolerance: opts.rel_tolerance,
        trace_lambdas: None,
    })?;
    let decomp = crate::decompose::decomposition_from_run(grid, modules, run)?;
    let imputed = impute_output(grid, &decomp.total_structure());
    Ok((decomp, imputed))
}

/// Nuclear-norm decomposition of a masked grid by the same fill-and-sweep
/// scheme. Noise scales follow `opts.sigma_mode` and stay fixed.
pub fn bidifac_plus_impute(
    grid: &BlockGrid,
    modules: &ModuleGrid,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<(Decomposition, DMatrix<f64>)> {
    let pattern = MissingPattern::from_grid(grid)?;
    let fixed = match opts.user_sigma(grid.layout())? {
        Some(s) => s,
        None => sigma_for_missing(grid, &pattern, grid.data(), opts.kappa_equation, opts.sigma_inflation)?,
    };
    let opts = FitOptions {
        sigma_mode: crate::decompose::SigmaMode::UserSupplied(fixed),
        ..opts.clone()
    };
    let (decomp, _) = crate::decompose::bidifac_plus_traced(grid, modules, lambdas, &opts)?;
    let imputed = impute_output(grid, &decomp.total_structure());
    Ok((decomp, imputed))
}

/// Outcome of a single-matrix EM imputation.
#[derive(Debug, Clone)]
pub struct EmImputation {
    /// Input with missing entries replaced by the fitted structure.
    pub imputed: DMatrix<f64>,
    pub structure: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_mask(x: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<()> {
    if mask.shape() != x.shape() {
        return Err(Error::validation("mask shape differs from data shape"));
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::validation("every entry is missing"));
    }
    if let Some(i) = x.iter().zip(mask.iter()).position(|(v, &m)| !m && !v.is_finite()) {
        return Err(Error::validation(format!("observed entry {i} is not finite")));
    }
    Ok(())
}

fn em_impute(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    opts: &FitOptions,
    op: impl Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
) -> Result<EmImputation> {
    opts.validate()?;
    check_mask(x, mask)?;
    let mut filled = x.clone();
    for (v, &m) in filled.iter_mut().zip(mask.iter()) {
        if m {
            *v = 0.0;
        }
    }
    let any_missing = mask.iter().any(|&m| m);
    let mut structure = DMatrix::zeros(x.nrows(), x.ncols());
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let next = op(&filled)?;
        iterations += 1;
        let norm = frobenius_sq(&next).sqrt();
        let change = frobenius_sq(&(&next - &structure)).sqrt();
        structure = next;
        for ((v, &m), &s) in filled.iter_mut().zip(mask.iter()).zip(structure.iter()) {
            if m {
                *v = s;
            }
        }
        if !any_missing || change <= opts.rel_tolerance * norm {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM imputation stopped after {iterations} iterations without converging");
    }
    Ok(EmImputation {
        imputed: filled,
        structure,
        iterations,
        converged,
    })
}

/// Soft-threshold EM imputation at penalty `lambda`.
pub fn em_impute_soft(x: &DMatrix<f64>, mask: &DMatrix<bool>, lambda: f64, opts: &FitOptions) -> Result<EmImputation> {
    em_impute(x, mask, opts, |f| Ok(soft_threshold_matrix(f, lambda)?.reconstruct()))
}

/// Hard-threshold (fixed-rank) EM imputation.
pub fn em_impute_hard(x: &DMatrix<f64>, mask: &DMatrix<bool>, rank: usize, opts: &FitOptions) -> Result<EmImputation> {
    em_impute(x, mask, opts, |f| Ok(hard_threshold_matrix(f, rank)?.reconstruct()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{ev_bidifac, SigmaMode};
    use crate::linked::enumerate_modules;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_mask(m: usize, n: usize, frac: f64, seed: u64) -> DMatrix<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() < frac)
    }

    fn low_rank_grid(seed: u64) -> BlockGrid {
        let u = gaussian(70, 2, seed);
        let v = gaussian(30, 2, seed + 1);
        let x = &u * v.transpose() * 0.8 + gaussian(70, 30, seed + 2);
        BlockGrid::new(crate::linked::GridLayout::new(vec![40, 30], vec![18, 12]).unwrap(), x, None).unwrap()
    }

    #[test]
    fn pattern_classification() {
        let grid = low_rank_grid(1);
        assert_eq!(MissingPattern::from_grid(&grid).unwrap().kind, MissingKind::Complete);

        let mut mask = DMatrix::from_element(70, 30, false);
        mask[(3, 4)] = true;
        let p = MissingPattern::from_grid(&grid.with_mask(Some(mask.clone())).unwrap()).unwrap();
        assert_eq!(p.kind, MissingKind::Entrywise);
        assert_eq!(p.blocks[0].scattered, 1);

        let mut block_mask = DMatrix::from_element(70, 30, false);
        for c in 0..18 {
            block_mask[(45, c)] = true;
        }
        let p = MissingPattern::from_grid(&grid.with_mask(Some(block_mask.clone())).unwrap()).unwrap();
        assert_eq!(p.kind, MissingKind::Blockwise);
        assert_eq!(p.blocks[2].missing_rows, vec![5]);
        assert_eq!(p.per_block_counts(2, 2)[(1, 0)], 18);

        block_mask[(3, 4)] = true;
        let p = MissingPattern::from_grid(&grid.with_mask(Some(block_mask)).unwrap()).unwrap();
        assert_eq!(p.kind, MissingKind::Mixed);

        let mut full = DMatrix::from_element(70, 30, false);
        for r in 40..70 {
            for c in 18..30 {
                full[(r, c)] = true;
            }
        }
        assert!(MissingPattern::from_grid(&grid.with_mask(Some(full)).unwrap()).is_err());
    }

    #[test]
    fn empty_mask_matches_complete_fit_exactly() {
        let grid = low_rank_grid(2);
        let modules = enumerate_modules(2, 2).unwrap();
        let opts = FitOptions::default();
        let a = ev_bidifac(&grid, &modules, &opts).unwrap();
        let (b, imputed) = ev_bidifac_impute(&grid, &modules, &opts).unwrap();
        assert_eq!(a.total_structure(), b.total_structure());
        assert_eq!(a.sigma(), b.sigma());
        assert_eq!(&imputed, grid.data());
    }

    #[test]
    fn fixed_point_and_observed_preservation() {
        let grid = low_rank_grid(3);
        let original = grid.data().clone();
        let mask = random_mask(70, 30, 0.2, 4);
        let masked = grid.with_mask(Some(mask.clone())).unwrap();
        let modules = enumerate_modules(2, 2).unwrap();
        let (decomp, imputed) = ev_bidifac_impute(&masked, &modules, &FitOptions::default()).unwrap();
        let s = decomp.total_structure();
        for idx in 0..mask.len() {
            if mask[idx] {
                assert_eq!(imputed[idx], s[idx]);
            } else {
                assert_eq!(imputed[idx], original[idx]);
            }
        }
    }

    #[test]
    fn blockwise_sigma_uses_complete_columns() {
        let x = gaussian(300, 60, 5) * 1.5;
        let mut mask = DMatrix::from_element(300, 60, false);
        for c in 0..6 {
            for r in 0..300 {
                mask[(r, c * 10)] = true;
            }
        }
        let grid = BlockGrid::single(x.clone(), Some(mask)).unwrap();
        let pattern = MissingPattern::from_grid(&grid).unwrap();
        assert_eq!(pattern.blocks[0].missing_cols.len(), 6);
        let sigma = sigma_for_missing(&grid, &pattern, grid.data(), KappaEquation::Ratio, SigmaInflation::Scale).unwrap();
        let keep: Vec<usize> = (0..60).filter(|c| c % 10 != 0).collect();
        let direct = estimate_sigma_with(&x.select_columns(&keep), KappaEquation::Ratio).unwrap().sigma_hat;
        assert_eq!(sigma[(0, 0)], direct);
    }

    #[test]
    fn inflation_rules() {
        let x = gaussian(200, 40, 6);
        let mask = random_mask(200, 40, 0.25, 7);
        let grid = BlockGrid::single(x, Some(mask)).unwrap();
        let pattern = MissingPattern::from_grid(&grid).unwrap();
        let count = pattern.blocks[0].count as f64;
        let scale = sigma_for_missing(&grid, &pattern, grid.data(), KappaEquation::Ratio, SigmaInflation::Scale).unwrap();
        let var = sigma_for_missing(&grid, &pattern, grid.data(), KappaEquation::Ratio, SigmaInflation::Variance).unwrap();
        let ratio = 8000.0 / (8000.0 - count);
        assert!((scale[(0, 0)] / var[(0, 0)] - ratio.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_complete_submatrix_rejected() {
        let x = gaussian(5, 4, 8);
        let mut mask = DMatrix::from_element(5, 4, false);
        for r in 0..5 {
            for c in 0..3 {
                mask[(r, c)] = true;
            }
        }
        let grid = BlockGrid::single(x, Some(mask)).unwrap();
        let modules = enumerate_modules(1, 1).unwrap();
        assert!(ev_bidifac_impute(&grid, &modules, &FitOptions::default()).is_err());
        let opts = FitOptions {
            sigma_mode: SigmaMode::UserSupplied(DMatrix::from_element(1, 1, 1.0)),
            ..FitOptions::default()
        };
        assert!(ev_bidifac_impute(&grid, &modules, &opts).is_ok());
    }

    #[test]
    fn em_examples() {
        let x = gaussian(12, 8, 9);
        let none = DMatrix::from_element(12, 8, false);
        let opts = FitOptions::default();
        let soft = em_impute_soft(&x, &none, 1.5, &opts).unwrap();
        assert_eq!(soft.structure, soft_threshold_matrix(&x, 1.5).unwrap().reconstruct());
        assert_eq!(soft.imputed, x);

        let mask = random_mask(12, 8, 0.3, 10);
        let zero = em_impute_soft(&x, &mask, 1e6, &opts).unwrap();
        let hard0 = em_impute_hard(&x, &mask, 0, &opts).unwrap();
        for idx in 0..mask.len() {
            if mask[idx] {
                assert_eq!(zero.imputed[idx], 0.0);
                assert_eq!(hard0.imputed[idx], 0.0);
            }
        }
    }

    #[test]
    fn rank_one_completion_is_exact() {
        let u = gaussian(10, 1, 11);
        let v = gaussian(6, 1, 12);
        let x = &u * v.transpose();
        let mut mask = DMatrix::from_element(10, 6, false);
        mask[(0, 0)] = true;
        mask[(4, 3)] = true;
        mask[(9, 5)] = true;
        let opts = FitOptions {
            max_iterations: 10_000,
            rel_tolerance: 1e-14,
            ..FitOptions::default()
        };
        let fit = em_impute_hard(&x, &mask, 1, &opts).unwrap();
        assert!((fit.imputed - x).abs().max() < 1e-6);
    }
}
