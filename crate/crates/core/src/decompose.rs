//! Fitting linked decompositions: the EVB fitter, the fixed-penalty
//! nuclear-norm baseline and a post-hoc identifiability check.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::linked::{BlockGrid, Decomposition, FitMeta, GridLayout, ModuleGrid, ModuleSpec};
use crate::shrinkage::{estimate_sigma_with, KappaEquation};
use crate::sweep::{self, Operator, Plan};

/// How per-block noise scales are obtained.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SigmaMode {
    /// Marginal noise estimate on each block separately.
    #[default]
    Estimated,
    /// Fixed `I×J` matrix of scales.
    UserSupplied(DMatrix<f64>),
}

/// Starting point of the EVB iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initialization {
    /// Start from the default-penalty nuclear-norm solution.
    ///
    /// From an all-zero start the first module visited soaks up structure
    /// that belongs to the more specific modules and the cycle settles in
    /// that configuration. The convex problem has no such trap.
    #[default]
    Convex,
    /// All modules zero.
    Zero,
}

/// How observed-fraction inflation is applied to noise scales re-estimated
/// from partially imputed blocks.
///
/// When the fill matches the signal, the filled block carries noise only in
/// its observed fraction `p`, so its marginal estimate is about `σ√p`.
/// Dividing the variance by `p` recovers `σ`; dividing σ itself by `p`
/// overshoots by `1/√p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaInflation {
    /// `σ ← σ' · MN / (MN − |missing|)`.
    Scale,
    /// `σ² ← σ'² · MN / (MN − |missing|)`.
    #[default]
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the relative Frobenius change of the scaled total structure
    /// between sweeps falls below this.
    pub rel_tolerance: f64,
    pub sigma_mode: SigmaMode,
    /// Carried for reproducibility records; the fitters are deterministic.
    pub rng_seed: u64,
    pub initialization: Initialization,
    pub kappa_equation: KappaEquation,
    pub sigma_inflation: SigmaInflation,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 500,
            rel_tolerance: 1e-8,
            sigma_mode: SigmaMode::Estimated,
            rng_seed: 0,
            initialization: Initialization::Convex,
            kappa_equation: KappaEquation::default(),
            sigma_inflation: SigmaInflation::Variance,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations must be at least 1"));
        }
        if !(self.rel_tolerance > 0.0) || !self.rel_tolerance.is_finite() {
            return Err(Error::validation(format!(
                "rel_tolerance must be positive, got {}",
                self.rel_tolerance
            )));
        }
        Ok(())
    }

    pub(crate) fn user_sigma(&self, layout: &GridLayout) -> Result<Option<DMatrix<f64>>> {
        match &self.sigma_mode {
            SigmaMode::Estimated => Ok(None),
            SigmaMode::UserSupplied(s) => {
                if s.shape() != (layout.n_row_sets(), layout.n_col_sets()) {
                    return Err(Error::validation(format!(
                        "supplied sigma is {}x{}, the grid is {}x{}",
                        s.nrows(),
                        s.ncols(),
                        layout.n_row_sets(),
                        layout.n_col_sets()
                    )));
                }
                if let Some(v) = s.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                    return Err(Error::validation(format!("supplied sigma values must be positive, got {v}")));
                }
                Ok(Some(s.clone()))
            }
        }
    }
}

/// `√(rows spanned) + √(columns spanned)`, the noise-level penalty for a
/// module on unit-variance data.
pub fn default_lambda(module: &ModuleSpec, row_set_sizes: &[usize], col_set_sizes: &[usize]) -> f64 {
    let rows: usize = row_set_sizes.iter().zip(&module.row_sets).filter(|(_, &b)| b).map(|(s, _)| s).sum();
    let cols: usize = col_set_sizes.iter().zip(&module.col_sets).filter(|(_, &b)| b).map(|(s, _)| s).sum();
    (rows as f64).sqrt() + (cols as f64).sqrt()
}

pub fn default_lambdas(layout: &GridLayout, modules: &ModuleGrid) -> Vec<f64> {
    modules
        .modules()
        .iter()
        .map(|m| default_lambda(m, layout.row_set_sizes(), layout.col_set_sizes()))
        .collect()
}

fn estimate_block_sigmas(grid: &BlockGrid, eq: KappaEquation) -> Result<DMatrix<f64>> {
    let layout = grid.layout();
    let mut sigma = DMatrix::zeros(layout.n_row_sets(), layout.n_col_sets());
    for (i, j) in layout.blocks() {
        sigma[(i, j)] = estimate_sigma_with(&grid.block(i, j), eq)
            .map_err(|e| Error::numerical(format!("noise estimate for block ({i},{j}) failed: {e}")))?
            .sigma_hat;
    }
    Ok(sigma)
}

fn require_complete(grid: &BlockGrid, what: &str) -> Result<()> {
    if !grid.is_fully_observed() {
        return Err(Error::validation(format!(
            "{what} needs fully observed data; use the imputation variant for masked entries"
        )));
    }
    Ok(())
}

pub(crate) fn decomposition_from_run(
    grid: &BlockGrid,
    modules: &ModuleGrid,
    run: sweep::Run,
) -> Result<Decomposition> {
    Decomposition::new(
        grid.layout().clone(),
        modules.clone(),
        run.factors,
        run.sigma,
        FitMeta {
            iterations: run.iterations,
            converged: run.converged,
            relative_change: run.relative_change,
        },
    )
}

/// Initial noise scales for a complete grid under the chosen mode.
pub(crate) fn initial_sigma(grid: &BlockGrid, opts: &FitOptions) -> Result<DMatrix<f64>> {
    match opts.user_sigma(grid.layout())? {
        Some(s) => Ok(s),
        None => estimate_block_sigmas(grid, opts.kappa_equation),
    }
}

pub(crate) fn warm_start(grid: &BlockGrid, modules: &ModuleGrid, opts: &FitOptions) -> Option<Vec<f64>> {
    match opts.initialization {
        Initialization::Convex => Some(default_lambdas(grid.layout(), modules)),
        Initialization::Zero => None,
    }
}

/// EVB decomposition of a fully observed linked grid.
///
/// Blocks are scaled to unit noise, modules are cycled through the EVB
/// operator on their residual submatrices until the scaled total structure
/// stops changing, and the result is mapped back to data units.
pub fn ev_bidifac(grid: &BlockGrid, modules: &ModuleGrid, opts: &FitOptions) -> Result<Decomposition> {
    require_complete(grid, "ev_bidifac")?;
    crate::impute::ev_bidifac_impute(grid, modules, opts).map(|(d, _)| d)
}

/// Nuclear-norm decomposition with per-module penalties (noise-scaled
/// units), returning the fit and the penalized objective after each sweep.
pub fn bidifac_plus_traced(
    grid: &BlockGrid,
    modules: &ModuleGrid,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<(Decomposition, Vec<f64>)> {
    opts.validate()?;
    modules.check_layout(grid.layout())?;
    if lambdas.len() != modules.len() {
        return Err(Error::validation(format!(
            "{} penalties supplied for {} modules",
            lambdas.len(),
            modules.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::validation(format!("penalties must be positive, got {l}")));
    }
    let sigma = initial_sigma(grid, opts)?;
    let run = sweep::run(Plan {
        layout: grid.layout(),
        modules,
        data: grid.data(),
        mask: grid.mask(),
        sigma,
        sigma_update: None,
        warm_start: None,
        operator: Operator::Soft(lambdas.to_vec()),
        max_iterations: opts.max_iterations,
        rel_tolerance: opts.rel_tolerance,
        trace_lambdas: Some(lambdas.to_vec()),
    })?;
    let objective = run.objective.clone();
    Ok((decomposition_from_run(grid, modules, run)?, objective))
}

pub fn bidifac_plus(grid: &BlockGrid, modules: &ModuleGrid, lambdas: &[f64], opts: &FitOptions) -> Result<Decomposition> {
    require_complete(grid, "bidifac_plus")?;
    bidifac_plus_traced(grid, modules, lambdas, opts).map(|(d, _)| d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    /// Stacked left factors linearly independent, per row set.
    pub condition2_ok: Vec<bool>,
    /// Stacked right factors linearly independent, per column set.
    pub condition3_ok: Vec<bool>,
    /// Smallest over largest singular value of each row-set stack
    /// (1 when the stack is empty).
    pub row_min_singular_ratio: Vec<f64>,
    pub col_min_singular_ratio: Vec<f64>,
    pub overall_ok: bool,
}

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

fn stack_independent(columns: Vec<Vec<f64>>, len: usize, tol: f64) -> Result<(bool, f64)> {
    if columns.is_empty() {
        return Ok((true, 1.0));
    }
    if columns.len() > len {
        return Ok((false, 0.0));
    }
    let stacked = DMatrix::from_fn(len, columns.len(), |r, c| columns[c][r]);
    let values = singular_values(&stacked)?;
    let largest = values[0];
    let smallest = values[values.len() - 1];
    if largest == 0.0 {
        return Ok((false, 0.0));
    }
    let ratio = smallest / largest;
    Ok((ratio > tol, ratio))
}

/// Checks that, within every row set, the left factor columns of all
/// modules touching it are linearly independent, and likewise for right
/// factors within every column set.
pub fn check_uniqueness(decomp: &Decomposition, rank_tolerance: f64) -> Result<UniquenessReport> {
    let layout = decomp.layout();
    let grid = decomp.module_grid();
    let mut report = UniquenessReport {
        condition2_ok: Vec::new(),
        condition3_ok: Vec::new(),
        row_min_singular_ratio: Vec::new(),
        col_min_singular_ratio: Vec::new(),
        overall_ok: true,
    };

    for i in 0..layout.n_row_sets() {
        let mut columns = Vec::new();
        for k in 0..grid.len() {
            let spec = grid.module(k);
            if !spec.row_sets[i] {
                continue;
            }
            // Offset of row set i inside module k's footprint.
            let offset: usize = (0..i).filter(|&a| spec.row_sets[a]).map(|a| layout.row_set_sizes()[a]).sum();
            let f = decomp.factors(k);
            for r in 0..f.rank() {
                columns.push(f.left.column(r).rows(offset, layout.row_set_sizes()[i]).iter().copied().collect());
            }
        }
        let (ok, ratio) = stack_independent(columns, layout.row_set_sizes()[i], rank_tolerance)?;
        report.condition2_ok.push(ok);
        report.row_min_singular_ratio.push(ratio);
    }

    for j in 0..layout.n_col_sets() {
        let mut columns = Vec::new();
        for k in 0..grid.len() {
            let spec = grid.module(k);
            if !spec.col_sets[j] {
                continue;
            }
            let offset: usize = (0..j).filter(|&b| spec.col_sets[b]).map(|b| layout.col_set_sizes()[b]).sum();
            let f = decomp.factors(k);
            for r in 0..f.rank() {
                columns.push(f.right.column(r).rows(offset, layout.col_set_sizes()[j]).iter().copied().collect());
            }
        }
        let (ok, ratio) = stack_independent(columns, layout.col_set_sizes()[j], rank_tolerance)?;
        report.condition3_ok.push(ok);
        report.col_min_singular_ratio.push(ratio);
    }

    report.overall_ok = report.condition2_ok.iter().chain(&report.condition3_ok).all(|&b| b);
    Ok(report)
}
