//! Cyclic block-coordinate engine shared by the complete-data fitters and
//! the imputation loop.
//!
//! Modules are kept dense on their footprints in data units. Each update
//! forms the module's residual submatrix, rescales it block by block to unit
//! noise, applies a singular-value operator and maps the result back.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, SvdTriple};
use crate::linked::{Footprint, GridLayout, ModuleGrid};
use crate::shrinkage::{evb_shrink_svd, soft_threshold_svd, KappaEquation, ShrinkageResult};

#[derive(Debug, Clone)]
pub(crate) enum Operator {
    Evb(KappaEquation),
    /// One penalty per module, in noise-scaled units.
    Soft(Vec<f64>),
}

impl Operator {
    fn apply(&self, k: usize, svd: SvdTriple) -> Result<ShrinkageResult> {
        match self {
            Operator::Evb(eq) => evb_shrink_svd(svd, 1.0, *eq),
            Operator::Soft(lambdas) => soft_threshold_svd(svd, lambdas[k]),
        }
    }
}

pub(crate) struct Engine<'a> {
    layout: &'a GridLayout,
    footprints: Vec<Footprint>,
    sigma: DMatrix<f64>,
    parts: Vec<DMatrix<f64>>,
    /// Nuclear norms of the scaled modules from their latest update.
    nuclear: Vec<f64>,
    ranks: Vec<usize>,
    total: DMatrix<f64>,
}

pub(crate) struct SweepStats {
    /// `‖ΔS̃‖_F / ‖S̃‖_F` of the scaled total structure.
    pub relative_change: f64,
}

impl<'a> Engine<'a> {
    pub fn new(layout: &'a GridLayout, modules: &ModuleGrid, sigma: DMatrix<f64>) -> Self {
        let footprints: Vec<Footprint> = modules.modules().iter().map(|m| Footprint::new(layout, m)).collect();
        let parts = footprints
            .iter()
            .map(|f| {
                let (m, n) = f.shape();
                DMatrix::zeros(m, n)
            })
            .collect();
        Engine {
            layout,
            nuclear: vec![0.0; footprints.len()],
            ranks: vec![0; footprints.len()],
            footprints,
            sigma,
            parts,
            total: DMatrix::zeros(layout.nrows(), layout.ncols()),
        }
    }

    pub fn total(&self) -> &DMatrix<f64> {
        &self.total
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn set_sigma(&mut self, sigma: DMatrix<f64>) {
        self.sigma = sigma;
    }

    fn scale_blocks(&self, fp: &Footprint, sub: &mut DMatrix<f64>, inverse: bool) {
        for b in fp.blocks() {
            let s = self.sigma[(b.i, b.j)];
            let f = if inverse { s } else { 1.0 / s };
            sub.view_mut((b.sub_rows.start, b.sub_cols.start), (b.rows.len(), b.cols.len()))
                .scale_mut(f);
        }
    }

    /// `total / σ` block by block.
    pub fn scaled_total(&self) -> DMatrix<f64> {
        let mut out = self.total.clone();
        for (i, j) in self.layout.blocks() {
            let r = self.layout.row_range(i);
            let c = self.layout.col_range(j);
            out.view_mut((r.start, c.start), (r.len(), c.len()))
                .scale_mut(1.0 / self.sigma[(i, j)]);
        }
        out
    }

    fn rebuild_total(&mut self) {
        self.total.fill(0.0);
        for (fp, part) in self.footprints.iter().zip(&self.parts) {
            fp.add_into(&mut self.total, part, 1.0);
        }
    }

    /// One pass over all modules in order against `data` (missing entries
    /// already filled in by the caller).
    pub fn sweep(&mut self, data: &DMatrix<f64>, op: &Operator) -> Result<SweepStats> {
        self.rebuild_total();
        let before = self.scaled_total();
        for k in 0..self.footprints.len() {
            let fp = &self.footprints[k];
            let mut residual = fp.extract(data);
            residual -= fp.extract(&self.total);
            residual += &self.parts[k];
            self.scale_blocks(fp, &mut residual, false);
            let svd = SvdTriple::compute(&residual)?;
            let shrunk = op.apply(k, svd)?;
            self.nuclear[k] = shrunk.shrunk_values.iter().sum();
            self.ranks[k] = shrunk.rank();
            let mut updated = shrunk.reconstruct();
            self.scale_blocks(fp, &mut updated, true);
            let delta = &updated - &self.parts[k];
            fp.add_into(&mut self.total, &delta, 1.0);
            self.parts[k] = updated;
        }
        self.rebuild_total();
        let after = self.scaled_total();
        if after.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("module updates produced non-finite values"));
        }
        let denom = frobenius_sq(&after).sqrt();
        let change = frobenius_sq(&(after - before)).sqrt();
        let relative_change = if denom > 0.0 {
            change / denom
        } else if change == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Ok(SweepStats { relative_change })
    }

    /// `½‖X̃ − S̃‖²` over observed entries plus `Σ λ_k ‖S̃^(k)‖_*`.
    pub fn penalized_objective(&self, data: &DMatrix<f64>, mask: Option<&DMatrix<bool>>, lambdas: &[f64]) -> f64 {
        let mut fit = 0.0;
        for (i, j) in self.layout.blocks() {
            let s = self.sigma[(i, j)];
            for c in self.layout.col_range(j) {
                for r in self.layout.row_range(i) {
                    if mask.is_some_and(|m| m[(r, c)]) {
                        continue;
                    }
                    let e = (data[(r, c)] - self.total[(r, c)]) / s;
                    fit += e * e;
                }
            }
        }
        0.5 * fit + lambdas.iter().zip(&self.nuclear).map(|(l, d)| l * d).sum::<f64>()
    }

    /// Factored modules in data units, truncated to their fitted ranks.
    pub fn into_factors(self) -> Result<Vec<SvdTriple>> {
        // Block rescaling preserves rank, so the operator's rank carries over.
        self.parts
            .iter()
            .zip(&self.ranks)
            .map(|(part, &rank)| {
                if rank == 0 {
                    return Ok(SvdTriple::zero(part.nrows(), part.ncols()));
                }
                Ok(SvdTriple::compute(part)?.truncated(rank))
            })
            .collect()
    }
}

/// Hook re-estimating per-block noise scales from the filled data and the
/// current structure, called after every main-phase sweep.
pub(crate) type SigmaUpdate<'f> = dyn Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + 'f;

pub(crate) struct Plan<'p> {
    pub layout: &'p GridLayout,
    pub modules: &'p ModuleGrid,
    pub data: &'p DMatrix<f64>,
    pub mask: Option<&'p DMatrix<bool>>,
    pub sigma: DMatrix<f64>,
    pub sigma_update: Option<&'p SigmaUpdate<'p>>,
    /// Soft-threshold penalties for an optional convex warm-start phase.
    pub warm_start: Option<Vec<f64>>,
    pub operator: Operator,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    /// Penalties for the per-sweep objective trace, if wanted.
    pub trace_lambdas: Option<Vec<f64>>,
}

pub(crate) struct Run {
    pub factors: Vec<SvdTriple>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub relative_change: f64,
    pub objective: Vec<f64>,
}

pub(crate) const WARM_START_SWEEPS: usize = 200;
const WARM_START_TOLERANCE: f64 = 1e-6;

fn fill_missing(filled: &mut DMatrix<f64>, mask: &DMatrix<bool>, total: &DMatrix<f64>) {
    for ((v, &missing), &s) in filled.iter_mut().zip(mask.iter()).zip(total.iter()) {
        if missing {
            *v = s;
        }
    }
}

pub(crate) fn run(plan: Plan<'_>) -> Result<Run> {
    let mut engine = Engine::new(plan.layout, plan.modules, plan.sigma);
    let mut filled = plan.data.clone();

    if let Some(lambdas) = plan.warm_start {
        let op = Operator::Soft(lambdas);
        let tol = plan.rel_tolerance.max(WARM_START_TOLERANCE);
        for _ in 0..WARM_START_SWEEPS.min(plan.max_iterations) {
            if let Some(mask) = plan.mask {
                fill_missing(&mut filled, mask, engine.total());
            }
            if engine.sweep(&filled, &op)?.relative_change < tol {
                break;
            }
        }
    }

    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut relative_change = f64::INFINITY;
    while iterations < plan.max_iterations {
        if let Some(mask) = plan.mask {
            fill_missing(&mut filled, mask, engine.total());
        }
        let stats = engine.sweep(&filled, &plan.operator)?;
        iterations += 1;
        relative_change = stats.relative_change;
        if let Some(lambdas) = &plan.trace_lambdas {
            objective.push(engine.penalized_objective(plan.data, plan.mask, lambdas));
        }
        if relative_change < plan.rel_tolerance {
            converged = true;
            break;
        }
        if let Some(update) = plan.sigma_update {
            if let Some(mask) = plan.mask {
                fill_missing(&mut filled, mask, engine.total());
            }
            engine.set_sigma(update(&filled)?);
        }
    }
    if !converged {
        log::warn!(
            "no convergence after {iterations} sweeps (relative change {relative_change:.3e})"
        );
    }
    let sigma = engine.sigma().clone();
    Ok(Run {
        factors: engine.into_factors()?,
        sigma,
        iterations,
        converged,
        relative_change,
        objective,
    })
}
