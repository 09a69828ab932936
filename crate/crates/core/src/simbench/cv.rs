//! Cross-validated imputation on real or simulated linked data.
//!
//! Each fold withholds whole columns, whole rows and scattered entries in
//! every block, refits each method on what is left, and scores the
//! withheld values by block-averaged relative squared error.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::experiment::{collect, ExperimentSpec, ResultTable, Scenario, Sink};
use super::metrics::mrse_miss;
use super::rng::{stream_id, stream_rng, PURPOSE_FOLD};
use crate::decompose::{default_lambdas, FitOptions, SigmaMode};
use crate::error::{Error, Result};
use crate::impute::{bidifac_plus_impute, ev_bidifac_impute};
use crate::linked::{enumerate_modules, BlockGrid, GridLayout};

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub folds: usize,
    pub col_frac: f64,
    pub row_frac: f64,
    pub entry_frac: f64,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 20,
            col_frac: 0.05,
            row_frac: 0.05,
            entry_frac: 0.05,
            seed: 0,
            fit: FitOptions::default(),
        }
    }
}

impl CvOptions {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::validation("folds must be at least 1"));
        }
        for f in [self.col_frac, self.row_frac, self.entry_frac] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::validation(format!("withheld fractions must lie in [0, 1), got {f}")));
            }
        }
        self.fit.validate()
    }
}

/// Withheld entries of one fold, split by how they were chosen.
#[derive(Debug, Clone)]
pub struct Fold {
    pub rows: DMatrix<bool>,
    pub cols: DMatrix<bool>,
    pub entries: DMatrix<bool>,
}

impl Fold {
    pub fn mask(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.rows.nrows(), self.rows.ncols(), |r, c| {
            self.rows[(r, c)] || self.cols[(r, c)] || self.entries[(r, c)]
        })
    }
}

/// One reserved row and column per block; never withheld in any fold.
fn reserved(layout: &GridLayout, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    layout
        .blocks()
        .map(|(i, j)| {
            (
                rng.random_range(0..layout.row_set_sizes()[i]),
                rng.random_range(0..layout.col_set_sizes()[j]),
            )
        })
        .collect()
}

fn pick(rng: &mut impl Rng, len: usize, skip: usize, frac: f64) -> Vec<usize> {
    let count = ((frac * len as f64).round() as usize).min(len - 1);
    sample(rng, len - 1, count)
        .into_iter()
        .map(|k| if k >= skip { k + 1 } else { k })
        .collect()
}

/// Builds the withheld sets of fold `f`. Entries are drawn outside the
/// withheld rows and columns so the three kinds stay disjoint except where
/// a withheld row crosses a withheld column.
pub fn make_fold(layout: &GridLayout, cv: &CvOptions, f: usize) -> Fold {
    let keep = reserved(layout, &mut stream_rng(cv.seed, stream_id(PURPOSE_FOLD, 1, 0)));
    let mut rng = stream_rng(cv.seed, stream_id(PURPOSE_FOLD, 0, f as u32));
    let shape = (layout.nrows(), layout.ncols());
    let mut fold = Fold {
        rows: DMatrix::from_element(shape.0, shape.1, false),
        cols: DMatrix::from_element(shape.0, shape.1, false),
        entries: DMatrix::from_element(shape.0, shape.1, false),
    };
    for ((i, j), &(keep_r, keep_c)) in layout.blocks().zip(&keep) {
        let (rr, cr) = (layout.row_range(i), layout.col_range(j));
        let rows = pick(&mut rng, rr.len(), keep_r, cv.row_frac);
        let cols = pick(&mut rng, cr.len(), keep_c, cv.col_frac);
        for &r in &rows {
            for c in cr.clone() {
                fold.rows[(rr.start + r, c)] = true;
            }
        }
        for &c in &cols {
            for r in rr.clone() {
                fold.cols[(r, cr.start + c)] = true;
            }
        }
        let free_rows: Vec<usize> = (0..rr.len()).filter(|r| *r != keep_r && !rows.contains(r)).collect();
        let free_cols: Vec<usize> = (0..cr.len()).filter(|c| *c != keep_c && !cols.contains(c)).collect();
        let pool = free_rows.len() * free_cols.len();
        let count = ((cv.entry_frac * (rr.len() * cr.len()) as f64).round() as usize).min(pool);
        for k in sample(&mut rng, pool, count) {
            let (r, c) = (free_rows[k % free_rows.len()], free_cols[k / free_rows.len()]);
            fold.entries[(rr.start + r, cr.start + c)] = true;
        }
    }
    fold
}

pub const CV_METHODS: [&str; 4] = ["EB-BIDI", "BIDIFAC", "EB-SEP", "EB-JOINT"];

fn impute_with(method: &str, grid: &BlockGrid, opts: &FitOptions) -> Result<DMatrix<f64>> {
    let layout = grid.layout();
    match method {
        "EB-BIDI" => {
            let modules = enumerate_modules(layout.n_row_sets(), layout.n_col_sets())?;
            Ok(ev_bidifac_impute(grid, &modules, opts)?.1)
        }
        "BIDIFAC" => {
            let modules = enumerate_modules(layout.n_row_sets(), layout.n_col_sets())?;
            let lambdas = default_lambdas(layout, &modules);
            let unit = FitOptions {
                sigma_mode: SigmaMode::UserSupplied(DMatrix::from_element(
                    layout.n_row_sets(),
                    layout.n_col_sets(),
                    1.0,
                )),
                ..opts.clone()
            };
            Ok(bidifac_plus_impute(grid, &modules, &lambdas, &unit)?.1)
        }
        "EB-SEP" => {
            let single = enumerate_modules(1, 1)?;
            let mut out = grid.data().clone();
            for (i, j) in layout.blocks() {
                let mask = grid.mask().map(|m| layout.block(m, i, j));
                let block = BlockGrid::single(grid.block(i, j), mask)?;
                let imputed = ev_bidifac_impute(&block, &single, opts)?.1;
                let (r, c) = (layout.row_range(i), layout.col_range(j));
                out.view_mut((r.start, c.start), (r.len(), c.len())).copy_from(&imputed);
            }
            Ok(out)
        }
        "EB-JOINT" => {
            let single = enumerate_modules(1, 1)?;
            let joint = BlockGrid::single(grid.data().clone(), grid.mask().cloned())?;
            Ok(ev_bidifac_impute(&joint, &single, opts)?.1)
        }
        other => Err(Error::validation(format!("unknown method {other}"))),
    }
}

/// Runs every fold for every method. Each row of the result carries the
/// fold index as its replicate; metrics are `mrse_entry`, `mrse_col`,
/// `mrse_row` and their mean `mrse`.
pub fn cv_impute(grid: &BlockGrid, cv: &CvOptions) -> Result<ResultTable> {
    cv.validate()?;
    if !grid.is_fully_observed() {
        return Err(Error::validation("cross-validation needs a fully observed grid"));
    }
    let started = Instant::now();
    let layout = grid.layout().clone();
    let sinks: Vec<Sink> = (0..cv.folds)
        .into_par_iter()
        .map(|f| {
            let mut sink = Sink::default();
            let fold = make_fold(&layout, cv, f);
            let masked = match grid.with_mask(Some(fold.mask())) {
                Ok(g) => g,
                Err(e) => {
                    sink.record("cv", "fold", f, Err(e));
                    return sink;
                }
            };
            for method in CV_METHODS {
                let metrics = impute_with(method, &masked, &cv.fit).and_then(|hat| {
                    let x = grid.data();
                    let e = mrse_miss(x, &hat, &fold.entries, &layout)?;
                    let c = mrse_miss(x, &hat, &fold.cols, &layout)?;
                    let r = mrse_miss(x, &hat, &fold.rows, &layout)?;
                    Ok(vec![("mrse_entry", e), ("mrse_col", c), ("mrse_row", r), ("mrse", (e + c + r) / 3.0)])
                });
                sink.record("cv", method, f, metrics);
            }
            sink
        })
        .collect();
    let mut spec = ExperimentSpec::new(Scenario::CvImpute);
    spec.rows = Some(layout.row_set_sizes().to_vec());
    spec.cols = Some(layout.col_set_sizes().to_vec());
    spec.folds = cv.folds;
    spec.cv_row_fraction = cv.row_frac;
    spec.cv_col_fraction = cv.col_frac;
    spec.cv_entry_fraction = cv.entry_frac;
    spec.seed = cv.seed;
    Ok(collect(&spec, sinks, started))
}
