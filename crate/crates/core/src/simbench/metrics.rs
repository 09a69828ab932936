//! Recovery and imputation error metrics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::impute::MissingPattern;
use crate::linked::{GridLayout, ModuleGrid};

fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::UndefinedMetric(format!("{what}: the reference has zero energy")));
    }
    Ok(num / den)
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

fn sq_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `‖S − Ŝ‖² / ‖S‖²`.
pub fn rse(s_true: &DMatrix<f64>, s_hat: &DMatrix<f64>) -> Result<f64> {
    check_shapes(s_true, s_hat)?;
    ratio(sq_err(s_true, s_hat), sq(s_true), "RSE")
}

/// `‖S − Ŝ‖² / ‖S − Ŝ_opt‖²`.
pub fn onse(s_true: &DMatrix<f64>, s_hat: &DMatrix<f64>, s_opt: &DMatrix<f64>) -> Result<f64> {
    check_shapes(s_true, s_hat)?;
    check_shapes(s_true, s_opt)?;
    ratio(sq_err(s_true, s_hat), sq_err(s_true, s_opt), "ONSE")
}

/// `Σ_k ‖S^(k) − Ŝ^(k)‖² / Σ_k ‖S^(k)‖²`.
pub fn rdse(truth: &[DMatrix<f64>], fitted: &[DMatrix<f64>]) -> Result<f64> {
    if truth.len() != fitted.len() {
        return Err(Error::validation(format!(
            "{} true modules but {} fitted",
            truth.len(),
            fitted.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, f) in truth.iter().zip(fitted) {
        check_shapes(t, f)?;
        num += sq_err(t, f);
        den += sq(t);
    }
    ratio(num, den, "RDSE")
}

/// Relative squared error of the signal over masked entries.
pub fn rse_miss(s_true: &DMatrix<f64>, s_hat: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<f64> {
    check_shapes(s_true, s_hat)?;
    if mask.shape() != s_true.shape() {
        return Err(Error::validation("mask shape differs from signal shape"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((t, h), &m) in s_true.iter().zip(s_hat.iter()).zip(mask.iter()) {
        if m {
            num += (t - h) * (t - h);
            den += t * t;
        }
    }
    ratio(num, den, "RSE_miss")
}

/// Imputation error for blockwise missingness. Entries in a missing row of
/// a block are compared with the sum of modules spanning every column set,
/// entries in a missing column with the sum of modules spanning every row
/// set; an entry in both counts in both sums.
pub fn rse_miss_blockwise(
    truth_full: &[DMatrix<f64>],
    modules: &ModuleGrid,
    layout: &GridLayout,
    s_hat: &DMatrix<f64>,
    pattern: &MissingPattern,
) -> Result<f64> {
    if truth_full.len() != modules.len() {
        return Err(Error::validation("one true module per module spec is required"));
    }
    let shape = (layout.nrows(), layout.ncols());
    if s_hat.shape() != shape || truth_full.iter().any(|t| t.shape() != shape) {
        return Err(Error::validation("blockwise metric inputs must all be M x N"));
    }
    let mut s_col_shared = DMatrix::zeros(shape.0, shape.1);
    let mut s_row_shared = DMatrix::zeros(shape.0, shape.1);
    for (k, t) in truth_full.iter().enumerate() {
        if modules.module(k).spans_all_cols() {
            s_col_shared += t;
        }
        if modules.module(k).spans_all_rows() {
            s_row_shared += t;
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for b in &pattern.blocks {
        let r0 = layout.row_range(b.i).start;
        let c0 = layout.col_range(b.j).start;
        for &lr in &b.missing_rows {
            for c in layout.col_range(b.j) {
                let t = s_col_shared[(r0 + lr, c)];
                num += (t - s_hat[(r0 + lr, c)]).powi(2);
                den += t * t;
            }
        }
        for &lc in &b.missing_cols {
            for r in layout.row_range(b.i) {
                let t = s_row_shared[(r, c0 + lc)];
                num += (t - s_hat[(r, c0 + lc)]).powi(2);
                den += t * t;
            }
        }
    }
    ratio(num, den, "blockwise RSE_miss")
}

/// Mean over blocks of `Σ_miss (X − Ŝ)² / Σ_miss X²`, where `x` holds the
/// withheld values. Blocks with no selected entries are skipped.
pub fn mrse_miss(x: &DMatrix<f64>, s_hat: &DMatrix<f64>, selected: &DMatrix<bool>, layout: &GridLayout) -> Result<f64> {
    check_shapes(x, s_hat)?;
    if selected.shape() != x.shape() {
        return Err(Error::validation("selection shape differs from data shape"));
    }
    let mut total = 0.0;
    let mut blocks = 0usize;
    for (i, j) in layout.blocks() {
        let (mut num, mut den) = (0.0, 0.0);
        let mut any = false;
        for c in layout.col_range(j) {
            for r in layout.row_range(i) {
                if selected[(r, c)] {
                    any = true;
                    num += (x[(r, c)] - s_hat[(r, c)]).powi(2);
                    den += x[(r, c)].powi(2);
                }
            }
        }
        if any {
            total += ratio(num, den, &format!("MRSE_miss block ({i},{j})"))?;
            blocks += 1;
        }
    }
    if blocks == 0 {
        return Err(Error::UndefinedMetric("MRSE_miss: no entries selected".into()));
    }
    Ok(total / blocks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linked::{enumerate_modules, BlockGrid};

    fn m(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, f)
    }

    #[test]
    fn trivial_values() {
        let s = m(4, 3, |i, j| (i + 2 * j) as f64 - 2.5);
        let z = DMatrix::zeros(4, 3);
        assert_eq!(rse(&s, &s).unwrap(), 0.0);
        assert_eq!(rse(&s, &z).unwrap(), 1.0);
        let half = &s * 0.5;
        assert_eq!(onse(&s, &half, &half).unwrap(), 1.0);
        assert_eq!(rdse(&[s.clone(), z.clone()], &[s.clone(), z.clone()]).unwrap(), 0.0);
        assert!(matches!(rse(&z, &s), Err(Error::UndefinedMetric(_))));
        assert!(matches!(onse(&s, &half, &s), Err(Error::UndefinedMetric(_))));
        assert!(rse(&s, &DMatrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn rse_miss_counts_only_masked() {
        let s = m(3, 3, |i, j| (i * 3 + j + 1) as f64);
        let mut hat = s.clone();
        hat[(0, 0)] = 0.0;
        hat[(2, 2)] = 100.0;
        let mut mask = DMatrix::from_element(3, 3, false);
        mask[(0, 0)] = true;
        mask[(1, 1)] = true;
        // (1 − 0)² / (1² + 5²)
        assert_eq!(rse_miss(&s, &hat, &mask).unwrap(), 1.0 / 26.0);
    }

    #[test]
    fn blockwise_uses_shared_truth() {
        let layout = GridLayout::new(vec![2, 2], vec![2, 2]).unwrap();
        let modules = enumerate_modules(2, 2).unwrap();
        // Module 0 is global, module 3 is rows{0} x cols{0,1}.
        let mut truth = vec![DMatrix::zeros(4, 4); 9];
        truth[0] = DMatrix::from_element(4, 4, 1.0);
        truth[3] = m(4, 4, |i, _| if i < 2 { 5.0 } else { 0.0 });
        let mut mask = DMatrix::from_element(4, 4, false);
        mask[(0, 0)] = true;
        mask[(0, 1)] = true;
        let grid = BlockGrid::new(layout.clone(), DMatrix::zeros(4, 4), Some(mask)).unwrap();
        let pattern = MissingPattern::from_grid(&grid).unwrap();
        // Row-missing truth is the column-spanning sum: 1 + 5 = 6.
        let hat = DMatrix::from_element(4, 4, 6.0);
        assert_eq!(rse_miss_blockwise(&truth, &modules, &layout, &hat, &pattern).unwrap(), 0.0);
        let hat = DMatrix::from_element(4, 4, 3.0);
        assert_eq!(rse_miss_blockwise(&truth, &modules, &layout, &hat, &pattern).unwrap(), 0.25);
    }

    #[test]
    fn mrse_zero_prediction_is_one() {
        let layout = GridLayout::new(vec![3, 2], vec![2, 2]).unwrap();
        let x = m(5, 4, |i, j| (i as f64) - (j as f64) * 0.7 + 0.3);
        let mut sel = DMatrix::from_element(5, 4, false);
        sel[(0, 0)] = true;
        sel[(4, 3)] = true;
        sel[(3, 0)] = true;
        assert_eq!(mrse_miss(&x, &DMatrix::zeros(5, 4), &sel, &layout).unwrap(), 1.0);
        assert_eq!(mrse_miss(&x, &x, &sel, &layout).unwrap(), 0.0);
        let none = DMatrix::from_element(5, 4, false);
        assert!(mrse_miss(&x, &x, &none, &layout).is_err());
    }
}
