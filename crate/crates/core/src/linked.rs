//! Data model for bidimensionally linked block matrices.
//!
//! Blocks `X_ij` (`M_i × N_j`) share row sets across a grid row and column
//! sets across a grid column, and are stored concatenated as one `M×N`
//! matrix. A module is a pair (subset of row sets, subset of column sets);
//! its structure is zero outside that footprint.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, SvdTriple};

/// Row-set and column-set sizes with precomputed offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GridLayout {
    row_set_sizes: Vec<usize>,
    col_set_sizes: Vec<usize>,
    #[serde(skip)]
    row_offsets: Vec<usize>,
    #[serde(skip)]
    col_offsets: Vec<usize>,
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    let mut out = Vec::with_capacity(sizes.len() + 1);
    out.push(0);
    for s in sizes {
        acc += s;
        out.push(acc);
    }
    out
}

impl GridLayout {
    pub fn new(row_set_sizes: Vec<usize>, col_set_sizes: Vec<usize>) -> Result<Self> {
        if row_set_sizes.is_empty() || col_set_sizes.is_empty() {
            return Err(Error::validation("a grid needs at least one row set and one column set"));
        }
        if let Some(i) = row_set_sizes.iter().position(|&s| s == 0) {
            return Err(Error::validation(format!("row set {i} is empty")));
        }
        if let Some(j) = col_set_sizes.iter().position(|&s| s == 0) {
            return Err(Error::validation(format!("column set {j} is empty")));
        }
        Ok(GridLayout {
            row_offsets: offsets(&row_set_sizes),
            col_offsets: offsets(&col_set_sizes),
            row_set_sizes,
            col_set_sizes,
        })
    }

    /// A 1×1 layout for a single matrix.
    pub fn single(m: usize, n: usize) -> Result<Self> {
        Self::new(vec![m], vec![n])
    }

    pub fn row_set_sizes(&self) -> &[usize] {
        &self.row_set_sizes
    }

    pub fn col_set_sizes(&self) -> &[usize] {
        &self.col_set_sizes
    }

    pub fn n_row_sets(&self) -> usize {
        self.row_set_sizes.len()
    }

    pub fn n_col_sets(&self) -> usize {
        self.col_set_sizes.len()
    }

    pub fn nrows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn ncols(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    pub fn col_range(&self, j: usize) -> Range<usize> {
        self.col_offsets[j]..self.col_offsets[j + 1]
    }

    /// Row set containing global row `r`.
    pub fn row_set_of(&self, r: usize) -> usize {
        self.row_offsets.partition_point(|&o| o <= r) - 1
    }

    pub fn col_set_of(&self, c: usize) -> usize {
        self.col_offsets.partition_point(|&o| o <= c) - 1
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_row_sets()).flat_map(move |i| (0..self.n_col_sets()).map(move |j| (i, j)))
    }

    pub fn block_view<'a>(&self, full: &'a DMatrix<f64>, i: usize, j: usize) -> nalgebra::DMatrixView<'a, f64> {
        let r = self.row_range(i);
        let c = self.col_range(j);
        full.view((r.start, c.start), (r.len(), c.len()))
    }

    pub fn block<T: nalgebra::Scalar>(&self, full: &DMatrix<T>, i: usize, j: usize) -> DMatrix<T> {
        let r = self.row_range(i);
        let c = self.col_range(j);
        full.view((r.start, c.start), (r.len(), c.len())).into_owned()
    }
}

/// Linked data with an optional missingness mask (`true` = missing).
#[derive(Debug, Clone)]
pub struct BlockGrid {
    layout: GridLayout,
    data: DMatrix<f64>,
    mask: Option<DMatrix<bool>>,
}

impl BlockGrid {
    /// Wraps an already-concatenated matrix.
    pub fn new(layout: GridLayout, data: DMatrix<f64>, mask: Option<DMatrix<bool>>) -> Result<Self> {
        if data.shape() != (layout.nrows(), layout.ncols()) {
            return Err(Error::validation(format!(
                "data is {}x{} but the layout describes {}x{}",
                data.nrows(),
                data.ncols(),
                layout.nrows(),
                layout.ncols()
            )));
        }
        let mut data = data;
        let mask = match mask {
            Some(mask) => {
                if mask.shape() != data.shape() {
                    return Err(Error::validation("mask shape differs from data shape"));
                }
                // Masked values carry no information; zero them so they never
                // leak into arithmetic.
                for (v, &missing) in data.iter_mut().zip(mask.iter()) {
                    if missing {
                        *v = 0.0;
                    }
                }
                if mask.iter().any(|&m| m) {
                    Some(mask)
                } else {
                    None
                }
            }
            None => None,
        };
        if let Some((idx, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (idx % data.nrows(), idx / data.nrows());
            return Err(Error::validation(format!(
                "non-finite value at row {r}, column {c} is not marked missing"
            )));
        }
        Ok(BlockGrid { layout, data, mask })
    }

    /// Builds the grid from an `I×J` nested list of blocks.
    pub fn from_blocks(blocks: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        if blocks.is_empty() || blocks[0].is_empty() {
            return Err(Error::validation("no blocks supplied"));
        }
        let row_sizes: Vec<usize> = blocks.iter().map(|row| row[0].nrows()).collect();
        let col_sizes: Vec<usize> = blocks[0].iter().map(|b| b.ncols()).collect();
        let layout = GridLayout::new(row_sizes, col_sizes)?;
        let mut data = DMatrix::zeros(layout.nrows(), layout.ncols());
        for (i, row) in blocks.iter().enumerate() {
            if row.len() != layout.n_col_sets() {
                return Err(Error::validation(format!(
                    "grid row {i} has {} blocks, expected {}",
                    row.len(),
                    layout.n_col_sets()
                )));
            }
            for (j, b) in row.iter().enumerate() {
                let (m, n) = (layout.row_set_sizes()[i], layout.col_set_sizes()[j]);
                if b.shape() != (m, n) {
                    return Err(Error::validation(format!(
                        "block ({i},{j}) is {}x{}, expected {m}x{n}",
                        b.nrows(),
                        b.ncols()
                    )));
                }
                let r = layout.row_range(i);
                let c = layout.col_range(j);
                data.view_mut((r.start, c.start), (m, n)).copy_from(b);
            }
        }
        BlockGrid::new(layout, data, None)
    }

    pub fn single(x: DMatrix<f64>, mask: Option<DMatrix<bool>>) -> Result<Self> {
        BlockGrid::new(GridLayout::single(x.nrows(), x.ncols())?, x, mask)
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    /// Concatenated data; masked entries read as zero.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mask(&self) -> Option<&DMatrix<bool>> {
        self.mask.as_ref()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.is_none()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.layout.block(&self.data, i, j)
    }

    pub fn with_mask(&self, mask: Option<DMatrix<bool>>) -> Result<Self> {
        BlockGrid::new(self.layout.clone(), self.data.clone(), mask)
    }

    /// Subtracts, within every block, each row's mean over observed entries.
    /// Returns the centered grid and the `M×J` matrix of removed means.
    pub fn center_rows(&self) -> (BlockGrid, DMatrix<f64>) {
        let mut data = self.data.clone();
        let mut means = DMatrix::zeros(self.layout.nrows(), self.layout.n_col_sets());
        for j in 0..self.layout.n_col_sets() {
            let cols = self.layout.col_range(j);
            for r in 0..self.layout.nrows() {
                let (mut sum, mut count) = (0.0, 0usize);
                for c in cols.clone() {
                    if !self.is_missing(r, c) {
                        sum += data[(r, c)];
                        count += 1;
                    }
                }
                let mean = if count > 0 { sum / count as f64 } else { 0.0 };
                means[(r, j)] = mean;
                for c in cols.clone() {
                    if !self.is_missing(r, c) {
                        data[(r, c)] -= mean;
                    }
                }
            }
        }
        let grid = BlockGrid {
            layout: self.layout.clone(),
            data,
            mask: self.mask.clone(),
        };
        (grid, means)
    }

    pub fn is_missing(&self, r: usize, c: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[(r, c)])
    }
}

/// Adds removed row means (as returned by [`BlockGrid::center_rows`]) back.
pub fn add_row_means(layout: &GridLayout, x: &mut DMatrix<f64>, means: &DMatrix<f64>) {
    for j in 0..layout.n_col_sets() {
        for c in layout.col_range(j) {
            for r in 0..layout.nrows() {
                x[(r, c)] += means[(r, j)];
            }
        }
    }
}

/// One module: which row sets and column sets it spans.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ModuleSpec {
    pub row_sets: Vec<bool>,
    pub col_sets: Vec<bool>,
}

impl ModuleSpec {
    pub fn spans_all_rows(&self) -> bool {
        self.row_sets.iter().all(|&b| b)
    }

    pub fn spans_all_cols(&self) -> bool {
        self.col_sets.iter().all(|&b| b)
    }

    /// Human-readable footprint such as `rows{0,1} x cols{1}`.
    pub fn label(&self) -> String {
        let fmt = |v: &[bool]| {
            v.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!("rows{{{}}} x cols{{{}}}", fmt(&self.row_sets), fmt(&self.col_sets))
    }
}

/// The binary indicator matrices `R` (I×K) and `C` (J×K), stored per module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleGrid {
    n_row_sets: usize,
    n_col_sets: usize,
    modules: Vec<ModuleSpec>,
}

pub const DEFAULT_MODULE_CAP: usize = 4095;

impl ModuleGrid {
    pub fn new(n_row_sets: usize, n_col_sets: usize, modules: Vec<ModuleSpec>) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::validation("at least one module is required"));
        }
        for (k, m) in modules.iter().enumerate() {
            if m.row_sets.len() != n_row_sets || m.col_sets.len() != n_col_sets {
                return Err(Error::validation(format!(
                    "module {k} has indicator lengths {}/{}, expected {n_row_sets}/{n_col_sets}",
                    m.row_sets.len(),
                    m.col_sets.len()
                )));
            }
            if !m.row_sets.iter().any(|&b| b) || !m.col_sets.iter().any(|&b| b) {
                return Err(Error::validation(format!("module {k} spans no row set or no column set")));
            }
            if let Some(prev) = modules[..k].iter().position(|p| p == m) {
                return Err(Error::validation(format!("module {k} duplicates module {prev}")));
            }
        }
        Ok(ModuleGrid {
            n_row_sets,
            n_col_sets,
            modules,
        })
    }

    /// From indicator matrices given as rows of 0/1 (`r` is I×K, `c` is J×K).
    pub fn from_indicators(r: &[Vec<u8>], c: &[Vec<u8>]) -> Result<Self> {
        let k = r.first().map_or(0, |row| row.len());
        if r.iter().chain(c.iter()).any(|row| row.len() != k) {
            return Err(Error::validation("indicator rows must all have K entries"));
        }
        let bit = |v: u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::validation(format!("indicator entries must be 0 or 1, got {other}"))),
        };
        let modules = (0..k)
            .map(|col| {
                Ok(ModuleSpec {
                    row_sets: r.iter().map(|row| bit(row[col])).collect::<Result<_>>()?,
                    col_sets: c.iter().map(|row| bit(row[col])).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModuleGrid::new(r.len(), c.len(), modules)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn n_row_sets(&self) -> usize {
        self.n_row_sets
    }

    pub fn n_col_sets(&self) -> usize {
        self.n_col_sets
    }

    pub fn module(&self, k: usize) -> &ModuleSpec {
        &self.modules[k]
    }

    pub fn modules(&self) -> &[ModuleSpec] {
        &self.modules
    }

    /// `R` as an I×K 0/1 matrix.
    pub fn row_indicator(&self) -> DMatrix<u8> {
        DMatrix::from_fn(self.n_row_sets, self.len(), |i, k| self.modules[k].row_sets[i] as u8)
    }

    pub fn col_indicator(&self) -> DMatrix<u8> {
        DMatrix::from_fn(self.n_col_sets, self.len(), |j, k| self.modules[k].col_sets[j] as u8)
    }

    pub fn check_layout(&self, layout: &GridLayout) -> Result<()> {
        if layout.n_row_sets() != self.n_row_sets || layout.n_col_sets() != self.n_col_sets {
            return Err(Error::validation(format!(
                "modules are defined on a {}x{} grid but the data grid is {}x{}",
                self.n_row_sets,
                self.n_col_sets,
                layout.n_row_sets(),
                layout.n_col_sets()
            )));
        }
        Ok(())
    }

    pub fn position(&self, spec: &ModuleSpec) -> Option<usize> {
        self.modules.iter().position(|m| m == spec)
    }
}

/// Non-empty subsets of `count` sets in descending binary order, set 0 as
/// the most significant bit: the full set comes first.
fn subsets_descending(count: usize) -> Vec<Vec<bool>> {
    let full = (1usize << count) - 1;
    (1..=full)
        .rev()
        .map(|bits| (0..count).map(|i| bits & (1 << (count - 1 - i)) != 0).collect())
        .collect()
}

/// All `(2^I − 1)(2^J − 1)` modules, row subsets in the outer loop, globally
/// shared module first.
pub fn enumerate_modules(i_sets: usize, j_sets: usize) -> Result<ModuleGrid> {
    enumerate_modules_capped(i_sets, j_sets, DEFAULT_MODULE_CAP)
}

pub fn enumerate_modules_capped(i_sets: usize, j_sets: usize, cap: usize) -> Result<ModuleGrid> {
    if i_sets == 0 || j_sets == 0 {
        return Err(Error::validation("need at least one row set and one column set"));
    }
    let count = if i_sets >= 63 || j_sets >= 63 {
        None
    } else {
        ((1u128 << i_sets) - 1).checked_mul((1u128 << j_sets) - 1)
    };
    match count {
        Some(k) if k <= cap as u128 => {}
        _ => {
            return Err(Error::validation(format!(
                "enumerating all modules of a {i_sets}x{j_sets} grid exceeds the cap of {cap}; \
                 supply explicit row/column indicators instead"
            )))
        }
    }
    let rows = subsets_descending(i_sets);
    let cols = subsets_descending(j_sets);
    let modules = rows
        .iter()
        .flat_map(|r| {
            cols.iter().map(move |c| ModuleSpec {
                row_sets: r.clone(),
                col_sets: c.clone(),
            })
        })
        .collect();
    ModuleGrid::new(i_sets, j_sets, modules)
}

/// One block's placement inside a module submatrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintBlock {
    pub i: usize,
    pub j: usize,
    pub sub_rows: Range<usize>,
    pub sub_cols: Range<usize>,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Row and column ranges of the full matrix covered by a module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    row_sets: Vec<usize>,
    col_sets: Vec<usize>,
    row_ranges: Vec<Range<usize>>,
    col_ranges: Vec<Range<usize>>,
    nrows: usize,
    ncols: usize,
}

impl Footprint {
    pub fn new(layout: &GridLayout, spec: &ModuleSpec) -> Self {
        let row_sets: Vec<usize> = (0..layout.n_row_sets()).filter(|&i| spec.row_sets[i]).collect();
        let col_sets: Vec<usize> = (0..layout.n_col_sets()).filter(|&j| spec.col_sets[j]).collect();
        let row_ranges: Vec<_> = row_sets.iter().map(|&i| layout.row_range(i)).collect();
        let col_ranges: Vec<_> = col_sets.iter().map(|&j| layout.col_range(j)).collect();
        Footprint {
            nrows: row_ranges.iter().map(|r| r.len()).sum(),
            ncols: col_ranges.iter().map(|c| c.len()).sum(),
            row_sets,
            col_sets,
            row_ranges,
            col_ranges,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn row_sets(&self) -> &[usize] {
        &self.row_sets
    }

    pub fn col_sets(&self) -> &[usize] {
        &self.col_sets
    }

    pub fn blocks(&self) -> Vec<FootprintBlock> {
        let mut out = Vec::with_capacity(self.row_sets.len() * self.col_sets.len());
        let mut r0 = 0;
        for (a, rows) in self.row_ranges.iter().enumerate() {
            let mut c0 = 0;
            for (b, cols) in self.col_ranges.iter().enumerate() {
                out.push(FootprintBlock {
                    i: self.row_sets[a],
                    j: self.col_sets[b],
                    sub_rows: r0..r0 + rows.len(),
                    sub_cols: c0..c0 + cols.len(),
                    rows: rows.clone(),
                    cols: cols.clone(),
                });
                c0 += cols.len();
            }
            r0 += rows.len();
        }
        out
    }

    /// Restriction of a full `M×N` matrix to this footprint.
    pub fn extract<T: nalgebra::Scalar + num_zero::Zero>(&self, full: &DMatrix<T>) -> DMatrix<T> {
        let mut sub = DMatrix::from_element(self.nrows, self.ncols, T::zero());
        for b in self.blocks() {
            sub.view_mut((b.sub_rows.start, b.sub_cols.start), (b.rows.len(), b.cols.len()))
                .copy_from(&full.view((b.rows.start, b.cols.start), (b.rows.len(), b.cols.len())));
        }
        sub
    }

    /// Adds `scale · sub` into the footprint of `full`.
    pub fn add_into(&self, full: &mut DMatrix<f64>, sub: &DMatrix<f64>, scale: f64) {
        debug_assert_eq!(sub.shape(), self.shape());
        for b in self.blocks() {
            let mut target = full.view_mut((b.rows.start, b.cols.start), (b.rows.len(), b.cols.len()));
            let source = sub.view((b.sub_rows.start, b.sub_cols.start), (b.rows.len(), b.cols.len()));
            target.zip_apply(&source, |t, s| *t += scale * s);
        }
    }
}

mod num_zero {
    /// Minimal zero trait so `extract` works for both values and masks.
    pub trait Zero {
        fn zero() -> Self;
    }
    impl Zero for f64 {
        fn zero() -> Self {
            0.0
        }
    }
    impl Zero for bool {
        fn zero() -> Self {
            false
        }
    }
}

pub fn extract_submatrix(grid: &BlockGrid, modules: &ModuleGrid, k: usize) -> DMatrix<f64> {
    Footprint::new(grid.layout(), modules.module(k)).extract(grid.data())
}

/// Inverse of [`extract_submatrix`]: places `sub` on the module footprint of
/// an otherwise zero `M×N` matrix.
pub fn embed_submatrix(sub: &DMatrix<f64>, module: &ModuleSpec, layout: &GridLayout) -> Result<DMatrix<f64>> {
    let fp = Footprint::new(layout, module);
    if sub.shape() != fp.shape() {
        return Err(Error::validation(format!(
            "submatrix is {}x{} but the module footprint is {}x{}",
            sub.nrows(),
            sub.ncols(),
            fp.nrows,
            fp.ncols
        )));
    }
    let mut full = DMatrix::zeros(layout.nrows(), layout.ncols());
    fp.add_into(&mut full, sub, 1.0);
    Ok(full)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub converged: bool,
    pub relative_change: f64,
}

/// Fitted modules, stored factored on their footprints (unscaled units),
/// plus the per-block noise scales used.
#[derive(Debug, Clone)]
pub struct Decomposition {
    layout: GridLayout,
    modules: ModuleGrid,
    factors: Vec<SvdTriple>,
    sigma: DMatrix<f64>,
    pub fit: FitMeta,
}

impl Decomposition {
    pub fn new(
        layout: GridLayout,
        modules: ModuleGrid,
        factors: Vec<SvdTriple>,
        sigma: DMatrix<f64>,
        fit: FitMeta,
    ) -> Result<Self> {
        modules.check_layout(&layout)?;
        if factors.len() != modules.len() {
            return Err(Error::validation("one factor triple per module is required"));
        }
        for (k, f) in factors.iter().enumerate() {
            let fp = Footprint::new(&layout, modules.module(k));
            if (f.nrows(), f.ncols()) != fp.shape() {
                return Err(Error::validation(format!("factors of module {k} do not match its footprint")));
            }
        }
        if sigma.shape() != (layout.n_row_sets(), layout.n_col_sets()) {
            return Err(Error::validation("sigma must be I x J"));
        }
        Ok(Decomposition {
            layout,
            modules,
            factors,
            sigma,
            fit,
        })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn module_grid(&self) -> &ModuleGrid {
        &self.modules
    }

    pub fn factors(&self, k: usize) -> &SvdTriple {
        &self.factors[k]
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn rank(&self, k: usize) -> usize {
        self.factors[k].rank()
    }

    pub fn ranks(&self) -> Vec<usize> {
        (0..self.len()).map(|k| self.rank(k)).collect()
    }

    pub fn module_submatrix(&self, k: usize) -> DMatrix<f64> {
        self.factors[k].reconstruct()
    }

    /// Module `k` as a full `M×N` matrix.
    pub fn module_full(&self, k: usize) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.layout.nrows(), self.layout.ncols());
        if self.factors[k].rank() > 0 {
            Footprint::new(&self.layout, self.modules.module(k)).add_into(&mut full, &self.module_submatrix(k), 1.0);
        }
        full
    }

    /// `Σ_k Ŝ^(k)`.
    pub fn total_structure(&self) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.layout.nrows(), self.layout.ncols());
        for k in 0..self.len() {
            if self.factors[k].rank() > 0 {
                Footprint::new(&self.layout, self.modules.module(k)).add_into(&mut full, &self.module_submatrix(k), 1.0);
            }
        }
        full
    }

    /// `‖Ŝ^(k)‖²_F / Σ_k' ‖Ŝ^(k')‖²_F`, all zero when nothing was fitted.
    pub fn variance_explained(&self) -> Vec<f64> {
        let energy: Vec<f64> = self
            .factors
            .iter()
            .map(|f| f.values.iter().map(|d| d * d).sum::<f64>())
            .collect();
        let total: f64 = energy.iter().sum();
        if total == 0.0 {
            return vec![0.0; energy.len()];
        }
        energy.iter().map(|e| e / total).collect()
    }

    pub fn module_energy(&self, k: usize) -> f64 {
        frobenius_sq(&self.module_submatrix(k))
    }
}
