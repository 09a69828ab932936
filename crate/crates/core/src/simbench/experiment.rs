//! Experiment specifications, the replicate runner and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generators::{
    gen_bidim, gen_hetero, gen_single_fixed, gen_two_linked, BidimDesign, BidimTruth, TwoLinkedDesign,
    TwoLinkedSignal,
};
use super::metrics::{onse, rdse, rse, rse_miss, rse_miss_blockwise};
use super::rng::{stream_id, stream_rng, PURPOSE_DATA, PURPOSE_MASK};
use crate::decompose::{
    bidifac_plus, check_uniqueness, default_lambdas, ev_bidifac, FitOptions, SigmaInflation, SigmaMode, DEFAULT_RANK_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::impute::{bidifac_plus_impute, em_impute_hard, em_impute_soft, ev_bidifac_impute, MissingPattern};
use crate::linalg::SvdTriple;
use crate::linked::{enumerate_modules, BlockGrid, Decomposition, GridLayout};
use crate::shrinkage::{
    estimate_sigma_from_values, evb_shrink_svd, hard_threshold_svd, oracle_svd, soft_threshold_svd, KappaEquation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Single matrix, `c·U·Vᵀ` signal over a grid of `c`.
    #[serde(rename = "single-fixed-s2n")]
    SingleFixedS2N,
    /// Single matrix with log-uniform singular values; with
    /// `missing_fractions` it becomes an imputation study.
    SingleHetero,
    TwoLinked,
    TwoLinkedHetero,
    Bidim,
    BidimImpute,
    CvImpute,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::SingleFixedS2N => "single-fixed-s2n",
            Scenario::SingleHetero => "single-hetero",
            Scenario::TwoLinked => "two-linked",
            Scenario::TwoLinkedHetero => "two-linked-hetero",
            Scenario::Bidim => "bidim",
            Scenario::BidimImpute => "bidim-impute",
            Scenario::CvImpute => "cv-impute",
        }
    }

    fn default_dims(self) -> (Vec<usize>, Vec<usize>, usize) {
        match self {
            Scenario::SingleFixedS2N | Scenario::SingleHetero => (vec![1000], vec![100], 10),
            Scenario::TwoLinked | Scenario::TwoLinkedHetero => (vec![500, 500], vec![100], 5),
            Scenario::Bidim | Scenario::BidimImpute | Scenario::CvImpute => (vec![500, 500], vec![50, 50], 2),
        }
    }
}

pub const C_MIN: f64 = 0.05;
pub const C_MAX: f64 = 1.0;

fn default_replicates() -> usize {
    20
}
fn default_c_points() -> usize {
    10
}
fn default_entry_fraction() -> f64 {
    0.2
}
fn default_line_fraction() -> f64 {
    0.1
}
fn default_folds() -> usize {
    20
}
fn default_cv_fraction() -> f64 {
    0.05
}

/// Everything needed to regenerate a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Row-set sizes; scenario default when absent.
    #[serde(default)]
    pub rows: Option<Vec<usize>>,
    #[serde(default)]
    pub cols: Option<Vec<usize>>,
    #[serde(default)]
    pub rank: Option<usize>,
    /// Explicit signal scales; otherwise `c_points` log-spaced values
    /// spanning `[0.05, 1]`.
    #[serde(default)]
    pub c_values: Option<Vec<f64>>,
    #[serde(default = "default_c_points")]
    pub c_points: usize,
    /// Entrywise missing fractions for single-matrix imputation.
    #[serde(default)]
    pub missing_fractions: Vec<f64>,
    /// Entrywise missing fraction per block for linked imputation.
    #[serde(default = "default_entry_fraction")]
    pub entry_fraction: f64,
    /// Fraction of rows and of columns removed per block for blockwise
    /// missingness.
    #[serde(default = "default_line_fraction")]
    pub line_fraction: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_cv_fraction")]
    pub cv_row_fraction: f64,
    #[serde(default = "default_cv_fraction")]
    pub cv_col_fraction: f64,
    #[serde(default = "default_cv_fraction")]
    pub cv_entry_fraction: f64,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub rel_tolerance: Option<f64>,
    #[serde(default)]
    pub sigma_inflation: SigmaInflation,
    #[serde(default)]
    pub kappa_equation: KappaEquation,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario) -> Self {
        ExperimentSpec {
            scenario,
            replicates: default_replicates(),
            seed: 0,
            rows: None,
            cols: None,
            rank: None,
            c_values: None,
            c_points: default_c_points(),
            missing_fractions: Vec::new(),
            entry_fraction: default_entry_fraction(),
            line_fraction: default_line_fraction(),
            folds: default_folds(),
            cv_row_fraction: default_cv_fraction(),
            cv_col_fraction: default_cv_fraction(),
            cv_entry_fraction: default_cv_fraction(),
            max_iterations: None,
            rel_tolerance: None,
            sigma_inflation: SigmaInflation::default(),
            kappa_equation: KappaEquation::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::validation(format!("experiment spec: {}", e.message())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn row_sizes(&self) -> Vec<usize> {
        self.rows.clone().unwrap_or_else(|| self.scenario.default_dims().0)
    }

    pub fn col_sizes(&self) -> Vec<usize> {
        self.cols.clone().unwrap_or_else(|| self.scenario.default_dims().1)
    }

    pub fn signal_rank(&self) -> usize {
        self.rank.unwrap_or_else(|| self.scenario.default_dims().2)
    }

    /// The signal-scale grid: explicit values or log-spaced over `[0.05, 1]`.
    pub fn c_grid(&self) -> Vec<f64> {
        if let Some(v) = &self.c_values {
            return v.clone();
        }
        let p = self.c_points;
        if p == 1 {
            return vec![C_MIN];
        }
        (0..p)
            .map(|k| (C_MIN.ln() + (C_MAX.ln() - C_MIN.ln()) * k as f64 / (p - 1) as f64).exp())
            .collect()
    }

    pub fn fit_options(&self) -> FitOptions {
        let d = FitOptions::default();
        FitOptions {
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            rel_tolerance: self.rel_tolerance.unwrap_or(d.rel_tolerance),
            rng_seed: self.seed,
            sigma_inflation: self.sigma_inflation,
            kappa_equation: self.kappa_equation,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(msg));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        let (rows, cols, rank) = (self.row_sizes(), self.col_sizes(), self.signal_rank());
        if rows.is_empty() || cols.is_empty() || rows.iter().chain(&cols).any(|&s| s == 0) {
            return bad("rows and cols must list positive sizes".into());
        }
        let expected_sets = match self.scenario {
            Scenario::SingleFixedS2N | Scenario::SingleHetero => Some((1, 1)),
            Scenario::TwoLinked | Scenario::TwoLinkedHetero => Some((2, 1)),
            _ => None,
        };
        if let Some((i, j)) = expected_sets {
            if rows.len() != i || cols.len() != j {
                return bad(format!(
                    "{} needs {i} row set(s) and {j} column set(s)",
                    self.scenario.name()
                ));
            }
        }
        let smallest = rows.iter().chain(&cols).copied().min().unwrap_or(0);
        if rank == 0 || rank > smallest {
            return bad(format!("rank {rank} must be between 1 and the smallest set size {smallest}"));
        }
        if self.c_values.is_none() && self.c_points == 0 {
            return bad("c_points must be at least 1".into());
        }
        if let Some(c) = self.c_grid().iter().find(|c| !(C_MIN..=C_MAX).contains(*c)) {
            return bad(format!("signal scale {c} lies outside [{C_MIN}, {C_MAX}]"));
        }
        for f in self
            .missing_fractions
            .iter()
            .chain([&self.entry_fraction, &self.line_fraction])
            .chain([&self.cv_row_fraction, &self.cv_col_fraction, &self.cv_entry_fraction])
        {
            if !(0.0..1.0).contains(f) {
                return bad(format!("missing fractions must lie in [0, 1), got {f}"));
            }
        }
        if self.scenario == Scenario::CvImpute && self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        self.fit_options().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub setting: String,
    pub method: String,
    pub replicate: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub setting: String,
    pub method: String,
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub setting: String,
    pub method: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultTable {
    pub spec: ExperimentSpec,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    /// Not part of any serialized output, which must be reproducible.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

impl ResultTable {
    pub fn values(&self, setting: &str, method: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.setting == setting && r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Value per replicate, for paired comparisons.
    pub fn by_replicate(&self, setting: &str, method: &str, metric: &str) -> BTreeMap<usize, f64> {
        self.rows
            .iter()
            .filter(|r| r.setting == setting && r.method == method && r.metric == metric)
            .map(|r| (r.replicate, r.value))
            .collect()
    }

    pub fn settings(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.setting) {
                out.push(r.setting.clone());
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let key = (r.setting.clone(), r.method.clone(), r.metric.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r.value),
                None => groups.push((key, vec![r.value])),
            }
        }
        groups
            .into_iter()
            .map(|((setting, method, metric), mut v)| {
                v.sort_by(f64::total_cmp);
                SummaryRow {
                    setting,
                    method,
                    metric,
                    n: v.len(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    median: quantile(&v, 0.5),
                    q25: quantile(&v, 0.25),
                    q75: quantile(&v, 0.75),
                    min: v[0],
                    max: v[v.len() - 1],
                }
            })
            .collect()
    }

    /// Tab-separated long table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scenario\tsetting\tmethod\treplicate\tmetric\tvalue\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.spec.scenario.name(),
                r.setting,
                r.method,
                r.replicate,
                r.metric,
                r.value
            );
        }
        out
    }

    pub fn failures_tsv(&self) -> String {
        let mut out = String::from("setting\tmethod\treplicate\tmessage\n");
        for f in &self.failures {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", f.setting, f.method, f.replicate, f.message.replace(['\t', '\n'], " "));
        }
        out
    }

    /// Machine-readable summary: spec, per-group statistics, failure count.
    pub fn summary_json(&self) -> String {
        let value = serde_json::json!({
            "scenario": self.spec.scenario.name(),
            "spec": &self.spec,
            "summary": self.summary(),
            "failures": self.failures.len(),
        });
        serde_json::to_string_pretty(&value).expect("summary serializes") + "\n"
    }
}

/// Rows and failures produced by one replicate.
#[derive(Default)]
pub(crate) struct Sink {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
}

impl Sink {
    pub fn record(&mut self, setting: &str, method: &str, replicate: usize, metrics: Result<Vec<(&str, f64)>>) {
        match metrics {
            Ok(list) => {
                for (metric, value) in list {
                    self.rows.push(ResultRow {
                        setting: setting.to_string(),
                        method: method.to_string(),
                        replicate,
                        metric: metric.to_string(),
                        value,
                    });
                }
            }
            Err(e) => self.failures.push(Failure {
                setting: setting.to_string(),
                method: method.to_string(),
                replicate,
                message: e.to_string(),
            }),
        }
    }
}

pub(crate) fn collect(spec: &ExperimentSpec, sinks: Vec<Sink>, started: Instant) -> ResultTable {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for s in sinks {
        rows.extend(s.rows);
        failures.extend(s.failures);
    }
    ResultTable {
        spec: spec.clone(),
        rows,
        failures,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    }
}

fn format_level(prefix: &str, v: f64) -> String {
    format!("{prefix}={v}")
}

/// Runs every replicate of every setting in parallel (one independent RNG
/// stream per replicate) and gathers the metrics in a fixed order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let started = Instant::now();
    if spec.scenario == Scenario::CvImpute {
        let mut rng = stream_rng(spec.seed, stream_id(PURPOSE_DATA, 0, 0));
        let design = bidim_design(spec);
        let (grid, _) = gen_bidim(&design, &mut rng)?;
        let cv = super::cv::CvOptions {
            folds: spec.folds,
            col_frac: spec.cv_col_fraction,
            row_frac: spec.cv_row_fraction,
            entry_frac: spec.cv_entry_fraction,
            seed: spec.seed,
            fit: spec.fit_options(),
        };
        let mut table = super::cv::cv_impute(&grid, &cv)?;
        table.spec = spec.clone();
        table.wall_time_seconds = started.elapsed().as_secs_f64();
        return Ok(table);
    }

    let settings: Vec<(String, Job)> = match spec.scenario {
        Scenario::SingleFixedS2N => spec
            .c_grid()
            .into_iter()
            .map(|c| (format_level("c", c), Job::SingleFixed(c)))
            .collect(),
        Scenario::SingleHetero if spec.missing_fractions.is_empty() => vec![("hetero".into(), Job::SingleHetero)],
        Scenario::SingleHetero => spec
            .missing_fractions
            .iter()
            .map(|&f| (format_level("missing", f), Job::SingleMissing(f)))
            .collect(),
        Scenario::TwoLinked => spec
            .c_grid()
            .into_iter()
            .map(|c| (format_level("c", c), Job::TwoLinked(TwoLinkedSignal::Fixed(c))))
            .collect(),
        Scenario::TwoLinkedHetero => vec![("hetero".into(), Job::TwoLinked(TwoLinkedSignal::Hetero))],
        Scenario::Bidim => vec![("complete".into(), Job::Bidim)],
        Scenario::BidimImpute => vec![
            ("entrywise".into(), Job::BidimImpute(MaskKind::Entrywise)),
            ("blockwise".into(), Job::BidimImpute(MaskKind::Blockwise)),
        ],
        Scenario::CvImpute => unreachable!("handled above"),
    };

    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..spec.replicates).map(move |r| (s, r)))
        .collect();
    let sinks: Vec<Sink> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (label, job) = &settings[s];
            let mut sink = Sink::default();
            if let Err(e) = run_job(spec, *job, s, r, label, &mut sink) {
                sink.record(label, "generate", r, Err(e));
            }
            sink
        })
        .collect();
    Ok(collect(spec, sinks, started))
}

#[derive(Debug, Clone, Copy)]
enum Job {
    SingleFixed(f64),
    SingleHetero,
    SingleMissing(f64),
    TwoLinked(TwoLinkedSignal),
    Bidim,
    BidimImpute(MaskKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaskKind {
    Entrywise,
    Blockwise,
}

fn run_job(spec: &ExperimentSpec, job: Job, setting: usize, replicate: usize, label: &str, sink: &mut Sink) -> Result<()> {
    // Imputation settings share their data across missingness levels so
    // that levels are compared on the same matrices.
    let data_setting = match job {
        Job::SingleMissing(_) | Job::BidimImpute(_) => 0,
        _ => setting as u32,
    };
    let mut rng = stream_rng(spec.seed, stream_id(PURPOSE_DATA, data_setting, replicate as u32));
    let mut mask_rng = stream_rng(spec.seed, stream_id(PURPOSE_MASK, setting as u32, replicate as u32));
    let (m, n, rank) = (spec.row_sizes()[0], spec.col_sizes()[0], spec.signal_rank());
    let opts = spec.fit_options();
    match job {
        Job::SingleFixed(c) => {
            let (x, s) = gen_single_fixed(c, m, n, rank, &mut rng)?;
            single_complete(&x, &s, rank, opts.kappa_equation, label, replicate, sink)
        }
        Job::SingleHetero => {
            let (x, s) = gen_hetero(m, n, rank, C_MIN, C_MAX, &mut rng)?;
            single_complete(&x, &s, rank, opts.kappa_equation, label, replicate, sink)
        }
        Job::SingleMissing(frac) => {
            let (x, s) = gen_hetero(m, n, rank, C_MIN, C_MAX, &mut rng)?;
            let layout = GridLayout::single(m, n)?;
            let mask = entrywise_mask(&layout, frac, &mut mask_rng);
            single_missing(&x, &s, &mask, rank, &opts, label, replicate, sink)
        }
        Job::TwoLinked(signal) => {
            let design = TwoLinkedDesign {
                m1: spec.row_sizes()[0],
                m2: spec.row_sizes()[1],
                n,
                rank,
            };
            let (grid, truth) = gen_two_linked(signal, design, &mut rng)?;
            let total = truth.total(grid.layout());
            let full: Vec<DMatrix<f64>> = truth
                .parts
                .iter()
                .enumerate()
                .map(|(k, p)| crate::linked::embed_submatrix(p, truth.modules.module(k), grid.layout()))
                .collect::<Result<_>>()?;
            linked_complete(&grid, &truth.modules, &total, &full, None, &opts, label, replicate, sink)
        }
        Job::Bidim => {
            let design = bidim_design(spec);
            let (grid, truth) = gen_bidim(&design, &mut rng)?;
            let total = truth.total(grid.layout());
            let full = truth.full_parts(grid.layout())?;
            linked_complete(&grid, &truth.modules, &total, &full, Some(&truth), &opts, label, replicate, sink)
        }
        Job::BidimImpute(kind) => {
            let design = bidim_design(spec);
            let (grid, truth) = gen_bidim(&design, &mut rng)?;
            let mask = match kind {
                MaskKind::Entrywise => entrywise_mask(grid.layout(), spec.entry_fraction, &mut mask_rng),
                MaskKind::Blockwise => blockwise_mask(grid.layout(), spec.line_fraction, &mut mask_rng),
            };
            let masked = grid.with_mask(Some(mask))?;
            linked_impute(&masked, &truth, kind, &opts, label, replicate, sink)
        }
    }
}

fn bidim_design(spec: &ExperimentSpec) -> BidimDesign {
    let rows = spec.row_sizes();
    let cols = spec.col_sizes();
    let k = ((1usize << rows.len()) - 1) * ((1usize << cols.len()) - 1);
    BidimDesign {
        row_set_sizes: rows,
        col_set_sizes: cols,
        rank: spec.signal_rank(),
        active: 5.min(k),
    }
}

/// Exactly `round(frac·M_i·N_j)` entries per block, uniformly chosen.
pub(crate) fn entrywise_mask(layout: &GridLayout, frac: f64, rng: &mut impl Rng) -> DMatrix<bool> {
    let mut mask = DMatrix::from_element(layout.nrows(), layout.ncols(), false);
    for (i, j) in layout.blocks() {
        let (rows, cols) = (layout.row_range(i), layout.col_range(j));
        let size = rows.len() * cols.len();
        let count = ((frac * size as f64).round() as usize).min(size - 1);
        for idx in rand::seq::index::sample(rng, size, count) {
            mask[(rows.start + idx % rows.len(), cols.start + idx / rows.len())] = true;
        }
    }
    mask
}

/// `round(frac·M_i)` whole rows and `round(frac·N_j)` whole columns per
/// block.
pub(crate) fn blockwise_mask(layout: &GridLayout, frac: f64, rng: &mut impl Rng) -> DMatrix<bool> {
    let mut mask = DMatrix::from_element(layout.nrows(), layout.ncols(), false);
    for (i, j) in layout.blocks() {
        let (rows, cols) = (layout.row_range(i), layout.col_range(j));
        let n_rows = ((frac * rows.len() as f64).round() as usize).min(rows.len().saturating_sub(2));
        let n_cols = ((frac * cols.len() as f64).round() as usize).min(cols.len().saturating_sub(2));
        for r in rand::seq::index::sample(rng, rows.len(), n_rows) {
            for c in cols.clone() {
                mask[(rows.start + r, c)] = true;
            }
        }
        for c in rand::seq::index::sample(rng, cols.len(), n_cols) {
            for r in rows.clone() {
                mask[(r, cols.start + c)] = true;
            }
        }
    }
    mask
}

/// Squared error `‖S − U·diag(f)·Vᵀ‖²` from the oracle projections
/// `p_r = u_rᵀ S v_r`, valid because the singular vectors are orthonormal.
fn diag_error(s_energy: f64, projections: &[f64], f: &[f64]) -> f64 {
    s_energy + f.iter().zip(projections).map(|(fr, pr)| fr * fr - 2.0 * fr * pr).sum::<f64>()
}

pub const NN_OPT_GRID_POINTS: usize = 50;

#[allow(clippy::too_many_arguments)]
fn single_complete(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    rank: usize,
    eq: KappaEquation,
    setting: &str,
    rep: usize,
    sink: &mut Sink,
) -> Result<()> {
    let (m, n) = x.shape();
    let svd = SvdTriple::compute(x)?;
    let opt = oracle_svd(svd.clone(), s)?;
    let s_opt = opt.reconstruct();
    let projections = opt.shrunk_values.clone();
    let s_energy: f64 = s.iter().map(|v| v * v).sum();
    let h = svd.values.len();

    let mut estimates: Vec<(&str, Result<DMatrix<f64>>)> = vec![("OPT", Ok(s_opt.clone()))];
    estimates.push((
        "EVB",
        estimate_sigma_from_values(&svd.values, m, n, eq)
            .and_then(|fit| evb_shrink_svd(svd.clone(), fit.sigma_hat, eq))
            .map(|r| r.reconstruct()),
    ));
    estimates.push(("HT", hard_threshold_svd(svd.clone(), rank.min(h)).map(|r| r.reconstruct())));
    let lambda = (m as f64).sqrt() + (n as f64).sqrt();
    estimates.push(("NN", soft_threshold_svd(svd.clone(), lambda).map(|r| r.reconstruct())));

    // Oracle rank: exact search over 0..=H.
    let best_rank = (0..=h)
        .min_by(|&a, &b| {
            let fa: Vec<f64> = (0..h).map(|r| if r < a { svd.values[r] } else { 0.0 }).collect();
            let fb: Vec<f64> = (0..h).map(|r| if r < b { svd.values[r] } else { 0.0 }).collect();
            diag_error(s_energy, &projections, &fa).total_cmp(&diag_error(s_energy, &projections, &fb))
        })
        .unwrap_or(0);
    estimates.push(("HT-OPT", hard_threshold_svd(svd.clone(), best_rank).map(|r| r.reconstruct())));

    // Oracle penalty: log grid from d₁/1000 to d₁.
    let d1 = svd.values[0];
    let best_lambda = (0..NN_OPT_GRID_POINTS)
        .map(|k| d1 * 1e-3f64.powf(1.0 - k as f64 / (NN_OPT_GRID_POINTS - 1) as f64))
        .min_by(|&a, &b| {
            let err = |l: f64| {
                let f: Vec<f64> = svd.values.iter().map(|d| (d - l).max(0.0)).collect();
                diag_error(s_energy, &projections, &f)
            };
            err(a).total_cmp(&err(b))
        })
        .unwrap_or(d1);
    estimates.push(("NN-OPT", soft_threshold_svd(svd.clone(), best_lambda).map(|r| r.reconstruct())));

    for (method, est) in estimates {
        let metrics = est.and_then(|e| Ok(vec![("rse", rse(s, &e)?), ("onse", onse(s, &e, &s_opt)?)]));
        sink.record(setting, method, rep, metrics);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn single_missing(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    rank: usize,
    opts: &FitOptions,
    setting: &str,
    rep: usize,
    sink: &mut Sink,
) -> Result<()> {
    let (m, n) = x.shape();
    let s_opt = oracle_svd(SvdTriple::compute(x)?, s)?.reconstruct();
    let opt_rse = rse(s, &s_opt)?;
    let modules = enumerate_modules(1, 1)?;
    let metrics = |est: Result<DMatrix<f64>>| -> Result<Vec<(&str, f64)>> {
        let e = est?;
        let r = rse_miss(s, &e, mask)?;
        Ok(vec![("rse_miss", r), ("onse_miss", r / opt_rse)])
    };
    let evb = BlockGrid::single(x.clone(), Some(mask.clone()))
        .and_then(|g| ev_bidifac_impute(&g, &modules, opts))
        .map(|(_, imputed)| imputed);
    sink.record(setting, "EVB", rep, metrics(evb));
    let lambda = (m as f64).sqrt() + (n as f64).sqrt();
    sink.record(setting, "NN", rep, metrics(em_impute_soft(x, mask, lambda, opts).map(|f| f.imputed)));
    sink.record(setting, "HT", rep, metrics(em_impute_hard(x, mask, rank, opts).map(|f| f.imputed)));
    Ok(())
}

fn unit_sigma(layout: &GridLayout) -> SigmaMode {
    SigmaMode::UserSupplied(DMatrix::from_element(layout.n_row_sets(), layout.n_col_sets(), 1.0))
}

fn full_modules(d: &Decomposition) -> Vec<DMatrix<f64>> {
    (0..d.len()).map(|k| d.module_full(k)).collect()
}

/// Zero-pattern recovery counts against the planted truth.
fn sparsity_metrics(d: &Decomposition, truth: &BidimTruth) -> Vec<(&'static str, f64)> {
    let ranks = d.ranks();
    let mut zero_ok = 0.0;
    let mut zero_total = 0.0;
    let mut hit = 0.0;
    let mut active_total = 0.0;
    for (k, &active) in truth.active.iter().enumerate() {
        if active {
            active_total += 1.0;
            if ranks[k] > 0 {
                hit += 1.0;
            }
        } else {
            zero_total += 1.0;
            if ranks[k] == 0 {
                zero_ok += 1.0;
            }
        }
    }
    vec![
        ("zero_modules_correct", zero_ok),
        ("zero_modules_total", zero_total),
        ("nonzero_modules_detected", hit),
        ("nonzero_modules_total", active_total),
    ]
}

/// Separate EVB per block, each with its own noise estimate.
fn eb_sep(grid: &BlockGrid, opts: &FitOptions) -> Result<DMatrix<f64>> {
    let layout = grid.layout();
    let single = enumerate_modules(1, 1)?;
    let mut out = DMatrix::zeros(layout.nrows(), layout.ncols());
    for (i, j) in layout.blocks() {
        let mask = grid.mask().map(|m| layout.block(m, i, j));
        let block = BlockGrid::single(grid.block(i, j), mask)?;
        let (_, imputed) = ev_bidifac_impute(&block, &single, opts)?;
        let structure = if block.is_fully_observed() {
            ev_bidifac(&block, &single, opts)?.total_structure()
        } else {
            imputed
        };
        let (r, c) = (layout.row_range(i), layout.col_range(j));
        out.view_mut((r.start, c.start), (r.len(), c.len())).copy_from(&structure);
    }
    Ok(out)
}

/// EVB on the concatenated matrix as a single block.
fn eb_joint(grid: &BlockGrid, opts: &FitOptions) -> Result<DMatrix<f64>> {
    let single = enumerate_modules(1, 1)?;
    let joint = BlockGrid::single(grid.data().clone(), grid.mask().cloned())?;
    let (d, imputed) = ev_bidifac_impute(&joint, &single, opts)?;
    Ok(if joint.is_fully_observed() { d.total_structure() } else { imputed })
}

#[allow(clippy::too_many_arguments)]
fn linked_complete(
    grid: &BlockGrid,
    modules: &crate::linked::ModuleGrid,
    total: &DMatrix<f64>,
    full_truth: &[DMatrix<f64>],
    bidim: Option<&BidimTruth>,
    opts: &FitOptions,
    setting: &str,
    rep: usize,
    sink: &mut Sink,
) -> Result<()> {
    let evb_name = if bidim.is_some() { "EB-BIDI" } else { "EVB" };
    let evb = ev_bidifac(grid, modules, opts).and_then(|d| {
        let mut m = vec![
            ("rse", rse(total, &d.total_structure())?),
            ("rdse", rdse(full_truth, &full_modules(&d))?),
            ("iterations", d.fit.iterations as f64),
            ("converged", d.fit.converged as u8 as f64),
        ];
        if let Some(t) = bidim {
            m.extend(sparsity_metrics(&d, t));
            m.push(("uniqueness_ok", check_uniqueness(&d, DEFAULT_RANK_TOLERANCE)?.overall_ok as u8 as f64));
        }
        Ok(m)
    });
    sink.record(setting, evb_name, rep, evb);

    let base_opts = FitOptions {
        sigma_mode: unit_sigma(grid.layout()),
        ..opts.clone()
    };
    let lambdas = default_lambdas(grid.layout(), modules);
    let bidifac = bidifac_plus(grid, modules, &lambdas, &base_opts).and_then(|d| {
        let mut m = vec![
            ("rse", rse(total, &d.total_structure())?),
            ("rdse", rdse(full_truth, &full_modules(&d))?),
            ("iterations", d.fit.iterations as f64),
            ("converged", d.fit.converged as u8 as f64),
        ];
        if let Some(t) = bidim {
            m.extend(sparsity_metrics(&d, t));
        }
        Ok(m)
    });
    sink.record(setting, "BIDIFAC", rep, bidifac);

    if bidim.is_some() {
        sink.record(setting, "EB-SEP", rep, eb_sep(grid, opts).and_then(|e| Ok(vec![("rse", rse(total, &e)?)])));
        sink.record(setting, "EB-JOINT", rep, eb_joint(grid, opts).and_then(|e| Ok(vec![("rse", rse(total, &e)?)])));
    }
    Ok(())
}

fn linked_impute(
    grid: &BlockGrid,
    truth: &BidimTruth,
    kind: MaskKind,
    opts: &FitOptions,
    setting: &str,
    rep: usize,
    sink: &mut Sink,
) -> Result<()> {
    let layout = grid.layout();
    let total = truth.total(layout);
    let full = truth.full_parts(layout)?;
    let pattern = MissingPattern::from_grid(grid)?;
    let mask = pattern.mask.clone();
    let score = |est: Result<DMatrix<f64>>| -> Result<Vec<(&str, f64)>> {
        let e = est?;
        Ok(vec![(
            "rse_miss",
            match kind {
                MaskKind::Entrywise => rse_miss(&total, &e, &mask)?,
                MaskKind::Blockwise => rse_miss_blockwise(&full, &truth.modules, layout, &e, &pattern)?,
            },
        )])
    };
    sink.record(
        setting,
        "EB-BIDI",
        rep,
        score(ev_bidifac_impute(grid, &truth.modules, opts).map(|(_, x)| x)),
    );
    let base_opts = FitOptions {
        sigma_mode: unit_sigma(layout),
        ..opts.clone()
    };
    let lambdas = default_lambdas(layout, &truth.modules);
    sink.record(
        setting,
        "BIDIFAC",
        rep,
        score(bidifac_plus_impute(grid, &truth.modules, &lambdas, &base_opts).map(|(_, x)| x)),
    );
    sink.record(setting, "EB-SEP", rep, score(eb_sep(grid, opts)));
    sink.record(setting, "EB-JOINT", rep, score(eb_joint(grid, opts)));
    Ok(())
}
