//! Singular-value shrinkage operators for a single matrix.
//!
//! Four rules act on the singular values of `X` while keeping its singular
//! vectors: the empirical variational Bayes (EVB) rule, soft thresholding
//! (nuclear-norm penalty), hard thresholding (rank constraint) and the
//! oracle least-squares diagonal used as a benchmark ceiling.
//!
//! The EVB rule zeroes a singular value `d` below
//! `σ·sqrt(M + N + sqrt(MN)·(κ + 1/κ))` and otherwise returns
//!
//! ```text
//! (d² − (M+N)σ² + sqrt((d² − (M+N)σ²)² − 4MNσ⁴)) / (2d)
//! ```
//!
//! where `κ` is the root of a univariate equation in the aspect ratio. The
//! noise scale `σ` can be estimated from the singular values alone by
//! minimizing the profiled free energy `Ψ(σ)` (see [`estimate_sigma`]).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, SvdTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    Evb,
    Soft,
    Hard,
    Oracle,
}

/// Which zero-crossing equation defines `κ`.
///
/// With `a = sqrt(N/M)` and `b = sqrt(M/N)`:
///
/// * `Ratio`: `log(x·b + 1)/(x·b) + log(x·a + 1)/(x·a) − 1`. This is the
///   free-energy balance of the EVB solution; `κ(n, n) ≈ 2.5129` and the
///   profiled noise objective is continuous at the detection threshold.
/// * `Product`: `x·a·log(x·b + 1) + x·b·log(x·a + 1) − 1`, the variant with
///   the multiplier and divisor swapped (`κ(n, n) ≈ 0.8285`). Its threshold
///   sits only marginally above the noise bulk edge `σ(√M + √N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaEquation {
    #[default]
    Ratio,
    Product,
}

impl KappaEquation {
    /// Value of the defining function at `x > 0`.
    pub fn residual(self, x: f64, m: usize, n: usize) -> f64 {
        let a = (n as f64 / m as f64).sqrt();
        let b = (m as f64 / n as f64).sqrt();
        match self {
            KappaEquation::Ratio => (x * b).ln_1p() / (x * b) + (x * a).ln_1p() / (x * a) - 1.0,
            KappaEquation::Product => x * a * (x * b).ln_1p() + x * b * (x * a).ln_1p() - 1.0,
        }
    }
}

/// `κ(m, n)` under the default [`KappaEquation`].
pub fn kappa(m: usize, n: usize) -> f64 {
    kappa_with(m, n, KappaEquation::default())
}

/// Bisection for the unique positive root of `equation` on `[1e-8, 10]`,
/// doubling the upper end until the sign changes.
pub fn kappa_with(m: usize, n: usize, equation: KappaEquation) -> f64 {
    assert!(m >= 1 && n >= 1, "kappa needs positive dimensions");
    let f = |x: f64| equation.residual(x, m, n);
    let mut lo = 1e-8_f64;
    let mut hi = 10.0_f64;
    let sign_lo = f(lo).signum();
    while f(hi).signum() == sign_lo {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == sign_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Return whichever end is closer to the root.
    if f(lo).abs() <= f(hi).abs() {
        lo
    } else {
        hi
    }
}

/// The EVB rule for a fixed matrix shape, with `κ` solved once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvbRule {
    m: usize,
    n: usize,
    kappa: f64,
}

impl EvbRule {
    pub fn new(m: usize, n: usize) -> Self {
        Self::with_equation(m, n, KappaEquation::default())
    }

    pub fn with_equation(m: usize, n: usize, equation: KappaEquation) -> Self {
        EvbRule {
            m,
            n,
            kappa: kappa_with(m, n, equation),
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Detection threshold `σ·sqrt(M + N + sqrt(MN)(κ + 1/κ))`.
    pub fn threshold(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        let (m, n) = (self.m as f64, self.n as f64);
        Ok(sigma * (m + n + (m * n).sqrt() * (self.kappa + 1.0 / self.kappa)).sqrt())
    }

    pub fn shrink(&self, d: f64, sigma: f64) -> Result<f64> {
        if !(d >= 0.0) {
            return Err(Error::domain(format!("singular value must be non-negative, got {d}")));
        }
        if d < self.threshold(sigma)? {
            return Ok(0.0);
        }
        let (m, n) = (self.m as f64, self.n as f64);
        let s2 = sigma * sigma;
        let a = d * d - (m + n) * s2;
        let disc = (a * a - 4.0 * m * n * s2 * s2).max(0.0);
        Ok(((a + disc.sqrt()) / (2.0 * d)).max(0.0))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("noise scale must be positive and finite, got {sigma}")))
    }
}

pub fn evb_threshold(m: usize, n: usize, sigma: f64) -> Result<f64> {
    EvbRule::new(m, n).threshold(sigma)
}

pub fn evb_shrink_value(d: f64, m: usize, n: usize, sigma: f64) -> Result<f64> {
    EvbRule::new(m, n).shrink(d, sigma)
}

/// Singular vectors of the input together with original and shrunk values.
#[derive(Debug, Clone)]
pub struct ShrinkageResult {
    pub svd: SvdTriple,
    pub shrunk_values: Vec<f64>,
    /// Noise scale the rule was applied with (1 for rules without one).
    pub sigma_used: f64,
    pub rule: ThresholdRule,
}

impl ShrinkageResult {
    pub fn rank(&self) -> usize {
        self.shrunk_values.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.svd.values
    }

    /// Dense estimate `U · diag(shrunk) · Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.svd.reconstruct_with(&self.shrunk_values)
    }

    /// Factored estimate holding only the retained components.
    ///
    /// Panics for the oracle rule when its values are not sorted; the other
    /// rules always produce non-increasing values.
    pub fn factors(&self) -> SvdTriple {
        if self.rule == ThresholdRule::Oracle {
            let mut order: Vec<usize> = (0..self.shrunk_values.len())
                .filter(|&r| self.shrunk_values[r] > 0.0)
                .collect();
            order.sort_by(|&a, &b| self.shrunk_values[b].total_cmp(&self.shrunk_values[a]));
            let (m, n) = (self.svd.nrows(), self.svd.ncols());
            return SvdTriple {
                left: DMatrix::from_fn(m, order.len(), |i, j| self.svd.left[(i, order[j])]),
                values: order.iter().map(|&r| self.shrunk_values[r]).collect(),
                right: DMatrix::from_fn(n, order.len(), |i, j| self.svd.right[(i, order[j])]),
            };
        }
        self.svd.with_values(&self.shrunk_values)
    }
}

/// Applies the EVB rule to an existing decomposition.
pub fn evb_shrink_svd(svd: SvdTriple, sigma: f64, equation: KappaEquation) -> Result<ShrinkageResult> {
    let rule = EvbRule::with_equation(svd.nrows(), svd.ncols(), equation);
    let shrunk_values = svd
        .values
        .iter()
        .map(|&d| rule.shrink(d, sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShrinkageResult {
        svd,
        shrunk_values,
        sigma_used: sigma,
        rule: ThresholdRule::Evb,
    })
}

pub fn evb_shrink_matrix(x: &DMatrix<f64>, sigma: f64) -> Result<ShrinkageResult> {
    check_sigma(sigma)?;
    evb_shrink_svd(SvdTriple::compute(x)?, sigma, KappaEquation::default())
}

pub fn soft_threshold_svd(svd: SvdTriple, lambda: f64) -> Result<ShrinkageResult> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("penalty must be non-negative, got {lambda}")));
    }
    let shrunk_values = svd.values.iter().map(|&d| (d - lambda).max(0.0)).collect();
    Ok(ShrinkageResult {
        svd,
        shrunk_values,
        sigma_used: 1.0,
        rule: ThresholdRule::Soft,
    })
}

/// Minimizer of `½‖X − S‖²_F + λ‖S‖_*`.
pub fn soft_threshold_matrix(x: &DMatrix<f64>, lambda: f64) -> Result<ShrinkageResult> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("penalty must be non-negative, got {lambda}")));
    }
    soft_threshold_svd(SvdTriple::compute(x)?, lambda)
}

pub fn hard_threshold_svd(svd: SvdTriple, rank: usize) -> Result<ShrinkageResult> {
    let h = svd.values.len();
    if rank > h {
        return Err(Error::domain(format!("rank {rank} exceeds min(M, N) = {h}")));
    }
    let shrunk_values = svd
        .values
        .iter()
        .enumerate()
        .map(|(r, &d)| if r < rank { d } else { 0.0 })
        .collect();
    Ok(ShrinkageResult {
        svd,
        shrunk_values,
        sigma_used: 1.0,
        rule: ThresholdRule::Hard,
    })
}

/// Best rank-`rank` approximation of `x`.
pub fn hard_threshold_matrix(x: &DMatrix<f64>, rank: usize) -> Result<ShrinkageResult> {
    let h = x.nrows().min(x.ncols());
    if rank > h {
        return Err(Error::domain(format!("rank {rank} exceeds min(M, N) = {h}")));
    }
    hard_threshold_svd(SvdTriple::compute(x)?, rank)
}

/// Oracle diagonal in the singular basis of `x`: `max(u_rᵀ S v_r, 0)`.
///
/// Because the singular vectors are orthonormal the normal equations of
/// `min ‖S − U D Vᵀ‖²_F` over diagonal `D` decouple, so each coefficient is
/// the projection `u_rᵀ S v_r`; clipping gives the non-negative optimum.
pub fn oracle_svd(svd: SvdTriple, s_true: &DMatrix<f64>) -> Result<ShrinkageResult> {
    if s_true.shape() != (svd.nrows(), svd.ncols()) {
        return Err(Error::validation(format!(
            "oracle target is {}x{}, data is {}x{}",
            s_true.nrows(),
            s_true.ncols(),
            svd.nrows(),
            svd.ncols()
        )));
    }
    let projected = s_true * &svd.right;
    let shrunk_values = (0..svd.values.len())
        .map(|r| svd.left.column(r).dot(&projected.column(r)).max(0.0))
        .collect();
    Ok(ShrinkageResult {
        svd,
        shrunk_values,
        sigma_used: 1.0,
        rule: ThresholdRule::Oracle,
    })
}

pub fn oracle_operator(x: &DMatrix<f64>, s_true: &DMatrix<f64>) -> Result<ShrinkageResult> {
    if s_true.shape() != x.shape() {
        return Err(Error::validation(format!(
            "oracle target is {}x{}, data is {}x{}",
            s_true.nrows(),
            s_true.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    oracle_svd(SvdTriple::compute(x)?, s_true)
}

// ---------------------------------------------------------------------------
// Noise-scale estimation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFitDiagnostics {
    pub sigma_hat: f64,
    /// `Ψ(σ̂)`, up to an additive constant for exactly-zero singular values.
    pub objective_value: f64,
    /// Aspect ratio `min(M,N)/max(M,N)`.
    pub alpha: f64,
    pub grid_evaluations: usize,
}

const SIGMA_GRID_POINTS: usize = 400;
const SIGMA_REL_TOL: f64 = 1e-8;

/// Profiled free energy `Ψ(σ)` for singular values of an `M×N` matrix.
///
/// The matrix is oriented so that `M ≥ N`, `α = N/M` and
/// `x_r = d_r²/(Mσ²)`. Each value contributes
/// `ψ₁(x) = x − log x + 1{x > c}·ψ₂(x)` with
///
/// ```text
/// ψ₂(x) = log(√α·ψ₃ + 1) + α·log(ψ₃/√α + 1) − √α·ψ₃
/// ψ₃(x) = (x − 1 − α + sqrt((x − 1 − α)² − 4α)) / (2√α)
/// c     = 1 + α + √α(κ + 1/κ)
/// ```
#[derive(Debug, Clone)]
pub struct NoiseObjective {
    /// `d_r²/M`, one per singular value.
    scaled_sq: Vec<f64>,
    /// `Σ log(d_r²/M)` over the non-zero values.
    log_sum: f64,
    alpha: f64,
    cutoff: f64,
}

impl NoiseObjective {
    pub fn new(values: &[f64], m: usize, n: usize, equation: KappaEquation) -> Result<Self> {
        let (long, short) = if m >= n { (m, n) } else { (n, m) };
        if values.len() != short {
            return Err(Error::validation(format!(
                "expected {short} singular values for a {m}x{n} matrix, got {}",
                values.len()
            )));
        }
        if !values.iter().any(|&d| d > 0.0) {
            return Err(Error::validation("cannot estimate noise of an all-zero matrix"));
        }
        let alpha = short as f64 / long as f64;
        let k = kappa_with(long, short, equation);
        let scaled_sq: Vec<f64> = values.iter().map(|d| d * d / long as f64).collect();
        let log_sum = scaled_sq.iter().filter(|&&v| v > 0.0).map(|v| v.ln()).sum();
        Ok(NoiseObjective {
            scaled_sq,
            log_sum,
            alpha,
            cutoff: 1.0 + alpha + alpha.sqrt() * (k + 1.0 / k),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Indicator threshold `c` in `x` units.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn psi3(&self, x: f64) -> f64 {
        let a = self.alpha;
        let centered = x - 1.0 - a;
        (centered + (centered * centered - 4.0 * a).max(0.0).sqrt()) / (2.0 * a.sqrt())
    }

    pub fn psi2(&self, x: f64) -> f64 {
        let a = self.alpha;
        let t = self.psi3(x);
        (a.sqrt() * t).ln_1p() + a * (t / a.sqrt()).ln_1p() - a.sqrt() * t
    }

    /// `dψ₂/dx`.
    fn psi2_slope(&self, x: f64) -> f64 {
        let a = self.alpha;
        let ra = a.sqrt();
        let t = self.psi3(x);
        let y = x - 1.0 - a;
        let disc = (y * y - 4.0 * a).max(f64::MIN_POSITIVE).sqrt();
        let dt_dx = (1.0 + y / disc) / (2.0 * ra);
        ra * (1.0 / (1.0 + ra * t) + 1.0 / (1.0 + t / ra) - 1.0) * dt_dx
    }

    /// `dΨ/dσ`; one-sided (from above the cutoff) at the kinks `x_r = c`.
    pub fn derivative(&self, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let mut total = 0.0;
        for &v in self.scaled_sq.iter().filter(|&&v| v > 0.0) {
            let x = v / s2;
            let mut slope = 1.0 - 1.0 / x;
            if x > self.cutoff {
                slope += self.psi2_slope(x);
            }
            total += slope * (-2.0 * x / sigma);
        }
        total
    }

    pub fn value(&self, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let n_nonzero = self.scaled_sq.iter().filter(|&&v| v > 0.0).count() as f64;
        let mut total = -self.log_sum + n_nonzero * s2.ln();
        for &v in &self.scaled_sq {
            let x = v / s2;
            total += x;
            if x > self.cutoff {
                total += self.psi2(x);
            }
        }
        total
    }
}

/// Global minimizer of `Ψ(σ)` for a matrix.
///
/// A 400-point log grid over `[d_min/√M · 10⁻², d_max/√M]` locates the
/// basin. Inside it the slope of `Ψ` is bisected to rounding level. Where
/// the slope does not change sign across the bracket (a grid edge, or a
/// kink as a singular value crosses the cutoff), golden-section search on
/// `Ψ` narrows it to relative width 1e-8 first and the bisection then
/// polishes the result if the slope brackets the minimum there.
pub fn estimate_sigma(x: &DMatrix<f64>) -> Result<NoiseFitDiagnostics> {
    estimate_sigma_with(x, KappaEquation::default())
}

pub fn estimate_sigma_with(x: &DMatrix<f64>, equation: KappaEquation) -> Result<NoiseFitDiagnostics> {
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::validation("cannot estimate noise of an all-zero matrix"));
    }
    let values = singular_values(x)?;
    estimate_sigma_from_values(values.as_slice(), x.nrows(), x.ncols(), equation)
}

pub fn estimate_sigma_from_values(
    values: &[f64],
    m: usize,
    n: usize,
    equation: KappaEquation,
) -> Result<NoiseFitDiagnostics> {
    let objective = NoiseObjective::new(values, m, n, equation)?;
    let long = m.max(n) as f64;
    let d_max = values.iter().cloned().fold(0.0, f64::max);
    let d_min_pos = values
        .iter()
        .cloned()
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let d_min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let lower_d = if d_min > 0.0 { d_min } else { d_min_pos.min(d_max * 1e-8) };
    let lo = (lower_d / long.sqrt() * 1e-2).ln();
    let hi = (d_max / long.sqrt()).ln();

    let grid: Vec<f64> = (0..SIGMA_GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / (SIGMA_GRID_POINTS - 1) as f64).exp())
        .collect();
    let values_on_grid: Vec<f64> = grid.iter().map(|&s| objective.value(s)).collect();
    let best = values_on_grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is non-empty");

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(SIGMA_GRID_POINTS - 1)];
    let mut evaluations = SIGMA_GRID_POINTS;
    // Bisection on the slope sign resolves the minimizer to rounding level,
    // which comparisons of Ψ itself cannot: Ψ is flat there.
    let bisect = |a: &mut f64, b: &mut f64, evaluations: &mut usize| loop {
        let mid = 0.5 * (*a + *b);
        if mid <= *a || mid >= *b {
            break;
        }
        *evaluations += 1;
        if objective.derivative(mid) > 0.0 {
            *b = mid;
        } else {
            *a = mid;
        }
    };
    evaluations += 2;
    if objective.derivative(a) < 0.0 && objective.derivative(b) > 0.0 {
        bisect(&mut a, &mut b, &mut evaluations);
    } else {
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let mut fc = objective.value(c);
        let mut fd = objective.value(d);
        evaluations += 2;
        while (b - a) > SIGMA_REL_TOL * 0.5 * (a + b) {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = objective.value(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = objective.value(d);
            }
            evaluations += 1;
        }
        // A kink inside the grid bracket hides the sign change there; once
        // the bracket is narrow the slope usually brackets the minimum.
        let (mut a2, mut b2) = (a * (1.0 - 2.0 * SIGMA_REL_TOL), b * (1.0 + 2.0 * SIGMA_REL_TOL));
        evaluations += 2;
        if objective.derivative(a2) < 0.0 && objective.derivative(b2) > 0.0 {
            bisect(&mut a2, &mut b2, &mut evaluations);
            (a, b) = (a2, b2);
        }
    }
    let refined = 0.5 * (a + b);
    let f_refined = objective.value(refined);
    evaluations += 1;
    // The refinement is local; never return something worse than the grid.
    let (sigma_hat, objective_value) = if f_refined <= values_on_grid[best] {
        (refined, f_refined)
    } else {
        (grid[best], values_on_grid[best])
    };
    Ok(NoiseFitDiagnostics {
        sigma_hat,
        objective_value,
        alpha: objective.alpha(),
        grid_evaluations: evaluations,
    })
}
