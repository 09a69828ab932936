//! Invariants checked over randomly drawn inputs.

use evbidifac::cli::io::{format_matrix, parse_matrix};
use evbidifac::decompose::{ev_bidifac, FitOptions};
use evbidifac::impute::{em_impute_hard, em_impute_soft, ev_bidifac_impute};
use evbidifac::linked::{embed_submatrix, enumerate_modules, BlockGrid, Footprint, GridLayout, ModuleSpec};
use evbidifac::shrinkage::{estimate_sigma, EvbRule};
use evbidifac::simbench::rng::{standard_normal, stream_rng};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn layout_strategy() -> impl Strategy<Value = GridLayout> {
    (
        prop::collection::vec(2usize..9, 1..4),
        prop::collection::vec(2usize..7, 1..4),
    )
        .prop_map(|(r, c)| GridLayout::new(r, c).unwrap())
}

fn random_module(layout: &GridLayout, bits: u64) -> ModuleSpec {
    let (i, j) = (layout.n_row_sets(), layout.n_col_sets());
    let mut row_sets: Vec<bool> = (0..i).map(|k| bits >> k & 1 == 1).collect();
    let mut col_sets: Vec<bool> = (0..j).map(|k| bits >> (8 + k) & 1 == 1).collect();
    row_sets[(bits >> 16) as usize % i] = true;
    col_sets[(bits >> 24) as usize % j] = true;
    ModuleSpec { row_sets, col_sets }
}

fn random_mask(rng: &mut impl Rng, m: usize, n: usize, p: f64) -> DMatrix<bool> {
    let mut mask = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() < p);
    // Keep one observed entry per row and column so nothing is fully hidden.
    for r in 0..m {
        mask[(r, r % n)] = false;
    }
    for c in 0..n {
        mask[(c % m, c)] = false;
    }
    mask
}

fn fast() -> FitOptions {
    FitOptions {
        max_iterations: 60,
        rel_tolerance: 1e-6,
        ..FitOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn shrink_is_monotone_and_bounded(
        m in 1usize..400, n in 1usize..400,
        d1 in 0.0f64..100.0, d2 in 0.0f64..100.0, sigma in 0.01f64..5.0,
    ) {
        let rule = EvbRule::new(m, n);
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (a, b) = (rule.shrink(lo, sigma).unwrap(), rule.shrink(hi, sigma).unwrap());
        prop_assert!(a <= b + 1e-12 * hi.max(1.0));
        prop_assert!(a >= 0.0 && a <= lo);
        prop_assert!(b >= 0.0 && b <= hi);
    }

    #[test]
    fn shrink_is_scale_equivariant(
        m in 1usize..400, n in 1usize..400,
        d in 0.0f64..100.0, sigma in 0.01f64..5.0, scale in 1e-3f64..1e3,
    ) {
        let rule = EvbRule::new(m, n);
        let base = rule.shrink(d, sigma).unwrap();
        let scaled = rule.shrink(d * scale, sigma * scale).unwrap();
        // Right at the threshold the two sides may round differently.
        let t = rule.threshold(sigma).unwrap();
        prop_assume!((d - t).abs() > 1e-9 * t);
        prop_assert!((scaled - scale * base).abs() <= 1e-9 * scale * d.max(1e-300));
    }

    #[test]
    fn shrink_is_zero_below_threshold(
        m in 1usize..400, n in 1usize..400, frac in 0.0f64..1.0, sigma in 0.01f64..5.0,
    ) {
        let rule = EvbRule::new(m, n);
        let t = rule.threshold(sigma).unwrap();
        prop_assert_eq!(rule.shrink(frac * t * (1.0 - 1e-12), sigma).unwrap(), 0.0);
        prop_assert!(rule.shrink(t * 1.5, sigma).unwrap() > 0.0);
    }

    #[test]
    fn embed_then_extract_round_trips(layout in layout_strategy(), bits in any::<u64>(), seed in any::<u64>()) {
        let module = random_module(&layout, bits);
        let fp = Footprint::new(&layout, &module);
        let (m, n) = fp.shape();
        let sub = standard_normal(&mut stream_rng(seed, 0), m, n);
        let full = embed_submatrix(&sub, &module, &layout).unwrap();
        prop_assert_eq!(fp.extract(&full), sub);
        for r in 0..layout.nrows() {
            for c in 0..layout.ncols() {
                if !(module.row_sets[layout.row_set_of(r)] && module.col_sets[layout.col_set_of(c)]) {
                    prop_assert_eq!(full[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn text_round_trip_is_exact(
        values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..60),
        ncols in 1usize..6, holes in any::<u64>(),
    ) {
        let nrows = values.len().div_ceil(ncols);
        let x = DMatrix::from_fn(nrows, ncols, |r, c| values.get(r * ncols + c).copied().unwrap_or(1.0));
        let mut missing = DMatrix::from_fn(nrows, ncols, |r, c| holes >> ((r * ncols + c) % 64) & 1 == 1);
        missing[(0, 0)] = false;
        let back = parse_matrix(&format_matrix(&x, Some(&missing)), "prop").unwrap();
        prop_assert_eq!(&back.missing, &missing);
        for (i, (a, b)) in back.values.iter().zip(x.iter()).enumerate() {
            if !missing[i] {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn modules_sum_to_total(layout in layout_strategy(), seed in any::<u64>()) {
        let x = standard_normal(&mut stream_rng(seed, 0), layout.nrows(), layout.ncols());
        let grid = BlockGrid::new(layout.clone(), x, None).unwrap();
        let modules = enumerate_modules(layout.n_row_sets(), layout.n_col_sets()).unwrap();
        let fit = ev_bidifac(&grid, &modules, &fast()).unwrap();
        let mut sum = DMatrix::zeros(layout.nrows(), layout.ncols());
        for k in 0..fit.len() {
            sum += fit.module_full(k);
        }
        let total = fit.total_structure();
        let scale = total.amax().max(1.0);
        prop_assert!((sum - total).amax() <= 1e-10 * scale);
    }

    #[test]
    fn imputation_never_alters_observed_entries(
        m in 6usize..30, n in 4usize..20, p in 0.05f64..0.6, seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 0);
        let x = standard_normal(&mut rng, m, n);
        let mask = random_mask(&mut rng, m, n, p);
        let opts = fast();
        let soft = em_impute_soft(&x, &mask, 2.0, &opts).unwrap();
        let hard = em_impute_hard(&x, &mask, 2, &opts).unwrap();
        let grid = BlockGrid::single(x.clone(), Some(mask.clone())).unwrap();
        let modules = enumerate_modules(1, 1).unwrap();
        let (fit, evb) = ev_bidifac_impute(&grid, &modules, &opts).unwrap();
        let total = fit.total_structure();
        for i in 0..x.len() {
            if mask[i] {
                prop_assert_eq!(soft.imputed[i].to_bits(), soft.structure[i].to_bits());
                prop_assert_eq!(hard.imputed[i].to_bits(), hard.structure[i].to_bits());
                prop_assert_eq!(evb[i].to_bits(), total[i].to_bits());
            } else {
                prop_assert_eq!(soft.imputed[i].to_bits(), x[i].to_bits());
                prop_assert_eq!(hard.imputed[i].to_bits(), x[i].to_bits());
                prop_assert_eq!(evb[i].to_bits(), x[i].to_bits());
            }
        }
    }
}

// Low-rank signal puts singular values near the detection cutoff, where the
// objective has kinks that can hide the minimizer from the coarse search.
#[test]
fn sigma_estimate_is_scale_equivariant_with_signal() {
    let mut rng = stream_rng(41, 0);
    for case in 0..40 {
        let (m, n) = (rng.random_range(40..300), rng.random_range(10..80));
        let rank = rng.random_range(0..4);
        let mut x = standard_normal(&mut rng, m, n) * rng.random_range(0.2..5.0);
        if rank > 0 {
            x += standard_normal(&mut rng, m, rank) * standard_normal(&mut rng, n, rank).transpose() * 0.5;
        }
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let a = estimate_sigma(&x).unwrap().sigma_hat;
        let b = estimate_sigma(&(&x * scale)).unwrap().sigma_hat;
        let err = (b - scale * a).abs() / (scale * a);
        assert!(err <= 1e-10, "case {case} ({m}x{n}, rank {rank}): {err:.1e}");
    }
}
