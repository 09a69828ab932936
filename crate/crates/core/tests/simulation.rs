//! Simulation studies at reduced size: bookkeeping, oracle bounds and the
//! ordering of methods on heterogeneous signals.

use evbidifac::linked::GridLayout;
use evbidifac::simbench::cv::{make_fold, CvOptions};
use evbidifac::simbench::experiment::{median, run_experiment, ExperimentSpec, Scenario};

#[test]
fn fixed_signal_grid_fills_every_cell() {
    let mut spec = ExperimentSpec::new(Scenario::SingleFixedS2N);
    spec.replicates = 10;
    spec.rows = Some(vec![200]);
    spec.cols = Some(vec![40]);
    spec.rank = Some(4);
    spec.seed = 5;
    let table = run_experiment(&spec).unwrap();
    assert!(table.failures.is_empty(), "{:?}", table.failures);
    let settings = table.settings();
    assert_eq!(settings.len(), 10);
    for method in ["OPT", "EVB", "HT", "NN", "HT-OPT", "NN-OPT"] {
        for metric in ["rse", "onse"] {
            let n: usize = settings.iter().map(|s| table.values(s, method, metric).len()).sum();
            assert_eq!(n, 100, "{method} {metric}");
        }
    }

    // The oracle picks the best singular values for the observed vectors,
    // which every other method here shares.
    for s in &settings {
        let opt = table.by_replicate(s, "OPT", "rse");
        for method in ["EVB", "HT", "NN", "HT-OPT", "NN-OPT"] {
            for (rep, v) in table.by_replicate(s, method, "rse") {
                assert!(opt[&rep] <= v + 1e-12, "{s} {method} rep {rep}: {} > {v}", opt[&rep]);
            }
        }
    }
}

#[test]
fn evb_beats_tuned_competitors_on_heterogeneous_signal() {
    let mut spec = ExperimentSpec::new(Scenario::SingleHetero);
    spec.replicates = 100;
    spec.seed = 17;
    let table = run_experiment(&spec).unwrap();
    assert!(table.failures.is_empty());
    let setting = &table.settings()[0];
    let evb = median(&table.values(setting, "EVB", "onse"));
    let ht = median(&table.values(setting, "HT-OPT", "onse"));
    let nn = median(&table.values(setting, "NN-OPT", "onse"));
    assert!(evb < ht && evb < nn, "EVB {evb}, HT-OPT {ht}, NN-OPT {nn}");
}

#[test]
fn fold_sizes_follow_the_fractions() {
    let layout = GridLayout::new(vec![500, 500], vec![50, 50]).unwrap();
    let cv = CvOptions {
        seed: 9,
        ..CvOptions::default()
    };
    for f in 0..5 {
        let fold = make_fold(&layout, &cv, f);
        for (i, j) in layout.blocks() {
            let (m, n) = (layout.row_set_sizes()[i], layout.col_set_sizes()[j]);
            let rows = layout.block(&fold.rows, i, j);
            let cols = layout.block(&fold.cols, i, j);
            let entries = layout.block(&fold.entries, i, j);
            let full_rows = (0..m).filter(|&r| rows.row(r).iter().all(|&b| b)).count();
            let full_cols = (0..n).filter(|&c| cols.column(c).iter().all(|&b| b)).count();
            let n_entries = entries.iter().filter(|&&b| b).count();
            let near = |got: usize, want: f64| (got as f64 - want).abs() <= 1.0;
            assert!(near(full_rows, 0.05 * m as f64), "rows {full_rows}");
            assert!(near(full_cols, 0.05 * n as f64), "cols {full_cols}");
            assert!(near(n_entries, 0.05 * (m * n) as f64), "entries {n_entries}");
        }
    }
}
