//! Command-line front end.

pub mod io;
pub mod manifest;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use crate::decompose::{bidifac_plus, check_uniqueness, default_lambdas, ev_bidifac, FitOptions, DEFAULT_RANK_TOLERANCE};
use crate::error::{Error, Result};
use crate::impute::ev_bidifac_impute;
use crate::linked::{add_row_means, BlockGrid, Decomposition};
use crate::shrinkage::estimate_sigma;
use crate::simbench::cv::{cv_impute, CvOptions};
use crate::simbench::experiment::{run_experiment, ExperimentSpec};

use self::io::{format_matrix, load_matrix};
use self::manifest::{parse_manifest, Manifest};
use self::output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "evbidifac", version, about = "Empirical Bayes decomposition and imputation of linked matrices")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random draw; overrides manifest and spec seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Relative convergence tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    /// Subtract each row's observed mean within each block before fitting
    /// and add it back to outputs.
    #[arg(long, global = true)]
    pub center: bool,
    /// Worker threads for simulation replicates and CV folds.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Evb,
    Bidifac,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a linked decomposition and write one file per module.
    Decompose {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "evb")]
        method: Method,
        /// `default` or comma-separated penalties, one per module.
        #[arg(long, default_value = "default")]
        lambda: String,
    },
    /// Fill missing entries and write the completed matrix.
    Impute {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the noise-level estimate of one matrix.
    EstimateSigma {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Run a simulation study described by a TOML spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated imputation benchmark.
    CvImpute {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        folds: usize,
        #[arg(long = "col-frac", default_value_t = 0.05)]
        col_frac: f64,
        #[arg(long = "row-frac", default_value_t = 0.05)]
        row_frac: f64,
        #[arg(long = "entry-frac", default_value_t = 0.05)]
        entry_frac: f64,
    },
}

/// Fit options from manifest values with command-line overrides.
fn fit_options(global: &GlobalArgs, manifest: &Manifest) -> Result<FitOptions> {
    let d = FitOptions::default();
    let opts = FitOptions {
        max_iterations: global.max_iter.or(manifest.options.max_iterations).unwrap_or(d.max_iterations),
        rel_tolerance: global.tol.or(manifest.options.tolerance).unwrap_or(d.rel_tolerance),
        rng_seed: global.seed.or(manifest.options.seed).unwrap_or(0),
        sigma_mode: manifest.sigma.clone(),
        ..d
    };
    opts.validate()?;
    Ok(opts)
}

fn prepared_grid(global: &GlobalArgs, manifest: &Manifest) -> (BlockGrid, Option<DMatrix<f64>>) {
    if global.center || manifest.options.center {
        let (grid, means) = manifest.grid.center_rows();
        (grid, Some(means))
    } else {
        (manifest.grid.clone(), None)
    }
}

fn parse_lambdas(text: &str, k: usize) -> Result<Option<Vec<f64>>> {
    if text == "default" {
        return Ok(None);
    }
    let values = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| Error::Usage(format!("--lambda: bad penalty {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != k {
        return Err(Error::Usage(format!("--lambda: {} values given for {k} modules", values.len())));
    }
    Ok(Some(values))
}

fn decomposition_summary(d: &Decomposition, method: &str, centered: bool) -> Result<serde_json::Value> {
    let variance = d.variance_explained();
    let modules: Vec<_> = (0..d.len())
        .map(|k| {
            let spec = d.module_grid().module(k);
            json!({
                "index": k,
                "label": spec.label(),
                "row_sets": spec.row_sets,
                "col_sets": spec.col_sets,
                "rank": d.rank(k),
                "variance_explained": variance[k],
                "file": module_file(k),
            })
        })
        .collect();
    let sigma: Vec<Vec<f64>> = d.sigma().row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(json!({
        "method": method,
        "row_set_sizes": d.layout().row_set_sizes(),
        "col_set_sizes": d.layout().col_set_sizes(),
        "centered": centered,
        "sigma": sigma,
        "fit": d.fit,
        "modules": modules,
        "uniqueness": check_uniqueness(d, DEFAULT_RANK_TOLERANCE)?,
    }))
}

fn module_file(k: usize) -> String {
    format!("module_{k}.tsv")
}

fn json_text(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn setup_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Executes one parsed command, printing any report to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    setup_threads(cli.global.threads)?;
    let g = &cli.global;
    match &cli.command {
        Command::Decompose {
            manifest,
            out,
            method,
            lambda,
        } => {
            let m = parse_manifest(manifest)?;
            if !m.grid.is_fully_observed() {
                return Err(Error::validation("the data contain missing entries; use `impute`"));
            }
            let opts = fit_options(g, &m)?;
            let (grid, means) = prepared_grid(g, &m);
            let lambdas = parse_lambdas(lambda, m.modules.len())?;
            if lambdas.is_some() && *method == Method::Evb {
                return Err(Error::Usage("--lambda only applies to --method bidifac".into()));
            }
            let (d, name) = match method {
                Method::Evb => (ev_bidifac(&grid, &m.modules, &opts)?, "evb"),
                Method::Bidifac => {
                    let l = lambdas.unwrap_or_else(|| default_lambdas(grid.layout(), &m.modules));
                    (bidifac_plus(&grid, &m.modules, &l, &opts)?, "bidifac")
                }
            };
            let dir = OutputDir::create(out)?;
            for k in 0..d.len() {
                dir.write(&module_file(k), &format_matrix(&d.module_submatrix(k), None))?;
            }
            let mut total = d.total_structure();
            if let Some(means) = &means {
                add_row_means(grid.layout(), &mut total, means);
            }
            dir.write("total.tsv", &format_matrix(&total, None))?;
            dir.write("summary.json", &json_text(&decomposition_summary(&d, name, means.is_some())?))?;
            dir.commit()
        }
        Command::Impute { manifest, out } => {
            let m = parse_manifest(manifest)?;
            let opts = fit_options(g, &m)?;
            let (grid, means) = prepared_grid(g, &m);
            let (d, mut imputed) = ev_bidifac_impute(&grid, &m.modules, &opts)?;
            if let Some(means) = &means {
                add_row_means(grid.layout(), &mut imputed, means);
            }
            let dir = OutputDir::create(out)?;
            dir.write("imputed.tsv", &format_matrix(&imputed, None))?;
            let mut index = String::from("row\tcol\n");
            if let Some(mask) = grid.mask() {
                for r in 0..mask.nrows() {
                    for c in 0..mask.ncols() {
                        if mask[(r, c)] {
                            index += &format!("{r}\t{c}\n");
                        }
                    }
                }
            }
            dir.write("imputed_index.tsv", &index)?;
            dir.write("summary.json", &json_text(&decomposition_summary(&d, "evb", means.is_some())?))?;
            dir.commit()
        }
        Command::EstimateSigma { matrix } => {
            let loaded = load_matrix(matrix)?;
            if loaded.any_missing() {
                return Err(Error::validation(format!(
                    "{}: noise estimation needs a complete matrix",
                    matrix.display()
                )));
            }
            let fit = estimate_sigma(&loaded.values)?;
            let report = format!(
                "sigma_hat\t{}\nobjective\t{}\nalpha\t{}\ngrid_evaluations\t{}\nrows\t{}\ncols\t{}\n",
                fit.sigma_hat,
                fit.objective_value,
                fit.alpha,
                fit.grid_evaluations,
                loaded.values.nrows(),
                loaded.values.ncols()
            );
            stdout.write_all(report.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
        Command::Simulate { spec, out } => {
            let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
            let mut s = ExperimentSpec::from_toml(&text)
                .map_err(|e| Error::validation(format!("{}: {e}", spec.display())))?;
            s.seed = g.seed.unwrap_or(s.seed);
            s.rel_tolerance = g.tol.or(s.rel_tolerance);
            s.max_iterations = g.max_iter.or(s.max_iterations);
            let table = run_experiment(&s)?;
            eprintln!(
                "{}: {} rows, {} failures, {:.1} s",
                s.scenario.name(),
                table.rows.len(),
                table.failures.len(),
                table.wall_time_seconds
            );
            write_table(out, &table)
        }
        Command::CvImpute {
            manifest,
            out,
            folds,
            col_frac,
            row_frac,
            entry_frac,
        } => {
            let m = parse_manifest(manifest)?;
            let opts = fit_options(g, &m)?;
            let (grid, _) = prepared_grid(g, &m);
            let cv = CvOptions {
                folds: *folds,
                col_frac: *col_frac,
                row_frac: *row_frac,
                entry_frac: *entry_frac,
                seed: opts.rng_seed,
                fit: opts,
            };
            let table = cv_impute(&grid, &cv)?;
            eprintln!("cv-impute: {} folds, {:.1} s", folds, table.wall_time_seconds);
            write_table(out, &table)
        }
    }
}

fn write_table(out: &Path, table: &crate::simbench::experiment::ResultTable) -> Result<()> {
    let dir = OutputDir::create(out)?;
    dir.write("results.tsv", &table.to_tsv())?;
    dir.write("failures.tsv", &table.failures_tsv())?;
    dir.write("summary.json", &table.summary_json())?;
    dir.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_parsing() {
        assert_eq!(parse_lambdas("default", 3).unwrap(), None);
        assert_eq!(parse_lambdas("1, 2.5,0", 3).unwrap(), Some(vec![1.0, 2.5, 0.0]));
        assert!(matches!(parse_lambdas("1,2", 3), Err(Error::Usage(_))));
        assert!(parse_lambdas("1,-2,3", 3).is_err());
    }

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["evbidifac", "estimate-sigma", "--matrix", "x.tsv", "--seed", "4"]).unwrap();
        assert_eq!(cli.global.seed, Some(4));
        assert!(Cli::try_parse_from(["evbidifac", "decompose", "--manifest", "m.toml"]).is_err());
    }
}
