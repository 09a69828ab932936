//! End-to-end runs of the `evbidifac` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evbidifac::cli::io::write_matrix;
use evbidifac::linalg::singular_values;
use evbidifac::linked::Footprint;
use evbidifac::simbench::generators::{gen_bidim, BidimDesign};
use evbidifac::simbench::rng::{standard_normal, stream_rng};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evbidifac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn bidim_design() -> BidimDesign {
    BidimDesign {
        row_set_sizes: vec![120, 100],
        col_set_sizes: vec![40, 30],
        rank: 2,
        active: 5,
    }
}

/// Rewrites the committed fixtures. Run with `--ignored` after changing a
/// generator; the other tests read the files, not the generators.
#[test]
#[ignore]
fn regenerate_fixtures() {
    let dir = fixtures();
    let noise = standard_normal(&mut stream_rng(20_240_101, 0), 1000, 100);
    write_matrix(&dir.join("unit_noise_1000x100.tsv"), &noise, None).unwrap();

    let bidim = dir.join("bidim");
    fs::create_dir_all(&bidim).unwrap();
    // First seed whose planted singular values all clear the noise edge
    // with margin, so the planted ranks are identifiable from the data.
    let (grid, truth) = (0u64..)
        .map(|seed| gen_bidim(&bidim_design(), &mut stream_rng(seed, 0)).unwrap())
        .find(|(grid, truth)| {
            truth.parts.iter().enumerate().all(|(k, part)| {
                if !truth.active[k] {
                    return true;
                }
                let (m, n) = Footprint::new(grid.layout(), truth.modules.module(k)).shape();
                let edge = (m as f64).sqrt() + (n as f64).sqrt();
                singular_values(part).unwrap()[1] > 1.5 * edge
            })
        })
        .unwrap();
    let layout = grid.layout();
    let mut manifest = String::from("row_set_sizes = [120, 100]\ncol_set_sizes = [40, 30]\nmodules = \"enumerate\"\n");
    for (i, j) in layout.blocks() {
        let name = format!("x{i}{j}.tsv");
        write_matrix(&bidim.join(&name), &grid.block(i, j), None).unwrap();
        manifest += &format!("\n[[blocks]]\nrow_set = {i}\ncol_set = {j}\npath = \"{name}\"\n");
    }
    fs::write(bidim.join("manifest.toml"), manifest).unwrap();
    let ranks: Vec<String> = truth.active.iter().map(|&a| if a { "2" } else { "0" }.to_string()).collect();
    fs::write(bidim.join("planted_ranks.txt"), ranks.join(" ") + "\n").unwrap();
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Bidim fixture blocks with a scattered mask on every block.
fn masked_manifest(dir: &Path) -> PathBuf {
    let src = fixtures().join("bidim");
    let mut text = String::from("row_set_sizes = [120, 100]\ncol_set_sizes = [40, 30]\nmodules = \"enumerate\"\n");
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let name = format!("x{i}{j}.tsv");
        fs::copy(src.join(&name), dir.join(&name)).unwrap();
        let x = evbidifac::cli::io::load_matrix(&dir.join(&name)).unwrap().values;
        let mask = x.map_with_location(|r, c, _| if (r * 7 + c * 3 + i + j) % 10 == 0 { 1.0 } else { 0.0 });
        write_matrix(&dir.join(format!("m{i}{j}.tsv")), &mask, None).unwrap();
        text += &format!("\n[[blocks]]\nrow_set = {i}\ncol_set = {j}\npath = \"{name}\"\nmask = \"m{i}{j}.tsv\"\n");
    }
    let p = dir.join("manifest.toml");
    fs::write(&p, text).unwrap();
    p
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&read(&out.join("summary.json"))).unwrap()
}

#[test]
fn estimate_sigma_recovers_unit_noise() {
    let path = fixtures().join("unit_noise_1000x100.tsv");
    let out = ok(&["estimate-sigma", "--matrix", path.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    let sigma: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("sigma_hat\t"))
        .expect("sigma_hat line")
        .parse()
        .unwrap();
    assert!((0.95..=1.05).contains(&sigma), "{sigma}");
    assert!(text.contains("rows\t1000") && text.contains("cols\t100"), "{text}");
}

#[test]
fn decompose_recovers_planted_ranks_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("bidim/manifest.toml");
    let planted: Vec<u64> = read(&fixtures().join("bidim/planted_ranks.txt"))
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    let runs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("run{k}"))).collect();
    for out in &runs {
        ok(&["decompose", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7"]);
    }
    assert_eq!(dir_contents(&runs[0]), dir_contents(&runs[1]));

    let s = summary(&runs[0]);
    let modules = s["modules"].as_array().unwrap();
    let ranks: Vec<u64> = modules.iter().map(|m| m["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, planted);
    for m in modules {
        assert!(runs[0].join(m["file"].as_str().unwrap()).exists());
    }
    assert!(runs[0].join("total.tsv").exists());
}

#[test]
fn bidifac_with_explicit_lambdas() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("bidim/manifest.toml");
    let out = tmp.path().join("out");
    let lambdas = vec!["1000"; 9].join(",");
    ok(&[
        "decompose",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--method",
        "bidifac",
        "--lambda",
        &lambdas,
    ]);
    // Penalties far above every singular value leave nothing.
    let s = summary(&out);
    assert!(s["modules"].as_array().unwrap().iter().all(|m| m["rank"] == 0));

    let short = tmp.path().join("short");
    let bad = bin(&[
        "decompose",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        short.to_str().unwrap(),
        "--method",
        "bidifac",
        "--lambda",
        "1,2",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).starts_with("error[usage]"), "{}", stderr(&bad));
    assert!(!short.exists());
}

#[test]
fn impute_keeps_observed_entries_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    let manifest = masked_manifest(&data);
    let runs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("run{k}"))).collect();
    for out in &runs {
        ok(&["impute", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    assert_eq!(dir_contents(&runs[0]), dir_contents(&runs[1]));

    let parsed = evbidifac::cli::manifest::parse_manifest(&manifest).unwrap();
    let imputed = evbidifac::cli::io::load_matrix(&runs[0].join("imputed.tsv")).unwrap();
    assert!(!imputed.any_missing());
    let mask = parsed.grid.mask().unwrap();
    let x = parsed.grid.data();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            if !mask[(r, c)] {
                assert_eq!(imputed.values[(r, c)].to_bits(), x[(r, c)].to_bits());
            }
        }
    }
    let index = read(&runs[0].join("imputed_index.tsv"));
    let listed = index.lines().skip(1).count();
    assert_eq!(listed, mask.iter().filter(|&&m| m).count());
}

#[test]
fn simulate_and_cv_impute_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(
        &spec,
        "scenario = \"single-hetero\"\nreplicates = 2\nseed = 11\nrows = [80]\ncols = [30]\nrank = 3\nmissing_fractions = [0.3]\n",
    )
    .unwrap();
    let sims: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("sim{k}"))).collect();
    for out in &sims {
        ok(&["simulate", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    assert_eq!(dir_contents(&sims[0]), dir_contents(&sims[1]));
    let tsv = read(&sims[0].join("results.tsv"));
    assert!(tsv.starts_with("scenario\tsetting\tmethod\treplicate\tmetric\tvalue\n"));
    // Three methods, two metrics, two replicates.
    assert_eq!(tsv.lines().count(), 1 + 3 * 2 * 2);

    let manifest = fixtures().join("bidim/manifest.toml");
    let cvs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("cv{k}"))).collect();
    for out in &cvs {
        ok(&[
            "cv-impute",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--folds",
            "2",
            "--seed",
            "3",
            "--max-iter",
            "50",
        ]);
    }
    assert_eq!(dir_contents(&cvs[0]), dir_contents(&cvs[1]));
    assert!(read(&cvs[0].join("results.tsv")).contains("mrse_entry"));
}

#[test]
fn errors_map_to_categories_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    let usage = bin(&["decompose", "--manifest"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(stderr(&usage).starts_with("error[usage]"), "{}", stderr(&usage));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));

    let ragged = tmp.path().join("ragged.tsv");
    fs::write(&ragged, "1\t2\n3\n").unwrap();
    let out = bin(&["estimate-sigma", "--matrix", ragged.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.starts_with("error[validation]") && msg.contains("ragged.tsv:2"), "{msg}");

    let missing = bin(&["estimate-sigma", "--matrix", tmp.path().join("nope.tsv").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).starts_with("error[io]"));

    let bad_manifest = tmp.path().join("m.toml");
    fs::write(&bad_manifest, "row_set_sizes = [2]\ncol_set_sizes = [2]\nmodules = \"enumerate\"\n").unwrap();
    let out = bin(&["impute", "--manifest", bad_manifest.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn existing_output_is_left_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "mine").unwrap();
    let manifest = fixtures().join("bidim/manifest.toml");
    let res = bin(&["decompose", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(dir_contents(&out), vec![("keep.txt".to_string(), b"mine".to_vec())]);
    // No staging directories are left behind.
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}
