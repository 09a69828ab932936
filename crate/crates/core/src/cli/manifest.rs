//! TOML manifests describing a block grid on disk.
//!
//! ```toml
//! row_set_sizes = [500, 500]
//! col_set_sizes = [50, 50]
//! modules = "enumerate"          # or { R = [[1, 1, 0], ...], C = [[...], ...] }
//!
//! [[blocks]]
//! row_set = 0
//! col_set = 0
//! path = "x00.tsv"               # relative to the manifest
//! mask = "m00.tsv"               # optional, 1 marks missing
//!
//! [options]
//! tolerance = 1e-8
//! max_iterations = 500
//! sigma = "estimated"            # or an I x J array of noise scales
//! seed = 0
//! center = false
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use super::io::{load_mask, load_matrix};
use crate::decompose::SigmaMode;
use crate::error::{Error, Result};
use crate::linked::{enumerate_modules, BlockGrid, GridLayout, ModuleGrid};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ModuleSource {
    /// Only `"enumerate"` is accepted.
    Keyword(String),
    Indicators {
        #[serde(rename = "R")]
        r: Vec<Vec<u8>>,
        #[serde(rename = "C")]
        c: Vec<Vec<u8>>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SigmaSource {
    Keyword(String),
    Values(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub row_set: usize,
    pub col_set: usize,
    pub path: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOptions {
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub sigma: Option<SigmaSource>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    row_set_sizes: Vec<usize>,
    col_set_sizes: Vec<usize>,
    modules: ModuleSource,
    blocks: Vec<BlockEntry>,
    #[serde(default)]
    options: ManifestOptions,
}

/// A validated manifest with its data loaded.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub grid: BlockGrid,
    pub modules: ModuleGrid,
    pub options: ManifestOptions,
    pub sigma: SigmaMode,
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let raw: RawManifest = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count().max(1));
        match line {
            Some(l) => Error::validation(format!("{origin}:{l}: {}", e.message())),
            None => Error::validation(format!("{origin}: {}", e.message())),
        }
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let layout = GridLayout::new(raw.row_set_sizes.clone(), raw.col_set_sizes.clone())
        .map_err(|e| Error::validation(format!("{origin}: {e}")))?;

    let modules = match &raw.modules {
        ModuleSource::Keyword(k) if k == "enumerate" => enumerate_modules(layout.n_row_sets(), layout.n_col_sets())?,
        ModuleSource::Keyword(k) => {
            return Err(Error::validation(format!("{origin}: modules must be \"enumerate\" or R/C indicators, got {k:?}")))
        }
        ModuleSource::Indicators { r, c } => {
            let grid = ModuleGrid::from_indicators(r, c).map_err(|e| Error::validation(format!("{origin}: modules: {e}")))?;
            grid.check_layout(&layout)
                .map_err(|e| Error::validation(format!("{origin}: modules: {e}")))?;
            grid
        }
    };

    let mut data = DMatrix::zeros(layout.nrows(), layout.ncols());
    let mut mask = DMatrix::from_element(layout.nrows(), layout.ncols(), false);
    let mut seen = DMatrix::from_element(layout.n_row_sets(), layout.n_col_sets(), false);
    for b in &raw.blocks {
        let (i, j) = (b.row_set, b.col_set);
        if i >= layout.n_row_sets() || j >= layout.n_col_sets() {
            return Err(Error::validation(format!("{origin}: block ({i},{j}) lies outside the grid")));
        }
        if seen[(i, j)] {
            return Err(Error::validation(format!("{origin}: block ({i},{j}) listed twice")));
        }
        seen[(i, j)] = true;
        let expected = (layout.row_set_sizes()[i], layout.col_set_sizes()[j]);
        let file = base.join(&b.path);
        let loaded = load_matrix(&file)?;
        if loaded.values.shape() != expected {
            return Err(Error::validation(format!(
                "{origin}: block ({i},{j}) in {} is {}x{}, declared {}x{}",
                file.display(),
                loaded.values.nrows(),
                loaded.values.ncols(),
                expected.0,
                expected.1
            )));
        }
        let mut block_mask = loaded.missing.clone();
        if let Some(m) = &b.mask {
            let mfile = base.join(m);
            let extra = load_mask(&mfile)?;
            if extra.shape() != expected {
                return Err(Error::validation(format!(
                    "{origin}: mask for block ({i},{j}) in {} is {}x{}, declared {}x{}",
                    mfile.display(),
                    extra.nrows(),
                    extra.ncols(),
                    expected.0,
                    expected.1
                )));
            }
            block_mask.zip_apply(&extra, |a, b| *a = *a || b);
        }
        if block_mask.iter().all(|&m| m) {
            return Err(Error::validation(format!("{origin}: block ({i},{j}) is entirely missing")));
        }
        let (r, c) = (layout.row_range(i), layout.col_range(j));
        data.view_mut((r.start, c.start), expected).copy_from(&loaded.values);
        mask.view_mut((r.start, c.start), expected).copy_from(&block_mask);
    }
    if let Some(idx) = seen.iter().position(|s| !s) {
        let (i, j) = (idx % seen.nrows(), idx / seen.nrows());
        return Err(Error::validation(format!("{origin}: no file given for block ({i},{j})")));
    }

    let sigma = match &raw.options.sigma {
        None => SigmaMode::Estimated,
        Some(SigmaSource::Keyword(k)) if k == "estimated" => SigmaMode::Estimated,
        Some(SigmaSource::Keyword(k)) => {
            return Err(Error::validation(format!("{origin}: sigma must be \"estimated\" or an array, got {k:?}")))
        }
        Some(SigmaSource::Values(rows)) => {
            let (ni, nj) = (layout.n_row_sets(), layout.n_col_sets());
            if rows.len() != ni || rows.iter().any(|r| r.len() != nj) {
                return Err(Error::validation(format!("{origin}: sigma must be a {ni}x{nj} array")));
            }
            SigmaMode::UserSupplied(DMatrix::from_fn(ni, nj, |i, j| rows[i][j]))
        }
    };

    let grid = BlockGrid::new(layout, data, Some(mask))?;
    Ok(Manifest {
        path: path.to_path_buf(),
        grid,
        modules,
        options: raw.options,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::io::write_matrix;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_single_block() {
        let dir = tempfile::tempdir().unwrap();
        write_matrix(&dir.path().join("x.tsv"), &DMatrix::from_element(3, 2, 1.5), None).unwrap();
        let p = write(
            dir.path(),
            "m.toml",
            "row_set_sizes = [3]\ncol_set_sizes = [2]\nmodules = \"enumerate\"\n[[blocks]]\nrow_set = 0\ncol_set = 0\npath = \"x.tsv\"\n",
        );
        let m = parse_manifest(&p).unwrap();
        assert_eq!(m.modules.len(), 1);
        assert!(m.grid.is_fully_observed());
        assert_eq!(m.sigma, SigmaMode::Estimated);
    }

    fn two_by_two(dir: &Path, bad_cols: usize, modules: &str) -> PathBuf {
        for i in 0..2 {
            for j in 0..2 {
                let cols = if (i, j) == (1, 0) { bad_cols } else { 2 };
                write_matrix(&dir.join(format!("x{i}{j}.tsv")), &DMatrix::from_element(3, cols, 1.0), None).unwrap();
            }
        }
        let mut text = format!("row_set_sizes = [3, 3]\ncol_set_sizes = [2, 2]\nmodules = {modules}\n");
        for i in 0..2 {
            for j in 0..2 {
                text += &format!("[[blocks]]\nrow_set = {i}\ncol_set = {j}\npath = \"x{i}{j}.tsv\"\n");
            }
        }
        write(dir, "m.toml", &text)
    }

    #[test]
    fn enumerate_gives_nine_modules() {
        let dir = tempfile::tempdir().unwrap();
        let m = parse_manifest(&two_by_two(dir.path(), 2, "\"enumerate\"")).unwrap();
        assert_eq!(m.modules.len(), 9);
    }

    #[test]
    fn dimension_mismatch_names_block() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_manifest(&two_by_two(dir.path(), 3, "\"enumerate\"")).unwrap_err().to_string();
        assert!(err.contains("block (1,0)"), "{err}");
    }

    #[test]
    fn explicit_modules_and_their_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ok = parse_manifest(&two_by_two(dir.path(), 2, "{ R = [[1, 1], [1, 0]], C = [[1, 0], [1, 1]] }")).unwrap();
        assert_eq!(ok.modules.len(), 2);
        let dup = parse_manifest(&two_by_two(dir.path(), 2, "{ R = [[1, 1], [1, 1]], C = [[1, 1], [1, 1]] }"));
        assert!(dup.is_err());
        assert!(parse_manifest(&two_by_two(dir.path(), 2, "\"all\"")).is_err());
        assert!(parse_manifest(&dir.path().join("missing.toml")).is_err());
    }

    #[test]
    fn mask_files_and_sigma_values() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "x.tsv", "1\tNA\n3\t4\n");
        write(dir.path(), "m.tsv", "0\t0\n1\t0\n");
        let p = write(
            dir.path(),
            "m.toml",
            "row_set_sizes = [2]\ncol_set_sizes = [2]\nmodules = \"enumerate\"\n[[blocks]]\nrow_set = 0\ncol_set = 0\npath = \"x.tsv\"\nmask = \"m.tsv\"\n[options]\nsigma = [[0.5]]\n",
        );
        let m = parse_manifest(&p).unwrap();
        let mask = m.grid.mask().unwrap();
        assert!(mask[(0, 1)] && mask[(1, 0)] && !mask[(0, 0)]);
        assert_eq!(m.sigma, SigmaMode::UserSupplied(DMatrix::from_element(1, 1, 0.5)));
        let bad = write(dir.path(), "b.toml", "row_set_sizes = [2]\ncol_set_sizes = [2]\nmodules = \"enumerate\"\nblocks = 3\n");
        let err = parse_manifest(&bad).unwrap_err().to_string();
        assert!(err.contains("b.toml:4"), "{err}");
    }
}
