//! Batch and gradient files.
//!
//! Raw matrices are little-endian `f64` in column-major order. A batch file
//! `x.bin` is described by the sidecar `x.bin.json` holding
//! `{"n", "b", "range": [lo, hi], "labels": [...]}`. A gradient dump is a
//! directory with `gradients.json` listing one raw file per matrix.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use spear::fcnn::{Batch, GradientCapture, NetworkParams};
use spear::{Batch64, Matrix64, Vector64};

/// A batch with the data range declared for PSNR.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBatch {
    pub batch: Batch64,
    pub range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSidecar {
    pub n: usize,
    pub b: usize,
    pub range: [f64; 2],
    pub labels: Vec<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn check_finite(m: &Matrix64, what: &str) -> Result<()> {
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        bail!("{what}: non-finite value at entry {i}");
    }
    Ok(())
}

/// Parses an `n x b` header-free CSV of floats.
pub fn read_csv_matrix(path: &Path) -> Result<Matrix64> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| anyhow!("{}: row {}: bad number {f:?}", path.display(), i + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    ensure!(!rows.is_empty(), "{}: empty file", path.display());
    let b = rows[0].len();
    let m = Matrix64::from_fn(rows.len(), b, |i, j| rows[i][j]);
    check_finite(&m, &path.display().to_string())?;
    Ok(m)
}

pub fn write_raw(path: &Path, m: &Matrix64) -> Result<()> {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_raw(path: &Path, rows: usize, cols: usize) -> Result<Matrix64> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let expected = rows * cols * 8;
    ensure!(
        bytes.len() == expected,
        "{}: expected {expected} bytes for a {rows}x{cols} f64 matrix, found {}",
        path.display(),
        bytes.len()
    );
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let m = Matrix64::from_vec(rows, cols, vals);
    check_finite(&m, &path.display().to_string())?;
    Ok(m)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_batch_raw(path: &Path, batch: &Batch64, range: (f64, f64)) -> Result<()> {
    write_raw(path, &batch.inputs)?;
    let side = BatchSidecar { n: batch.inputs.nrows(), b: batch.size(), range: [range.0, range.1], labels: batch.labels.clone() };
    write_json(&sidecar_path(path), &side)
}

/// CSV batches carry no labels; the caller supplies them.
pub fn load_csv_batch(path: &Path, labels: impl FnOnce(usize) -> Vec<usize>, range: (f64, f64)) -> Result<LoadedBatch> {
    let x = read_csv_matrix(path)?;
    let labels = labels(x.ncols());
    Ok(LoadedBatch { batch: Batch::new(x, labels)?, range })
}

pub fn load_raw_batch(path: &Path) -> Result<LoadedBatch> {
    let side: BatchSidecar = read_json(&sidecar_path(path))?;
    ensure!(side.labels.len() == side.b, "sidecar lists {} labels for b = {}", side.labels.len(), side.b);
    ensure!(side.range[0] < side.range[1], "sidecar range must be increasing");
    let x = read_raw(path, side.n, side.b)?;
    Ok(LoadedBatch { batch: Batch::new(x, side.labels)?, range: (side.range[0], side.range[1]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub weight_grad: MatrixEntry,
    pub bias_grad: MatrixEntry,
    pub weight: MatrixEntry,
    pub bias: MatrixEntry,
    /// Input the layer saw, kept as ground truth for offline evaluation.
    pub input: Option<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientManifest {
    pub b: usize,
    pub range: [f64; 2],
    pub layers: Vec<LayerEntry>,
}

/// Shared gradients plus the weights they were taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDump {
    pub params: NetworkParams<f64>,
    pub gradients: GradientCapture<f64>,
    pub layer_inputs: Vec<Option<Matrix64>>,
    pub b: usize,
    pub range: (f64, f64),
}

pub const MANIFEST: &str = "gradients.json";

pub fn write_gradient_dump(dir: &Path, dump: &GradientDump) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut layers = Vec::new();
    let put = |name: String, m: &Matrix64| -> Result<MatrixEntry> {
        write_raw(&dir.join(&name), m)?;
        Ok(MatrixEntry { file: name, rows: m.nrows(), cols: m.ncols() })
    };
    for (l, (p, g)) in dump.params.layers.iter().zip(&dump.gradients.layers).enumerate() {
        let k = l + 1;
        let col = |v: &Vector64| Matrix64::from_column_slice(v.len(), 1, v.as_slice());
        layers.push(LayerEntry {
            weight_grad: put(format!("layer{k}_dW.bin"), &g.weight)?,
            bias_grad: put(format!("layer{k}_db.bin"), &col(&g.bias))?,
            weight: put(format!("layer{k}_W.bin"), &p.weight)?,
            bias: put(format!("layer{k}_b.bin"), &col(&p.bias))?,
            input: match dump.layer_inputs.get(l).and_then(Option::as_ref) {
                Some(x) => Some(put(format!("layer{k}_input.bin"), x)?),
                None => None,
            },
        });
    }
    let manifest = GradientManifest { b: dump.b, range: [dump.range.0, dump.range.1], layers };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads a dump from its manifest path or containing directory.
pub fn read_gradient_dump(path: &Path) -> Result<GradientDump> {
    let (dir, manifest_path) = if path.is_dir() { (path.to_path_buf(), path.join(MANIFEST)) } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let manifest: GradientManifest = read_json(&manifest_path)?;
    let get = |e: &MatrixEntry| read_raw(&dir.join(&e.file), e.rows, e.cols);
    let mut layers = Vec::new();
    let mut grads = Vec::new();
    let mut inputs = Vec::new();
    for (l, e) in manifest.layers.iter().enumerate() {
        ensure!(e.bias.cols == 1 && e.bias_grad.cols == 1, "layer {}: biases must be single columns", l + 1);
        let weight = get(&e.weight)?;
        let weight_grad = get(&e.weight_grad)?;
        ensure!(weight.shape() == weight_grad.shape(), "layer {}: W and dW shapes differ", l + 1);
        layers.push(spear::fcnn::Layer { weight, bias: get(&e.bias)?.column(0).into_owned(), relu: l + 1 < manifest.layers.len() });
        grads.push(spear::fcnn::LayerGradient { weight: weight_grad, bias: get(&e.bias_grad)?.column(0).into_owned() });
        inputs.push(e.input.as_ref().map(get).transpose()?);
    }
    Ok(GradientDump {
        params: NetworkParams::new(layers)?,
        gradients: GradientCapture { layers: grads },
        layer_inputs: inputs,
        b: manifest.b,
        range: (manifest.range[0], manifest.range[1]),
    })
}
