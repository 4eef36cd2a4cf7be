//! Line-oriented text formats. Every file starts with a `<name> v1` line,
//! followed by `key value` header lines and then data rows of
//! space-separated values. Reals are written in the shortest form that
//! parses back to the same value, so write then read reproduces every bit.
//! The grammars are listed in `docs/formats.md`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::basis::BasisMatrix;
use crate::cluster::ClusterModel;
use crate::data::{Dataset, GroundTruth, PseudoLabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::model::{Dense, EmbeddingParams};
use crate::numerics::Matrix;

pub const DATA_MAGIC: &str = "slade-data v1";
pub const PARAMS_MAGIC: &str = "slade-params v1";
pub const KMEANS_MAGIC: &str = "slade-kmeans v1";
pub const BASIS_MAGIC: &str = "slade-basis v1";
pub const PSEUDO_MAGIC: &str = "slade-pseudo v1";
pub const TRUTH_MAGIC: &str = "slade-truth v1";

/// Cursor over non-empty lines, tracking 1-based line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let line = line.trim();
            if !line.is_empty() {
                return Some((i + 1, line));
            }
        }
        None
    }

    fn require(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_line().ok_or_else(|| {
            Error::parse(
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )
        })
    }

    fn magic(&mut self, magic: &str) -> Result<()> {
        let (n, line) = self.require(magic)?;
        if line != magic {
            return Err(Error::parse(
                n,
                format!("bad header `{line}`, expected `{magic}`"),
            ));
        }
        Ok(())
    }

    /// A `key value` line; returns the value text.
    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.require(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((n, v.trim())),
            _ => Err(Error::parse(
                n,
                format!("expected `{key} <value>`, found `{line}`"),
            )),
        }
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let (n, v) = self.keyed(key)?;
        parse_usize(n, v)
    }

    fn keyed_bool(&mut self, key: &str) -> Result<bool> {
        let (n, v) = self.keyed(key)?;
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::parse(
                n,
                format!("`{key}` must be true or false, found `{v}`"),
            )),
        }
    }

    fn finish(&mut self) -> Result<()> {
        match self.next_line() {
            Some((n, line)) => Err(Error::parse(
                n,
                format!("unexpected trailing content `{line}`"),
            )),
            None => Ok(()),
        }
    }

    fn real_row(&mut self, width: usize, what: &str) -> Result<Vec<f64>> {
        let (n, line) = self.require(what)?;
        parse_reals(n, line, width)
    }

    fn real_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.real_row(cols, what)?);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("expected a nonnegative integer, found `{s}`")))
}

fn parse_real(line: usize, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::parse(
            line,
            format!("expected a finite number, found `{s}`"),
        )),
    }
}

fn parse_reals(line: usize, text: &str, width: usize) -> Result<Vec<f64>> {
    let values = text
        .split_whitespace()
        .map(|t| parse_real(line, t))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != width {
        return Err(Error::parse(
            line,
            format!("expected {width} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn push_row(out: &mut String, prefix: Option<&str>, values: &[f64]) {
    let mut first = true;
    if let Some(p) = prefix {
        out.push_str(p);
        first = false;
    }
    for v in values {
        if !first {
            out.push(' ');
        }
        write!(out, "{v:?}").unwrap();
        first = false;
    }
    out.push('\n');
}

pub fn write_dataset(data: &Dataset) -> String {
    let labeled = data.is_labeled();
    let mut out = format!("{DATA_MAGIC}\ndim {}\nlabeled {labeled}\n", data.dim());
    for (row, label) in data.features.iter_rows().zip(&data.labels) {
        let id = label.map_or_else(|| "?".to_string(), |l| l.to_string());
        push_row(&mut out, Some(&id), row);
    }
    out
}

/// Parses a data file. With `labeled true` every row needs a class id; with
/// `labeled false` rows may start with `?` to mark them unlabeled.
pub fn read_dataset(text: &str) -> Result<Dataset> {
    let mut lines = Lines::new(text);
    lines.magic(DATA_MAGIC)?;
    let dim = lines.keyed_usize("dim")?;
    let labeled = lines.keyed_bool("labeled")?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    while let Some((n, line)) = lines.next_line() {
        let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
        let label = if head == "?" {
            None
        } else {
            Some(head.parse::<usize>().map_err(|_| {
                Error::parse(
                    n,
                    format!("class id must be a nonnegative integer or `?`, found `{head}`"),
                )
            })?)
        };
        if labeled && label.is_none() {
            return Err(Error::parse(
                n,
                format!("row class `{head}` disagrees with header `labeled {labeled}`"),
            ));
        }
        values.extend(parse_reals(n, rest, dim)?);
        labels.push(label);
    }
    let features = Matrix::from_vec(labels.len(), dim, values)?;
    Dataset::new(features, labels)
}

pub fn write_params(params: &EmbeddingParams) -> String {
    let mut out = format!(
        "{PARAMS_MAGIC}\nnormalize {}\ndims",
        params.normalize_output()
    );
    for d in params.layer_dims() {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    for (i, layer) in params.layers().iter().enumerate() {
        let w = &layer.weights;
        writeln!(out, "layer {i}\nweights {} {}", w.rows(), w.cols()).unwrap();
        for row in w.iter_rows() {
            push_row(&mut out, None, row);
        }
        writeln!(out, "bias {}", layer.bias.len()).unwrap();
        push_row(&mut out, None, &layer.bias);
    }
    out
}

pub fn read_params(text: &str) -> Result<EmbeddingParams> {
    let mut lines = Lines::new(text);
    lines.magic(PARAMS_MAGIC)?;
    let normalize = lines.keyed_bool("normalize")?;
    let (n, dims_text) = lines.keyed("dims")?;
    let dims = dims_text
        .split_whitespace()
        .map(|t| parse_usize(n, t))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() < 2 {
        return Err(Error::parse(n, "need at least two layer widths"));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 1 {
        let (n, idx) = lines.keyed("layer")?;
        if parse_usize(n, idx)? != i {
            return Err(Error::parse(n, format!("expected layer {i}")));
        }
        let (n, shape) = lines.keyed("weights")?;
        let shape = shape
            .split_whitespace()
            .map(|t| parse_usize(n, t))
            .collect::<Result<Vec<_>>>()?;
        if shape != [dims[i + 1], dims[i]] {
            return Err(Error::parse(
                n,
                format!("layer {i} weights must be {} {}", dims[i + 1], dims[i]),
            ));
        }
        let weights = lines.real_matrix(dims[i + 1], dims[i], "weight row")?;
        let (n, len) = lines.keyed("bias")?;
        if parse_usize(n, len)? != dims[i + 1] {
            return Err(Error::parse(
                n,
                format!("layer {i} bias must have {} values", dims[i + 1]),
            ));
        }
        let bias = lines.real_row(dims[i + 1], "bias row")?;
        layers.push(Dense { weights, bias });
    }
    lines.finish()?;
    EmbeddingParams::from_layers(layers, normalize)
}

/// First 16 hex digits of the SHA-256 of the canonical params file.
pub fn checkpoint_id(params: &EmbeddingParams) -> String {
    let digest = Sha256::digest(write_params(params).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn write_basis(basis: &BasisMatrix) -> String {
    let mut out = format!(
        "{BASIS_MAGIC}\nrows {}\ndim {}\n",
        basis.count(),
        basis.dim()
    );
    for row in basis.matrix().iter_rows() {
        push_row(&mut out, None, row);
    }
    out
}

pub fn read_basis(text: &str) -> Result<BasisMatrix> {
    let mut lines = Lines::new(text);
    lines.magic(BASIS_MAGIC)?;
    let rows = lines.keyed_usize("rows")?;
    let dim = lines.keyed_usize("dim")?;
    let m = lines.real_matrix(rows, dim, "basis row")?;
    lines.finish()?;
    BasisMatrix::new(m)
}

pub fn write_kmeans(model: &ClusterModel) -> String {
    let mut out = format!(
        "{KMEANS_MAGIC}\nk {}\ndim {}\ninertia {:?}\n",
        model.k,
        model.centers.cols(),
        model.inertia
    );
    for row in model.centers.iter_rows() {
        push_row(&mut out, None, row);
    }
    out
}

pub fn read_kmeans(text: &str) -> Result<ClusterModel> {
    let mut lines = Lines::new(text);
    lines.magic(KMEANS_MAGIC)?;
    let k = lines.keyed_usize("k")?;
    let dim = lines.keyed_usize("dim")?;
    let (n, inertia) = lines.keyed("inertia")?;
    let inertia = parse_real(n, inertia)?;
    let centers = lines.real_matrix(k, dim, "center row")?;
    lines.finish()?;
    Ok(ClusterModel {
        k,
        centers,
        inertia,
    })
}

fn write_label_lines(out: &mut String, labels: &[usize]) {
    for l in labels {
        writeln!(out, "{l}").unwrap();
    }
}

fn read_label_lines(lines: &mut Lines<'_>, count: usize) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines.require("label")?;
        labels.push(parse_usize(n, line)?);
    }
    lines.finish()?;
    Ok(labels)
}

/// Pseudo labels only; the samples themselves stay in the unlabeled data
/// file.
pub fn write_pseudo_labels(set: &PseudoLabeledSet) -> String {
    let mut out = format!(
        "{PSEUDO_MAGIC}\nteacher {}\nk {}\ncount {}\n",
        set.teacher_id,
        set.k,
        set.len()
    );
    write_label_lines(&mut out, &set.labels);
    out
}

/// Attaches pseudo labels from `text` to `samples`.
pub fn read_pseudo_labels(text: &str, samples: UnlabeledSet) -> Result<PseudoLabeledSet> {
    let mut lines = Lines::new(text);
    lines.magic(PSEUDO_MAGIC)?;
    let (_, teacher) = lines.keyed("teacher")?;
    let teacher = teacher.to_string();
    let k = lines.keyed_usize("k")?;
    let (n, count) = lines.keyed("count")?;
    let count = parse_usize(n, count)?;
    if count != samples.len() {
        return Err(Error::parse(
            n,
            format!(
                "{count} pseudo labels for {} unlabeled samples",
                samples.len()
            ),
        ));
    }
    let labels = read_label_lines(&mut lines, count)?;
    PseudoLabeledSet::new(samples, labels, k, teacher)
}

pub fn write_truth(truth: &GroundTruth) -> String {
    let mut out = format!("{TRUTH_MAGIC}\ncount {}\n", truth.0.len());
    write_label_lines(&mut out, &truth.0);
    out
}

pub fn read_truth(text: &str) -> Result<GroundTruth> {
    let mut lines = Lines::new(text);
    lines.magic(TRUTH_MAGIC)?;
    let count = lines.keyed_usize("count")?;
    Ok(GroundTruth(read_label_lines(&mut lines, count)?))
}

pub fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, text)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&read_text(path)?)
}

pub fn load_params(path: &Path) -> Result<EmbeddingParams> {
    read_params(&read_text(path)?)
}
