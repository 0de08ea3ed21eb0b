//! Synthetic domain pairs and dataset files.
//!
//! Datasets are stored as JSON lines: a header object `{"N", "d_in", "m"}`
//! followed by one `{"x": [...], "y": int | null, "domain": "source" | "target"}`
//! record per sample.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Samples with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Option<Vec<usize>>,
    domain: Domain,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Option<Vec<usize>>,
        domain: Domain,
        n_classes: usize,
    ) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::EmptyInput("dataset"));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if n_classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        if let Some(y) = &labels {
            if y.len() != inputs.nrows() {
                return Err(Error::invalid("one label per sample required"));
            }
            if let Some(bad) = y.iter().find(|&&c| c >= n_classes) {
                return Err(Error::invalid(format!(
                    "label {bad} outside [0, {n_classes})"
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            domain,
            n_classes,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn class_count(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Same samples with labels removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Labels wrapped for evaluation use only.
    pub fn eval_labels(&self) -> Option<EvalLabels> {
        self.labels.as_ref().map(|y| EvalLabels {
            labels: y.clone(),
            n_classes: self.n_classes,
        })
    }

    /// Writes the JSON-lines representation.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            n: self.n_classes,
            d_in: self.dim(),
            m: self.len(),
        };
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for (i, x) in self.inputs.rows().into_iter().enumerate() {
            let rec = Record {
                x: x.to_vec(),
                y: self.labels.as_ref().map(|y| y[i]),
                domain: self.domain,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a JSON-lines dataset. Labels must be all present or all null,
    /// and every record must carry the same domain.
    pub fn load(path: &Path) -> Result<Dataset> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(parse(1, "missing header".into())),
        };
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| parse(1, e.to_string()))?;
        let mut values = Vec::with_capacity(header.m * header.d_in);
        let mut labels = Vec::with_capacity(header.m);
        let mut domain = None;
        let mut count = 0;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
            if rec.x.len() != header.d_in {
                return Err(parse(
                    lineno,
                    format!("expected {} features, found {}", header.d_in, rec.x.len()),
                ));
            }
            if *domain.get_or_insert(rec.domain) != rec.domain {
                return Err(parse(lineno, "mixed domains in one file".into()));
            }
            if let Some(y) = rec.y {
                if y >= header.n {
                    return Err(parse(
                        lineno,
                        format!("label {y} outside [0, {})", header.n),
                    ));
                }
            }
            if count > 0 && rec.y.is_some() != labels.first().is_some_and(Option::is_some) {
                return Err(parse(
                    lineno,
                    "labels must be all present or all null".into(),
                ));
            }
            values.extend(rec.x);
            labels.push(rec.y);
            count += 1;
        }
        if count != header.m {
            return Err(parse(
                count + 2,
                format!("header declares {} samples, found {count}", header.m),
            ));
        }
        let inputs = Array2::from_shape_vec((count, header.d_in), values)
            .map_err(|e| parse(1, e.to_string()))?;
        let labels = labels.into_iter().collect::<Option<Vec<_>>>();
        Dataset::new(inputs, labels, domain.unwrap_or(Domain::Source), header.n)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "N")]
    n: usize,
    d_in: usize,
    m: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    x: Vec<f64>,
    y: Option<usize>,
    domain: Domain,
}

/// Ground-truth target labels. Only scoring operations can read them, so
/// adaptation code cannot consume them by accident.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLabels {
    labels: Vec<usize>,
    n_classes: usize,
}

impl EvalLabels {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("evaluation labels"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(Self { labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Fraction of `predictions` equal to the truth.
    pub fn accuracy(&self, predictions: &[usize]) -> Result<f64> {
        accuracy(predictions, &self.labels)
    }

    /// Fraction of `(sample index, label)` pairs that are correct, or `None`
    /// when there are no pairs.
    pub fn subset_accuracy(
        &self,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Option<f64>> {
        let mut total = 0usize;
        let mut hits = 0usize;
        for (i, y) in pairs {
            let truth = *self
                .labels
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample {i} has no evaluation label")))?;
            total += 1;
            hits += usize::from(truth == y);
        }
        Ok((total > 0).then(|| hits as f64 / total as f64))
    }
}

/// `|{i : predictions_i = truth_i}| / n`.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Default radius of the ring of class centres.
pub const BLOB_RADIUS: f64 = 4.0;

/// Gaussian blobs with class `k` centred at angle `2πk/N` on a ring of
/// radius [`BLOB_RADIUS`] in the plane of coordinates 0 and 1. Samples are
/// ordered class by class.
pub fn gen_blobs(
    n_classes: usize,
    per_class: usize,
    d_in: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    gen_blobs_with_radius(n_classes, per_class, d_in, sigma, BLOB_RADIUS, seed)
}

pub fn gen_blobs_with_radius(
    n_classes: usize,
    per_class: usize,
    d_in: usize,
    sigma: f64,
    radius: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || per_class == 0 || d_in < 2 {
        return Err(Error::invalid(format!(
            "blobs need N >= 2, per_class >= 1, d_in >= 2 (got {n_classes}, {per_class}, {d_in})"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) || !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid("blob spread must be >= 0 and radius > 0"));
    }
    let mut rng = SeededRng::new(seed);
    let m = n_classes * per_class;
    let mut inputs = Array2::zeros((m, d_in));
    let mut labels = Vec::with_capacity(m);
    for k in 0..n_classes {
        let angle = TAU * k as f64 / n_classes as f64;
        let mut centre = Array1::zeros(d_in);
        centre[0] = radius * angle.cos();
        centre[1] = radius * angle.sin();
        for j in 0..per_class {
            let mut row = inputs.row_mut(k * per_class + j);
            for (x, c) in row.iter_mut().zip(centre.iter()) {
                *x = c + sigma * rng.normal();
            }
            labels.push(k);
        }
    }
    Dataset::new(inputs, Some(labels), Domain::Source, n_classes)
}

/// Domain shift applied in the order rotate, scale, translate, add noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Radians, in the plane of coordinates 0 and 1.
    pub rotation: f64,
    /// Added to the leading coordinates; missing entries are zero.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "shift scale {} must be > 0",
                self.scale
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!(
                "shift noise {} must be >= 0",
                self.noise
            )));
        }
        if !self.rotation.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("shift parameters must be finite"));
        }
        if self.translation.len() > d_in {
            return Err(Error::invalid(format!(
                "translation has {} entries for dimension {d_in}",
                self.translation.len()
            )));
        }
        Ok(())
    }
}

/// Shifted copy of `ds` tagged as target. Labels are kept for evaluation.
pub fn apply_shift(ds: &Dataset, spec: &ShiftSpec, seed: u64) -> Result<Dataset> {
    spec.validate(ds.dim())?;
    let mut rng = SeededRng::new(seed);
    let (sin, cos) = spec.rotation.sin_cos();
    let mut inputs = ds.inputs.clone();
    for mut row in inputs.rows_mut() {
        let (u, v) = (row[0], row[1]);
        row[0] = cos * u - sin * v;
        row[1] = sin * u + cos * v;
        row *= spec.scale;
        for (x, t) in row.iter_mut().zip(&spec.translation) {
            *x += t;
        }
        if spec.noise > 0.0 {
            row.iter_mut().for_each(|x| *x += spec.noise * rng.normal());
        }
    }
    Dataset::new(inputs, ds.labels.clone(), Domain::Target, ds.n_classes)
}

/// The standard four-class benchmark: source blobs in six dimensions and a
/// rotated, translated, noisier target.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardTask {
    pub source: Dataset,
    pub target: Dataset,
}

impl StandardTask {
    pub const NAME: &'static str = "shifted-blobs-4";
    pub const N_CLASSES: usize = 4;
    pub const PER_CLASS: usize = 150;
    pub const D_IN: usize = 6;
    pub const SIGMA: f64 = 0.5;

    pub fn shift() -> ShiftSpec {
        ShiftSpec {
            rotation: 0.6,
            translation: vec![1.0, -0.5, 0.0, 0.0, 0.0, 0.0],
            scale: 1.0,
            noise: 0.1,
        }
    }

    /// Source and target drawn from independent streams derived from `seed`.
    pub fn generate(seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let source = gen_blobs(
            Self::N_CLASSES,
            Self::PER_CLASS,
            Self::D_IN,
            Self::SIGMA,
            rng.fork().seed(),
        )?;
        let fresh = gen_blobs(
            Self::N_CLASSES,
            Self::PER_CLASS,
            Self::D_IN,
            Self::SIGMA,
            rng.fork().seed(),
        )?;
        let target = apply_shift(&fresh, &Self::shift(), rng.fork().seed())?;
        Ok(Self { source, target })
    }
}
