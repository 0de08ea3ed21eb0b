//! Two-stage network: a tanh MLP feature extractor followed by a linear
//! softmax classifier, with hand-written backpropagation of the adaptation
//! objective.
//!
//! ```text
//! h = tanh(W1ᵀ x + b1)        d_in -> d_h
//! f = tanh(W2ᵀ h + b2)        d_h  -> d_f   (features)
//! p = softmax(Wcᵀ f + bc)     d_f  -> N     (class probabilities)
//! ```
//!
//! The same type holds the frozen source model and the adapting target copy;
//! the `frozen` flag makes every mutating operation fail with
//! [`Error::FrozenModel`].

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mvcl::{self, AttentionMode, LossWeights};
use crate::numeric::{entropy_of, softmax_unchecked, ProbVector, SeededRng};

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub n_classes: usize,
}

/// The six parameter tensors, in declaration (and serialization) order.
/// Also used for gradients and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

impl ParamTensors {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w1: Array2::zeros((dims.d_in, dims.d_h)),
            b1: Array1::zeros(dims.d_h),
            w2: Array2::zeros((dims.d_h, dims.d_f)),
            b2: Array1::zeros(dims.d_f),
            wc: Array2::zeros((dims.d_f, dims.n_classes)),
            bc: Array1::zeros(dims.n_classes),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_in: self.w1.nrows(),
            d_h: self.w1.ncols(),
            d_f: self.w2.ncols(),
            n_classes: self.wc.ncols(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dims();
        let ok = self.b1.len() == d.d_h
            && self.w2.nrows() == d.d_h
            && self.b2.len() == d.d_f
            && self.wc.nrows() == d.d_f
            && self.bc.len() == d.n_classes;
        if !ok {
            return Err(Error::invalid("inconsistent parameter tensor shapes"));
        }
        if d.d_in == 0 || d.d_h == 0 || d.d_f == 0 || d.n_classes == 0 {
            return Err(Error::invalid("zero-sized layer"));
        }
        Ok(())
    }

    /// Row-major views of every tensor, in declaration order.
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.wc.as_slice().expect("standard layout"),
            self.bc.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.wc.as_slice_mut().expect("standard layout"),
            self.bc.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Network weights plus the frozen flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: ParamTensors,
    frozen: bool,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub input: Array1<f64>,
    pub hidden: Array1<f64>,
    pub features: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: ProbVector,
}

impl ModelParams {
    pub fn from_tensors(tensors: ParamTensors, frozen: bool) -> Result<Self> {
        tensors.check_shapes()?;
        if tensors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self { tensors, frozen })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: Dims, rng: &mut SeededRng) -> Result<Self> {
        let mut t = ParamTensors::zeros(dims);
        t.check_shapes()?;
        for w in [&mut t.w1, &mut t.w2, &mut t.wc] {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.uniform(-bound, bound));
        }
        Ok(Self {
            tensors: t,
            frozen: false,
        })
    }

    pub fn tensors(&self) -> &ParamTensors {
        &self.tensors
    }

    pub fn dims(&self) -> Dims {
        self.tensors.dims()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen copy of these parameters.
    pub fn frozen_copy(&self) -> Self {
        Self {
            tensors: self.tensors.clone(),
            frozen: true,
        }
    }

    /// Trainable copy of these parameters (the target model's starting point).
    pub fn unfrozen_copy(&self) -> Self {
        Self {
            tensors: self.tensors.clone(),
            frozen: false,
        }
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<ForwardRecord> {
        let d = self.dims();
        if x.len() != d.d_in {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                d.d_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input"));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: ArrayView1<'_, f64>) -> ForwardRecord {
        let t = &self.tensors;
        let hidden = (x.dot(&t.w1) + &t.b1).mapv(f64::tanh);
        let features = (hidden.dot(&t.w2) + &t.b2).mapv(f64::tanh);
        let logits = features.dot(&t.wc) + &t.bc;
        let probs = ProbVector::new(softmax_unchecked(logits.as_slice().expect("contiguous")))
            .expect("softmax of finite logits");
        ForwardRecord {
            input: x.to_owned(),
            hidden,
            features,
            logits,
            probs,
        }
    }

    /// Predicted class (lowest index on ties) and the entropy of the prediction.
    pub fn predict_with_entropy(&self, x: ArrayView1<'_, f64>) -> Result<(usize, f64)> {
        let rec = self.forward(x)?;
        Ok((rec.probs.argmax(), entropy_of(rec.probs.as_slice())))
    }

    /// Feature extractor output for each row of `inputs`.
    pub fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let d = self.dims();
        let mut out = Array2::zeros((inputs.nrows(), d.d_f));
        for (mut row, x) in out.rows_mut().into_iter().zip(inputs.rows()) {
            row.assign(&self.forward(x)?.features);
        }
        Ok(out)
    }

    /// Predicted labels for each row of `inputs`.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        inputs
            .rows()
            .into_iter()
            .map(|x| Ok(self.forward(x)?.probs.argmax()))
            .collect()
    }

    /// Accumulates the gradient of a scalar loss into `grads`, given the loss
    /// gradient with respect to this record's features and logits.
    fn backprop(
        &self,
        rec: &ForwardRecord,
        d_features: Option<ArrayView1<'_, f64>>,
        d_logits: Option<ArrayView1<'_, f64>>,
        grads: &mut ParamTensors,
    ) {
        let t = &self.tensors;
        let mut df = match d_features {
            Some(d) => d.to_owned(),
            None => Array1::zeros(rec.features.len()),
        };
        if let Some(dl) = d_logits {
            outer_add(&mut grads.wc, rec.features.view(), dl);
            grads.bc += &dl;
            df += &t.wc.dot(&dl);
        }
        let da2 = &df * &rec.features.mapv(|f| 1.0 - f * f);
        outer_add(&mut grads.w2, rec.hidden.view(), da2.view());
        grads.b2 += &da2;
        let dh = t.w2.dot(&da2);
        let da1 = &dh * &rec.hidden.mapv(|h| 1.0 - h * h);
        outer_add(&mut grads.w1, rec.input.view(), da1.view());
        grads.b1 += &da1;
    }

    /// Composite adaptation loss and, when requested, its gradient.
    fn evaluate(
        &self,
        batch: &AdaptBatch<'_>,
        spec: &LossSpec,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<ParamTensors>)> {
        batch.validate(self.dims())?;
        let m = batch.inputs.nrows();
        let mut grads = want_grad.then(|| ParamTensors::zeros(self.dims()));
        let mut out = LossBreakdown::default();
        let w = spec.weights;

        // cross-entropy over retained pseudo-labels, on the un-augmented inputs
        let labeled: Vec<(usize, usize)> = batch
            .pseudo_labels
            .iter()
            .enumerate()
            .filter_map(|(i, y)| y.map(|y| (i, y)))
            .collect();
        if w.ce > 0.0 && !labeled.is_empty() {
            let scale = 1.0 / labeled.len() as f64;
            for &(i, y) in &labeled {
                let rec = self.forward_unchecked(batch.inputs.row(i));
                let p = rec.probs.as_slice();
                out.ce += -p[y].max(f64::MIN_POSITIVE).ln() * scale;
                if let Some(g) = grads.as_mut() {
                    let mut dl = Array1::from(p.to_vec());
                    dl[y] -= 1.0;
                    dl *= w.ce * scale;
                    self.backprop(&rec, None, Some(dl.view()), g);
                }
            }
        }

        let needs_views =
            (w.con > 0.0 && batch.views.len() >= 2) || (w.clu > 0.0 && batch.centroids.is_some());
        if !needs_views {
            out.total = w.ce * out.ce;
            return Ok((out, grads));
        }

        let view_records: Vec<Vec<ForwardRecord>> = batch
            .views
            .iter()
            .map(|v| {
                v.rows()
                    .into_iter()
                    .map(|x| self.forward_unchecked(x))
                    .collect()
            })
            .collect();
        let d_f = self.dims().d_f;
        // gradient w.r.t. each view's features, accumulated over both terms
        let mut d_view_feats: Vec<Array2<f64>> = (0..batch.views.len())
            .map(|_| Array2::zeros((m, d_f)))
            .collect();

        if w.con > 0.0 && batch.views.len() >= 2 {
            let mut emb = Array2::zeros((2 * m, d_f));
            for (i, (a, b)) in view_records[0].iter().zip(&view_records[1]).enumerate() {
                emb.row_mut(i).assign(&a.features);
                emb.row_mut(m + i).assign(&b.features);
            }
            let attention = batch
                .positive_attention
                .ok_or_else(|| Error::invalid("contrastive term needs positive-pair attention"))?;
            let (sum, grad) =
                mvcl::contrastive_terms(emb.view(), spec.tau, attention, spec.attention_mode)?;
            let scale = 1.0 / (2 * m) as f64;
            out.con = sum * scale;
            if want_grad {
                let grad = grad * (w.con * scale);
                d_view_feats[0] += &grad.slice(ndarray::s![..m, ..]);
                d_view_feats[1] += &grad.slice(ndarray::s![m.., ..]);
            }
        }

        if let (true, Some(centroids)) = (w.clu > 0.0, batch.centroids) {
            let fused_dim = d_f * batch.views.len();
            if centroids.ncols() != fused_dim {
                return Err(Error::invalid(format!(
                    "centroids have dimension {}, fused embeddings {}",
                    centroids.ncols(),
                    fused_dim
                )));
            }
            let scale = 1.0 / m as f64;
            let mut z = Array1::zeros(fused_dim);
            for i in 0..m {
                for (v, recs) in view_records.iter().enumerate() {
                    let wv = batch.view_weights[v];
                    z.slice_mut(ndarray::s![v * d_f..(v + 1) * d_f])
                        .assign(&(&recs[i].features * wv));
                }
                let (j, dist) = mvcl::nearest_centroid(z.view(), centroids);
                out.clu += dist * scale;
                if want_grad {
                    let diff = &z - &centroids.row(j);
                    for (v, dv) in d_view_feats.iter_mut().enumerate() {
                        let block = diff.slice(ndarray::s![v * d_f..(v + 1) * d_f]);
                        let mut row = dv.row_mut(i);
                        row.scaled_add(2.0 * w.clu * scale * batch.view_weights[v], &block);
                    }
                }
            }
        }

        if let Some(g) = grads.as_mut() {
            for (recs, dv) in view_records.iter().zip(&d_view_feats) {
                for (rec, d) in recs.iter().zip(dv.rows()) {
                    if d.iter().any(|v| *v != 0.0) {
                        self.backprop(rec, Some(d), None, g);
                    }
                }
            }
        }
        out.total = w.con * out.con + w.ce * out.ce + w.clu * out.clu;
        Ok((out, grads))
    }

    /// Composite loss value only. Does not require a trainable model.
    pub fn loss(&self, batch: &AdaptBatch<'_>, spec: &LossSpec) -> Result<LossBreakdown> {
        Ok(self.evaluate(batch, spec, false)?.0)
    }

    /// Composite loss and its analytic gradient with respect to every tensor.
    pub fn loss_and_grad(
        &self,
        batch: &AdaptBatch<'_>,
        spec: &LossSpec,
    ) -> Result<(LossBreakdown, ParamTensors)> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        let (loss, grads) = self.evaluate(batch, spec, true)?;
        if !loss.total.is_finite() {
            return Err(Error::invalid("loss is not finite"));
        }
        Ok((loss, grads.expect("gradient requested")))
    }

    /// Momentum SGD: `v <- momentum * v + g`, `θ <- θ - lr * v`.
    pub fn sgd_step(
        &mut self,
        grads: &ParamTensors,
        lr: f64,
        momentum: f64,
        state: &mut SgdState,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if grads.dims() != self.dims() {
            return Err(Error::invalid("gradient shape does not match parameters"));
        }
        let velocity = state
            .velocity
            .get_or_insert_with(|| ParamTensors::zeros(self.dims()));
        if velocity.dims() != self.dims() {
            return Err(Error::invalid(
                "optimizer state belongs to a different model",
            ));
        }
        velocity.scale(momentum);
        for ((v, g), p) in velocity
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.tensors.slices_mut())
        {
            for ((v, g), p) in v.iter_mut().zip(g).zip(p.iter_mut()) {
                *v += g;
                *p -= lr * *v;
            }
        }
        if self.tensors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters diverged to a non-finite value"));
        }
        Ok(())
    }

    /// Little-endian binary encoding; see [`ModelParams::from_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims();
        let mut out = Vec::with_capacity(MAGIC.len() + 37 + 8 * self.tensors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for n in [d.d_in, d.d_h, d.d_f, d.n_classes] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.push(u8::from(self.frozen));
        for v in self.tensors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes the binary model format:
    ///
    /// | offset | size | field                                  |
    /// |--------|------|----------------------------------------|
    /// | 0      | 8    | magic `SFUDAMDL`                       |
    /// | 8      | 4    | format version, u32 LE (currently 1)   |
    /// | 12     | 32   | `d_in`, `d_h`, `d_f`, `N` as u64 LE    |
    /// | 44     | 1    | frozen flag (0 or 1)                   |
    /// | 45     | 8·k  | f64 LE: W1, b1, W2, b2, Wc, bc         |
    ///
    /// Matrices are row-major (`W1` is `d_in x d_h`, `W2` is `d_h x d_f`,
    /// `Wc` is `d_f x N`).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::invalid(format!("model file: {msg}"));
        if bytes.len() < 45 || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = |i: usize| -> Result<usize> {
            let raw =
                u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes"));
            usize::try_from(raw).map_err(|_| bad("dimension overflow"))
        };
        let dims = Dims {
            d_in: dim(0)?,
            d_h: dim(1)?,
            d_f: dim(2)?,
            n_classes: dim(3)?,
        };
        let frozen = match bytes[44] {
            0 => false,
            1 => true,
            _ => return Err(bad("frozen flag is not 0/1")),
        };
        let mut t = ParamTensors::zeros(dims);
        let count = t.len();
        if bytes.len() != 45 + 8 * count {
            return Err(bad(&format!(
                "expected {} bytes of weights, found {}",
                8 * count,
                bytes.len() - 45
            )));
        }
        let mut values = bytes[45..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for s in t.slices_mut() {
            for v in s.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Self::from_tensors(t, frozen)
    }

    /// Writes the binary format, or JSON when the path ends in `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_json(path) {
            serde_json::to_vec_pretty(&ModelFile::from(self)).expect("serializable")
        } else {
            self.to_bytes()
        };
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            let file: ModelFile = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: e.line(),
                message: e.to_string(),
            })?;
            file.try_into()
        } else {
            Self::from_bytes(&bytes)
        }
    }
}

const MAGIC: &[u8; 8] = b"SFUDAMDL";
const FORMAT_VERSION: u32 = 1;

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// JSON form of [`ModelParams`]: the same header fields, then flat row-major arrays.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    d_in: usize,
    d_h: usize,
    d_f: usize,
    n_classes: usize,
    frozen: bool,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    wc: Vec<f64>,
    bc: Vec<f64>,
}

impl From<&ModelParams> for ModelFile {
    fn from(p: &ModelParams) -> Self {
        let d = p.dims();
        let [w1, b1, w2, b2, wc, bc] = p.tensors.slices().map(<[f64]>::to_vec);
        Self {
            d_in: d.d_in,
            d_h: d.d_h,
            d_f: d.d_f,
            n_classes: d.n_classes,
            frozen: p.frozen,
            w1,
            b1,
            w2,
            b2,
            wc,
            bc,
        }
    }
}

impl TryFrom<ModelFile> for ModelParams {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let shape_err = |_| Error::invalid("model file: array length does not match header");
        let t = ParamTensors {
            w1: Array2::from_shape_vec((f.d_in, f.d_h), f.w1).map_err(shape_err)?,
            b1: Array1::from(f.b1),
            w2: Array2::from_shape_vec((f.d_h, f.d_f), f.w2).map_err(shape_err)?,
            b2: Array1::from(f.b2),
            wc: Array2::from_shape_vec((f.d_f, f.n_classes), f.wc).map_err(shape_err)?,
            bc: Array1::from(f.bc),
        };
        ModelParams::from_tensors(t, f.frozen)
    }
}

fn outer_add(target: &mut Array2<f64>, left: ArrayView1<'_, f64>, right: ArrayView1<'_, f64>) {
    for (mut row, &l) in target.axis_iter_mut(Axis(0)).zip(left.iter()) {
        if l != 0.0 {
            row.scaled_add(l, &right);
        }
    }
}

/// Optimizer state for [`ModelParams::sgd_step`].
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Option<ParamTensors>,
}

/// Component values of the composite objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub con: f64,
    pub ce: f64,
    pub clu: f64,
    pub total: f64,
}

/// Which terms of the objective are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub tau: f64,
    pub attention_mode: AttentionMode,
}

/// One mini-batch of adaptation inputs. Everything except the model
/// parameters is held constant while differentiating: pseudo-labels, view
/// weights, pair attention and centroids come from the current epoch's
/// statistics.
#[derive(Debug, Clone, Copy)]
pub struct AdaptBatch<'a> {
    /// Un-augmented inputs, `m x d_in`.
    pub inputs: ArrayView2<'a, f64>,
    /// Retained pseudo-label per input row, `None` when filtered out.
    pub pseudo_labels: &'a [Option<usize>],
    /// Augmented copies of `inputs`, one `m x d_in` matrix per view.
    pub views: &'a [ArrayView2<'a, f64>],
    /// Simplex weights of the views, used to build fused embeddings.
    pub view_weights: &'a [f64],
    /// Attention weight of each anchor towards its positive partner, for the
    /// `2m` embeddings `[view 1 rows; view 2 rows]`.
    pub positive_attention: Option<&'a [f64]>,
    /// Cluster centroids in fused-embedding space.
    pub centroids: Option<ArrayView2<'a, f64>>,
}

impl AdaptBatch<'_> {
    fn validate(&self, dims: Dims) -> Result<()> {
        let m = self.inputs.nrows();
        if m == 0 {
            return Err(Error::EmptyInput("batch"));
        }
        if self.inputs.ncols() != dims.d_in {
            return Err(Error::invalid("batch input dimension does not match model"));
        }
        if self.pseudo_labels.len() != m {
            return Err(Error::invalid(
                "one pseudo-label slot per input row required",
            ));
        }
        if self
            .pseudo_labels
            .iter()
            .flatten()
            .any(|&y| y >= dims.n_classes)
        {
            return Err(Error::invalid("pseudo-label out of range"));
        }
        if self.views.len() != self.view_weights.len() {
            return Err(Error::invalid("one weight per view required"));
        }
        for v in self.views {
            if v.dim() != self.inputs.dim() {
                return Err(Error::invalid("view shape differs from the batch"));
            }
        }
        if let Some(a) = self.positive_attention {
            if a.len() != 2 * m {
                return Err(Error::invalid("positive attention needs 2m entries"));
            }
        }
        let all_finite = self.inputs.iter().all(|v| v.is_finite())
            && self.views.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::invalid("non-finite batch input"));
        }
        Ok(())
    }
}

/// Settings for supervised training of the source model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            hidden: 16,
            feature_dim: 8,
            seed: 0,
        }
    }
}

/// Trains a model on labeled source data with plain cross-entropy and
/// returns it frozen.
pub fn pretrain_source(source: &Dataset, cfg: &PretrainConfig) -> Result<ModelParams> {
    let labels = source
        .labels()
        .ok_or_else(|| Error::invalid("source dataset must be labeled"))?;
    let n_classes = source.class_count();
    let distinct = {
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if n_classes < 2 || distinct < 2 {
        return Err(Error::invalid("source data needs at least two classes"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let dims = Dims {
        d_in: source.dim(),
        d_h: cfg.hidden,
        d_f: cfg.feature_dim,
        n_classes,
    };
    let mut model = ModelParams::init(dims, &mut rng)?;
    let inputs = source.inputs();
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut state = SgdState::default();
    let spec = LossSpec {
        weights: LossWeights::new(0.0, 1.0, 0.0)?,
        tau: 1.0,
        attention_mode: AttentionMode::Additive,
    };
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select(Axis(0), chunk);
            let y: Vec<Option<usize>> = chunk.iter().map(|&i| Some(labels[i])).collect();
            let batch = AdaptBatch {
                inputs: x.view(),
                pseudo_labels: &y,
                views: &[],
                view_weights: &[],
                positive_attention: None,
                centroids: None,
            };
            let (_, grads) = model.loss_and_grad(&batch, &spec)?;
            model.sgd_step(&grads, cfg.lr, cfg.momentum, &mut state)?;
        }
    }
    Ok(model.frozen_copy())
}
