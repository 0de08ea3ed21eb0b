//! Adaptation loop, metrics and experiment grids.
//!
//! Every epoch runs the three phases over the whole target set, then takes
//! mini-batch gradient steps on the composite objective with all per-epoch
//! statistics (pseudo-labels, view weights, attention, centroids) frozen.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EvalLabels};
use crate::error::{Error, Result};
use crate::filter::{
    attention_scores, epoch_threshold_at, filter_labels, retain_lowest_per_class,
    weighted_threshold, FilterOutcome, PseudoLabelRecord, ThresholdHistory,
};
use crate::model::{AdaptBatch, LossBreakdown, LossSpec, ModelParams, SgdState};
use crate::mvcl::{
    assign_pseudo_labels, extract_views, kmeans_restarts, pair_attention, positive_weights,
    AttentionMode, LossWeights, TransformSpec, ViewBundle,
};
use crate::numeric::{minmax_normalize, SeededRng};
use crate::rsm::{
    build_memory, compute_prototypes, compute_threshold, select_reliable, EntropyMatrix,
    EntropyScale, ReliableSampleMemory, ScoredSample,
};

/// Which phases are active. Pseudo-labeling (`pa`) gates the other two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    /// Prototype pseudo-labels with cross-entropy and clustering.
    pub pa: bool,
    /// Multiple augmented views and the contrastive term.
    pub pla: bool,
    /// Adaptive filtering of pseudo-labels.
    pub nf: bool,
}

impl Ablation {
    pub const BASE: Ablation = Ablation {
        pa: false,
        pla: false,
        nf: false,
    };
    pub const PA: Ablation = Ablation {
        pa: true,
        pla: false,
        nf: false,
    };
    pub const PA_PLA: Ablation = Ablation {
        pa: true,
        pla: true,
        nf: false,
    };
    pub const FULL: Ablation = Ablation {
        pa: true,
        pla: true,
        nf: true,
    };

    /// The four cumulative configurations, in table order.
    pub const LADDER: [Ablation; 4] = [Self::BASE, Self::PA, Self::PA_PLA, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if !self.pa && (self.pla || self.nf) {
            return Err(Error::invalid(
                "multi-view labeling and filtering require pseudo-labeling to be enabled",
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        if !self.pa {
            return "Base".into();
        }
        let mut s = String::from("+PA");
        if self.pla {
            s.push_str("+PLA");
        }
        if self.nf {
            s.push_str("+NF");
        }
        s
    }
}

/// Per-epoch loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaSchedule {
    /// Linear from `start` at the first epoch to `end` at the last.
    Linear {
        start: LossWeights,
        end: LossWeights,
    },
    Constant(LossWeights),
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Linear {
            start: LossWeights {
                con: 0.25,
                ce: 0.5,
                clu: 0.25,
            },
            end: LossWeights {
                con: 0.4,
                ce: 0.2,
                clu: 0.4,
            },
        }
    }
}

impl LambdaSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> LossWeights {
        match *self {
            LambdaSchedule::Constant(w) => w,
            LambdaSchedule::Linear { start, end } => {
                let t = if epochs <= 1 {
                    0.0
                } else {
                    epoch as f64 / (epochs - 1) as f64
                };
                LossWeights::lerp(start, end, t)
            }
        }
    }
}

/// Settings of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: LambdaSchedule,
    /// Contrastive temperature.
    pub tau: f64,
    /// Augmentations, one per view. Only the first is used without `pla`,
    /// and then replaced by the identity.
    pub views: Vec<TransformSpec>,
    /// Threshold-history window.
    pub rho: usize,
    /// Entropy-matrix rows read by the reliable-sample threshold; `None`
    /// reads the full history.
    pub rsm_window: Option<usize>,
    /// Within-class quantile of normalized entropy used as each class's
    /// representative by both thresholds. `0` is the class minimum.
    pub entropy_quantile: f64,
    /// Entropy normalization of the reliable-sample threshold. Filtering
    /// always normalizes within each class.
    pub entropy_scale: EntropyScale,
    /// Keep the leading `1/ρ` of the attention-weighted threshold.
    pub strict_threshold: bool,
    pub attention_mode: AttentionMode,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Overrides the reliable-sample threshold with a constant.
    #[doc(hidden)]
    pub fixed_eta: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            lambda: LambdaSchedule::default(),
            tau: 0.5,
            views: vec![TransformSpec::weak(), TransformSpec::strong()],
            rho: 5,
            rsm_window: Some(5),
            entropy_quantile: 0.3,
            entropy_scale: EntropyScale::MaxEntropy,
            strict_threshold: false,
            attention_mode: AttentionMode::Additive,
            kmeans_restarts: 3,
            kmeans_max_iters: 100,
            seed: 0,
            ablation: Ablation::FULL,
            fixed_eta: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        if self.ablation.pla && self.views.len() < 2 {
            return bad("multi-view labeling needs at least two views".into());
        }
        if self.rho == 0 {
            return bad("threshold window must be positive".into());
        }
        if self.rsm_window == Some(0) {
            return bad("entropy window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.entropy_quantile) {
            return bad(format!(
                "entropy quantile {} outside [0, 1]",
                self.entropy_quantile
            ));
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iters == 0 {
            return bad("k-means needs at least one restart and one iteration".into());
        }
        if let Some(eta) = self.fixed_eta {
            if !(0.0..=1.0).contains(&eta) {
                return bad(format!("fixed threshold {eta} outside [0, 1]"));
            }
        }
        for w in self.lambda_points() {
            LossWeights::new(w.con, w.ce, w.clu)?;
        }
        Ok(())
    }

    fn lambda_points(&self) -> Vec<LossWeights> {
        match self.lambda {
            LambdaSchedule::Constant(w) => vec![w],
            LambdaSchedule::Linear { start, end } => vec![start, end],
        }
    }

    fn view_specs(&self) -> Vec<TransformSpec> {
        if self.ablation.pla {
            self.views.clone()
        } else {
            vec![TransformSpec::Identity]
        }
    }
}

/// What one epoch looked like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Reliable-sample threshold.
    pub eta: f64,
    /// This epoch's filter threshold before smoothing.
    pub theta: f64,
    /// Attention-weighted filter threshold.
    pub theta_star: f64,
    pub labeling_rate: f64,
    /// Accuracy of the retained pseudo-labels.
    pub pseudo_label_accuracy: Option<f64>,
    /// Accuracy of all pseudo-labels before filtering.
    pub unfiltered_pseudo_label_accuracy: Option<f64>,
    /// Accuracy of the model after this epoch's updates.
    pub model_accuracy: Option<f64>,
    pub reliable_count: usize,
    /// Mean per-sample loss over the epoch's batches.
    pub loss: LossBreakdown,
    pub lambda: [f64; 3],
    pub view_weights: Vec<f64>,
    pub inertia: f64,
    pub alphas: Vec<f64>,
}

/// Result of [`adapt`].
#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub model: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub entropy_matrix: EntropyMatrix,
    /// Sorted per-sample entropy memory of the last epoch.
    pub memory: Option<ReliableSampleMemory>,
    /// Pseudo-labels of the last epoch.
    pub records: Vec<PseudoLabelRecord>,
}

/// Adapts a copy of the frozen `source` model to `target`. `eval` is only
/// used to score metrics.
pub fn adapt(
    source: &ModelParams,
    target: &Dataset,
    eval: Option<&EvalLabels>,
    cfg: &AdaptConfig,
) -> Result<AdaptRun> {
    if !source.is_frozen() {
        return Err(Error::invalid("source model must be frozen"));
    }
    cfg.validate()?;
    let dims = source.dims();
    if target.dim() != dims.d_in {
        return Err(Error::invalid(format!(
            "target has {} features, model expects {}",
            target.dim(),
            dims.d_in
        )));
    }
    if target.class_count() != dims.n_classes {
        return Err(Error::invalid(format!(
            "target declares {} classes, model predicts {}",
            target.class_count(),
            dims.n_classes
        )));
    }
    if let Some(ev) = eval {
        if ev.len() != target.len() {
            return Err(Error::invalid(
                "evaluation labels do not match the target size",
            ));
        }
    }
    let specs = cfg.view_specs();
    specs.iter().try_for_each(|s| s.validate(dims.d_in))?;

    let n_classes = dims.n_classes;
    let mut matrix = EntropyMatrix::new(n_classes)?
        .with_window(cfg.rsm_window)?
        .with_quantile(cfg.entropy_quantile)?
        .with_scale(cfg.entropy_scale);
    let mut run = AdaptRun {
        model: source.unfrozen_copy(),
        metrics: Vec::new(),
        entropy_matrix: matrix.clone(),
        memory: None,
        records: Vec::new(),
    };
    if cfg.epochs == 0 || !cfg.ablation.pa {
        return Ok(run);
    }

    let x = target.view();
    let m = target.len();
    let mut rng = SeededRng::new(cfg.seed);
    let mut history = ThresholdHistory::new(cfg.rho)?;
    let mut sgd = SgdState::default();
    let mut order: Vec<usize> = (0..m).collect();
    let model = &mut run.model;

    for epoch in 0..cfg.epochs {
        // phase 1: entropy bookkeeping, reliable samples, prototypes
        let predictions = x
            .rows()
            .into_iter()
            .map(|row| model.predict_with_entropy(row))
            .collect::<Result<Vec<_>>>()?;
        let mut raw = vec![Vec::new(); n_classes];
        let mut members = vec![Vec::new(); n_classes];
        for (i, &(c, h)) in predictions.iter().enumerate() {
            raw[c].push(h);
            members[c].push(i);
        }
        let normalized = matrix.record_iteration(&raw)?;
        let mut scored: Vec<ScoredSample> = Vec::with_capacity(m);
        for (c, n) in normalized.iter().enumerate() {
            if let Some(n) = n {
                for (&i, &h) in members[c].iter().zip(&n.values) {
                    scored.push(ScoredSample {
                        index: i,
                        class: c,
                        entropy: h,
                    });
                }
            }
        }
        // the filter always compares entropies within a class
        let mut filter_sets: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
        let mut filter_entropy = vec![0.0; m];
        for (c, list) in raw.iter().enumerate().filter(|(_, l)| !l.is_empty()) {
            filter_sets[c] = minmax_normalize(list)?.values;
            for (&i, &h) in members[c].iter().zip(&filter_sets[c]) {
                filter_entropy[i] = h;
            }
        }
        scored.sort_by_key(|s| s.index);
        let eta = match cfg.fixed_eta {
            Some(eta) => eta,
            None => compute_threshold(&matrix)?,
        };
        let mut reliable = select_reliable(&scored, eta, n_classes)?;
        // a predicted class without reliable samples keeps its most confident one
        for (c, ids) in reliable.iter_mut().enumerate() {
            if ids.is_empty() {
                if let Some(best) = scored
                    .iter()
                    .filter(|s| s.class == c)
                    .min_by(|a, b| a.entropy.total_cmp(&b.entropy))
                {
                    ids.push(best.index);
                }
            }
        }
        let (rel_idx, rel_lab): (Vec<usize>, Vec<usize>) = reliable
            .iter()
            .enumerate()
            .flat_map(|(c, ids)| ids.iter().map(move |&i| (i, c)))
            .unzip();
        let features = model.features(x)?;
        let prototypes = compute_prototypes(
            features.select(Axis(0), &rel_idx).view(),
            &rel_lab,
            n_classes,
        )?;
        let pairs: Vec<(usize, f64)> = scored.iter().map(|s| (s.index, s.entropy)).collect();
        run.memory = Some(build_memory(&pairs, n_classes.min(m))?);

        // phase 2: views, fusion, pseudo-labels, clustering
        let views = extract_views(model, x, &specs, &mut rng)?;
        let bundle = ViewBundle::build(views.features)?;
        let mut consensus = Array2::zeros((m, dims.d_f));
        for (f, &w) in bundle
            .view_features
            .iter()
            .zip(&bundle.view_weights.weights)
        {
            consensus.scaled_add(w, f);
        }
        let assignments = assign_pseudo_labels(consensus.view(), &prototypes)?;
        let mut records: Vec<PseudoLabelRecord> = assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| PseudoLabelRecord::new(i, a, filter_entropy[i]))
            .collect();
        let clusters = kmeans_restarts(
            bundle.fused.view(),
            n_classes.min(m),
            rng.fork().seed(),
            cfg.kmeans_restarts,
            cfg.kmeans_max_iters,
            1e-9,
        )?;

        // phase 3: adaptive filter
        let theta = epoch_threshold_at(&filter_sets, cfg.entropy_quantile)?;
        history.push(theta)?;
        let alphas = attention_scores(&history)?.alphas;
        let theta_star = weighted_threshold(&history, cfg.strict_threshold)?;
        let outcome = if cfg.ablation.nf {
            let out = filter_labels(&mut records, theta_star);
            if out.retained.is_empty() {
                retain_lowest_per_class(&mut records)
            } else {
                out
            }
        } else {
            records.iter_mut().for_each(|r| r.retained = true);
            FilterOutcome {
                retained: (0..m).collect(),
                labeling_rate: 1.0,
            }
        };

        // optimization
        let weights = cfg.lambda.at(epoch, cfg.epochs);
        let spec = LossSpec {
            weights,
            tau: cfg.tau,
            attention_mode: cfg.attention_mode,
        };
        let labels: Vec<Option<usize>> = records
            .iter()
            .map(|r| r.retained.then_some(r.label))
            .collect();
        let multi_view = bundle.view_count() >= 2;
        let mut loss_sum = LossBreakdown::default();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<Option<usize>> = chunk.iter().map(|&i| labels[i]).collect();
            let vb: Vec<Array2<f64>> = views
                .inputs
                .iter()
                .map(|v| v.select(Axis(0), chunk))
                .collect();
            let vb_views: Vec<_> = vb.iter().map(|v| v.view()).collect();
            let attention = if multi_view {
                let b = chunk.len();
                let mut emb = Array2::zeros((2 * b, dims.d_f));
                for (r, &i) in chunk.iter().enumerate() {
                    emb.row_mut(r).assign(&bundle.view_features[0].row(i));
                    emb.row_mut(b + r).assign(&bundle.view_features[1].row(i));
                }
                Some(positive_weights(
                    pair_attention(emb.view(), cfg.tau)?.view(),
                )?)
            } else {
                None
            };
            let batch = AdaptBatch {
                inputs: xb.view(),
                pseudo_labels: &yb,
                views: &vb_views,
                view_weights: &bundle.view_weights.weights,
                positive_attention: attention.as_deref(),
                centroids: Some(clusters.centroids.view()),
            };
            let (loss, grads) = model.loss_and_grad(&batch, &spec)?;
            let share = chunk.len() as f64 / m as f64;
            loss_sum.con += loss.con * share;
            loss_sum.ce += loss.ce * share;
            loss_sum.clu += loss.clu * share;
            loss_sum.total += loss.total * share;
            model.sgd_step(&grads, cfg.lr, cfg.momentum, &mut sgd)?;
        }

        let (pseudo_acc, unfiltered_acc, model_acc) = match eval {
            Some(ev) => (
                ev.subset_accuracy(
                    outcome
                        .retained
                        .iter()
                        .map(|&p| (records[p].index, records[p].label)),
                )?,
                ev.subset_accuracy(records.iter().map(|r| (r.index, r.label)))?,
                Some(ev.accuracy(&model.predict(x)?)?),
            ),
            None => (None, None, None),
        };
        log::debug!(
            "epoch {epoch}: eta {eta:.4} theta* {theta_star:.4} rate {:.3} acc {:?}",
            outcome.labeling_rate,
            model_acc
        );
        run.metrics.push(EpochMetrics {
            epoch,
            eta,
            theta,
            theta_star,
            labeling_rate: outcome.labeling_rate,
            pseudo_label_accuracy: pseudo_acc,
            unfiltered_pseudo_label_accuracy: unfiltered_acc,
            model_accuracy: model_acc,
            reliable_count: rel_idx.len(),
            loss: loss_sum,
            lambda: weights.as_array(),
            view_weights: bundle.view_weights.weights.clone(),
            inertia: clusters.inertia,
            alphas,
        });
        run.records = records;
    }
    run.entropy_matrix = matrix;
    Ok(run)
}

/// `|{i : ŷ_i = y_i}| / n`.
pub use crate::data::accuracy;

/// Accuracy of the unadapted source model on the target.
pub fn direct_transfer_accuracy(
    source: &ModelParams,
    target: &Dataset,
    eval: &EvalLabels,
) -> Result<f64> {
    eval.accuracy(&source.predict(target.view())?)
}

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 17] = [
    "epoch",
    "eta",
    "theta",
    "theta_star",
    "labeling_rate",
    "pseudo_label_accuracy",
    "unfiltered_pseudo_label_accuracy",
    "model_accuracy",
    "reliable_count",
    "l_con",
    "l_ce",
    "l_clu",
    "l_total",
    "lambda",
    "view_weights",
    "inertia",
    "alphas",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// Metrics as CSV. Vector-valued cells are `;`-separated; missing
/// accuracies are empty.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for e in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.eta,
            e.theta,
            e.theta_star,
            e.labeling_rate,
            opt(e.pseudo_label_accuracy),
            opt(e.unfiltered_pseudo_label_accuracy),
            opt(e.model_accuracy),
            e.reliable_count,
            e.loss.con,
            e.loss.ce,
            e.loss.clu,
            e.loss.total,
            joined(&e.lambda),
            joined(&e.view_weights),
            e.inertia,
            joined(&e.alphas),
        );
    }
    out
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_accuracy: Option<f64>,
    pub final_labeling_rate: f64,
    pub epochs: usize,
}

impl Summary {
    pub fn from_history(history: &[EpochMetrics]) -> Result<Self> {
        let last = history.last().ok_or(Error::EmptyInput("metrics history"))?;
        Ok(Self {
            final_accuracy: last.model_accuracy,
            final_labeling_rate: last.labeling_rate,
            epochs: history.len(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// File names written by [`emit_metrics`].
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `metrics.csv` and `summary.json` into `dir`, creating it if needed.
pub fn emit_metrics(history: &[EpochMetrics], dir: &Path) -> Result<Summary> {
    let summary = Summary::from_history(history)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(METRICS_FILE);
    fs::write(&csv, metrics_csv(history)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("serializable");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(summary)
}

/// One configuration of the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    /// Final target accuracy per seed.
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,mean_accuracy");
        for s in &self.seeds {
            let _ = write!(out, ",seed_{s}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.name, r.mean);
            for a in &r.accuracies {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text table with accuracies in percent.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(13);
        let mut out = format!("{:<width$}  {:>8}\n", "Configuration", "Accuracy");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>8.2}", r.name, 100.0 * r.mean);
        }
        out
    }
}

/// Runs the four ablation configurations for every seed (in parallel) and
/// scores the final model of each run.
pub fn ablation_grid(
    source: &ModelParams,
    target: &Dataset,
    eval: &EvalLabels,
    base: &AdaptConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("seeds"));
    }
    let cells: Vec<(usize, u64)> = (0..Ablation::LADDER.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(r, seed)| {
            let cfg = AdaptConfig {
                ablation: Ablation::LADDER[r],
                seed,
                ..base.clone()
            };
            let run = adapt(source, target, Some(eval), &cfg)?;
            eval.accuracy(&run.model.predict(target.view())?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = Ablation::LADDER
        .iter()
        .enumerate()
        .map(|(r, &ablation)| {
            let accuracies = scores[r * seeds.len()..(r + 1) * seeds.len()].to_vec();
            let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            AblationRow {
                name: ablation.name(),
                ablation,
                accuracies,
                mean,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Points of the loss-weight simplex on a grid of spacing `step`, with `λ1`
/// descending and then `λ2` descending.
pub fn simplex_grid(step: f64) -> Result<Vec<LossWeights>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "grid step {step} does not divide 1"
        )));
    }
    let n = n as usize;
    let mut out = Vec::new();
    for i in (0..=n).rev() {
        for j in (0..=n - i).rev() {
            let k = n - i - j;
            out.push(LossWeights {
                con: i as f64 / n as f64,
                ce: j as f64 / n as f64,
                clu: k as f64 / n as f64,
            });
        }
    }
    Ok(out)
}

/// Final accuracy for each constant weighting on the simplex grid.
pub fn sweep_lambda(
    source: &ModelParams,
    target: &Dataset,
    eval: &EvalLabels,
    base: &AdaptConfig,
    step: f64,
) -> Result<Vec<(LossWeights, f64)>> {
    let grid = simplex_grid(step)?;
    grid.par_iter()
        .map(|&w| {
            let cfg = AdaptConfig {
                lambda: LambdaSchedule::Constant(w),
                ..base.clone()
            };
            let run = adapt(source, target, Some(eval), &cfg)?;
            Ok((w, eval.accuracy(&run.model.predict(target.view())?)?))
        })
        .collect()
}
