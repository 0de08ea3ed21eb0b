//! Multi-view contrastive pseudo-labeling.
//!
//! Each target sample is augmented into `V` views. Views are weighted by the
//! mean per-feature variance of their feature matrix and concatenated into a
//! fused embedding, which K-means partitions for the clustering term. The
//! contrastive term pulls the first two views of each sample together and
//! pushes every other embedding in the batch away. Pseudo-labels come from
//! cosine similarity to the reliable-sample prototypes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{column_mean_variance, cosine_sim, dot, l2_norm, SeededRng};
use crate::rsm::PrototypeSet;

/// A vector-space augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    /// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate.
    Jitter {
        sigma: f64,
    },
    /// Rotates by `angle` radians in the plane spanned by two coordinates.
    Rotate {
        angle: f64,
        plane: (usize, usize),
    },
    /// Multiplies every coordinate by `factor`.
    Scale {
        factor: f64,
    },
    /// Applies the inner transforms left to right.
    Compose(Vec<TransformSpec>),
}

impl TransformSpec {
    /// Default weak view: light jitter.
    pub fn weak() -> Self {
        TransformSpec::Jitter { sigma: 0.05 }
    }

    /// Default strong view: scaling and heavier jitter. Rotations are left
    /// out because on ring-shaped class layouts they move samples towards
    /// the neighbouring class.
    pub fn strong() -> Self {
        TransformSpec::Compose(vec![
            TransformSpec::Scale { factor: 0.9 },
            TransformSpec::Jitter { sigma: 0.2 },
        ])
    }

    /// Checks parameters against an input dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TransformSpec::Identity => Ok(()),
            TransformSpec::Jitter { sigma } => {
                if *sigma >= 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("jitter sigma {sigma} must be >= 0")))
                }
            }
            TransformSpec::Rotate { angle, plane } => {
                if !angle.is_finite() {
                    return Err(Error::invalid("rotation angle must be finite"));
                }
                let (a, b) = *plane;
                if a == b || a >= dim || b >= dim {
                    return Err(Error::invalid(format!(
                        "rotation plane ({a}, {b}) invalid for dimension {dim}"
                    )));
                }
                Ok(())
            }
            TransformSpec::Scale { factor } => {
                if *factor > 0.0 && factor.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("scale factor {factor} must be > 0")))
                }
            }
            TransformSpec::Compose(parts) => parts.iter().try_for_each(|p| p.validate(dim)),
        }
    }
}

/// Applies `spec` to one input vector.
pub fn apply_transform(
    x: ArrayView1<'_, f64>,
    spec: &TransformSpec,
    rng: &mut SeededRng,
) -> Result<Array1<f64>> {
    spec.validate(x.len())?;
    let mut out = x.to_owned();
    transform_in_place(&mut out, spec, rng);
    Ok(out)
}

fn transform_in_place(x: &mut Array1<f64>, spec: &TransformSpec, rng: &mut SeededRng) {
    match spec {
        TransformSpec::Identity => {}
        TransformSpec::Jitter { sigma } => {
            if *sigma > 0.0 {
                x.iter_mut().for_each(|v| *v += sigma * rng.normal());
            }
        }
        TransformSpec::Rotate {
            angle,
            plane: (a, b),
        } => {
            let (sin, cos) = angle.sin_cos();
            let (u, v) = (x[*a], x[*b]);
            x[*a] = cos * u - sin * v;
            x[*b] = sin * u + cos * v;
        }
        TransformSpec::Scale { factor } => *x *= *factor,
        TransformSpec::Compose(parts) => {
            for p in parts {
                transform_in_place(x, p, rng);
            }
        }
    }
}

/// One augmented copy of `inputs` per spec, drawn in view order.
pub fn augment_views(
    inputs: ArrayView2<'_, f64>,
    specs: &[TransformSpec],
    rng: &mut SeededRng,
) -> Result<Vec<Array2<f64>>> {
    if inputs.nrows() == 0 {
        return Err(Error::EmptyInput("batch to augment"));
    }
    specs.iter().try_for_each(|s| s.validate(inputs.ncols()))?;
    Ok(specs
        .iter()
        .map(|spec| {
            let mut view = inputs.to_owned();
            for mut row in view.rows_mut() {
                let mut x = row.to_owned();
                transform_in_place(&mut x, spec, rng);
                row.assign(&x);
            }
            view
        })
        .collect())
}

/// Augmented inputs and the feature matrix of each view.
#[derive(Debug, Clone)]
pub struct ExtractedViews {
    pub inputs: Vec<Array2<f64>>,
    pub features: Vec<Array2<f64>>,
}

/// Feature matrices `F(T_v(x_i))` for every view `v`.
pub fn extract_views(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    specs: &[TransformSpec],
    rng: &mut SeededRng,
) -> Result<ExtractedViews> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    let view_inputs = augment_views(inputs, specs, rng)?;
    let features = view_inputs
        .iter()
        .map(|v| params.features(v.view()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtractedViews {
        inputs: view_inputs,
        features,
    })
}

/// View weights on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewWeights {
    pub weights: Vec<f64>,
    /// Every view had zero variance; the weights fell back to uniform.
    pub degenerate: bool,
}

/// Weights proportional to each view's mean per-feature variance.
pub fn view_weights(view_features: &[Array2<f64>]) -> Result<ViewWeights> {
    let first = view_features
        .first()
        .ok_or_else(|| Error::invalid("no views to weight"))?;
    if view_features.iter().any(|f| f.nrows() != first.nrows()) {
        return Err(Error::invalid("views have different sample counts"));
    }
    let variances = view_features
        .iter()
        .map(|f| column_mean_variance(f.view()).map(|(_, mean)| mean))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = variances.iter().sum();
    let v = variances.len() as f64;
    if total <= 0.0 {
        return Ok(ViewWeights {
            weights: vec![1.0 / v; variances.len()],
            degenerate: true,
        });
    }
    Ok(ViewWeights {
        weights: variances.iter().map(|s| s / total).collect(),
        degenerate: false,
    })
}

/// Row-wise concatenation of `w_v * h_i^(v)` in view order.
pub fn fuse(view_features: &[Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    if view_features.is_empty() || view_features.len() != weights.len() {
        return Err(Error::invalid("one weight per view required"));
    }
    let (m, d) = view_features[0].dim();
    if view_features.iter().any(|f| f.dim() != (m, d)) {
        return Err(Error::invalid("views have different shapes"));
    }
    let mut fused = Array2::zeros((m, d * view_features.len()));
    for (v, (f, &w)) in view_features.iter().zip(weights).enumerate() {
        fused.slice_mut(s![.., v * d..(v + 1) * d]).assign(&(f * w));
    }
    Ok(fused)
}

/// Per-view features, their weights and the fused embeddings of one batch.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub view_features: Vec<Array2<f64>>,
    pub view_weights: ViewWeights,
    pub fused: Array2<f64>,
}

impl ViewBundle {
    pub fn build(view_features: Vec<Array2<f64>>) -> Result<Self> {
        let view_weights = view_weights(&view_features)?;
        let fused = fuse(&view_features, &view_weights.weights)?;
        Ok(Self {
            view_features,
            view_weights,
            fused,
        })
    }

    pub fn view_count(&self) -> usize {
        self.view_features.len()
    }
}

/// Trade-off weights of the contrastive, cross-entropy and clustering terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub con: f64,
    pub ce: f64,
    pub clu: f64,
}

impl LossWeights {
    /// Accepts weights that are non-negative and sum to one within `1e-6`;
    /// the stored values are rescaled onto the simplex exactly.
    pub fn new(con: f64, ce: f64, clu: f64) -> Result<Self> {
        if [con, ce, clu].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "loss weights ({con}, {ce}, {clu}) must be non-negative"
            )));
        }
        let total = con + ce + clu;
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "loss weights ({con}, {ce}, {clu}) sum to {total}, not 1"
            )));
        }
        Ok(Self {
            con: con / total,
            ce: ce / total,
            clu: clu / total,
        })
    }

    pub fn uniform() -> Self {
        Self {
            con: 1.0 / 3.0,
            ce: 1.0 / 3.0,
            clu: 1.0 / 3.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.con, self.ce, self.clu]
    }

    /// Linear interpolation between two simplex points, renormalized.
    pub fn lerp(from: LossWeights, to: LossWeights, t: f64) -> LossWeights {
        let t = t.clamp(0.0, 1.0);
        let mix = |a: f64, b: f64| a + (b - a) * t;
        let (c, e, l) = (
            mix(from.con, to.con),
            mix(from.ce, to.ce),
            mix(from.clu, to.clu),
        );
        let total = c + e + l;
        LossWeights {
            con: c / total,
            ce: e / total,
            clu: l / total,
        }
    }
}

/// `λ1·l_con + λ2·l_ce + λ3·l_clu`.
pub fn total_loss(weights: [f64; 3], l_con: f64, l_ce: f64, l_clu: f64) -> Result<f64> {
    let w = LossWeights::new(weights[0], weights[1], weights[2])?;
    if ![l_con, l_ce, l_clu].iter().all(|l| l.is_finite()) {
        return Err(Error::invalid("loss component is not finite"));
    }
    Ok(w.con * l_con + w.ce * l_ce + w.clu * l_clu)
}

/// K-means output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closest centroid (lowest index on ties) and the squared distance to it.
pub fn nearest_centroid(x: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum over points of the squared distance to the nearest centroid.
pub fn cluster_loss(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> Result<f64> {
    if centroids.nrows() == 0 {
        return Err(Error::invalid("no centroids"));
    }
    if points.ncols() != centroids.ncols() {
        return Err(Error::invalid("point and centroid dimensions differ"));
    }
    Ok(points
        .rows()
        .into_iter()
        .map(|x| nearest_centroid(x, centroids).1)
        .sum())
}

/// Inertia of a partition with each cluster represented by its mean.
/// Empty clusters contribute nothing.
pub fn partition_inertia(points: ArrayView2<'_, f64>, assignments: &[usize], k: usize) -> f64 {
    let means = cluster_means(points, assignments, k).0;
    points
        .rows()
        .into_iter()
        .zip(assignments)
        .map(|(x, &a)| squared_distance(x, means.row(a)))
        .sum()
}

fn cluster_means(
    points: ArrayView2<'_, f64>,
    assignments: &[usize],
    k: usize,
) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (x, &a) in points.rows().into_iter().zip(assignments) {
        sums.row_mut(a).scaled_add(1.0, &x);
        counts[a] += 1;
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    (sums, counts)
}

fn assign_all(
    points: ArrayView2<'_, f64>,
    centroids: ArrayView2<'_, f64>,
) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .into_iter()
        .map(|x| nearest_centroid(x, centroids))
        .unzip()
}

fn check_k(points: ArrayView2<'_, f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > points.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of points ({})",
            points.nrows()
        )));
    }
    Ok(())
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
pub fn kmeans_plus_plus(
    points: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Array2<f64>> {
    check_k(points, k)?;
    let m = points.nrows();
    let mut chosen = vec![rng.below(m)];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|x| squared_distance(x, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform(0.0, total);
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // rounding can land on a zero-weight point
            if d2[pick] == 0.0 {
                pick = d2.iter().position(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // all remaining points coincide with chosen centres
            (0..m).find(|i| !chosen.contains(i)).expect("k <= m")
        };
        chosen.push(next);
        for (i, x) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, points.row(next)));
        }
    }
    Ok(points.select(Axis(0), &chosen))
}

/// Lloyd iterations from the given initial centroids. Stops when no centroid
/// moves by `tol` or more (Euclidean), or after `max_iters` updates. A cluster
/// that empties is re-seeded at the point farthest from its own centroid.
pub fn kmeans_from(
    points: ArrayView2<'_, f64>,
    init: Array2<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterResult> {
    let k = init.nrows();
    check_k(points, k)?;
    if init.ncols() != points.ncols() {
        return Err(Error::invalid("initial centroids have the wrong dimension"));
    }
    let mut centroids = init;
    let (mut assignments, mut dists) = assign_all(points, centroids.view());
    let mut inertia_history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let (mut means, counts) = cluster_means(points, &assignments, k);
        for (j, &count) in counts.iter().enumerate() {
            if count == 0 {
                let far = farthest_point(&dists);
                means.row_mut(j).assign(&points.row(far));
                // the moved point is now at distance zero; keep the next pick distinct
                dists[far] = 0.0;
            }
        }
        let shift = centroids
            .rows()
            .into_iter()
            .zip(means.rows())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = means;
        let (a, d) = assign_all(points, centroids.view());
        assignments = a;
        dists = d;
        inertia_history.push(dists.iter().sum());
        if shift < tol || (tol <= 0.0 && shift == 0.0) {
            break;
        }
    }
    let inertia = dists.iter().sum();
    Ok(ClusterResult {
        centroids,
        assignments,
        inertia,
        inertia_history,
        iterations,
    })
}

fn farthest_point(dists: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in dists.iter().enumerate() {
        if d > dists[best] {
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterResult> {
    let mut rng = SeededRng::new(seed);
    let init = kmeans_plus_plus(points, k, &mut rng)?;
    kmeans_from(points, init, max_iters, tol)
}

/// Best (lowest inertia, earliest on ties) of `restarts` seeded runs.
pub fn kmeans_restarts(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterResult> {
    let mut rng = SeededRng::new(seed);
    let mut best: Option<ClusterResult> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans(points, k, rng.fork().seed(), max_iters, tol)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// How the pair attention weight enters the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `w + (-log ratio)` per anchor.
    #[default]
    Additive,
    /// `w * (-log ratio)` per anchor.
    Multiplicative,
}

/// Row-wise softmax over `j != i` of `cos(z_i, z_j) / tau`. The diagonal is zero.
pub fn pair_attention(z: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::invalid(
            "pair attention needs at least two embeddings",
        ));
    }
    check_tau(tau)?;
    let sims = cosine_matrix(z)?;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        let max = (0..n)
            .filter(|&j| j != i)
            .map(|j| sims[[i, j]] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let e = (sims[[i, j]] / tau - max).exp();
            w[[i, j]] = e;
            total += e;
        }
        w.row_mut(i).mapv_inplace(|v| v / total);
    }
    Ok(w)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature {tau} must be positive"
        )))
    }
}

fn cosine_matrix(z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = z.nrows();
    let norms: Vec<f64> = z.rows().into_iter().map(l2_norm).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNorm(format!("embedding {i}")));
    }
    let mut sims = Array2::zeros((n, n));
    for i in 0..n {
        sims[[i, i]] = 1.0;
        for j in i + 1..n {
            let c = (dot(z.row(i), z.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            sims[[i, j]] = c;
            sims[[j, i]] = c;
        }
    }
    Ok(sims)
}

/// Index of the positive partner of anchor `a` among `2n` embeddings laid
/// out as `[view 1 rows; view 2 rows]`.
pub fn positive_index(a: usize, n: usize) -> usize {
    if a < n {
        a + n
    } else {
        a - n
    }
}

/// Attention weight of each anchor towards its positive partner.
pub fn positive_weights(attention: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let total = attention.nrows();
    if !total.is_multiple_of(2) || attention.ncols() != total {
        return Err(Error::invalid("attention must be a square 2N x 2N matrix"));
    }
    let n = total / 2;
    Ok((0..total)
        .map(|a| attention[[a, positive_index(a, n)]])
        .collect())
}

/// Attention-weighted contrastive loss over `2N` embeddings forming `N`
/// positive pairs (`i` with `i + N`), summed over all anchors:
///
/// `Σ_i [ w_{i,j(i)} - log( exp(s_{i,j(i)}) / Σ_{k≠i} exp(s_{i,k}) ) ]`,
/// with `s = cos / tau`.
pub fn contrastive_loss(
    z: ArrayView2<'_, f64>,
    tau: f64,
    attention: ArrayView2<'_, f64>,
    mode: AttentionMode,
) -> Result<f64> {
    if z.nrows() < 2 || !z.nrows().is_multiple_of(2) {
        return Err(Error::EmptyInput(
            "contrastive loss needs N >= 1 positive pairs",
        ));
    }
    if attention.dim() != (z.nrows(), z.nrows()) {
        return Err(Error::invalid("attention shape does not match embeddings"));
    }
    let w = positive_weights(attention)?;
    Ok(contrastive_terms(z, tau, &w, mode)?.0)
}

/// Contrastive loss sum and its gradient with respect to every embedding.
/// `positive_w[a]` is treated as a constant.
pub(crate) fn contrastive_terms(
    z: ArrayView2<'_, f64>,
    tau: f64,
    positive_w: &[f64],
    mode: AttentionMode,
) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let total = z.nrows();
    if total < 2 || !total.is_multiple_of(2) {
        return Err(Error::EmptyInput(
            "contrastive loss needs N >= 1 positive pairs",
        ));
    }
    if positive_w.len() != total {
        return Err(Error::invalid("one attention weight per anchor required"));
    }
    let n = total / 2;
    let sims = cosine_matrix(z)?;
    let norms: Vec<f64> = z.rows().into_iter().map(l2_norm).collect();
    let unit: Vec<Array1<f64>> = z
        .rows()
        .into_iter()
        .zip(&norms)
        .map(|(r, &nr)| &r / nr)
        .collect();

    // dL/ds for every ordered pair, accumulated anchor by anchor
    let mut g = Array2::<f64>::zeros((total, total));
    let mut loss = 0.0;
    for a in 0..total {
        let p = positive_index(a, n);
        let max = (0..total)
            .filter(|&k| k != a)
            .map(|k| sims[[a, k]] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..total)
            .filter(|&k| k != a)
            .map(|k| (sims[[a, k]] / tau - max).exp())
            .sum();
        let neg_log_ratio = -(sims[[a, p]] / tau) + max + denom.ln();
        let coef = match mode {
            AttentionMode::Additive => {
                loss += positive_w[a] + neg_log_ratio;
                1.0
            }
            AttentionMode::Multiplicative => {
                loss += positive_w[a] * neg_log_ratio;
                positive_w[a]
            }
        };
        for k in (0..total).filter(|&k| k != a) {
            let soft = (sims[[a, k]] / tau - max).exp() / denom;
            let target = if k == p { 1.0 } else { 0.0 };
            g[[a, k]] += coef * (soft - target);
        }
    }

    let mut grad = Array2::zeros(z.dim());
    for a in 0..total {
        for b in (0..total).filter(|&b| b != a) {
            let gab = g[[a, b]];
            if gab == 0.0 {
                continue;
            }
            let c = sims[[a, b]];
            let coef = gab / tau;
            // d cos(u_a, u_b) / d u_a = (û_b - cos û_a) / |u_a|
            let da = (&unit[b] - &(&unit[a] * c)) * (coef / norms[a]);
            let db = (&unit[a] - &(&unit[b] * c)) * (coef / norms[b]);
            grad.row_mut(a).scaled_add(1.0, &da);
            grad.row_mut(b).scaled_add(1.0, &db);
        }
    }
    Ok((loss, grad))
}

/// Prototype assignment of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub label: usize,
    /// Cosine similarity to the winning prototype.
    pub confidence: f64,
}

/// Labels each feature row with its most similar present prototype
/// (lowest class index on ties).
pub fn assign_pseudo_labels(
    features: ArrayView2<'_, f64>,
    prototypes: &PrototypeSet,
) -> Result<Vec<Assignment>> {
    let present: Vec<(usize, ArrayView1<'_, f64>)> = prototypes.present().collect();
    if present.is_empty() {
        return Err(Error::NoPrototypes);
    }
    if present[0].1.len() != features.ncols() {
        return Err(Error::invalid("feature and prototype dimensions differ"));
    }
    features
        .rows()
        .into_iter()
        .map(|f| {
            let mut best: Option<Assignment> = None;
            for &(k, c) in &present {
                let sim = cosine_sim(f, c)?;
                if best.is_none_or(|b| sim > b.confidence) {
                    best = Some(Assignment {
                        label: k,
                        confidence: sim,
                    });
                }
            }
            Ok(best.expect("at least one prototype"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, ParamTensors};
    use ndarray::array;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn transform_examples() {
        let mut rng = SeededRng::new(1);
        let x = array![0.3, -1.2, 4.0];
        assert_eq!(
            apply_transform(x.view(), &TransformSpec::Identity, &mut rng).unwrap(),
            x
        );
        assert_eq!(
            apply_transform(x.view(), &TransformSpec::Jitter { sigma: 0.0 }, &mut rng).unwrap(),
            x
        );
        let r = apply_transform(
            array![1.0, 0.0].view(),
            &TransformSpec::Rotate {
                angle: FRAC_PI_2,
                plane: (0, 1),
            },
            &mut rng,
        )
        .unwrap();
        assert!(r[0].abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);

        let s = apply_transform(x.view(), &TransformSpec::Scale { factor: 2.0 }, &mut rng).unwrap();
        assert_eq!(s, &x * 2.0);
    }

    #[test]
    fn compose_applies_left_to_right() {
        let mut rng = SeededRng::new(1);
        let spec = TransformSpec::Compose(vec![
            TransformSpec::Scale { factor: 2.0 },
            TransformSpec::Rotate {
                angle: FRAC_PI_2,
                plane: (0, 1),
            },
        ]);
        let out = apply_transform(array![1.0, 0.0].view(), &spec, &mut rng).unwrap();
        assert!(out[0].abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_transforms() {
        let mut rng = SeededRng::new(1);
        let x = array![1.0, 2.0];
        let bad = [
            TransformSpec::Rotate {
                angle: 0.1,
                plane: (0, 2),
            },
            TransformSpec::Rotate {
                angle: 0.1,
                plane: (1, 1),
            },
            TransformSpec::Jitter { sigma: -1.0 },
            TransformSpec::Scale { factor: 0.0 },
            TransformSpec::Compose(vec![TransformSpec::Scale { factor: -2.0 }]),
        ];
        for spec in bad {
            assert!(matches!(
                apply_transform(x.view(), &spec, &mut rng),
                Err(Error::InvalidInput(_))
            ));
        }
    }

    #[test]
    fn jitter_is_seeded() {
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let specs = [TransformSpec::weak(), TransformSpec::strong()];
        let a = augment_views(x.view(), &specs, &mut SeededRng::new(4)).unwrap();
        let b = augment_views(x.view(), &specs, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], x);
    }

    fn random_model(seed: u64) -> ModelParams {
        let dims = Dims {
            d_in: 3,
            d_h: 5,
            d_f: 4,
            n_classes: 2,
        };
        ModelParams::init(dims, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn extract_views_examples() {
        let model = random_model(2);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.4);
        let direct = model.features(x.view()).unwrap();

        let views = extract_views(
            &model,
            x.view(),
            &[TransformSpec::Identity, TransformSpec::Identity],
            &mut SeededRng::new(0),
        )
        .unwrap();
        assert!(views.features.iter().all(|f| *f == direct));

        let views = extract_views(
            &model,
            x.view(),
            &[
                TransformSpec::Identity,
                TransformSpec::Jitter { sigma: 0.0 },
            ],
            &mut SeededRng::new(0),
        )
        .unwrap();
        assert_eq!(views.features[0], views.features[1]);

        let specs = [TransformSpec::weak(), TransformSpec::strong()];
        let a = extract_views(&model, x.view(), &specs, &mut SeededRng::new(8)).unwrap();
        let b = extract_views(&model, x.view(), &specs, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a.features, b.features);

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            extract_views(&model, empty.view(), &specs, &mut SeededRng::new(0)),
            Err(Error::EmptyInput(_))
        ));
    }

    /// A two-row matrix whose single column has population variance `var`.
    fn with_variance(var: f64) -> Array2<f64> {
        let s = var.sqrt();
        array![[-s], [s]]
    }

    #[test]
    fn view_weight_examples() {
        let w = view_weights(&[with_variance(1.0), with_variance(3.0)]).unwrap();
        assert!((w.weights[0] - 0.25).abs() < 1e-12 && (w.weights[1] - 0.75).abs() < 1e-12);

        let f = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]];
        let w = view_weights(&[f.clone(), f]).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5]);

        let w =
            view_weights(&[with_variance(0.0), with_variance(2.0), with_variance(2.0)]).unwrap();
        assert_eq!(w.weights[0], 0.0);
        assert!((w.weights[1] - 0.5).abs() < 1e-12 && (w.weights[2] - 0.5).abs() < 1e-12);
        assert!(!w.degenerate);

        let w = view_weights(&[with_variance(0.0), with_variance(0.0)]).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.weights, vec![0.5, 0.5]);

        assert!(view_weights(&[with_variance(1.0), array![[1.0]]]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let z = fuse(&[array![[1.0, 2.0]], array![[3.0, 4.0]]], &[0.25, 0.75]).unwrap();
        assert_eq!(z.row(0).to_vec(), vec![0.25, 0.5, 2.25, 3.0]);

        let z = fuse(&[array![[1.0, 2.0]], array![[3.0, 4.0]]], &[1.0, 0.0]).unwrap();
        assert_eq!(z.row(0).to_vec(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(z.dim(), (1, 4));

        assert!(fuse(&[array![[1.0, 2.0]], array![[3.0]]], &[0.5, 0.5]).is_err());
        assert!(fuse(&[array![[1.0, 2.0]]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_weight_examples() {
        assert_eq!(total_loss([1.0, 0.0, 0.0], 2.5, 7.0, 9.0).unwrap(), 2.5);
        let third = 1.0 / 3.0;
        assert!((total_loss([third, third, third], 3.0, 6.0, 9.0).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(
            total_loss([0.2, 0.3, 0.6], 1.0, 1.0, 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(LossWeights::new(-0.1, 0.6, 0.5).is_err());
    }

    #[test]
    fn cluster_loss_examples() {
        let pts = array![[0.0, 0.0], [2.0, 0.0]];
        assert_eq!(
            cluster_loss(pts.view(), array![[1.0, 0.0]].view()).unwrap(),
            2.0
        );
        assert_eq!(cluster_loss(pts.view(), pts.view()).unwrap(), 0.0);
        assert_eq!(
            cluster_loss(pts.view(), array![[1.0, 0.0], [1.0, 0.0]].view()).unwrap(),
            2.0
        );
        assert!(cluster_loss(pts.view(), Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = array![[0.0, 1.0], [4.0, -2.0], [1.0, 1.0], [7.0, 3.0]];
        let all = kmeans(pts.view(), 4, 0, 50, 0.0).unwrap();
        assert_eq!(all.inertia, 0.0);
        let mut sorted = all.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);

        let one = kmeans(pts.view(), 1, 0, 50, 0.0).unwrap();
        assert_eq!(one.centroids.row(0).to_vec(), vec![3.0, 0.75]);

        assert!(kmeans(pts.view(), 0, 0, 10, 0.0).is_err());
        assert!(kmeans(pts.view(), 5, 0, 10, 0.0).is_err());
    }

    #[test]
    fn kmeans_separates_far_blobs() {
        let pts = array![
            [0.0, 0.01],
            [0.01, 0.0],
            [-0.01, 0.0],
            [10.0, 10.01],
            [10.01, 10.0],
            [9.99, 10.0]
        ];
        for seed in 0..10 {
            let r = kmeans(pts.view(), 2, seed, 100, 0.0).unwrap();
            let a = &r.assignments;
            assert!(a[0] == a[1] && a[1] == a[2]);
            assert!(a[3] == a[4] && a[4] == a[5]);
            assert_ne!(a[0], a[3]);
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // both initial centroids sit on the left group; the second one empties
        let pts = array![[0.0], [0.1], [5.0], [5.1]];
        let init = array![[0.05], [100.0]];
        let r = kmeans_from(pts.view(), init, 20, 0.0).unwrap();
        assert!((r.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        let z = array![[1.0, 0.0], [0.5, 0.5]];
        let w = pair_attention(z.view(), 0.5).unwrap();
        assert_eq!(w[[0, 1]], 1.0);
        assert_eq!(w[[1, 0]], 1.0);

        let z = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let w = pair_attention(z.view(), 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((w[[i, j]] - want).abs() < 1e-15);
            }
        }

        let z = array![[1.0, 0.0], [0.9, 0.1], [-1.0, 0.2]];
        let w = pair_attention(z.view(), 1e9).unwrap();
        assert!((w[[0, 1]] - 0.5).abs() < 1e-8 && (w[[0, 2]] - 0.5).abs() < 1e-8);

        assert!(matches!(
            pair_attention(array![[0.0, 0.0], [1.0, 0.0]].view(), 0.5),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn contrastive_two_samples() {
        let z = array![[1.0, 0.2], [0.3, -0.7]];
        let attn = pair_attention(z.view(), 0.5).unwrap();
        let loss = contrastive_loss(z.view(), 0.5, attn.view(), AttentionMode::Additive).unwrap();
        // a single term in each denominator: log-ratio vanishes, w12 + w21 = 2
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_identical_embeddings() {
        let z = Array2::from_elem((4, 3), 0.7);
        let attn = pair_attention(z.view(), 0.5).unwrap();
        let loss = contrastive_loss(z.view(), 0.5, attn.view(), AttentionMode::Additive).unwrap();
        // every anchor: w = 1/3, log term = log 3
        let want = 4.0 * (1.0 / 3.0 + 3f64.ln());
        assert!((loss - want).abs() < 1e-12);
        let zero_attn = Array2::zeros((4, 4));
        let loss =
            contrastive_loss(z.view(), 0.5, zero_attn.view(), AttentionMode::Additive).unwrap();
        assert!((loss / 4.0 - 1.098_612_288_668_11).abs() < 1e-4);
    }

    #[test]
    fn contrastive_errors() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let attn = pair_attention(z.view(), 0.5).unwrap();
        assert!(matches!(
            contrastive_loss(z.view(), 0.0, attn.view(), AttentionMode::Additive),
            Err(Error::InvalidInput(_))
        ));
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            contrastive_loss(
                empty.view(),
                0.5,
                Array2::zeros((0, 0)).view(),
                AttentionMode::Additive
            ),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn contrastive_gradient_matches_differences() {
        let mut rng = SeededRng::new(21);
        let z = Array2::from_shape_fn((6, 3), |_| rng.uniform(-1.0, 1.0));
        let w: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        for mode in [AttentionMode::Additive, AttentionMode::Multiplicative] {
            let (_, grad) = contrastive_terms(z.view(), 0.4, &w, mode).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                for j in 0..3 {
                    let mut up = z.clone();
                    up[[i, j]] += h;
                    let mut dn = z.clone();
                    dn[[i, j]] -= h;
                    let fd = (contrastive_terms(up.view(), 0.4, &w, mode).unwrap().0
                        - contrastive_terms(dn.view(), 0.4, &w, mode).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - grad[[i, j]]).abs() < 1e-6, "{mode:?} {i} {j}");
                }
            }
        }
    }

    fn prototypes(vectors: Vec<Option<Array1<f64>>>) -> PrototypeSet {
        PrototypeSet::from_vectors(vectors)
    }

    #[test]
    fn pseudo_label_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let protos = prototypes(vec![
            Some(array![1.0, 0.0]),
            Some(array![0.0, 1.0]),
            Some(array![s, s]),
            None,
        ]);
        let out = assign_pseudo_labels(array![[2.0, 2.0]].view(), &protos).unwrap();
        assert_eq!(out[0].label, 2);
        assert!((out[0].confidence - 1.0).abs() < 1e-12);

        let protos = prototypes(vec![Some(array![1.0, 0.0]), Some(array![0.0, 1.0])]);
        let out = assign_pseudo_labels(array![[1.0, 1.0]].view(), &protos).unwrap();
        assert_eq!(out[0].label, 0);

        let protos = prototypes(vec![None, None, None, Some(array![0.0, 1.0])]);
        let out = assign_pseudo_labels(array![[0.0, -3.0]].view(), &protos).unwrap();
        assert_eq!(out[0].label, 3);
        assert!((out[0].confidence + 1.0).abs() < 1e-12);

        let none = prototypes(vec![None, None]);
        assert!(matches!(
            assign_pseudo_labels(array![[1.0, 0.0]].view(), &none),
            Err(Error::NoPrototypes)
        ));
    }

    #[test]
    fn zero_model_views_are_degenerate() {
        let dims = Dims {
            d_in: 2,
            d_h: 2,
            d_f: 2,
            n_classes: 2,
        };
        let model = ModelParams::from_tensors(ParamTensors::zeros(dims), false).unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let views = extract_views(
            &model,
            x.view(),
            &[TransformSpec::weak(), TransformSpec::strong()],
            &mut SeededRng::new(0),
        )
        .unwrap();
        let bundle = ViewBundle::build(views.features).unwrap();
        assert!(bundle.view_weights.degenerate);
        assert_eq!(bundle.view_count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn view_weights_on_simplex(
            data in prop::collection::vec(-3.0f64..3.0, 24),
            views in 2usize..4,
        ) {
            let per = 24 / views / 2 * 2;
            let feats: Vec<Array2<f64>> = (0..views)
                .map(|v| Array2::from_shape_vec((per / 2, 2), data[v * per..v * per + per].to_vec()).unwrap())
                .collect();
            let w = view_weights(&feats).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn lambda_schedule_stays_on_simplex(
            a in prop::array::uniform3(0.0f64..1.0),
            b in prop::array::uniform3(0.0f64..1.0),
            t in 0.0f64..1.0,
        ) {
            prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
            let norm = |v: [f64; 3]| {
                let s: f64 = v.iter().sum();
                LossWeights::new(v[0] / s, v[1] / s, v[2] / s).unwrap()
            };
            let l = LossWeights::lerp(norm(a), norm(b), t);
            prop_assert!((l.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(l.as_array().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn contrastive_scale_invariant(
            data in prop::collection::vec(-2.0f64..2.0, 12),
            scale in 0.05f64..20.0,
        ) {
            let z = Array2::from_shape_vec((4, 3), data).unwrap();
            prop_assume!(z.rows().into_iter().all(|r| l2_norm(r) > 1e-3));
            let attn = pair_attention(z.view(), 0.5).unwrap();
            let a = contrastive_loss(z.view(), 0.5, attn.view(), AttentionMode::Additive).unwrap();
            let zs = &z * scale;
            let attn_s = pair_attention(zs.view(), 0.5).unwrap();
            let b = contrastive_loss(zs.view(), 0.5, attn_s.view(), AttentionMode::Additive).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn pseudo_labels_ignore_positive_scaling(
            f in prop::collection::vec(-2.0f64..2.0, 3),
            protos in prop::collection::vec(-1.0f64..1.0, 9),
            scale in 0.01f64..100.0,
        ) {
            let f = Array1::from(f);
            prop_assume!(l2_norm(f.view()) > 1e-3);
            let set = PrototypeSet::from_vectors(
                protos.chunks(3).map(|c| Some(Array1::from(c.to_vec()))).collect(),
            );
            prop_assume!(set.present().all(|(_, c)| l2_norm(c) > 1e-3));
            let a = assign_pseudo_labels(f.clone().insert_axis(Axis(0)).view(), &set).unwrap();
            let b = assign_pseudo_labels((&f * scale).insert_axis(Axis(0)).view(), &set).unwrap();
            prop_assert_eq!(a[0].label, b[0].label);
        }

        #[test]
        fn total_loss_is_affine(
            l in prop::array::uniform3(0.0f64..10.0),
            raw in prop::array::uniform3(0.01f64..1.0),
            delta in 0.1f64..5.0,
        ) {
            let s: f64 = raw.iter().sum();
            let w = [raw[0] / s, raw[1] / s, raw[2] / s];
            let base = total_loss(w, l[0], l[1], l[2]).unwrap();
            for i in 0..3 {
                let mut bumped = l;
                bumped[i] += delta;
                let moved = total_loss(w, bumped[0], bumped[1], bumped[2]).unwrap();
                prop_assert!(((moved - base) / delta - w[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn kmeans_inertia_never_increases(
            data in prop::collection::vec(-5.0f64..5.0, 40),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let pts = Array2::from_shape_vec((20, 2), data).unwrap();
            let r = kmeans(pts.view(), k, seed, 100, 0.0).unwrap();
            for pair in r.inertia_history.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-9);
            }
            let recomputed = cluster_loss(pts.view(), r.centroids.view()).unwrap();
            prop_assert!((recomputed - r.inertia).abs() < 1e-9);
            for (x, &a) in pts.rows().into_iter().zip(&r.assignments) {
                let (best, _) = nearest_centroid(x, r.centroids.view());
                prop_assert_eq!(best, a);
            }
        }
    }
}
