//! Random small instances of the composite objective and a central-difference
//! comparison of its analytic gradient.

use ndarray::{Array2, ArrayView2};
use sfuda_core::model::{AdaptBatch, Dims, LossSpec, ModelParams, ParamTensors};
use sfuda_core::mvcl::{AttentionMode, LossWeights};
use sfuda_core::numeric::SeededRng;

pub const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

pub struct Instance {
    model: ModelParams,
    inputs: Array2<f64>,
    labels: Vec<Option<usize>>,
    views: Vec<Array2<f64>>,
    view_weights: Vec<f64>,
    attention: Vec<f64>,
    centroids: Array2<f64>,
    spec: LossSpec,
}

impl Instance {
    pub fn random(rng: &mut SeededRng) -> Self {
        let mut size = |lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
        let dims = Dims {
            d_in: size(1, 6),
            d_h: size(1, 6),
            d_f: size(1, 6),
            n_classes: size(2, 6),
        };
        let m = size(1, 8);
        let model = ModelParams::init(dims, rng).unwrap();
        // widen the weights so tanh units leave the linear regime
        let mut t = model.tensors().clone();
        for s in t.slices_mut() {
            s.iter_mut()
                .for_each(|v| *v = 2.0 * *v + 0.3 * rng.normal());
        }
        let model = ModelParams::from_tensors(t, false).unwrap();

        let matrix =
            |rng: &mut SeededRng| Array2::from_shape_fn((m, dims.d_in), |_| rng.uniform(-2.0, 2.0));
        let inputs = matrix(rng);
        let views = vec![matrix(rng), matrix(rng)];
        let labels = (0..m)
            .map(|_| (rng.uniform(0.0, 1.0) < 0.7).then(|| rng.below(dims.n_classes)))
            .collect();
        let a = rng.uniform(0.05, 0.95);
        let view_weights = vec![a, 1.0 - a];
        let attention = (0..2 * m).map(|_| rng.uniform(0.0, 1.0)).collect();
        let k = 1 + rng.below(3);
        let centroids = Array2::from_shape_fn((k, 2 * dims.d_f), |_| rng.uniform(-1.0, 1.0));
        let raw: Vec<f64> = (0..3).map(|_| rng.uniform(0.05, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights = LossWeights::new(raw[0] / total, raw[1] / total, raw[2] / total).unwrap();
        let attention_mode = if rng.below(2) == 0 {
            AttentionMode::Additive
        } else {
            AttentionMode::Multiplicative
        };
        Self {
            model,
            inputs,
            labels,
            views,
            view_weights,
            attention,
            centroids,
            spec: LossSpec {
                weights,
                tau: rng.uniform(0.2, 1.0),
                attention_mode,
            },
        }
    }

    fn loss_at(&self, model: &ModelParams) -> f64 {
        let views: Vec<ArrayView2<'_, f64>> = self.views.iter().map(|v| v.view()).collect();
        let batch = self.batch(&views);
        model.loss(&batch, &self.spec).unwrap().total
    }

    fn batch<'a>(&'a self, views: &'a [ArrayView2<'a, f64>]) -> AdaptBatch<'a> {
        AdaptBatch {
            inputs: self.inputs.view(),
            pseudo_labels: &self.labels,
            views,
            view_weights: &self.view_weights,
            positive_attention: Some(&self.attention),
            centroids: Some(self.centroids.view()),
        }
    }
}

fn with_entry(model: &ModelParams, tensor: usize, index: usize, delta: f64) -> ModelParams {
    let mut t: ParamTensors = model.tensors().clone();
    t.slices_mut()[tensor][index] += delta;
    ModelParams::from_tensors(t, false).unwrap()
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)` over all parameters.
pub fn max_relative_error(inst: &Instance) -> f64 {
    let views: Vec<ArrayView2<'_, f64>> = inst.views.iter().map(|v| v.view()).collect();
    let (_, grads) = inst
        .model
        .loss_and_grad(&inst.batch(&views), &inst.spec)
        .unwrap();
    let analytic = grads.slices();
    let mut worst: f64 = 0.0;
    for (ti, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let up = inst.loss_at(&with_entry(&inst.model, ti, i, H));
            let down = inst.loss_at(&with_entry(&inst.model, ti, i, -H));
            let numeric = (up - down) / (2.0 * H);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
