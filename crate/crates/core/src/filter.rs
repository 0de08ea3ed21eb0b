//! Adaptive filtering of pseudo-labels.
//!
//! Each epoch contributes a threshold `θ` (the largest per-class minimum of
//! normalized entropy, or of a chosen within-class quantile). The last `ρ`
//! thresholds are combined by dot-product attention into `θ*`, and only
//! pseudo-labels whose entropy does not exceed `θ*` are kept.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvcl::Assignment;
use crate::numeric::softmax_unchecked;
use crate::rsm::class_representative;

/// Sliding window of per-epoch thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdHistory {
    thetas: VecDeque<f64>,
    window: usize,
}

impl ThresholdHistory {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("threshold window must be positive"));
        }
        Ok(Self {
            thetas: VecDeque::with_capacity(window),
            window,
        })
    }

    /// Builds a history from `thetas`, keeping the last `window` entries.
    pub fn from_thetas(thetas: &[f64], window: usize) -> Result<Self> {
        let mut h = Self::new(window)?;
        thetas.iter().try_for_each(|&t| h.push(t))?;
        Ok(h)
    }

    /// Appends `theta`, evicting the oldest entry when the window is full.
    pub fn push(&mut self, theta: f64) -> Result<()> {
        if !theta.is_finite() {
            return Err(Error::invalid("threshold is not finite"));
        }
        if self.thetas.len() == self.window {
            self.thetas.pop_front();
        }
        self.thetas.push_back(theta);
        Ok(())
    }

    /// Stored thresholds, oldest first.
    pub fn thetas(&self) -> Vec<f64> {
        self.thetas.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

/// `max_c min H_c` over the nonempty class sets.
pub fn epoch_threshold(per_class: &[Vec<f64>]) -> Result<f64> {
    epoch_threshold_at(per_class, 0.0)
}

/// `max_c Q_q(H_c)`, where `Q_q` is the nearest-rank quantile; `q = 0`
/// reduces to [`epoch_threshold`].
pub fn epoch_threshold_at(per_class: &[Vec<f64>], q: f64) -> Result<f64> {
    let mut theta: Option<f64> = None;
    for set in per_class.iter().filter(|s| !s.is_empty()) {
        let r = class_representative(set, q)?;
        theta = Some(theta.map_or(r, |t: f64| t.max(r)));
    }
    theta.ok_or(Error::EmptyInput("every class entropy set is empty"))
}

/// Raw attention scores and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub scores: Vec<f64>,
    pub alphas: Vec<f64>,
}

/// `S_i = mean(θ) * θ_i / sqrt(ρ)` with `ρ` the current history length, and
/// `α = softmax(S)`.
pub fn attention_scores(history: &ThresholdHistory) -> Result<Attention> {
    if history.is_empty() {
        return Err(Error::EmptyInput("threshold history"));
    }
    let rho = history.len() as f64;
    let mean = history.thetas.iter().sum::<f64>() / rho;
    let scores: Vec<f64> = history
        .thetas
        .iter()
        .map(|t| mean * t / rho.sqrt())
        .collect();
    let alphas = softmax_unchecked(&scores);
    Ok(Attention { scores, alphas })
}

/// Attention-weighted threshold. With `strict` the sum carries the leading
/// `1/ρ` factor; otherwise it is the plain `Σ α_i θ_i`.
pub fn weighted_threshold(history: &ThresholdHistory, strict: bool) -> Result<f64> {
    let att = attention_scores(history)?;
    combine_thresholds(&att.alphas, &history.thetas(), strict)
}

/// `Σ α_i θ_i`, divided by `ρ = len` when `strict`.
pub fn combine_thresholds(alphas: &[f64], thetas: &[f64], strict: bool) -> Result<f64> {
    if thetas.is_empty() {
        return Err(Error::EmptyInput("threshold history"));
    }
    if alphas.len() != thetas.len() {
        return Err(Error::invalid(format!(
            "{} attention weights for {} thresholds",
            alphas.len(),
            thetas.len()
        )));
    }
    let sum: f64 = alphas.iter().zip(thetas).map(|(a, t)| a * t).sum();
    Ok(if strict {
        sum / thetas.len() as f64
    } else {
        sum
    })
}

/// A pseudo-label together with the entropy used to judge it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
    pub entropy: f64,
    pub retained: bool,
}

impl PseudoLabelRecord {
    pub fn new(index: usize, assignment: Assignment, entropy: f64) -> Self {
        Self {
            index,
            label: assignment.label,
            confidence: assignment.confidence,
            entropy,
            retained: false,
        }
    }
}

/// Retention decision for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Positions (into the record slice) of retained records, ascending.
    pub retained: Vec<usize>,
    pub labeling_rate: f64,
}

/// Marks records with `entropy <= theta_star` as retained.
pub fn filter_labels(records: &mut [PseudoLabelRecord], theta_star: f64) -> FilterOutcome {
    let mut retained = Vec::new();
    for (pos, r) in records.iter_mut().enumerate() {
        r.retained = r.entropy <= theta_star;
        if r.retained {
            retained.push(pos);
        }
    }
    let labeling_rate = if records.is_empty() {
        0.0
    } else {
        retained.len() as f64 / records.len() as f64
    };
    FilterOutcome {
        retained,
        labeling_rate,
    }
}

/// Keeps the lowest-entropy record of each pseudo-label class (earliest on
/// ties) and marks only those as retained.
pub fn retain_lowest_per_class(records: &mut [PseudoLabelRecord]) -> FilterOutcome {
    let mut best: Vec<Option<usize>> = Vec::new();
    for (pos, r) in records.iter().enumerate() {
        if best.len() <= r.label {
            best.resize(r.label + 1, None);
        }
        match best[r.label] {
            Some(b) if records[b].entropy <= r.entropy => {}
            _ => best[r.label] = Some(pos),
        }
    }
    let mut retained: Vec<usize> = best.into_iter().flatten().collect();
    retained.sort_unstable();
    for (pos, r) in records.iter_mut().enumerate() {
        r.retained = retained.binary_search(&pos).is_ok();
    }
    let labeling_rate = if records.is_empty() {
        0.0
    } else {
        retained.len() as f64 / records.len() as f64
    };
    FilterOutcome {
        retained,
        labeling_rate,
    }
}
