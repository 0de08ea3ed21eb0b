//! Reliable sample memory.
//!
//! Every epoch the target samples are grouped by predicted class and their
//! self-entropies are min-max normalized within each class. One row per epoch
//! is appended to an [`EntropyMatrix`]: column `c` holds a representative
//! normalized entropy of class `c` (its minimum by default, or a chosen
//! within-class quantile). The threshold `η` is the maximum over the rows in
//! the window of each row's minimum over present classes. Samples whose
//! normalized entropy does not exceed `η` are reliable and seed one
//! prototype per class.
//!
//! Because min-max normalization maps every class minimum to 0, the default
//! representative gives `η = 0` and selects only each class's most confident
//! sample. Two settings lift that degeneracy without changing the max-of-min
//! structure: a within-class quantile as the representative, and
//! [`EntropyScale::MaxEntropy`], which divides by `ln N` instead of
//! rescaling each class so that entries keep their absolute level across
//! iterations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::numeric::{l2_norm, minmax_normalize, Normalized};

/// How raw self-entropies are mapped onto `[0, 1]` within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScale {
    /// Min-max over each class's list: the class minimum maps to 0 and the
    /// maximum to 1.
    #[default]
    ClassMinMax,
    /// `H / ln N`, the fraction of the largest possible entropy.
    MaxEntropy,
}

impl EntropyScale {
    /// Maps one class's raw entropies for a model with `n_classes` outputs.
    pub fn apply(self, values: &[f64], n_classes: usize) -> Result<Normalized> {
        match self {
            EntropyScale::ClassMinMax => minmax_normalize(values),
            EntropyScale::MaxEntropy => {
                if values.is_empty() {
                    return Err(Error::EmptyInput("values to normalize"));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("non-finite value in normalization"));
                }
                let max = (n_classes as f64).ln();
                let values = values
                    .iter()
                    .map(|&h| {
                        if max > 0.0 {
                            (h / max).clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(Normalized {
                    values,
                    degenerate: false,
                })
            }
        }
    }
}

/// Nearest-rank quantile of `values`: the element at sorted position
/// `floor(q * (n - 1))`. `q = 0` is the minimum. The result is always an
/// element of `values`.
pub fn class_representative(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("class entropies"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx])
}

/// Iterations x classes matrix of representative normalized entropies.
/// `None` marks a class with no predicted samples in that iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMatrix {
    n_classes: usize,
    rows: Vec<Vec<Option<f64>>>,
    degenerate: Vec<Vec<bool>>,
    window: Option<usize>,
    quantile: f64,
    scale: EntropyScale,
}

impl EntropyMatrix {
    /// Empty matrix over `n_classes` columns, full-history window, minimum
    /// as the class representative.
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("entropy matrix needs at least one class"));
        }
        Ok(Self {
            n_classes,
            rows: Vec::new(),
            degenerate: Vec::new(),
            window: None,
            quantile: 0.0,
            scale: EntropyScale::ClassMinMax,
        })
    }

    /// Matrix holding already-normalized rows, none flagged degenerate.
    pub fn from_rows(n_classes: usize, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let mut m = Self::new(n_classes)?;
        for row in &rows {
            if row.len() != n_classes {
                return Err(Error::invalid(format!(
                    "row has {} entries, expected {n_classes}",
                    row.len()
                )));
            }
            if row.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("entropy matrix entries must lie in [0, 1]"));
            }
        }
        m.degenerate = rows.iter().map(|r| vec![false; r.len()]).collect();
        m.rows = rows;
        Ok(m)
    }

    /// Restricts [`compute_threshold`] to the most recent `window` rows.
    /// `None` uses the full history.
    pub fn with_window(mut self, window: Option<usize>) -> Result<Self> {
        if window == Some(0) {
            return Err(Error::invalid("entropy window must be positive"));
        }
        self.window = window;
        Ok(self)
    }

    /// Within-class quantile written into each new row.
    pub fn with_quantile(mut self, quantile: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quantile) {
            return Err(Error::invalid(format!(
                "quantile {quantile} outside [0, 1]"
            )));
        }
        self.quantile = quantile;
        Ok(self)
    }

    pub fn with_scale(mut self, scale: EntropyScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> EntropyScale {
        self.scale
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    /// Per-entry flag: the class's entropies had no spread that iteration.
    pub fn degenerate_flags(&self) -> &[Vec<bool>] {
        &self.degenerate
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    /// Rows that [`compute_threshold`] reads.
    pub fn windowed_rows(&self) -> &[Vec<Option<f64>>] {
        let start = match self.window {
            Some(w) => self.rows.len().saturating_sub(w),
            None => 0,
        };
        &self.rows[start..]
    }

    /// Appends a row built from raw entropies keyed by predicted class and
    /// returns each class's normalized list (`None` for empty classes).
    pub fn record_iteration(&mut self, per_class: &[Vec<f64>]) -> Result<Vec<Option<Normalized>>> {
        if per_class.len() != self.n_classes {
            return Err(Error::invalid(format!(
                "expected {} class lists, got {}",
                self.n_classes,
                per_class.len()
            )));
        }
        if per_class.iter().all(Vec::is_empty) {
            return Err(Error::EmptyIteration);
        }
        let normalized = per_class
            .iter()
            .map(|list| {
                (!list.is_empty())
                    .then(|| self.scale.apply(list, self.n_classes))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let row = normalized
            .iter()
            .map(|n| {
                n.as_ref()
                    .map(|n| class_representative(&n.values, self.quantile))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        self.degenerate.push(
            normalized
                .iter()
                .map(|n| n.as_ref().is_some_and(|n| n.degenerate))
                .collect(),
        );
        self.rows.push(row);
        Ok(normalized)
    }

    /// One line per row, one column per class, empty cells for absent classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n_classes).map(|c| format!("class_{c}")).collect();
        out.push_str("iteration,");
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `max_i min_j E[i][j]` over the rows in the window, skipping absent entries.
pub fn compute_threshold(matrix: &EntropyMatrix) -> Result<f64> {
    let rows = matrix.windowed_rows();
    if rows.is_empty() {
        return Err(Error::EmptyInput("entropy matrix has no rows"));
    }
    let mut eta = f64::NEG_INFINITY;
    for row in rows {
        let row_min = row.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        if row_min.is_finite() {
            eta = eta.max(row_min);
        }
    }
    if !eta.is_finite() {
        return Err(Error::EmptyInput(
            "entropy matrix rows have no present entries",
        ));
    }
    Ok(eta)
}

/// Sample entropies sorted ascending and cut into rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliableSampleMemory {
    rows: Vec<Vec<(usize, f64)>>,
}

impl ReliableSampleMemory {
    /// `(sample id, entropy)` pairs, row by row.
    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn flatten(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().flatten().copied()
    }

    /// Entropy values of each row, without ids.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(_, h)| h).collect())
            .collect()
    }
}

/// Sorts `(sample id, entropy)` pairs by entropy (ties by id) and chunks them
/// into `n_rows` rows of `len / n_rows` entries; the last row also takes the
/// remainder.
pub fn build_memory(entropies: &[(usize, f64)], n_rows: usize) -> Result<ReliableSampleMemory> {
    if n_rows == 0 || n_rows > entropies.len() {
        return Err(Error::invalid(format!(
            "cannot split {} entries into {n_rows} rows",
            entropies.len()
        )));
    }
    if entropies.iter().any(|(_, h)| !h.is_finite()) {
        return Err(Error::invalid("non-finite entropy"));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let size = sorted.len() / n_rows;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let end = if r + 1 == n_rows {
            sorted.len()
        } else {
            (r + 1) * size
        };
        rows.push(sorted[r * size..end].to_vec());
    }
    Ok(ReliableSampleMemory { rows })
}

/// A target sample with its predicted class and normalized entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub index: usize,
    pub class: usize,
    pub entropy: f64,
}

/// Indices of samples with entropy `<= eta`, grouped by predicted class.
pub fn select_reliable(
    samples: &[ScoredSample],
    eta: f64,
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); n_classes];
    for s in samples {
        if s.class >= n_classes {
            return Err(Error::invalid(format!("class {} out of range", s.class)));
        }
        if s.entropy <= eta {
            groups[s.class].push(s.index);
        }
    }
    Ok(groups)
}

/// Unit-norm class prototypes. Absent classes hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: Vec<Option<Array1<f64>>>,
    support: Vec<usize>,
}

impl PrototypeSet {
    /// Normalizes each present vector; zero vectors become absent.
    pub fn from_vectors(vectors: Vec<Option<Array1<f64>>>) -> Self {
        let mut support = Vec::with_capacity(vectors.len());
        let prototypes = vectors
            .into_iter()
            .map(|v| {
                let unit = v.and_then(|v| {
                    let n = l2_norm(v.view());
                    (n > 0.0).then(|| v / n)
                });
                support.push(usize::from(unit.is_some()));
                unit
            })
            .collect();
        Self {
            prototypes,
            support,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn get(&self, class: usize) -> Option<ArrayView1<'_, f64>> {
        self.prototypes.get(class)?.as_ref().map(|p| p.view())
    }

    /// Number of reliable samples behind each prototype; 0 means absent.
    pub fn support_count(&self) -> &[usize] {
        &self.support
    }

    /// `(class, prototype)` for every present class, ascending.
    pub fn present(&self) -> impl Iterator<Item = (usize, ArrayView1<'_, f64>)> + '_ {
        self.prototypes
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.as_ref().map(|p| (k, p.view())))
    }

    pub fn present_count(&self) -> usize {
        self.present().count()
    }
}

/// L2-normalized mean feature of each class. Classes without samples, or
/// whose mean is the zero vector, are absent.
pub fn compute_prototypes(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<PrototypeSet> {
    if features.nrows() != labels.len() {
        return Err(Error::invalid("one label per feature row required"));
    }
    let d = features.ncols();
    let mut sums = vec![Array1::<f64>::zeros(d); n_classes];
    let mut counts = vec![0usize; n_classes];
    for (f, &y) in features.rows().into_iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        sums[y] += &f;
        counts[y] += 1;
    }
    let mut prototypes = Vec::with_capacity(n_classes);
    for (k, (sum, count)) in sums.into_iter().zip(counts.iter_mut()).enumerate() {
        if *count == 0 {
            prototypes.push(None);
            continue;
        }
        let mean = sum / *count as f64;
        let norm = l2_norm(mean.view());
        if norm == 0.0 {
            log::warn!("class {k}: reliable features average to zero; prototype dropped");
            *count = 0;
            prototypes.push(None);
        } else {
            prototypes.push(Some(mean / norm));
        }
    }
    Ok(PrototypeSet {
        prototypes,
        support: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn matrix(rows: &[&[Option<f64>]]) -> EntropyMatrix {
        EntropyMatrix::from_rows(rows[0].len(), rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn from_rows_checks_shape_and_range() {
        assert!(EntropyMatrix::from_rows(2, vec![vec![Some(0.1)]]).is_err());
        assert!(EntropyMatrix::from_rows(1, vec![vec![Some(1.5)]]).is_err());
        let m = EntropyMatrix::from_rows(2, vec![vec![None, Some(0.3)]]).unwrap();
        assert_eq!(m.degenerate_flags(), &[vec![false, false]]);
    }

    #[test]
    fn record_iteration_examples() {
        let mut m = EntropyMatrix::new(2).unwrap();
        m.record_iteration(&[vec![0.2, 0.5, 0.8], vec![0.4, 0.4, 1.0]])
            .unwrap();
        assert_eq!(m.rows()[0], vec![Some(0.0), Some(0.0)]);

        let mut m = EntropyMatrix::new(1).unwrap();
        m.record_iteration(&[vec![0.3, 0.3]]).unwrap();
        assert_eq!(m.rows()[0], vec![Some(0.0)]);
        assert!(m.degenerate_flags()[0][0]);

        let mut m = EntropyMatrix::new(3).unwrap();
        m.record_iteration(&[vec![0.1, 0.9], vec![], vec![0.5]])
            .unwrap();
        assert_eq!(m.rows()[0], vec![Some(0.0), None, Some(0.0)]);
        assert_eq!(m.len(), 1);

        assert!(matches!(
            m.record_iteration(&[vec![], vec![], vec![]]),
            Err(Error::EmptyIteration)
        ));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn quantile_representative() {
        let mut m = EntropyMatrix::new(1).unwrap().with_quantile(0.5).unwrap();
        // normalized: [0, 0.25, 0.5, 1.0, 0.75]; median position 2
        m.record_iteration(&[vec![1.0, 2.0, 3.0, 5.0, 4.0]])
            .unwrap();
        assert_eq!(m.rows()[0], vec![Some(0.5)]);
        assert_eq!(class_representative(&[0.3, 0.1, 0.2], 1.0).unwrap(), 0.3);
        assert!(class_representative(&[0.3], 1.5).is_err());
    }

    #[test]
    fn max_entropy_scale_keeps_absolute_level() {
        let ln2 = 2f64.ln();
        let mut m = EntropyMatrix::new(2)
            .unwrap()
            .with_scale(EntropyScale::MaxEntropy);
        let out = m
            .record_iteration(&[vec![0.5 * ln2, ln2], vec![0.25 * ln2]])
            .unwrap();
        assert_eq!(out[0].as_ref().unwrap().values, vec![0.5, 1.0]);
        assert_eq!(m.rows()[0], vec![Some(0.5), Some(0.25)]);
        assert_eq!(compute_threshold(&m).unwrap(), 0.25);
    }

    #[test]
    fn threshold_examples() {
        let m = matrix(&[&[Some(0.1), Some(0.4)], &[Some(0.3), Some(0.2)]]);
        assert_eq!(compute_threshold(&m).unwrap(), 0.2);
        assert_eq!(compute_threshold(&matrix(&[&[Some(0.5)]])).unwrap(), 0.5);
        assert_eq!(
            compute_threshold(&matrix(&[&[None, Some(0.7)]])).unwrap(),
            0.7
        );
        assert!(matches!(
            compute_threshold(&EntropyMatrix::new(2).unwrap()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn window_limits_history() {
        let mut m = matrix(&[&[Some(0.9)], &[Some(0.1)], &[Some(0.2)]]);
        assert_eq!(compute_threshold(&m).unwrap(), 0.9);
        m = m.with_window(Some(2)).unwrap();
        assert_eq!(compute_threshold(&m).unwrap(), 0.2);
        assert!(EntropyMatrix::new(1).unwrap().with_window(Some(0)).is_err());
    }

    #[test]
    fn csv_dump_leaves_absent_cells_empty() {
        let m = matrix(&[&[Some(0.25), None]]);
        assert_eq!(m.to_csv(), "iteration,class_0,class_1\n0,0.25,\n");
    }

    #[test]
    fn memory_examples() {
        let e: Vec<(usize, f64)> = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2]
            .into_iter()
            .enumerate()
            .collect();
        let mem = build_memory(&e, 2).unwrap();
        assert_eq!(mem.values(), vec![vec![0.1, 0.2, 0.3], vec![0.5, 0.7, 0.9]]);
        assert_eq!(mem.rows()[0][0], (1, 0.1));

        let single = build_memory(&e, 1).unwrap();
        assert_eq!(single.values(), vec![vec![0.1, 0.2, 0.3, 0.5, 0.7, 0.9]]);

        let seven: Vec<(usize, f64)> = (0..7).map(|i| (i, i as f64)).collect();
        let mem = build_memory(&seven, 2).unwrap();
        assert_eq!(mem.rows()[0].len(), 3);
        assert_eq!(mem.rows()[1].len(), 4);

        assert!(build_memory(&seven, 0).is_err());
        assert!(build_memory(&seven, 8).is_err());
    }

    #[test]
    fn select_examples() {
        let samples: Vec<ScoredSample> = [0.1, 0.5, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &h)| ScoredSample {
                index: i,
                class: 0,
                entropy: h,
            })
            .collect();
        assert_eq!(select_reliable(&samples, 0.5, 1).unwrap(), vec![vec![0, 1]]);
        assert_eq!(
            select_reliable(&samples, 1.0, 1).unwrap(),
            vec![vec![0, 1, 2]]
        );
        assert_eq!(
            select_reliable(&samples, 0.0, 1).unwrap(),
            vec![Vec::<usize>::new()]
        );
    }

    #[test]
    fn prototype_examples() {
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let p = compute_prototypes(f.view(), &[0, 0], 1).unwrap();
        let c = p.get(0).unwrap();
        assert!((c[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        let p = compute_prototypes(array![[3.0, 4.0]].view(), &[1], 4).unwrap();
        assert_eq!(p.get(1).unwrap().to_vec(), vec![0.6, 0.8]);
        assert_eq!(p.support_count(), &[0, 1, 0, 0]);
        assert!(p.get(3).is_none());

        let p = compute_prototypes(array![[1.0, 0.0], [-1.0, 0.0]].view(), &[0, 0], 1).unwrap();
        assert!(p.get(0).is_none());
        assert_eq!(p.support_count(), &[0]);
    }

    fn brute_force_threshold(rows: &[Vec<Option<f64>>]) -> Option<f64> {
        let mut best: Option<f64> = None;
        for row in rows {
            let mut row_min: Option<f64> = None;
            for v in row.iter().flatten() {
                if row_min.is_none_or(|m| *v < m) {
                    row_min = Some(*v);
                }
            }
            if let Some(m) = row_min {
                if best.is_none_or(|b| m > b) {
                    best = Some(m);
                }
            }
        }
        best
    }

    fn entropy_rows() -> impl Strategy<Value = Vec<Vec<Option<f64>>>> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            prop::collection::vec(
                prop::collection::vec(prop::option::weighted(0.8, 0.0f64..=1.0), c),
                r,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn threshold_matches_brute_force(rows in entropy_rows()) {
            let expected = brute_force_threshold(&rows);
            let refs: Vec<&[Option<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
            let m = matrix(&refs);
            match expected {
                Some(v) => {
                    let eta = compute_threshold(&m).unwrap();
                    prop_assert_eq!(eta, v);
                    prop_assert!((0.0..=1.0).contains(&eta));
                    prop_assert!(rows.iter().flatten().flatten().any(|x| *x == eta));
                }
                None => prop_assert!(compute_threshold(&m).is_err()),
            }
        }

        #[test]
        fn recorded_entries_in_unit_interval(
            lists in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 0..6), 1..5),
            q in 0.0f64..=1.0,
        ) {
            prop_assume!(lists.iter().any(|l| !l.is_empty()));
            let mut m = EntropyMatrix::new(lists.len()).unwrap().with_quantile(q).unwrap();
            m.record_iteration(&lists).unwrap();
            for (cell, list) in m.rows()[0].iter().zip(&lists) {
                prop_assert_eq!(cell.is_some(), !list.is_empty());
                if let Some(v) = cell {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }
        }

        #[test]
        fn selection_is_monotone(
            hs in prop::collection::vec((0.0f64..=1.0, 0usize..3), 1..30),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let samples: Vec<ScoredSample> = hs
                .iter()
                .enumerate()
                .map(|(i, &(h, c))| ScoredSample { index: i, class: c, entropy: h })
                .collect();
            let small = select_reliable(&samples, lo, 3).unwrap();
            let large = select_reliable(&samples, hi, 3).unwrap();
            for (s, l) in small.iter().zip(&large) {
                prop_assert!(s.iter().all(|i| l.contains(i)));
            }
        }

        #[test]
        fn memory_is_sorted_and_complete(
            hs in prop::collection::vec(0.0f64..5.0, 1..60),
            rows in 1usize..10,
        ) {
            prop_assume!(rows <= hs.len());
            let entries: Vec<(usize, f64)> = hs.iter().copied().enumerate().collect();
            let mem = build_memory(&entries, rows).unwrap();
            prop_assert_eq!(mem.rows().len(), rows);
            let flat: Vec<(usize, f64)> = mem.flatten().collect();
            prop_assert!(flat.windows(2).all(|w| w[0].1 <= w[1].1));
            let mut ids: Vec<usize> = flat.iter().map(|&(i, _)| i).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..hs.len()).collect::<Vec<_>>());
            for (id, h) in flat {
                prop_assert_eq!(hs[id], h);
            }
        }

        #[test]
        fn identical_features_give_their_direction(
            v in prop::collection::vec(-3.0f64..3.0, 4),
            count in 1usize..6,
        ) {
            let v = Array1::from(v);
            let n = l2_norm(v.view());
            prop_assume!(n > 1e-6);
            let f = Array2::from_shape_fn((count, 4), |(_, j)| v[j]);
            let p = compute_prototypes(f.view(), &vec![0; count], 1).unwrap();
            let c = p.get(0).unwrap();
            prop_assert!((l2_norm(c) - 1.0).abs() < 1e-9);
            for j in 0..4 {
                prop_assert!((c[j] - v[j] / n).abs() < 1e-9);
            }
        }
    }
}
