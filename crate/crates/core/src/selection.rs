//! Gradient-direction matrices, the gradient-diversity objectives and the
//! fractional-to-discrete rounding step.

use std::collections::{HashMap, HashSet};
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-norm tolerance for stored gradient columns.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Stable identifier of a training sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId(pub String);

impl SampleId {
    pub fn new(s: impl Into<String>) -> Self {
        SampleId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_owned())
    }
}

/// Builds ids `prefix0, prefix1, ...`.
pub fn numbered_ids(prefix: &str, n: usize) -> Vec<SampleId> {
    (0..n).map(|i| SampleId(format!("{prefix}{i}"))).collect()
}

/// Column-normalized matrix of per-sample loss gradient directions (`d x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    columns: Array2<f64>,
    ids: Vec<SampleId>,
    dropped: Vec<SampleId>,
}

/// Divides every column of `raw` by its Euclidean norm.
///
/// Zero-norm columns carry no direction; they are removed and their ids are
/// kept in [`GradientSet::dropped`].
pub fn normalize_columns(raw: ArrayView2<'_, f64>, ids: Vec<SampleId>) -> Result<GradientSet> {
    let (d, n) = raw.dim();
    if d == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("gradient matrix must be non-empty, got {d}x{n}")));
    }
    if ids.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: ids.len() });
    }
    check_unique(&ids)?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw gradients"));
    }

    let mut keep = Vec::with_capacity(n);
    let mut kept_ids = Vec::with_capacity(n);
    let mut dropped = Vec::new();
    for (j, id) in ids.into_iter().enumerate() {
        let norm = raw.column(j).dot(&raw.column(j)).sqrt();
        if norm > 0.0 {
            keep.push((j, norm));
            kept_ids.push(id);
        } else {
            log::warn!("dropping sample {id}: zero loss gradient");
            dropped.push(id);
        }
    }
    if keep.is_empty() {
        return Err(Error::EmptyGradientSet);
    }

    let mut columns = Array2::zeros((d, keep.len()));
    for (out, &(j, norm)) in keep.iter().enumerate() {
        let src = raw.column(j);
        columns.column_mut(out).zip_mut_with(&src, |dst, &v| *dst = v / norm);
    }
    Ok(GradientSet { columns, ids: kept_ids, dropped })
}

fn check_unique(ids: &[SampleId]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateSample(id.0.clone()));
        }
    }
    Ok(())
}

impl GradientSet {
    /// Wraps columns that are already unit-norm, validating the invariants.
    pub fn from_unit_columns(columns: Array2<f64>, ids: Vec<SampleId>) -> Result<Self> {
        let (d, n) = columns.dim();
        if d == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("gradient matrix must be non-empty, got {d}x{n}")));
        }
        if ids.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: ids.len() });
        }
        check_unique(&ids)?;
        for (j, col) in columns.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!("column {j} has norm {norm}, expected 1")));
            }
        }
        Ok(GradientSet { columns, ids, dropped: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn count(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> ArrayView2<'_, f64> {
        self.columns.view()
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.columns.column(i)
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    /// Ids whose gradient was exactly zero at construction.
    pub fn dropped(&self) -> &[SampleId] {
        &self.dropped
    }

    /// Position of every id, for lookups.
    pub fn index_of(&self) -> HashMap<&SampleId, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// `G x`, the weighted sum of gradient directions.
    pub fn weighted_sum(&self, x: &[f64]) -> Result<Array1<f64>> {
        if x.len() != self.count() {
            return Err(Error::DimensionMismatch { expected: self.count(), got: x.len() });
        }
        Ok(self.columns.dot(&ArrayView1::from(x)))
    }

    /// `G^T v`.
    pub fn transpose_dot(&self, v: &[f64]) -> Result<Array1<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        Ok(self.columns.t().dot(&ArrayView1::from(v)))
    }

    /// Restricts the set to the given column indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> GradientSet {
        let columns = self.columns.select(Axis(1), indices);
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        GradientSet { columns, ids, dropped: Vec::new() }
    }
}

/// Symmetric matrix of pairwise cosines `G^T G`, optionally with a zeroed diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    q: Array2<f64>,
    zero_diagonal: bool,
    /// `G` and a row-major `G^T` when `G` has fewer rows than columns;
    /// products then go through them.
    factor: Option<LowRank>,
}

#[derive(Clone, Debug, PartialEq)]
struct LowRank {
    g: Array2<f64>,
    gt: Array2<f64>,
    /// Squared column norms, the diagonal removed by `zero_diagonal`.
    sq_norms: Array1<f64>,
}

/// Computes `Q = G^T G`; with `zero_diagonal` the diagonal is overwritten with 0.
pub fn gram(g: &GradientSet, zero_diagonal: bool) -> GramMatrix {
    let mut q = g.columns.t().dot(&g.columns);
    let n = q.nrows();
    // symmetrize exactly; the product is symmetric only up to rounding
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (q[[i, j]] + q[[j, i]]);
            q[[i, j]] = v;
            q[[j, i]] = v;
        }
    }
    if zero_diagonal {
        q.diag_mut().fill(0.0);
    }
    let factor = (g.dim() < n).then(|| LowRank {
        g: g.columns.as_standard_layout().into_owned(),
        gt: g.columns.t().as_standard_layout().into_owned(),
        sq_norms: g.columns.columns().into_iter().map(|c| c.dot(&c)).collect(),
    });
    GramMatrix { q, zero_diagonal, factor }
}

impl GramMatrix {
    /// Wraps an arbitrary symmetric matrix (used for synthetic solver inputs).
    pub fn from_matrix(q: Array2<f64>) -> Result<Self> {
        let (r, c) = q.dim();
        if r != c {
            return Err(Error::DimensionMismatch { expected: r, got: c });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Q"));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                if (q[[i, j]] - q[[j, i]]).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("Q not symmetric at ({i}, {j})")));
                }
            }
        }
        let zero_diagonal = q.diag().iter().all(|&v| v == 0.0);
        Ok(GramMatrix { q, zero_diagonal, factor: None })
    }

    pub fn size(&self) -> usize {
        self.q.nrows()
    }

    pub fn zero_diagonal(&self) -> bool {
        self.zero_diagonal
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[[i, j]]
    }

    /// `Q x`. With a low-rank factor this is `G^T (G x)`, minus the unit
    /// diagonal contribution when the diagonal is zeroed.
    pub fn mul_vec(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        match &self.factor {
            Some(f) => {
                let mut out = f.gt.dot(&f.g.dot(&x));
                if self.zero_diagonal {
                    for ((o, xi), sq) in out.iter_mut().zip(x.iter()).zip(&f.sq_norms) {
                        *o -= sq * xi;
                    }
                }
                out
            }
            None => self.q.dot(&x),
        }
    }

    /// Returns the matrix with the same entries but the diagonal replaced by zeros.
    pub fn without_diagonal(&self) -> GramMatrix {
        let mut q = self.q.clone();
        q.diag_mut().fill(0.0);
        GramMatrix { q, zero_diagonal: true, factor: self.factor.clone() }
    }
}

/// Fractional selection vector on the capped simplex `{x in [0,1]^n : sum x = N}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionWeights {
    values: Vec<f64>,
    budget: usize,
}

impl SelectionWeights {
    pub fn new(values: Vec<f64>, budget: usize) -> Result<Self> {
        if budget == 0 || budget > values.len() {
            return Err(Error::Infeasible { budget, available: values.len() });
        }
        if values.iter().any(|v| !v.is_finite() || *v < -1e-7 || *v > 1.0 + 1e-7) {
            return Err(Error::InvalidArgument("selection weights must lie in [0, 1]".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - budget as f64).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("selection weights sum to {sum}, expected {budget}")));
        }
        Ok(SelectionWeights { values, budget })
    }

    /// The indicator vector of `indices` over `n` entries.
    pub fn indicator(n: usize, indices: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; n];
        for &i in indices {
            if i >= n {
                return Err(Error::DimensionMismatch { expected: n, got: i + 1 });
            }
            values[i] = 1.0;
        }
        SelectionWeights::new(values, indices.len())
    }

    /// The uniform point `(N/n) 1`.
    pub fn uniform(n: usize, budget: usize) -> Result<Self> {
        if budget == 0 || budget > n {
            return Err(Error::Infeasible { budget, available: n });
        }
        Ok(SelectionWeights { values: vec![budget as f64 / n as f64; n], budget })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The samples kept in a replay buffer, in ascending pool order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ReplaySelection {
    pub chosen: Vec<SampleId>,
}

impl ReplaySelection {
    pub fn new(chosen: Vec<SampleId>) -> Self {
        ReplaySelection { chosen }
    }

    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn contains(&self, id: &SampleId) -> bool {
        self.chosen.contains(id)
    }

    /// Positions of the chosen ids within `g`.
    pub fn indices_in(&self, g: &GradientSet) -> Result<Vec<usize>> {
        let index = g.index_of();
        self.chosen
            .iter()
            .map(|id| index.get(id).copied().ok_or_else(|| Error::UnknownSample(id.0.clone())))
            .collect()
    }
}

/// Sum of pairwise cosine similarities over the chosen samples.
///
/// Both orders of each pair are counted. The `i == j` terms (which add up to
/// `|R|`) are included only when `include_diagonal` is set.
pub fn objective_discrete(g: &GradientSet, chosen: &ReplaySelection, include_diagonal: bool) -> Result<f64> {
    let idx = chosen.indices_in(g)?;
    Ok(objective_discrete_indices(g, &idx, include_diagonal))
}

/// [`objective_discrete`] over column indices.
pub fn objective_discrete_indices(g: &GradientSet, idx: &[usize], include_diagonal: bool) -> f64 {
    let mut total = 0.0;
    for (a, &i) in idx.iter().enumerate() {
        let gi = g.column(i);
        let ni = gi.dot(&gi).sqrt();
        for (b, &j) in idx.iter().enumerate() {
            if a == b && !include_diagonal {
                continue;
            }
            let gj = g.column(j);
            let nj = gj.dot(&gj).sqrt();
            total += gi.dot(&gj) / (ni * nj);
        }
    }
    total
}

/// `x^T Q x`.
pub fn objective_relaxed(q: &GramMatrix, x: &SelectionWeights) -> Result<f64> {
    if q.size() != x.len() {
        return Err(Error::DimensionMismatch { expected: q.size(), got: x.len() });
    }
    let xv = ArrayView1::from(x.values());
    Ok(xv.dot(&q.q.dot(&xv)))
}

/// Indices of the `n` largest entries, ties broken by ascending index.
pub fn top_n_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n.min(values.len()));
    order.sort_unstable();
    order
}

/// Keeps the ids of the `budget` largest weights.
pub fn round_top_n(x: &SelectionWeights, ids: &[SampleId]) -> Result<ReplaySelection> {
    if ids.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: ids.len() });
    }
    let picked = top_n_indices(x.values(), x.budget());
    Ok(ReplaySelection::new(picked.into_iter().map(|i| ids[i].clone()).collect()))
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn ids(n: usize) -> Vec<SampleId> {
        (1..=n).map(|i| SampleId(i.to_string())).collect()
    }

    #[test]
    fn normalizes_each_column() {
        let raw = array![[3.0, 0.0], [4.0, 2.0]];
        let g = normalize_columns(raw.view(), ids(2)).unwrap();
        assert_eq!(g.columns(), array![[0.6, 0.0], [0.8, 1.0]]);
        assert!(g.dropped().is_empty());
    }

    #[test]
    fn drops_zero_columns() {
        let raw = array![[1.0, 0.0], [0.0, 0.0]];
        let g = normalize_columns(raw.view(), ids(2)).unwrap();
        assert_eq!(g.count(), 1);
        assert_eq!(g.columns(), array![[1.0], [0.0]]);
        assert_eq!(g.dropped(), &[SampleId::from("2")]);
    }

    #[test]
    fn identity_is_unchanged() {
        let raw = Array2::<f64>::eye(4);
        let g = normalize_columns(raw.view(), ids(4)).unwrap();
        assert_eq!(g.columns(), raw);
    }

    #[test]
    fn all_zero_is_an_error() {
        let raw = Array2::<f64>::zeros((3, 2));
        assert!(matches!(normalize_columns(raw.view(), ids(2)), Err(Error::EmptyGradientSet)));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let raw = Array2::<f64>::eye(2);
        let dup = vec![SampleId::from("a"), SampleId::from("a")];
        assert!(matches!(normalize_columns(raw.view(), dup), Err(Error::DuplicateSample(_))));
    }

    #[test]
    fn gram_of_orthonormal_columns() {
        let g = normalize_columns(Array2::<f64>::eye(3).view(), ids(3)).unwrap();
        assert_eq!(gram(&g, false).matrix(), Array2::<f64>::eye(3));
        assert_eq!(gram(&g, true).matrix(), Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn gram_of_duplicated_direction() {
        let raw = array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let g = normalize_columns(raw.view(), ids(3)).unwrap();
        let q = gram(&g, false);
        assert_eq!(q.matrix(), array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn discrete_objective_examples() {
        let raw = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let g = normalize_columns(raw.view(), ids(3)).unwrap();
        let r12 = ReplaySelection::new(vec!["1".into(), "2".into()]);
        let r13 = ReplaySelection::new(vec!["1".into(), "3".into()]);
        assert_eq!(objective_discrete(&g, &r12, true).unwrap(), 2.0);
        assert_eq!(objective_discrete(&g, &r13, true).unwrap(), 4.0);
        assert_eq!(objective_discrete(&g, &r13, false).unwrap(), 2.0);
        let bad = ReplaySelection::new(vec!["9".into()]);
        assert!(matches!(objective_discrete(&g, &bad, true), Err(Error::UnknownSample(_))));
    }

    #[test]
    fn relaxed_objective_examples() {
        let eye = GramMatrix::from_matrix(Array2::eye(4)).unwrap();
        let x = SelectionWeights::new(vec![1.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(objective_relaxed(&eye, &x).unwrap(), 1.0);

        let zero = GramMatrix::from_matrix(Array2::zeros((4, 4))).unwrap();
        let x = SelectionWeights::uniform(4, 2).unwrap();
        assert_eq!(objective_relaxed(&zero, &x).unwrap(), 0.0);

        let q = GramMatrix::from_matrix(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let x = SelectionWeights::new(vec![0.5, 0.5], 1).unwrap();
        assert_eq!(objective_relaxed(&q, &x).unwrap(), 0.5);

        let x3 = SelectionWeights::uniform(3, 1).unwrap();
        assert!(matches!(objective_relaxed(&q, &x3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn top_n_examples() {
        let x = SelectionWeights::new(vec![0.9, 0.1, 0.95, 0.05], 2).unwrap();
        let sel = round_top_n(&x, &ids(4)).unwrap();
        assert_eq!(sel.chosen, vec![SampleId::from("1"), SampleId::from("3")]);

        let x = SelectionWeights::uniform(4, 2).unwrap();
        let sel = round_top_n(&x, &ids(4)).unwrap();
        assert_eq!(sel.chosen, vec![SampleId::from("1"), SampleId::from("2")]);

        let x = SelectionWeights::new(vec![1.0, 0.0, 1.0, 0.0], 2).unwrap();
        let sel = round_top_n(&x, &ids(4)).unwrap();
        assert_eq!(sel.chosen, vec![SampleId::from("1"), SampleId::from("3")]);
    }

    #[test]
    fn weights_validation() {
        assert!(SelectionWeights::new(vec![0.5, 0.4], 1).is_err());
        assert!(SelectionWeights::new(vec![1.2, -0.2], 1).is_err());
        assert!(SelectionWeights::new(vec![1.0], 2).is_err());
        assert!((SelectionWeights::uniform(3, 2).unwrap().values()[0] - 2.0 / 3.0).abs() < 1e-15);
    }
}
