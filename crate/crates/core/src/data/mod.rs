//! Paired long-format longitudinal data.
//!
//! A [`LongView`] stacks the repeated measurements of every subject into one
//! matrix, one row per (subject, time) measurement. Two views over the same
//! subjects form a [`PairedStudy`]; their per-subject measurement counts and
//! times are allowed to differ.

mod align;
mod folds;
mod io;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::ops::Range;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{align_to_event, AlignOptions, EventTable, EventlessAnchor};
pub use folds::{subject_folds, FoldAssignment};
pub use io::{
    read_event_csv, read_long_csv, read_long_csv_from, write_long_csv, write_long_csv_to,
    CsvSchema, MissingPolicy,
};

/// Ordering used for subject labels: numeric labels compare numerically and
/// sort before non-numeric ones, everything else compares as strings.
pub fn subject_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Contiguous run of rows belonging to one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectBlock {
    pub id: String,
    pub start: usize,
    pub len: usize,
}

impl SubjectBlock {
    pub fn rows(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// One view of a study in long format.
///
/// Rows are grouped contiguously by subject and, within a subject, times are
/// strictly increasing. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LongView {
    values: Array2<f64>,
    subject_ids: Vec<String>,
    times: Vec<f64>,
    feature_names: Vec<String>,
    blocks: Vec<SubjectBlock>,
}

impl LongView {
    /// Builds a view from rows that already satisfy the grouping invariants.
    pub fn new(
        values: Array2<f64>,
        subject_ids: Vec<String>,
        times: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = values.dim();
        if subject_ids.len() != n || times.len() != n {
            return Err(Error::InvalidView(format!(
                "{} rows but {} subject ids and {} times",
                n,
                subject_ids.len(),
                times.len()
            )));
        }
        if feature_names.len() != p {
            return Err(Error::InvalidView(format!(
                "{} columns but {} feature names",
                p,
                feature_names.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidView(format!("non-finite time {t}")));
        }
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidView(format!("non-finite value at row {r}, column {c}")));
        }

        let mut blocks: Vec<SubjectBlock> = Vec::new();
        let mut seen = BTreeSet::new();
        for (row, id) in subject_ids.iter().enumerate() {
            match blocks.last_mut() {
                Some(b) if &b.id == id => {
                    if times[row] <= times[row - 1] {
                        if times[row] == times[row - 1] {
                            return Err(Error::DuplicateTimestamp {
                                subject: id.clone(),
                                time: times[row],
                            });
                        }
                        return Err(Error::InvalidView(format!(
                            "times for subject `{id}` are not increasing at row {row}"
                        )));
                    }
                    b.len += 1;
                }
                _ => {
                    if !seen.insert(id.clone()) {
                        return Err(Error::InvalidView(format!(
                            "rows of subject `{id}` are not contiguous"
                        )));
                    }
                    blocks.push(SubjectBlock {
                        id: id.clone(),
                        start: row,
                        len: 1,
                    });
                }
            }
        }

        Ok(Self {
            values,
            subject_ids,
            times,
            feature_names,
            blocks,
        })
    }

    /// Builds a view from rows in arbitrary order, sorting by (subject, time).
    pub fn from_unsorted(
        values: Array2<f64>,
        subject_ids: Vec<String>,
        times: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if subject_ids.len() != values.nrows() || times.len() != values.nrows() {
            return Err(Error::InvalidView("row count mismatch".into()));
        }
        let mut order: Vec<usize> = (0..values.nrows()).collect();
        order.sort_by(|&a, &b| {
            subject_order(&subject_ids[a], &subject_ids[b])
                .then(times[a].partial_cmp(&times[b]).unwrap_or(Ordering::Equal))
        });
        let values = values.select(Axis(0), &order);
        let subject_ids = order.iter().map(|&i| subject_ids[i].clone()).collect();
        let times = order.iter().map(|&i| times[i]).collect();
        Self::new(values, subject_ids, times, feature_names)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn blocks(&self) -> &[SubjectBlock] {
        &self.blocks
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.blocks.len()
    }

    /// Same rows and times with a replacement value matrix.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::DimensionMismatch(format!(
                "expected {:?}, got {:?}",
                self.values.dim(),
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidView("non-finite value".into()));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    /// Keeps only the rows of the listed subjects (order of the view is kept).
    pub fn subset_subjects(&self, keep: &BTreeSet<String>) -> Result<Self> {
        let rows: Vec<usize> = self
            .blocks
            .iter()
            .filter(|b| keep.contains(&b.id))
            .flat_map(|b| b.rows())
            .collect();
        Self::new(
            self.values.select(Axis(0), &rows),
            rows.iter().map(|&r| self.subject_ids[r].clone()).collect(),
            rows.iter().map(|&r| self.times[r]).collect(),
            self.feature_names.clone(),
        )
    }

    pub fn select_features(&self, columns: &[usize]) -> Result<Self> {
        Self::new(
            self.values.select(Axis(1), columns),
            self.subject_ids.clone(),
            self.times.clone(),
            columns.iter().map(|&c| self.feature_names[c].clone()).collect(),
        )
    }
}

/// Two views of the same cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedStudy {
    pub x: LongView,
    pub y: LongView,
}

impl PairedStudy {
    pub fn new(x: LongView, y: LongView) -> Self {
        Self { x, y }
    }

    /// Subjects present in at least one view, in subject order.
    pub fn shared_subjects(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .x
            .blocks()
            .iter()
            .chain(self.y.blocks())
            .map(|b| b.id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        all.sort_by(|a, b| subject_order(a, b));
        all
    }

    /// Sorted union of all measurement times of both views.
    pub fn union_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.x.times().iter().chain(self.y.times()).copied().collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t.dedup();
        t
    }

    pub fn subset_subjects(&self, keep: &BTreeSet<String>) -> Result<Self> {
        Ok(Self {
            x: self.x.subset_subjects(keep)?,
            y: self.y.subset_subjects(keep)?,
        })
    }
}

/// Column-wise centering and scaling fitted on one set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// Indices of retained columns in the source view.
    pub kept: Vec<usize>,
    pub kept_names: Vec<String>,
    pub dropped: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    /// Applies stored statistics to another view with the same columns.
    pub fn apply(&self, view: &LongView) -> Result<LongView> {
        let names = view.feature_names();
        for (&c, name) in self.kept.iter().zip(&self.kept_names) {
            if names.get(c) != Some(name) {
                return Err(Error::DimensionMismatch(format!(
                    "column {c} is not `{name}` in the view being standardized"
                )));
            }
        }
        let mut out = view.values().select(Axis(1), &self.kept);
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.sd[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        LongView::new(
            out,
            view.subject_ids().to_vec(),
            view.times().to_vec(),
            self.kept_names.clone(),
        )
    }
}

/// Sample standard deviations below this are treated as constant columns.
const CONSTANT_SD: f64 = 1e-12;

/// Centers every column to mean 0 and scales to sd 1 (denominator n-1) over
/// all stacked rows. Constant columns are dropped with a warning.
pub fn standardize(view: &LongView) -> Result<(LongView, Standardization)> {
    let n = view.n_rows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    let values = view.values();
    let mean: Array1<f64> = values.mean_axis(Axis(0)).expect("n >= 2");
    let sd: Array1<f64> = values.std_axis(Axis(0), 1.0);

    let mut st = Standardization {
        kept: Vec::new(),
        kept_names: Vec::new(),
        dropped: Vec::new(),
        mean: Vec::new(),
        sd: Vec::new(),
    };
    for (j, name) in view.feature_names().iter().enumerate() {
        if sd[j] > CONSTANT_SD * mean[j].abs().max(1.0) {
            st.kept.push(j);
            st.kept_names.push(name.clone());
            st.mean.push(mean[j]);
            st.sd.push(sd[j]);
        } else {
            st.dropped.push(name.clone());
        }
    }
    if st.kept.is_empty() {
        return Err(Error::AllFeaturesConstant);
    }
    if !st.dropped.is_empty() {
        warn!(
            "dropping {} constant feature(s): {}",
            st.dropped.len(),
            st.dropped.join(", ")
        );
    }
    let out = st.apply(view)?;
    Ok((out, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rejects_non_contiguous_subjects() {
        let err = LongView::new(
            array![[1.0], [2.0], [3.0]],
            ids(&["a", "b", "a"]),
            vec![1.0, 1.0, 2.0],
            ids(&["f"]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidView(_)));
    }

    #[test]
    fn rejects_decreasing_and_duplicate_times() {
        let dec = LongView::new(array![[1.0], [2.0]], ids(&["a", "a"]), vec![2.0, 1.0], ids(&["f"]));
        assert!(matches!(dec, Err(Error::InvalidView(_))));
        let dup = LongView::new(array![[1.0], [2.0]], ids(&["a", "a"]), vec![1.0, 1.0], ids(&["f"]));
        assert!(matches!(dup, Err(Error::DuplicateTimestamp { .. })));
    }

    #[test]
    fn from_unsorted_orders_by_subject_then_time() {
        let v = LongView::from_unsorted(
            array![[1.0], [2.0], [3.0], [4.0]],
            ids(&["10", "2", "10", "2"]),
            vec![5.0, 3.0, 1.0, 1.0],
            ids(&["f"]),
        )
        .unwrap();
        assert_eq!(v.subject_ids(), &ids(&["2", "2", "10", "10"])[..]);
        assert_eq!(v.times(), &[1.0, 3.0, 1.0, 5.0]);
        assert_eq!(v.values().column(0).to_vec(), vec![4.0, 2.0, 3.0, 1.0]);
        assert_eq!(v.blocks().len(), 2);
    }

    #[test]
    fn standardize_symmetric_column() {
        let v = LongView::new(
            array![[1.0], [2.0], [3.0]],
            ids(&["a", "b", "c"]),
            vec![0.0; 3],
            ids(&["f"]),
        )
        .unwrap();
        let (s, st) = standardize(&v).unwrap();
        assert_eq!(s.values().column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(st.mean, vec![2.0]);
        assert_eq!(st.sd, vec![1.0]);
    }

    #[test]
    fn standardize_drops_constant_column() {
        let v = LongView::new(
            array![[5.0, 1.0], [5.0, 4.0], [5.0, 2.0]],
            ids(&["a", "b", "c"]),
            vec![0.0; 3],
            ids(&["const", "g"]),
        )
        .unwrap();
        let (s, st) = standardize(&v).unwrap();
        assert_eq!(st.dropped, ids(&["const"]));
        assert_eq!(s.feature_names(), &ids(&["g"])[..]);
    }

    #[test]
    fn standardize_all_constant_is_error() {
        let v = LongView::new(array![[5.0], [5.0]], ids(&["a", "b"]), vec![0.0; 2], ids(&["f"])).unwrap();
        assert!(matches!(standardize(&v), Err(Error::AllFeaturesConstant)));
    }

    #[test]
    fn standardize_postconditions_and_idempotence() {
        let v = LongView::new(
            array![[1.0, 10.0], [4.0, -2.0], [2.5, 7.0], [9.0, 0.5], [3.0, 3.0]],
            ids(&["a", "b", "c", "d", "e"]),
            vec![0.0; 5],
            ids(&["f", "g"]),
        )
        .unwrap();
        let (s, _) = standardize(&v).unwrap();
        for col in s.values().axis_iter(Axis(1)) {
            assert!(col.mean().unwrap().abs() < 1e-10);
            assert!((col.std(1.0) - 1.0).abs() < 1e-10);
        }
        let (s2, _) = standardize(&s).unwrap();
        for (a, b) in s.values().iter().zip(s2.values().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn union_times_and_shared_subjects() {
        let x = LongView::new(
            array![[0.0], [0.0], [0.0]],
            ids(&["1", "1", "1"]),
            vec![1.0, 3.0, 4.0],
            ids(&["f"]),
        )
        .unwrap();
        let y = LongView::new(
            array![[0.0], [0.0], [0.0], [0.0], [0.0], [0.0]],
            ids(&["1", "1", "1", "1", "1", "2"]),
            vec![1.0, 2.0, 3.0, 4.0, 6.0, 1.0],
            ids(&["g"]),
        )
        .unwrap();
        let s = PairedStudy::new(x, y);
        assert_eq!(s.union_times(), vec![1.0, 2.0, 3.0, 4.0, 6.0]);
        assert_eq!(s.shared_subjects(), ids(&["1", "2"]));
    }
}
