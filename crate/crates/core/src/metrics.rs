//! Average precision for triplet and component predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triplet::{ComponentId, TripletTable};

/// Step-wise (non-interpolated) average precision:
/// `sum_n (R_n - R_{n-1}) * P_n` over the ranking by descending score.
///
/// Equal scores keep their original order (stable sort), so the result is
/// tie-sensitive but deterministic. Returns `None` when there are no
/// positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must have equal length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

/// Scores and binary labels, `n_examples x n_classes`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    n_classes: usize,
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl PredictionMatrix {
    pub fn new(n_classes: usize) -> Self {
        PredictionMatrix { n_classes, scores: Vec::new(), labels: Vec::new() }
    }

    pub fn from_rows(n_classes: usize, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if n_classes == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(n_classes) {
            return Err(Error::shape("prediction matrix", format!("{} scores, {} labels, {n_classes} classes", scores.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(PredictionMatrix { n_classes, scores, labels })
    }

    pub fn push(&mut self, scores: &[f64], labels: &[u8]) -> Result<()> {
        if scores.len() != self.n_classes || labels.len() != self.n_classes {
            return Err(Error::shape("prediction matrix", format!("row of {} scores / {} labels for {} classes", scores.len(), labels.len(), self.n_classes)));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn n_examples(&self) -> usize {
        self.scores.len() / self.n_classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn scores_row(&self, n: usize) -> &[f64] {
        &self.scores[n * self.n_classes..(n + 1) * self.n_classes]
    }

    pub fn labels_row(&self, n: usize) -> &[u8] {
        &self.labels[n * self.n_classes..(n + 1) * self.n_classes]
    }

    pub fn column(&self, k: usize) -> (Vec<f64>, Vec<bool>) {
        let n = self.n_examples();
        let s = (0..n).map(|r| self.scores[r * self.n_classes + k]).collect();
        let l = (0..n).map(|r| self.labels[r * self.n_classes + k] != 0).collect();
        (s, l)
    }

    pub fn per_class_ap(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|k| {
                let (s, l) = self.column(k);
                average_precision(&s, &l)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentAp {
    pub component: ComponentId,
    /// `None` for classes without positives or without a triplet preimage.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes.
    pub mean: Option<f64>,
    /// Classes with a preimage but no positive example.
    pub n_undefined: usize,
    /// Classes with no triplet preimage in the table.
    pub n_absent: usize,
}

/// Projects triplet predictions onto component `d` (max over scores, OR
/// over labels) and computes per-class AP.
pub fn component_ap(pred: &PredictionMatrix, table: &TripletTable, d: ComponentId) -> Result<ComponentAp> {
    if pred.n_classes() != table.n_triplets() {
        return Err(Error::shape("component_ap", format!("{} score columns for {} triplets", pred.n_classes(), table.n_triplets())));
    }
    let k = table.n_classes(d);
    let present = table.present(d);
    let n = pred.n_examples();
    let mut cols_s = vec![Vec::with_capacity(n); k];
    let mut cols_l = vec![Vec::with_capacity(n); k];
    for r in 0..n {
        let s = table.component_logits(pred.scores_row(r), d)?;
        let l = table.component_labels(pred.labels_row(r), d)?;
        for c in 0..k {
            if let (Some(sv), Some(lv)) = (s[c], l[c]) {
                cols_s[c].push(sv);
                cols_l[c].push(lv);
            }
        }
    }
    let mut per_class = vec![None; k];
    let mut n_undefined = 0;
    for c in 0..k {
        if !present[c] {
            continue;
        }
        per_class[c] = average_precision(&cols_s[c], &cols_l[c]);
        if per_class[c].is_none() {
            n_undefined += 1;
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ComponentAp { component: d, per_class, mean, n_undefined, n_absent: present.iter().filter(|p| !**p).count() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// `mean ± std` in percent with one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Mean and sample standard deviation over per-fold values.
pub fn crossval_summary(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(Summary { mean, std: var.sqrt(), n: values.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplet::ComponentCounts;

    #[test]
    fn worked_example() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_and_no_positives() {
        assert_eq!(average_precision(&[0.9, 0.5, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.5], &[false, false]), None);
    }

    #[test]
    fn ties_follow_index_order() {
        // positive at index 1 ties with negative at index 0: ranked second
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn ivt_component_is_raw_ap() {
        let table = TripletTable::build(ComponentCounts::new(2, 2, 2), vec![(0, 0, 0), (0, 1, 1), (1, 0, 1)]).unwrap();
        let pred = PredictionMatrix::from_rows(
            3,
            vec![0.9, 0.1, 0.3, 0.2, 0.8, 0.1, 0.4, 0.3, 0.7],
            vec![1, 0, 0, 0, 1, 0, 0, 0, 1],
        )
        .unwrap();
        let ivt = component_ap(&pred, &table, ComponentId::IVT).unwrap();
        assert_eq!(ivt.per_class, pred.per_class_ap());
        assert_eq!(ivt.mean, Some(1.0));
    }

    #[test]
    fn single_example_single_label() {
        let table = TripletTable::build(ComponentCounts::new(2, 2, 2), vec![(0, 0, 0), (1, 1, 1)]).unwrap();
        let pred = PredictionMatrix::from_rows(2, vec![0.8, 0.2], vec![1, 0]).unwrap();
        for d in ComponentId::ALL {
            let ap = component_ap(&pred, &table, d).unwrap();
            assert_eq!(ap.mean, Some(1.0), "{d}");
        }
    }

    #[test]
    fn crossval_examples() {
        let s = crossval_summary(&[1.0; 5]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = crossval_summary(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.std - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.percent(), "50.0 ± 70.7");
        assert!(crossval_summary(&[1.0]).is_err());
    }

    #[test]
    fn labels_must_be_binary() {
        assert!(PredictionMatrix::from_rows(1, vec![0.1], vec![2]).is_err());
    }
}
