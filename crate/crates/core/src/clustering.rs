//! DBSCAN over cosine distance, producing the pseudo-labeling that drives
//! every loss.
//!
//! Neighborhoods include the point itself, so a point is core when at least
//! `min_samples` points (itself counted) lie within `eps`. Clusters are the
//! connected components of core points; a border point joins the cluster of
//! its lowest-index core neighbor. Noise points each get their own singleton
//! label after the clusters.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::pairwise_similarity;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.5,
            min_samples: 5,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 2.0) {
            return Err(Error::config("dbscan.eps", format!("must lie in (0, 2), got {}", self.eps)));
        }
        if self.min_samples < 1 {
            return Err(Error::config("dbscan.min_samples", "must be >= 1"));
        }
        Ok(())
    }
}

/// Cluster labels `0..num_clusters`, then one unique label per outlier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabeling {
    labels: Vec<usize>,
    num_clusters: usize,
}

impl PseudoLabeling {
    /// Every instance its own outlier class.
    pub fn all_outliers(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            num_clusters: 0,
        }
    }

    /// Builds a labeling from per-instance cluster ids (`None` for noise),
    /// renumbering clusters by first appearance and giving each noise point a
    /// fresh singleton label.
    pub fn from_assignment(assignment: &[Option<usize>]) -> Self {
        let mut remap = std::collections::HashMap::new();
        for a in assignment.iter().flatten() {
            let next = remap.len();
            remap.entry(*a).or_insert(next);
        }
        let num_clusters = remap.len();
        let mut next_outlier = num_clusters;
        let labels = assignment
            .iter()
            .map(|a| match a {
                Some(c) => remap[c],
                None => {
                    next_outlier += 1;
                    next_outlier - 1
                }
            })
            .collect();
        Self { labels, num_clusters }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn num_outliers(&self) -> usize {
        self.labels.len() - self.clustered_count()
    }

    pub fn num_classes(&self) -> usize {
        self.num_clusters + self.num_outliers()
    }

    pub fn is_outlier(&self, index: usize) -> bool {
        self.labels[index] >= self.num_clusters
    }

    /// Cluster id of `index`, or `None` for an outlier.
    pub fn cluster_of(&self, index: usize) -> Option<usize> {
        let l = self.labels[index];
        (l < self.num_clusters).then_some(l)
    }

    pub fn outliers(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_outlier(i)).collect()
    }

    /// Member lists for every class label, clusters first.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }

    fn clustered_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < self.num_clusters).count()
    }
}

/// `1 − ⟨f_i, f_j⟩` for unit-norm rows.
pub fn cosine_distance_matrix(features: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut d = pairwise_similarity(features, features).expect("same matrix on both sides");
    d.mapv_inplace(|s| (1.0 - s).clamp(0.0, 2.0));
    for i in 0..d.nrows() {
        d[[i, i]] = 0.0;
    }
    d
}

fn neighborhoods(dist: &Array2<f64>, eps: f64) -> Vec<Vec<usize>> {
    dist.rows()
        .into_iter()
        .map(|r| r.iter().enumerate().filter(|(_, &d)| d <= eps).map(|(j, _)| j).collect())
        .collect()
}

/// Which points are core points.
pub fn core_mask(features: ArrayView2<'_, f64>, params: DbscanParams) -> Vec<bool> {
    let dist = cosine_distance_matrix(features);
    neighborhoods(&dist, params.eps)
        .iter()
        .map(|n| n.len() >= params.min_samples)
        .collect()
}

pub fn dbscan(features: ArrayView2<'_, f64>, params: DbscanParams) -> Result<PseudoLabeling> {
    params.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let dist = cosine_distance_matrix(features);
    let hoods = neighborhoods(&dist, params.eps);
    let core: Vec<bool> = hoods.iter().map(|h| h.len() >= params.min_samples).collect();

    // Core components by breadth-first expansion, seeded in index order.
    let mut component: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || component[seed].is_some() {
            continue;
        }
        component[seed] = Some(next);
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for &q in &hoods[p] {
                if core[q] && component[q].is_none() {
                    component[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }

    // Border points: neighborhoods are sorted by index, so the first core
    // neighbor is the lowest-index one.
    let assignment: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if core[i] {
                component[i]
            } else {
                hoods[i].iter().find(|&&j| core[j]).and_then(|&j| component[j])
            }
        })
        .collect();
    Ok(PseudoLabeling::from_assignment(&assignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelingStats {
    pub num_clusters: usize,
    pub num_outliers: usize,
    pub clustered_pairs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when there are no clustered pairs, or no predicted / true
    /// positive pairs, so the ratios above are reported as 0.
    pub f1_defined: bool,
}

/// Pairwise precision / recall of "same cluster" against "same identity",
/// counted over pairs of clustered (non-outlier) instances.
pub fn labeling_stats(labels: &PseudoLabeling, dataset: &Dataset) -> Result<LabelingStats> {
    if labels.len() != dataset.len() {
        return Err(Error::Dimension {
            expected: dataset.len(),
            got: labels.len(),
        });
    }
    let clustered: Vec<usize> = (0..labels.len()).filter(|&i| !labels.is_outlier(i)).collect();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (a, &i) in clustered.iter().enumerate() {
        for &j in &clustered[a + 1..] {
            let same_cluster = labels.label(i) == labels.label(j);
            let same_id = dataset.instances[i].true_id == dataset.instances[j].true_id;
            match (same_cluster, same_id) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let pairs = clustered.len() * clustered.len().saturating_sub(1) / 2;
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let (f1, defined) = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => (2.0 * p * r / (p + r), true),
        (Some(_), Some(_)) => (0.0, true),
        _ => (0.0, false),
    };
    Ok(LabelingStats {
        num_clusters: labels.num_clusters(),
        num_outliers: labels.num_outliers(),
        clustered_pairs: pairs,
        precision: precision.unwrap_or(0.0),
        recall: recall.unwrap_or(0.0),
        f1,
        f1_defined: defined && pairs > 0,
    })
}
