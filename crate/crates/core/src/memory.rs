//! Per-instance feature memory.
//!
//! One unit-norm slot per training instance. Slots are blended toward fresh
//! teacher features every iteration and re-normalized, cluster centroids are
//! recomputed from the live slots, and hardest positives / negatives are
//! mined directly from them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::clustering::PseudoLabeling;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, l2_normalize_rows, FeatureVec};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Array2<f64>,
    labeling: PseudoLabeling,
    members: Vec<Vec<usize>>,
}

/// Mean memory feature per cluster, raw and unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }
}

impl MemoryBank {
    /// Fills every slot with the teacher-mode (inference) embedding of the
    /// corresponding raw instance. Starts with every instance an outlier.
    pub fn initialize(encoder: &EncoderState, raw: ArrayView2<'_, f64>) -> Result<Self> {
        let features = encoder.embed(raw)?;
        Self::from_features(features)
    }

    pub fn from_features(mut features: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        l2_normalize_rows(&mut features)?;
        let labeling = PseudoLabeling::all_outliers(features.nrows());
        let members = labeling.members();
        Ok(Self {
            features,
            labeling,
            members,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn slot(&self, index: usize) -> ArrayView1<'_, f64> {
        self.features.row(index)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeling(&self) -> &PseudoLabeling {
        &self.labeling
    }

    pub fn set_labeling(&mut self, labeling: PseudoLabeling) -> Result<()> {
        if labeling.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: labeling.len(),
            });
        }
        self.members = labeling.members();
        self.labeling = labeling;
        Ok(())
    }

    /// Members of class `label` (a cluster id or an outlier label).
    pub fn members(&self, label: usize) -> &[usize] {
        &self.members[label]
    }

    pub fn num_clusters(&self) -> usize {
        self.labeling.num_clusters()
    }

    /// `slot ← normalize(m·slot + (1 − m)·q)`.
    pub fn momentum_update(&mut self, index: usize, q: &FeatureVec, m: f64) -> Result<()> {
        if index >= self.len() {
            return Err(Error::Index {
                index,
                len: self.len(),
            });
        }
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::param("m", format!("must lie in [0, 1], got {m}")));
        }
        if q.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: q.dim(),
            });
        }
        // the endpoints are exact: renormalizing a unit vector can move its last bit
        if m == 1.0 {
            return Ok(());
        }
        if m == 0.0 {
            self.features.row_mut(index).assign(&q.view());
            return Ok(());
        }
        let blended: Array1<f64> = self
            .features
            .row(index)
            .iter()
            .zip(q.as_slice())
            .map(|(&f, &q)| m * f + (1.0 - m) * q)
            .collect();
        let unit = l2_normalize(blended.view())?;
        self.features.row_mut(index).assign(&unit.view());
        Ok(())
    }

    pub fn compute_centroids(&self) -> Result<Centroids> {
        let k = self.num_clusters();
        if k == 0 {
            return Err(Error::NoClusters);
        }
        let mut raw = Array2::zeros((k, self.dim()));
        for (c, mut row) in raw.rows_mut().into_iter().enumerate() {
            let members = &self.members[c];
            for &i in members {
                row += &self.features.row(i);
            }
            row /= members.len() as f64;
        }
        let mut normalized = raw.clone();
        l2_normalize_rows(&mut normalized)?;
        Ok(Centroids { raw, normalized })
    }

    /// Least similar member of cluster `k`; ties go to the lowest index.
    pub fn hardest_positive(&self, query: ArrayView1<'_, f64>, k: usize) -> Result<usize> {
        let members = self.members.get(k).filter(|m| !m.is_empty()).ok_or(Error::Index {
            index: k,
            len: self.num_clusters(),
        })?;
        let mut best = members[0];
        let mut best_sim = dot(query, self.features.row(best));
        for &i in &members[1..] {
            let s = dot(query, self.features.row(i));
            if s < best_sim {
                best = i;
                best_sim = s;
            }
        }
        Ok(best)
    }

    /// Most similar member of every cluster other than `own`, as
    /// `(cluster, index)` pairs in cluster order; ties go to the lowest index.
    pub fn hardest_negative_per_cluster(&self, query: ArrayView1<'_, f64>, own: Option<usize>) -> Vec<(usize, usize)> {
        (0..self.num_clusters())
            .filter(|&c| Some(c) != own)
            .map(|c| {
                let members = &self.members[c];
                let mut best = members[0];
                let mut best_sim = dot(query, self.features.row(best));
                for &i in &members[1..] {
                    let s = dot(query, self.features.row(i));
                    if s > best_sim {
                        best = i;
                        best_sim = s;
                    }
                }
                (c, best)
            })
            .collect()
    }

    /// Restores a bank verbatim, without re-normalizing the slots.
    pub(crate) fn from_parts(features: Array2<f64>, labeling: PseudoLabeling) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut bank = Self {
            members: Vec::new(),
            labeling: PseudoLabeling::all_outliers(features.nrows()),
            features,
        };
        bank.set_labeling(labeling)?;
        Ok(bank)
    }
}
