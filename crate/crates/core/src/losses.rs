//! Training objectives and their gradients with respect to the student
//! embeddings.
//!
//! Each objective is split into a *plan* and an *evaluation*. Planning does
//! the hard-example mining (argmin / argmax over similarities) and freezes
//! every quantity that receives no gradient: memory slots, centroids and
//! teacher probabilities. Evaluation is then a smooth function of the query
//! embeddings, which is what the analytic gradients differentiate. The
//! trainer plans once per iteration; gradient checks perturb the queries
//! against a fixed plan.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Centroids, MemoryBank};
use crate::numerics::{dot, softmax};

/// One training batch as seen by the losses.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext<'a> {
    /// Student embeddings of the strong views, one row per sample.
    pub queries: ArrayView2<'a, f64>,
    /// Teacher embeddings of the weak views.
    pub teacher: ArrayView2<'a, f64>,
    /// Pseudo label of each sample.
    pub labels: &'a [usize],
    /// Memory slot of each sample.
    pub indices: &'a [usize],
}

impl BatchContext<'_> {
    fn check(&self) -> Result<()> {
        let b = self.queries.nrows();
        for got in [self.teacher.nrows(), self.labels.len(), self.indices.len()] {
            if got != b {
                return Err(Error::Dimension { expected: b, got });
            }
        }
        if self.teacher.ncols() != self.queries.ncols() {
            return Err(Error::Dimension {
                expected: self.queries.ncols(),
                got: self.teacher.ncols(),
            });
        }
        Ok(())
    }
}

/// A loss value (batch mean) and its gradient with respect to each query row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub grads: Array2<f64>,
    /// Queries whose candidate set held only the positive; they contribute
    /// zero loss and zero gradient.
    pub degenerate: usize,
}

impl LossBundle {
    fn zero(b: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grads: Array2::zeros((b, d)),
            degenerate: 0,
        }
    }
}

/// How the memory contrast picks its per-cluster representatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Hardest positive in the query's cluster, hardest negative in every
    /// other cluster.
    Hardest,
    /// Normalized cluster centroids as representatives.
    Centroid,
}

fn check_tau(name: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be > 0, got {tau}")))
    }
}

/// `−log softmax(C q / τ)[0]` and its gradient `(1/τ) Cᵀ (p − e₀)`.
fn info_nce(q: ArrayView1<'_, f64>, candidates: ArrayView2<'_, f64>, tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = candidates.rows().into_iter().map(|c| dot(q, c) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[0];
    let mut grad = vec![0.0; q.len()];
    for (c, (row, &l)) in candidates.rows().into_iter().zip(&logits).enumerate() {
        let p = (l - lse).exp();
        let w = (p - if c == 0 { 1.0 } else { 0.0 }) / tau;
        grad.iter_mut().zip(row.iter()).for_each(|(g, &x)| *g += w * x);
    }
    (loss, grad)
}

/// Frozen candidate sets for the memory contrast. Row 0 of each set is the
/// positive.
#[derive(Debug, Clone)]
pub struct GlobalPlan {
    candidates: Vec<Array2<f64>>,
}

impl GlobalPlan {
    /// Builds the candidate set of every query.
    ///
    /// Clustered query in cluster `k`: positive from `k`, one negative from
    /// every other cluster, then every outlier slot. Outlier query: its own
    /// slot as positive, one negative from every cluster, then every other
    /// outlier slot.
    pub fn mine(ctx: &BatchContext<'_>, bank: &MemoryBank, centroids: Option<&Centroids>, mining: Mining) -> Result<Self> {
        ctx.check()?;
        if ctx.queries.ncols() != bank.dim() {
            return Err(Error::Dimension {
                expected: bank.dim(),
                got: ctx.queries.ncols(),
            });
        }
        let k = bank.num_clusters();
        let centroids = match (mining, k) {
            (Mining::Centroid, k) if k > 0 => Some(centroids.ok_or(Error::NoClusters)?),
            _ => None,
        };
        if let Some(c) = centroids {
            if c.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    got: c.len(),
                });
            }
        }
        let outliers = bank.labeling().outliers();
        let mut candidates = Vec::with_capacity(ctx.queries.nrows());
        for (i, q) in ctx.queries.rows().into_iter().enumerate() {
            let index = ctx.indices[i];
            if index >= bank.len() {
                return Err(Error::Index {
                    index,
                    len: bank.len(),
                });
            }
            let own_cluster = bank.labeling().cluster_of(index);
            let mut rows: Vec<ArrayView1<'_, f64>> = Vec::with_capacity(k + outliers.len());
            match (own_cluster, centroids) {
                (Some(c), None) => rows.push(bank.slot(bank.hardest_positive(q, c)?)),
                (Some(c), Some(cent)) => rows.push(cent.normalized.row(c)),
                (None, _) => rows.push(bank.slot(index)),
            }
            match centroids {
                None => rows.extend(
                    bank.hardest_negative_per_cluster(q, own_cluster)
                        .into_iter()
                        .map(|(_, j)| bank.slot(j)),
                ),
                Some(cent) => rows.extend(
                    (0..k)
                        .filter(|&c| Some(c) != own_cluster)
                        .map(|c| cent.normalized.row(c)),
                ),
            }
            rows.extend(outliers.iter().filter(|&&o| o != index).map(|&o| bank.slot(o)));
            let mut m = Array2::zeros((rows.len(), bank.dim()));
            for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
                dst.assign(&src);
            }
            candidates.push(m);
        }
        Ok(Self { candidates })
    }

    pub fn candidates(&self, query: usize) -> ArrayView2<'_, f64> {
        self.candidates[query].view()
    }

    pub fn evaluate(&self, queries: ArrayView2<'_, f64>, tau: f64) -> Result<LossBundle> {
        check_tau("tau", tau)?;
        let (b, d) = queries.dim();
        if b != self.candidates.len() {
            return Err(Error::Dimension {
                expected: self.candidates.len(),
                got: b,
            });
        }
        let mut out = LossBundle::zero(b, d);
        if b == 0 {
            return Ok(out);
        }
        for (i, q) in queries.rows().into_iter().enumerate() {
            let cand = &self.candidates[i];
            if cand.ncols() != d {
                return Err(Error::Dimension {
                    expected: cand.ncols(),
                    got: d,
                });
            }
            if cand.nrows() == 1 {
                out.degenerate += 1;
                continue;
            }
            let (loss, grad) = info_nce(q, cand.view(), tau);
            out.value += loss;
            out.grads.row_mut(i).iter_mut().zip(grad).for_each(|(g, v)| *g = v);
        }
        let scale = 1.0 / b as f64;
        out.value *= scale;
        out.grads *= scale;
        Ok(out)
    }
}

/// Memory-based global contrast with hardest-example mining.
pub fn global_memory_loss(ctx: &BatchContext<'_>, bank: &MemoryBank, tau: f64) -> Result<LossBundle> {
    check_tau("tau", tau)?;
    GlobalPlan::mine(ctx, bank, None, Mining::Hardest)?.evaluate(ctx.queries, tau)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LocalQuery {
    positive: usize,
    negatives: Vec<usize>,
}

/// Frozen in-batch positive and negative sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPlan {
    queries: Vec<LocalQuery>,
}

impl LocalPlan {
    /// For each sample: the least similar other sample sharing its label,
    /// and every sample with a different label.
    pub fn mine(queries: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Self> {
        if labels.len() != queries.nrows() {
            return Err(Error::Dimension {
                expected: queries.nrows(),
                got: labels.len(),
            });
        }
        let mut plan = Vec::with_capacity(labels.len());
        for (i, q) in queries.rows().into_iter().enumerate() {
            let mut positive: Option<(usize, f64)> = None;
            let mut negatives = Vec::new();
            for (j, other) in queries.rows().into_iter().enumerate() {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    let s = dot(q, other);
                    if positive.is_none_or(|(_, best)| s < best) {
                        positive = Some((j, s));
                    }
                } else {
                    negatives.push(j);
                }
            }
            let (positive, _) = positive.ok_or(Error::SamplerContractViolation(i))?;
            plan.push(LocalQuery { positive, negatives });
        }
        Ok(Self { queries: plan })
    }

    pub fn positive(&self, query: usize) -> usize {
        self.queries[query].positive
    }

    pub fn evaluate(&self, queries: ArrayView2<'_, f64>, tau: f64) -> Result<LossBundle> {
        check_tau("tau", tau)?;
        let (b, d) = queries.dim();
        if b != self.queries.len() {
            return Err(Error::Dimension {
                expected: self.queries.len(),
                got: b,
            });
        }
        let mut out = LossBundle::zero(b, d);
        if b == 0 {
            return Ok(out);
        }
        for (i, plan) in self.queries.iter().enumerate() {
            if plan.negatives.is_empty() {
                out.degenerate += 1;
                continue;
            }
            let q = queries.row(i);
            let mut logits = Vec::with_capacity(plan.negatives.len() + 1);
            logits.push(dot(q, queries.row(plan.positive)) / tau);
            logits.extend(plan.negatives.iter().map(|&j| dot(q, queries.row(j)) / tau));
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            out.value += lse - logits[0];

            let partners = std::iter::once(plan.positive).chain(plan.negatives.iter().copied());
            for (c, (j, &l)) in partners.zip(&logits).enumerate() {
                let w = ((l - lse).exp() - if c == 0 { 1.0 } else { 0.0 }) / tau;
                // d/dq_i of <q_i, q_j> is q_j, and symmetrically.
                let qj = queries.row(j).to_owned();
                out.grads.row_mut(i).scaled_add(w, &qj);
                out.grads.row_mut(j).scaled_add(w, &q);
            }
        }
        let scale = 1.0 / b as f64;
        out.value *= scale;
        out.grads *= scale;
        Ok(out)
    }
}

/// In-batch contrast with hardest-positive mining.
pub fn local_batch_loss(ctx: &BatchContext<'_>, tau: f64) -> Result<LossBundle> {
    check_tau("tau", tau)?;
    ctx.check()?;
    LocalPlan::mine(ctx.queries, ctx.labels)?.evaluate(ctx.queries, tau)
}

/// Sum of the global memory contrast and the local batch contrast.
pub fn l2g_loss(ctx: &BatchContext<'_>, bank: &MemoryBank, tau: f64) -> Result<LossBundle> {
    let g = global_memory_loss(ctx, bank, tau)?;
    let l = local_batch_loss(ctx, tau)?;
    Ok(LossBundle {
        value: g.value + l.value,
        grads: g.grads + l.grads,
        degenerate: g.degenerate + l.degenerate,
    })
}

/// `softmax(⟨q, ĉ_k⟩ / τ)` over the normalized centroids.
pub fn class_probabilities(q: ArrayView1<'_, f64>, centroids: &Centroids, tau: f64) -> Result<Vec<f64>> {
    probabilities(q, centroids.normalized.view(), tau)
}

fn probabilities(q: ArrayView1<'_, f64>, centers: ArrayView2<'_, f64>, tau: f64) -> Result<Vec<f64>> {
    check_tau("tau", tau)?;
    if centers.nrows() == 0 {
        return Err(Error::NoClusters);
    }
    if centers.ncols() != q.len() {
        return Err(Error::Dimension {
            expected: centers.ncols(),
            got: q.len(),
        });
    }
    let sims: Vec<f64> = centers.rows().into_iter().map(|c| dot(q, c)).collect();
    softmax(&sims, tau)
}

/// `‖P^s − P^t‖²`.
pub fn probability_mse(student: &[f64], teacher: &[f64]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Dimension {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    Ok(student.iter().zip(teacher).map(|(s, t)| (s - t) * (s - t)).sum())
}

/// Frozen centroids and teacher distributions for the distillation term.
#[derive(Debug, Clone)]
pub struct DistillPlan {
    centers: Array2<f64>,
    teacher_probs: Vec<Vec<f64>>,
    include: Vec<bool>,
}

impl DistillPlan {
    /// `teacher` rows are teacher embeddings; `include[i]` selects which
    /// samples take part.
    pub fn new(teacher: ArrayView2<'_, f64>, centroids: &Centroids, tau_t: f64, include: Vec<bool>) -> Result<Self> {
        if include.len() != teacher.nrows() {
            return Err(Error::Dimension {
                expected: teacher.nrows(),
                got: include.len(),
            });
        }
        let teacher_probs = teacher
            .rows()
            .into_iter()
            .map(|t| class_probabilities(t, centroids, tau_t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            centers: centroids.normalized.clone(),
            teacher_probs,
            include,
        })
    }

    pub fn teacher_probs(&self, i: usize) -> &[f64] {
        &self.teacher_probs[i]
    }

    /// Mean over included samples of `‖P^s − P^t‖²`, with the gradient
    /// pushed through the student softmax onto each student embedding.
    pub fn evaluate(&self, queries: ArrayView2<'_, f64>, tau_s: f64) -> Result<LossBundle> {
        let (b, d) = queries.dim();
        if b != self.teacher_probs.len() {
            return Err(Error::Dimension {
                expected: self.teacher_probs.len(),
                got: b,
            });
        }
        let mut out = LossBundle::zero(b, d);
        let n = self.include.iter().filter(|&&x| x).count();
        if n == 0 {
            return Ok(out);
        }
        for (i, q) in queries.rows().into_iter().enumerate() {
            if !self.include[i] {
                continue;
            }
            let ps = probabilities(q, self.centers.view(), tau_s)?;
            let pt = &self.teacher_probs[i];
            out.value += probability_mse(&ps, pt)?;
            let g: Vec<f64> = ps.iter().zip(pt).map(|(s, t)| 2.0 * (s - t)).collect();
            let mean_g: f64 = ps.iter().zip(&g).map(|(p, g)| p * g).sum();
            let mut row = out.grads.row_mut(i);
            for (k, c) in self.centers.rows().into_iter().enumerate() {
                let w = ps[k] * (g[k] - mean_g) / tau_s;
                row.scaled_add(w, &c);
            }
        }
        let scale = 1.0 / n as f64;
        out.value *= scale;
        out.grads *= scale;
        Ok(out)
    }
}

/// Distillation between student embeddings and fixed teacher distributions.
pub fn distillation_loss(
    student: ArrayView2<'_, f64>,
    teacher: ArrayView2<'_, f64>,
    centroids: &Centroids,
    tau_s: f64,
    tau_t: f64,
) -> Result<LossBundle> {
    check_tau("tau_s", tau_s)?;
    let include = vec![true; teacher.nrows()];
    DistillPlan::new(teacher, centroids, tau_t, include)?.evaluate(student, tau_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature of both contrastive terms.
    pub tau: f64,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub gamma: f64,
    pub use_local: bool,
    pub use_distill: bool,
    pub mining: Mining,
    pub distill_outliers: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            tau_student: 1.0,
            tau_teacher: 0.5,
            gamma: 0.2,
            use_local: true,
            use_distill: true,
            mining: Mining::Hardest,
            distill_outliers: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.tau", self.tau),
            ("loss.tau_student", self.tau_student),
            ("loss.tau_teacher", self.tau_teacher),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("loss.gamma", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub distill: f64,
    pub grads: Array2<f64>,
    /// True when the distillation term was requested but there were no
    /// clusters to project onto.
    pub distill_skipped: bool,
}

/// Every frozen selection for one iteration's objective.
#[derive(Debug, Clone)]
pub struct ObjectivePlan {
    cfg: LossConfig,
    global: GlobalPlan,
    local: Option<LocalPlan>,
    distill: Option<DistillPlan>,
    distill_skipped: bool,
}

impl ObjectivePlan {
    pub fn mine(ctx: &BatchContext<'_>, bank: &MemoryBank, centroids: Option<&Centroids>, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        ctx.check()?;
        let global = GlobalPlan::mine(ctx, bank, centroids, cfg.mining)?;
        let local = if cfg.use_local {
            Some(LocalPlan::mine(ctx.queries, ctx.labels)?)
        } else {
            None
        };
        let (distill, distill_skipped) = match (cfg.use_distill && cfg.gamma > 0.0, centroids) {
            (true, Some(c)) if !c.is_empty() => {
                let include = ctx
                    .indices
                    .iter()
                    .map(|&i| cfg.distill_outliers || !bank.labeling().is_outlier(i))
                    .collect();
                (Some(DistillPlan::new(ctx.teacher, c, cfg.tau_teacher, include)?), false)
            }
            (true, _) => {
                log::warn!("no clusters: skipping the distillation term this iteration");
                (None, true)
            }
            (false, _) => (None, false),
        };
        Ok(Self {
            cfg,
            global,
            local,
            distill,
            distill_skipped,
        })
    }

    /// `L_global + L_local + γ·L_distill` at the given student embeddings.
    pub fn evaluate(&self, queries: ArrayView2<'_, f64>) -> Result<TotalLoss> {
        let cfg = &self.cfg;
        let g = self.global.evaluate(queries, cfg.tau)?;
        let mut grads = g.grads;
        let local = match &self.local {
            Some(plan) => {
                let l = plan.evaluate(queries, cfg.tau)?;
                grads += &l.grads;
                l.value
            }
            None => 0.0,
        };
        let distill = match &self.distill {
            Some(plan) => {
                let s = plan.evaluate(queries, cfg.tau_student)?;
                grads.scaled_add(cfg.gamma, &s.grads);
                s.value
            }
            None => 0.0,
        };
        Ok(TotalLoss {
            total: g.value + local + cfg.gamma * distill,
            global: g.value,
            local,
            distill,
            grads,
            distill_skipped: self.distill_skipped,
        })
    }
}

pub fn total_loss(ctx: &BatchContext<'_>, bank: &MemoryBank, centroids: Option<&Centroids>, cfg: LossConfig) -> Result<TotalLoss> {
    ObjectivePlan::mine(ctx, bank, centroids, cfg)?.evaluate(ctx.queries)
}

/// Mean of each row's gradient norm; used for reporting only.
pub fn mean_grad_norm(grads: &Array2<f64>) -> f64 {
    if grads.nrows() == 0 {
        return 0.0;
    }
    grads.map_axis(Axis(1), |r| r.dot(&r).sqrt()).mean().unwrap_or(0.0)
}
