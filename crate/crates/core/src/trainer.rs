//! The alternating optimization loop: re-cluster the memory bank, then train
//! on PK-sampled batches for `recluster_every` epochs, repeat.
//!
//! One iteration:
//! 1. sample `P` pseudo-identities × `H` instances;
//! 2. student forward (train mode) on strong views, teacher forward
//!    (inference mode) on weak views;
//! 3. centroids from the live memory bank;
//! 4. total objective and its gradient with respect to the student embeddings;
//! 5. backward through the student, Adam step;
//! 6. EMA update of the teacher;
//! 7. momentum update of every sampled slot with the post-EMA teacher's
//!    weak-view embedding, in batch order.
//!
//! The trainer only ever receives [`UnlabeledData`]; ground-truth identities
//! reach reports through the caller-supplied observer.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clustering::{dbscan, DbscanParams, LabelingStats, PseudoLabeling};
use crate::encoder::{ema_update, AdamConfig, Architecture, EmaConfig, EncoderState, Mode, OptimizerState};
use crate::error::{Error, Result};
use crate::losses::{BatchContext, LossConfig, ObjectivePlan};
use crate::memory::MemoryBank;
use crate::numerics::{l2_normalize, seeded_rng, Rng};
use crate::synthdata::{AugmentConfig, Augmenter, UnlabeledData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Re-cluster before every epoch that is a multiple of this.
    pub recluster_every: usize,
    /// `P`: pseudo-identities per batch.
    pub batch_identities: usize,
    /// `H`: instances per pseudo-identity.
    pub batch_instances: usize,
    pub memory_momentum: f64,
    pub ema_lambda: f64,
    /// Sample only from clusters, never from singleton outliers.
    pub clusters_only: bool,
    pub seed: u64,
    pub encoder: Architecture,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub dbscan: DbscanParams,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            recluster_every: 2,
            batch_identities: 16,
            batch_instances: 16,
            memory_momentum: 0.3,
            ema_lambda: 0.999,
            clusters_only: false,
            seed: 0,
            encoder: Architecture::default(),
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            dbscan: DbscanParams::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a few hundred instances on one CPU core.
    ///
    /// A 16-d embedding cannot separate the hard preset's identities at any
    /// eps that DBSCAN can use, so this preset embeds into 128-d and clusters
    /// at a matching, much tighter eps. See docs/calibration.md.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            recluster_every: 1,
            batch_identities: 16,
            batch_instances: 2,
            memory_momentum: 0.2,
            ema_lambda: 0.9,
            encoder: Architecture {
                d_emb: 128,
                ..Architecture::default()
            },
            optimizer: AdamConfig {
                base_lr: 1e-2,
                ..AdamConfig::default()
            },
            loss: LossConfig {
                tau: 0.2,
                ..LossConfig::default()
            },
            dbscan: DbscanParams {
                eps: 0.125,
                ..DbscanParams::default()
            },
            augment: AugmentConfig {
                mask_prob: 0.0,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recluster_every == 0 {
            return Err(Error::config("train.recluster_every", "must be >= 1"));
        }
        if self.batch_identities == 0 {
            return Err(Error::config("train.batch_identities", "must be >= 1"));
        }
        if self.batch_instances < 2 {
            return Err(Error::config("train.batch_instances", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.memory_momentum) {
            return Err(Error::config("train.memory_momentum", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return Err(Error::config("train.ema_lambda", "must lie in [0, 1]"));
        }
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.dbscan.validate()?;
        self.augment.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_identities * self.batch_instances
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub index: usize,
    pub label: usize,
    /// Position of this draw within its pseudo-identity, `0..H`.
    pub replica: usize,
}

/// Draws `p` pseudo-identities uniformly without replacement, then `h`
/// instances from each: without replacement when the class is large enough,
/// with replacement otherwise.
pub fn pk_sample(labels: &PseudoLabeling, p: usize, h: usize, clusters_only: bool, rng: &mut Rng) -> Result<Vec<BatchEntry>> {
    let members = labels.members();
    let pool = if clusters_only {
        labels.num_clusters()
    } else {
        labels.num_classes()
    };
    if pool < p {
        return Err(Error::Sampler {
            needed: p,
            available: pool,
        });
    }
    let mut batch = Vec::with_capacity(p * h);
    for label in sample_indices(rng, pool, p) {
        let m = &members[label];
        if m.len() >= h {
            for (replica, pos) in sample_indices(rng, m.len(), h).into_iter().enumerate() {
                batch.push(BatchEntry {
                    index: m[pos],
                    label,
                    replica,
                });
            }
        } else {
            for replica in 0..h {
                batch.push(BatchEntry {
                    index: m[rng.random_range(0..m.len())],
                    label,
                    replica,
                });
            }
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_distill: f64,
    pub num_clusters: usize,
    pub num_outliers: usize,
    pub iterations: usize,
    pub distill_skipped: usize,
    pub labeling: Option<LabelingStats>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: EncoderState,
    pub teacher: EncoderState,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
    /// Epochs completed so far.
    pub epoch: usize,
    pub clustering_passes: usize,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: UnlabeledData,
    augmenter: Augmenter,
    rng: Rng,
    state: TrainState,
}

impl Trainer {
    /// Random student, teacher copied from it, memory filled by the teacher.
    pub fn new(data: UnlabeledData, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        if data.raw.ncols() != cfg.encoder.d_raw {
            return Err(Error::config(
                "train.encoder.d_raw",
                format!("dataset has {} features, encoder expects {}", data.raw.ncols(), cfg.encoder.d_raw),
            ));
        }
        if cfg.batch_size() > data.len() {
            return Err(Error::config(
                "train.batch_identities",
                format!("batch of {} exceeds dataset size {}", cfg.batch_size(), data.len()),
            ));
        }
        let mut rng = seeded_rng(cfg.seed);
        let student = EncoderState::new(cfg.encoder, &mut rng);
        let teacher = student.clone();
        let bank = MemoryBank::initialize(&teacher, data.raw.view())?;
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.encoder);
        let augmenter = cfg.augment.for_noise_scale(data.noise_scale);
        Ok(Self {
            cfg,
            data,
            augmenter,
            rng,
            state: TrainState {
                student,
                teacher,
                optimizer,
                bank,
                epoch: 0,
                clustering_passes: 0,
            },
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Replaces the pseudo-labeling without clustering.
    pub fn set_labeling(&mut self, labeling: PseudoLabeling) -> Result<()> {
        self.state.bank.set_labeling(labeling)
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// DBSCAN over the whole memory bank.
    pub fn recluster(&mut self) -> Result<()> {
        let labeling = dbscan(self.state.bank.features(), self.cfg.dbscan)?;
        log::debug!(
            "epoch {}: {} clusters, {} outliers",
            self.state.epoch,
            labeling.num_clusters(),
            labeling.num_outliers()
        );
        self.state.bank.set_labeling(labeling)?;
        self.state.clustering_passes += 1;
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.data.len() / self.cfg.batch_size()
    }

    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let epoch = self.state.epoch;
        let iterations = self.iterations_per_epoch();
        let labeling = self.state.bank.labeling().clone();
        let pool = if self.cfg.clusters_only {
            labeling.num_clusters()
        } else {
            labeling.num_classes()
        };
        let p = self.cfg.batch_identities.min(pool);
        if p < self.cfg.batch_identities {
            log::warn!(
                "epoch {epoch}: only {pool} pseudo-identities, sampling {p} per batch instead of {}",
                self.cfg.batch_identities
            );
        }
        let mut report = EpochReport {
            epoch,
            lr: self.cfg.optimizer.lr_at(epoch),
            loss_total: 0.0,
            loss_global: 0.0,
            loss_local: 0.0,
            loss_distill: 0.0,
            num_clusters: labeling.num_clusters(),
            num_outliers: labeling.num_outliers(),
            iterations,
            distill_skipped: 0,
            labeling: None,
        };
        if p == 0 {
            return Err(Error::Sampler {
                needed: self.cfg.batch_identities,
                available: 0,
            });
        }
        for iteration in 0..iterations {
            let batch = pk_sample(&labeling, p, self.cfg.batch_instances, self.cfg.clusters_only, &mut self.rng)?;
            let loss = self.step(&batch, epoch, iteration)?;
            report.loss_total += loss.total;
            report.loss_global += loss.global;
            report.loss_local += loss.local;
            report.loss_distill += loss.distill;
            report.distill_skipped += usize::from(loss.distill_skipped);
        }
        let n = iterations.max(1) as f64;
        report.loss_total /= n;
        report.loss_global /= n;
        report.loss_local /= n;
        report.loss_distill /= n;
        self.state.epoch += 1;
        Ok(report)
    }

    fn step(&mut self, batch: &[BatchEntry], epoch: usize, iteration: usize) -> Result<crate::losses::TotalLoss> {
        let d_raw = self.data.raw.ncols();
        let mut strong = Array2::zeros((batch.len(), d_raw));
        let mut weak = Array2::zeros((batch.len(), d_raw));
        for (i, e) in batch.iter().enumerate() {
            let raw = self.data.raw.row(e.index);
            strong.row_mut(i).assign(&self.augmenter.strong(raw, &mut self.rng));
            weak.row_mut(i).assign(&self.augmenter.weak(raw, &mut self.rng));
        }
        let indices: Vec<usize> = batch.iter().map(|e| e.index).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

        let st = &mut self.state;
        let (queries, cache) = st.student.forward(strong.view(), Mode::Train)?;
        let teacher_emb = st.teacher.embed(weak.view())?;
        let centroids = match st.bank.num_clusters() {
            0 => None,
            _ => Some(st.bank.compute_centroids()?),
        };
        let ctx = BatchContext {
            queries: queries.view(),
            teacher: teacher_emb.view(),
            labels: &labels,
            indices: &indices,
        };
        let plan = ObjectivePlan::mine(&ctx, &st.bank, centroids.as_ref(), self.cfg.loss)?;
        let loss = plan.evaluate(queries.view())?;
        if !loss.total.is_finite() || loss.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                iteration,
                indices,
            });
        }

        let grads = st.student.backward(&cache, loss.grads.view())?;
        st.optimizer.adam_step(&mut st.student.params, &grads.params, epoch)?;
        ema_update(&mut st.teacher, &st.student, EmaConfig::new(self.cfg.ema_lambda)?)?;

        let refreshed = st.teacher.embed(weak.view())?;
        for (row, &index) in refreshed.rows().into_iter().zip(&indices) {
            let q = l2_normalize(row)?;
            st.bank.momentum_update(index, &q, self.cfg.memory_momentum)?;
        }
        Ok(loss)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: TrainState,
    pub reports: Vec<EpochReport>,
    /// Observer output for the labeling in force after the last epoch.
    pub final_labeling: Option<LabelingStats>,
}

/// Hooks called by [`fit`].
pub trait FitObserver {
    /// Called whenever the labeling changes; may return ground-truth
    /// statistics for reporting.
    fn labeling(&mut self, _labeling: &PseudoLabeling) -> Option<LabelingStats> {
        None
    }

    /// Called after every completed epoch with the current state.
    fn epoch_end(&mut self, _state: &TrainState, _report: &EpochReport, _reclustered_next: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that records nothing.
pub struct Silent;

impl FitObserver for Silent {}

/// Full training run.
///
/// Clustering happens at every epoch boundary `e` with `e % T == 0`, for
/// `e` in `0..=epochs`: before epoch 0, before epoch `T`, and so on, with a
/// final pass at `e = epochs` when that is a multiple of `T`.
pub fn fit(data: UnlabeledData, cfg: TrainConfig, observer: &mut dyn FitObserver) -> Result<FitOutput> {
    let epochs = cfg.epochs;
    let every = cfg.recluster_every;
    let mut trainer = Trainer::new(data, cfg)?;
    let mut reports = Vec::with_capacity(epochs);
    let mut stats = None;
    for e in 0..=epochs {
        if e % every == 0 {
            trainer.recluster()?;
            stats = observer.labeling(trainer.state().bank.labeling());
        }
        if e == epochs {
            break;
        }
        let mut report = trainer.train_epoch()?;
        report.labeling = stats;
        let next = (e + 1) % every == 0;
        observer.epoch_end(trainer.state(), &report, next)?;
        reports.push(report);
    }
    Ok(FitOutput {
        state: trainer.into_state(),
        reports,
        final_labeling: stats,
    })
}
