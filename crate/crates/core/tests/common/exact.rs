//! Exact-update identities, each returning the worst deviation seen.

use l2g_core::encoder::{ema_update, Architecture, EmaConfig, EncoderState, Mode};
use l2g_core::losses::{class_probabilities, distillation_loss};
use l2g_core::numerics::{l2_normalize, seeded_rng};
use ndarray::Array2;
use rand::Rng as _;

use super::{gaussian_matrix, random_bank, unit_rows};

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Memory momentum with m = 1 keeps the slot and m = 0 replaces it by the
/// normalized query. True when both hold bit for bit.
pub fn momentum_extremes_exact(seed: u64) -> bool {
    let mut rng = seeded_rng(seed);
    let mut bank = random_bank(30, 6, 3, &mut rng);
    let q = l2_normalize(unit_rows(1, 6, &mut rng).row(0)).unwrap();
    let i = rng.random_range(0..bank.len());
    let before = bank.slot(i).to_owned();
    bank.momentum_update(i, &q, 1.0).unwrap();
    let kept = bank.slot(i).iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits());
    bank.momentum_update(i, &q, 0.0).unwrap();
    let replaced = bank.slot(i).iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    kept && replaced
}

fn trained_pair(seed: u64) -> (EncoderState, EncoderState) {
    let arch = Architecture {
        d_raw: 8,
        hidden: 10,
        d_emb: 5,
    };
    let mut rng = seeded_rng(seed);
    let teacher = EncoderState::new(arch, &mut rng);
    let mut student = EncoderState::new(arch, &mut rng);
    // move the running statistics away from their initial values
    student.forward(gaussian_matrix(6, 8, &mut rng).view(), Mode::Train).unwrap();
    (teacher, student)
}

fn encoder_values(e: &EncoderState) -> Vec<f64> {
    let mut v = e.params.flatten();
    v.extend(e.bn.running_mean.iter());
    v.extend(e.bn.running_var.iter());
    v
}

/// EMA with λ = 1 keeps the teacher and λ = 0 copies the student, weights
/// and running statistics alike, bit for bit.
pub fn ema_extremes_exact(seed: u64) -> bool {
    let (teacher, student) = trained_pair(seed);
    let mut kept = teacher.clone();
    ema_update(&mut kept, &student, EmaConfig::new(1.0).unwrap()).unwrap();
    let mut copied = teacher.clone();
    ema_update(&mut copied, &student, EmaConfig::new(0.0).unwrap()).unwrap();
    let bits = |e: &EncoderState| encoder_values(e).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    bits(&kept) == bits(&teacher) && bits(&copied) == bits(&student)
}

/// Largest gap between library centroids and a brute-force mean over the
/// members found by scanning the labels.
pub fn centroid_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let bank = random_bank(60, 7, 4, &mut rng);
    let centroids = bank.compute_centroids().unwrap();
    let labels = bank.labeling().labels();
    let mut worst = 0.0f64;
    for k in 0..bank.num_clusters() {
        let mut sum = vec![0.0; bank.dim()];
        let mut count = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l == k {
                for (s, x) in sum.iter_mut().zip(bank.slot(i)) {
                    *s += x;
                }
                count += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        worst = worst.max(max_abs_diff(&mean, centroids.raw.row(k)));
    }
    worst
}

/// Largest `|Σ_k P_k − 1|` over random queries and temperatures.
pub fn probability_sum_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let bank = random_bank(50, 6, 5, &mut rng);
    let centroids = bank.compute_centroids().unwrap();
    let queries = unit_rows(20, 6, &mut rng);
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let tau = 0.02 + rng.random::<f64>();
            let p = class_probabilities(q, &centroids, tau).unwrap();
            (p.iter().sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Distillation loss and gradient when student and teacher distributions
/// coincide: same embeddings and τ_s = τ_t.
pub fn distill_at_agreement(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let bank = random_bank(40, 6, 4, &mut rng);
    let centroids = bank.compute_centroids().unwrap();
    let emb: Array2<f64> = unit_rows(8, 6, &mut rng);
    let tau = 0.1 + rng.random::<f64>();
    let out = distillation_loss(emb.view(), emb.view(), &centroids, tau, tau).unwrap();
    out.grads.iter().fold(out.value.abs(), |m, g| m.max(g.abs()))
}
