//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod exact;
pub mod retrieval;

use l2g_core::clustering::{DbscanParams, PseudoLabeling};
use l2g_core::encoder::{Architecture, EncoderState, Mode, Params};
use l2g_core::losses::{BatchContext, DistillPlan, GlobalPlan, LocalPlan, LossConfig, Mining, ObjectivePlan};
use l2g_core::memory::MemoryBank;
use l2g_core::numerics::{l2_normalize_rows, seeded_rng, Rng};
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

/// Central differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| Distribution::<f64>::sample(&StandardNormal, rng))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let mut m = gaussian_matrix(rows, cols, rng);
    l2_normalize_rows(&mut m).unwrap();
    m
}

fn reshape(flat: &[f64], like: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_vec(like.dim(), flat.to_vec()).unwrap()
}

/// A memory bank with `clusters` clusters of random size plus a few outliers.
pub fn random_bank(n: usize, d: usize, clusters: usize, rng: &mut Rng) -> MemoryBank {
    let mut bank = MemoryBank::from_features(unit_rows(n, d, rng)).unwrap();
    let assignment: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if i < 2 * clusters {
                Some(i % clusters)
            } else if rng.random::<f64>() < 0.2 {
                None
            } else {
                Some(rng.random_range(0..clusters))
            }
        })
        .collect();
    bank.set_labeling(PseudoLabeling::from_assignment(&assignment)).unwrap();
    bank
}

/// PK-shaped batch drawn from the bank's labeling: `p` labels, `h` samples each.
pub fn random_batch(bank: &MemoryBank, p: usize, h: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let members = bank.labeling().members();
    let mut labels_pool: Vec<usize> = (0..members.len()).collect();
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..p {
        let pick = labels_pool.swap_remove(rng.random_range(0..labels_pool.len()));
        for _ in 0..h {
            let m = &members[pick];
            indices.push(m[rng.random_range(0..m.len())]);
            labels.push(pick);
        }
    }
    (indices, labels)
}

pub struct LossScenario {
    pub bank: MemoryBank,
    pub queries: Array2<f64>,
    pub teacher: Array2<f64>,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl LossScenario {
    pub fn new(seed: u64, d: usize) -> Self {
        let mut rng = seeded_rng(seed);
        let bank = random_bank(40, d, 4, &mut rng);
        let (indices, labels) = random_batch(&bank, 4, 3, &mut rng);
        let queries = unit_rows(indices.len(), d, &mut rng);
        let teacher = unit_rows(indices.len(), d, &mut rng);
        Self {
            bank,
            queries,
            teacher,
            indices,
            labels,
        }
    }

    pub fn ctx(&self) -> BatchContext<'_> {
        BatchContext {
            queries: self.queries.view(),
            teacher: self.teacher.view(),
            labels: &self.labels,
            indices: &self.indices,
        }
    }
}

/// Relative error of the memory contrast gradient with respect to the queries.
pub fn global_loss_error(seed: u64) -> f64 {
    let s = LossScenario::new(seed, 6);
    let centroids = s.bank.compute_centroids().unwrap();
    let mining = if seed % 2 == 0 { Mining::Hardest } else { Mining::Centroid };
    let plan = GlobalPlan::mine(&s.ctx(), &s.bank, Some(&centroids), mining).unwrap();
    let tau = 0.05;
    let analytic = plan.evaluate(s.queries.view(), tau).unwrap().grads;
    let fd = fd_gradient(
        |x| plan.evaluate(reshape(x, s.queries.view()).view(), tau).unwrap().value,
        s.queries.as_slice().unwrap(),
        FD_EPS,
    );
    relative_error(analytic.as_slice().unwrap(), &fd)
}

pub fn local_loss_error(seed: u64) -> f64 {
    let s = LossScenario::new(seed, 6);
    let plan = LocalPlan::mine(s.queries.view(), &s.labels).unwrap();
    let tau = 0.05;
    let analytic = plan.evaluate(s.queries.view(), tau).unwrap().grads;
    let fd = fd_gradient(
        |x| plan.evaluate(reshape(x, s.queries.view()).view(), tau).unwrap().value,
        s.queries.as_slice().unwrap(),
        FD_EPS,
    );
    relative_error(analytic.as_slice().unwrap(), &fd)
}

pub fn distill_loss_error(seed: u64) -> f64 {
    let s = LossScenario::new(seed, 6);
    let centroids = s.bank.compute_centroids().unwrap();
    let include = (0..s.indices.len()).map(|i| i % 5 != 4).collect();
    let plan = DistillPlan::new(s.teacher.view(), &centroids, 0.5, include).unwrap();
    let analytic = plan.evaluate(s.queries.view(), 1.0).unwrap().grads;
    let fd = fd_gradient(
        |x| plan.evaluate(reshape(x, s.queries.view()).view(), 1.0).unwrap().value,
        s.queries.as_slice().unwrap(),
        FD_EPS,
    );
    relative_error(analytic.as_slice().unwrap(), &fd)
}

pub fn flatten(p: &Params) -> Vec<f64> {
    p.flatten()
}

pub fn unflatten(arch: Architecture, flat: &[f64]) -> Params {
    let mut p = Params::zeros(arch);
    let mut offset = 0;
    for (_, t) in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    p
}

/// Relative error of the parameter gradient of the full objective
/// (memory contrast + batch contrast + γ·distillation) composed with the
/// train-mode encoder, with every mined selection frozen.
pub fn composed_objective_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(1000 + seed);
    let arch = Architecture {
        d_raw: 8,
        hidden: 10,
        d_emb: 5,
    };
    let mut student = EncoderState::new(arch, &mut rng);
    student.params.b1.mapv_inplace(|_| 0.1 * rng.random::<f64>());
    student.params.b2.mapv_inplace(|_| 0.1 * rng.random::<f64>());
    let teacher_net = EncoderState::new(arch, &mut rng);
    let bank = random_bank(40, arch.d_emb, 4, &mut rng);
    let (indices, labels) = random_batch(&bank, 4, 3, &mut rng);
    let strong = gaussian_matrix(indices.len(), arch.d_raw, &mut rng);
    let weak = gaussian_matrix(indices.len(), arch.d_raw, &mut rng);
    let teacher = teacher_net.embed(weak.view()).unwrap();
    let centroids = bank.compute_centroids().unwrap();

    let (queries, cache) = student.clone().forward(strong.view(), Mode::Train).unwrap();
    let ctx = BatchContext {
        queries: queries.view(),
        teacher: teacher.view(),
        labels: &labels,
        indices: &indices,
    };
    let cfg = LossConfig {
        mining: if seed % 2 == 0 { Mining::Hardest } else { Mining::Centroid },
        gamma: 0.2 + 0.1 * (seed % 3) as f64,
        ..LossConfig::default()
    };
    let plan = ObjectivePlan::mine(&ctx, &bank, Some(&centroids), cfg).unwrap();
    let upstream = plan.evaluate(queries.view()).unwrap().grads;
    let analytic = student.backward(&cache, upstream.view()).unwrap().params.flatten();

    let objective = |flat: &[f64]| {
        let mut net = student.clone();
        net.params = unflatten(arch, flat);
        let (q, _) = net.forward(strong.view(), Mode::Train).unwrap();
        plan.evaluate(q.view()).unwrap().total
    };
    let fd = fd_gradient(objective, &student.params.flatten(), FD_EPS);
    relative_error(&analytic, &fd)
}

/// Textbook DBSCAN: neighborhoods by brute force, clusters as the transitive
/// closure of core-to-core reachability, borders to the lowest-index core
/// neighbor. Returns per-point cluster ids (`None` for noise), unnormalized.
pub fn oracle_dbscan(features: ArrayView2<'_, f64>, params: DbscanParams) -> Vec<Option<usize>> {
    let n = features.nrows();
    let dist = |i: usize, j: usize| 1.0 - features.row(i).dot(&features.row(j));
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(i, j) <= params.eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_samples).collect();
    // reachability between cores as bitset rows, closed Floyd–Warshall style
    let words = n.div_ceil(64);
    let mut reach = vec![vec![0u64; words]; n];
    for i in 0..n {
        for &j in &neighbors[i] {
            if core[i] && core[j] {
                reach[i][j / 64] |= 1 << (j % 64);
            }
        }
    }
    for k in 0..n {
        let row_k = reach[k].clone();
        for row in reach.iter_mut() {
            if row[k / 64] >> (k % 64) & 1 == 1 {
                for (w, r) in row.iter_mut().zip(&row_k) {
                    *w |= r;
                }
            }
        }
    }
    let reaches = |i: usize, j: usize| reach[i][j / 64] >> (j % 64) & 1 == 1;
    let mut cluster_of_core = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if core[i] && cluster_of_core[i].is_none() {
            for j in 0..n {
                if reaches(i, j) {
                    cluster_of_core[j] = Some(next);
                }
            }
            next += 1;
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                cluster_of_core[i]
            } else {
                neighbors[i].iter().find(|&&j| core[j]).and_then(|&j| cluster_of_core[j])
            }
        })
        .collect()
}

/// Random points on the sphere with a few planted blobs.
pub fn dbscan_instance(seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    let n = rng.random_range(20..=200);
    let d = rng.random_range(3..=6);
    let blobs = unit_rows(rng.random_range(1..=6), d, &mut rng);
    let spread = 0.1 + 0.5 * rng.random::<f64>();
    let mut m = Array2::zeros((n, d));
    for mut row in m.rows_mut() {
        if rng.random::<f64>() < 0.7 {
            let c = blobs.row(rng.random_range(0..blobs.nrows()));
            for (x, &ci) in row.iter_mut().zip(c) {
                *x = ci + spread * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        } else {
            for x in row.iter_mut() {
                *x = Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
    }
    l2_normalize_rows(&mut m).unwrap();
    m
}

/// Partitions compared up to relabeling: same-group relation on all pairs
/// and identical noise sets.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| {
            a[i].is_none() == b[i].is_none()
                && (0..a.len()).all(|j| (a[i].is_some() && a[i] == a[j]) == (b[i].is_some() && b[i] == b[j]))
        })
}

pub fn labeling_as_assignment(l: &PseudoLabeling) -> Vec<Option<usize>> {
    (0..l.len()).map(|i| l.cluster_of(i)).collect()
}
