//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Built with `harness = false` so the lines always reach the output.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use common::exact::*;
use common::retrieval::*;
use common::*;
use l2g_core::checkpoint::Checkpoint;
use l2g_core::clustering::{dbscan, DbscanParams};
use l2g_core::config::{Preset, RunConfig};
use l2g_core::evaluation::{evaluate, make_split, random_ranking_map};
use l2g_core::numerics::seeded_rng;
use l2g_core::report::epoch_csv;
use l2g_core::synthdata::generate;
use l2g_core::trainer::{fit, Silent};

const SEEDS: u64 = 5;
/// Required lift of the trained median mAP over the random-ranking baseline.
const MAP_LIFT: f64 = 0.30;
const TRUE_IDENTITIES: f64 = 20.0;
const ABLATION_SLACK: f64 = 0.01;
const GAMMA_SPREAD: f64 = 0.08;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[derive(Clone, Copy)]
struct Run {
    map: f64,
    baseline: f64,
    clusters: usize,
    seconds: f64,
}

/// Desk preset on the hard generator, evaluated on the teacher.
fn desk_run(seed: u64, overrides: &[&str]) -> Run {
    let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    o.push(format!("train.seed={seed}"));
    o.push(format!("generator.seed={seed}"));
    let cfg = RunConfig::resolve(Preset::Desk, None, &o).unwrap();
    let ds = generate(&cfg.generator).unwrap();
    let started = Instant::now();
    let out = fit(ds.strip_labels(), cfg.train.clone(), &mut Silent).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let split = make_split(&ds, &mut seeded_rng(cfg.eval.seed)).unwrap();
    let map = evaluate(&split, &ds, &out.state.teacher).unwrap().map;
    let (baseline, _) = random_ranking_map(&split, cfg.eval.random_trials, &mut seeded_rng(1));
    Run {
        map,
        baseline,
        clusters: out.state.bank.num_clusters(),
        seconds,
    }
}

fn desk_runs(overrides: &[&str]) -> Vec<Run> {
    (0..SEEDS).map(|s| desk_run(s, overrides)).collect()
}

fn full_runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| desk_runs(&[]))
}

fn median_map(runs: &[Run]) -> f64 {
    median(runs.iter().map(|r| r.map).collect())
}

fn gradients() -> Verdict {
    let started = Instant::now();
    let checks: [(&str, fn(u64) -> f64); 4] = [
        ("memory contrast", global_loss_error),
        ("batch contrast", local_loss_error),
        ("distillation", distill_loss_error),
        ("full objective", composed_objective_error),
    ];
    let worst = checks
        .iter()
        .map(|(name, f)| (name, (0..GRAD_SEEDS).map(f).fold(0.0, f64::max)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst.1 <= FD_TOL && secs < 30.0,
        format!(
            "worst relative error {:.2e} ({}) over {GRAD_SEEDS} seeds, eps {FD_EPS:e}, {secs:.1}s",
            worst.1, worst.0
        ),
    )
}

fn dbscan_oracle() -> Verdict {
    let started = Instant::now();
    let mut mismatches = 0;
    let mut checked = 0;
    for seed in 0..50 {
        let f = dbscan_instance(seed);
        assert!(f.nrows() <= 200);
        for eps in [0.3, 0.5, 0.7] {
            for min_samples in [2, 5] {
                let params = DbscanParams { eps, min_samples };
                let got = labeling_as_assignment(&dbscan(f.view(), params).unwrap());
                if !same_partition(&got, &oracle_dbscan(f.view(), params)) {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} mismatches in {checked} runs, {secs:.1}s"),
    )
}

fn exact_updates() -> Verdict {
    let seeds = 0..20u64;
    let momentum = seeds.clone().all(momentum_extremes_exact);
    let ema = seeds.clone().all(ema_extremes_exact);
    let centroid = seeds.clone().map(centroid_error).fold(0.0, f64::max);
    let sums = seeds.clone().map(probability_sum_error).fold(0.0, f64::max);
    let distill = seeds.map(distill_at_agreement).fold(0.0, f64::max);
    verdict(
        momentum && ema && centroid <= 1e-9 && sums <= 1e-9 && distill <= 1e-9,
        format!(
            "momentum endpoints bit-exact {momentum}, ema endpoints bit-exact {ema}, \
             centroid err {centroid:.1e}, |sum p - 1| {sums:.1e}, distill at agreement {distill:.1e}"
        ),
    )
}

fn hard_preset() -> Verdict {
    let runs = full_runs();
    let map = median_map(runs);
    let baseline = median(runs.iter().map(|r| r.baseline).collect());
    let k = median(runs.iter().map(|r| r.clusters as f64).collect());
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let (lo, hi) = (TRUE_IDENTITIES * 0.7, TRUE_IDENTITIES * 1.3);
    let map_ok = map >= baseline + MAP_LIFT;
    let k_ok = (lo..=hi).contains(&k);
    let ks: Vec<usize> = runs.iter().map(|r| r.clusters).collect();
    verdict(
        map_ok && k_ok && slowest < 120.0,
        format!(
            "median mAP {map:.4} vs needed {:.4} [{}]; median K {k} (per seed {ks:?}) vs {lo}..={hi} [{}]; slowest run {slowest:.1}s",
            baseline + MAP_LIFT,
            if map_ok { "ok" } else { "short" },
            if k_ok { "ok" } else { "out of range" },
        ),
    )
}

fn ablation() -> Verdict {
    let full = median_map(full_runs());
    let local = median_map(&desk_runs(&["train.loss.use_distill=false"]));
    let global = median_map(&desk_runs(&["train.loss.use_distill=false", "train.loss.use_local=false"]));
    verdict(
        full >= local - ABLATION_SLACK && local >= global - ABLATION_SLACK && full - global > 0.0,
        format!("median mAP full {full:.4}, global+local {local:.4}, global only {global:.4}"),
    )
}

fn gamma_robustness() -> Verdict {
    let maps: Vec<(f64, f64)> = [0.1, 0.2, 0.5, 1.0]
        .into_iter()
        .map(|g| {
            let map = if g == RunConfig::preset(Preset::Desk).train.loss.gamma {
                median_map(full_runs())
            } else {
                median_map(&desk_runs(&[&format!("train.loss.gamma={g}")]))
            };
            (g, map)
        })
        .collect();
    let hi = maps.iter().map(|m| m.1).fold(f64::MIN, f64::max);
    let lo = maps.iter().map(|m| m.1).fold(f64::MAX, f64::min);
    let cells: Vec<String> = maps.iter().map(|(g, m)| format!("{g}: {m:.4}")).collect();
    verdict(
        hi - lo <= GAMMA_SPREAD,
        format!("median mAP by gamma {{{}}}, spread {:.4}", cells.join(", "), hi - lo),
    )
}

fn determinism() -> Verdict {
    let artifacts = || {
        let cfg = RunConfig::resolve(Preset::Desk, None, &["train.epochs=4".into()]).unwrap();
        let ds = generate(&cfg.generator).unwrap();
        let out = fit(ds.strip_labels(), cfg.train.clone(), &mut Silent).unwrap();
        let config = cfg.to_json();
        let csv = epoch_csv(&out.reports, &config);
        let ck = Checkpoint::new(out.state, cfg.train.seed, false, config.to_string()).to_bytes();
        (csv, ck)
    };
    let (csv_a, ck_a) = artifacts();
    let (csv_b, ck_b) = artifacts();
    verdict(
        csv_a == csv_b && ck_a == ck_b,
        format!("csv identical {}, checkpoint identical {} ({} bytes)", csv_a == csv_b, ck_a == ck_b, ck_a.len()),
    )
}

fn evaluation() -> Verdict {
    let ap = ap_hand_case();
    let ap_ok = (ap - 0.83333).abs() <= 1e-5;
    let mut monotone = true;
    let mut worst_z: f64 = 0.0;
    for seed in 0..5 {
        let (map, mean, sd, cmc) = random_embedding_map(seed, 10_000);
        monotone &= cmc[0] <= cmc[1] && cmc[1] <= cmc[2];
        worst_z = worst_z.max((map - mean).abs() / sd);
    }
    let (perfect, cmc1) = one_hot_map(0);
    monotone &= cmc1 == 1.0;
    verdict(
        ap_ok && monotone && worst_z <= 3.0 && perfect == 1.0,
        format!("hand AP {ap:.6}, CMC monotone {monotone}, random mAP worst |z| {worst_z:.2}, one-hot mAP {perfect}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient suite", gradients),
        ("dbscan oracle", dbscan_oracle),
        ("exact updates", exact_updates),
        ("hard preset retrieval and cluster count", hard_preset),
        ("ablation ordering", ablation),
        ("gamma robustness", gamma_robustness),
        ("determinism", determinism),
        ("evaluation metrics", evaluation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!("{} criterion {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
