//! Runs the desk preset over several seeds and prints final mAP, cluster
//! count and the random-ranking baseline.
//!
//! ```text
//! cargo run --release -p l2g-core --example calibrate -- [seeds] [key=value ...]
//! ```

use std::time::Instant;

use l2g_core::clustering::{dbscan, labeling_stats, DbscanParams};
use l2g_core::config::{Preset, RunConfig};
use l2g_core::evaluation::{evaluate, make_split, random_ranking_map};
use l2g_core::numerics::seeded_rng;
use l2g_core::synthdata::generate;
use l2g_core::trainer::{fit, Silent};

fn main() -> l2g_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let overrides: Vec<String> = args.collect();
    let mut maps = Vec::new();
    for seed in 0..seeds {
        let mut o = overrides.clone();
        o.push(format!("train.seed={seed}"));
        o.push(format!("generator.seed={seed}"));
        let cfg = RunConfig::resolve(Preset::Desk, None, &o)?;
        let ds = generate(&cfg.generator)?;
        let start = Instant::now();
        let out = fit(ds.strip_labels(), cfg.train.clone(), &mut Silent)?;
        let secs = start.elapsed().as_secs_f64();
        let split = make_split(&ds, &mut seeded_rng(cfg.eval.seed))?;
        let report = evaluate(&split, &ds, &out.state.teacher)?;
        let student = evaluate(&split, &ds, &out.state.student)?;
        let (base, _) = random_ranking_map(&split, cfg.eval.random_trials, &mut seeded_rng(1));
        let stats = labeling_stats(out.state.bank.labeling(), &ds)?;
        let trace: Vec<String> = out.reports.iter().map(|r| format!("{}", r.num_clusters)).collect();
        println!(
            "seed {seed}: map {:.4} (student {:.4}) base {:.4} K {} out {} f1 {:.3} cmc1 {:.3} {:.1}s  K-trace [{}]",
            report.map,
            student.map,
            base,
            stats.num_clusters,
            stats.num_outliers,
            stats.f1,
            report.cmc[0],
            secs,
            trace.join(" ")
        );
        let probe: Vec<String> = [0.3, 0.5, 0.7]
            .iter()
            .map(|&eps| {
                let l = dbscan(out.state.bank.features(), DbscanParams { eps, min_samples: 5 }).unwrap();
                let s = labeling_stats(&l, &ds).unwrap();
                format!("eps{eps}: K{} o{} f1 {:.2}", s.num_clusters, s.num_outliers, s.f1)
            })
            .collect();
        println!("    final bank: {}", probe.join("; "));
        maps.push(report.map);
    }
    maps.sort_by(f64::total_cmp);
    println!("median map {:.4}", maps[maps.len() / 2]);
    Ok(())
}
