use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use l2g_core::checkpoint::Checkpoint;
use l2g_core::clustering::{dbscan, labeling_stats, DbscanParams, LabelingStats, PseudoLabeling};
use l2g_core::config::RunConfig;
use l2g_core::evaluation::{evaluate, make_split, random_ranking_map};
use l2g_core::numerics::seeded_rng;
use l2g_core::report::{epoch_csv, json_record, sig6};
use l2g_core::synthdata::{generate, Dataset};
use l2g_core::trainer::{fit, FitObserver};
use l2g_core::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Scores each new labeling against the dataset's true identities.
struct GroundTruth<'a>(&'a Dataset);

impl FitObserver for GroundTruth<'_> {
    fn labeling(&mut self, labeling: &PseudoLabeling) -> Option<LabelingStats> {
        labeling_stats(labeling, self.0).ok()
    }

    fn epoch_end(
        &mut self,
        _state: &l2g_core::trainer::TrainState,
        report: &l2g_core::trainer::EpochReport,
        _reclustered_next: bool,
    ) -> Result<()> {
        log::info!(
            "epoch {} loss {} clusters {} outliers {}",
            report.epoch,
            sig6(report.loss_total),
            report.num_clusters,
            report.num_outliers
        );
        Ok(())
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Format {
        what: "dataset",
        reason: format!("{}: {e}", path.display()),
    })?;
    Dataset::read_jsonl(BufReader::new(file))
}

fn read_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::Format {
        what: "checkpoint",
        reason: format!("{}: {e}", path.display()),
    })?;
    Checkpoint::read(&mut BufReader::new(file), cfg.train.optimizer)
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate(&cfg.generator)?;
    let mut w = BufWriter::new(File::create(out)?);
    ds.write_jsonl(&mut w)?;
    let check = ds.distance_check();
    println!(
        "wrote {} instances ({} identities x {} cameras) to {}",
        ds.len(),
        ds.num_identities,
        ds.cameras,
        out.display()
    );
    println!(
        "distance check: cross-camera same-identity {} vs same-camera other-identity {}: {}",
        sig6(check.cross_camera_intra_id_mean),
        sig6(check.same_camera_inter_id_mean),
        if check.camera_dominates() {
            "camera dominates"
        } else {
            "identity dominates"
        }
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let config = cfg.to_json();
    fs::create_dir_all(out)?;
    let result = fit(ds.strip_labels(), cfg.train.clone(), &mut GroundTruth(&ds))?;
    fs::write(out.join(EPOCHS_FILE), epoch_csv(&result.reports, &config))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let ck = Checkpoint::new(result.state, cfg.train.seed, false, config.to_string());
    let mut w = BufWriter::new(File::create(out.join(CHECKPOINT_FILE))?);
    ck.write(&mut w)?;
    w.flush()?;
    let summary = serde_json::json!({
        "epochs": result.reports.len(),
        "last_epoch": result.reports.last(),
        "final_labeling": result.final_labeling,
        "clustering_passes": ck.state.clustering_passes,
    });
    println!("{}", json_record("train", &summary, &config)?);
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let ck = read_checkpoint(checkpoint, cfg)?;
    let split = make_split(&ds, &mut seeded_rng(cfg.eval.seed))?;
    let report = evaluate(&split, &ds, &ck.state.teacher)?;
    let (random_map, random_sd) = random_ranking_map(&split, cfg.eval.random_trials, &mut seeded_rng(cfg.eval.seed));
    let record = serde_json::json!({
        "seed": cfg.eval.seed,
        "map": report.map,
        "cmc": report.cmc,
        "skipped_queries": report.skipped_queries,
        "random_map": random_map,
        "random_map_sd": random_sd,
        "per_query_ap": report.per_query_ap,
    });
    println!("{}", json_record("eval", &record, &cfg.to_json())?);
    Ok(())
}

pub const CLUSTER_COLUMNS: [&str; 7] = ["eps", "min_samples", "num_clusters", "num_outliers", "pair_precision", "pair_recall", "pair_f1"];

pub fn cluster(cfg: &RunConfig, checkpoint: &Path, data: &Path, eps: &[f64]) -> Result<()> {
    let ds = read_dataset(data)?;
    let ck = read_checkpoint(checkpoint, cfg)?;
    let emb = ck.state.teacher.embed(ds.raw_matrix().view())?;
    let sweep = if eps.is_empty() { vec![cfg.train.dbscan.eps] } else { eps.to_vec() };
    let mut out = String::new();
    out.push_str(&format!("# config={}\n", cfg.to_json()));
    out.push_str(&CLUSTER_COLUMNS.join(","));
    out.push('\n');
    for eps in sweep {
        let params = DbscanParams {
            eps,
            min_samples: cfg.train.dbscan.min_samples,
        };
        params.validate()?;
        let s = labeling_stats(&dbscan(emb.view(), params)?, &ds)?;
        let cells = [
            sig6(eps),
            params.min_samples.to_string(),
            s.num_clusters.to_string(),
            s.num_outliers.to_string(),
            sig6(s.precision),
            sig6(s.recall),
            sig6(s.f1),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
