//! Report formatting: per-epoch CSV and JSON records, floats at 6
//! significant digits.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::clustering::LabelingStats;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::trainer::EpochReport;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Column order of the per-epoch CSV.
pub const EPOCH_COLUMNS: [&str; 12] = [
    "epoch",
    "lr",
    "loss_total",
    "loss_global",
    "loss_local",
    "loss_distill",
    "num_clusters",
    "num_outliers",
    "pair_precision",
    "pair_recall",
    "pair_f1",
    "distill_skipped",
];

pub const EVAL_COLUMNS: [&str; 6] = ["seed", "map", "cmc1", "cmc5", "cmc10", "skipped_queries"];

/// Formats like C's `%.6g`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    // log10 can land one below for values like 9.9999995
    let rounded_exp = format!("{:.5e}", x)
        .split('e')
        .nth(1)
        .and_then(|e| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if !(-4..6).contains(&rounded_exp) {
        let s = format!("{:.5e}", x);
        let (mant, e) = s.split_once('e').expect("exponent present");
        let mant = trim_zeros(mant);
        let e: i32 = e.parse().expect("integer exponent");
        let sign = if e < 0 { '-' } else { '+' };
        return format!("{mant}e{sign}{:02}", e.abs());
    }
    let decimals = (5 - rounded_exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds every float in a JSON value to 6 significant digits.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("checked f64");
            sig6(x)
                .parse::<f64>()
                .ok()
                .and_then(serde_json::Number::from_f64)
                .map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// Serializes `record` as a single-line JSON object with the format version
/// and the resolved config attached.
pub fn json_record<T: Serialize>(kind: &str, record: &T, config: &Value) -> Result<String> {
    let body = serde_json::to_value(record).map_err(|e| Error::Format {
        what: "report",
        reason: e.to_string(),
    })?;
    let mut obj = Map::new();
    obj.insert("format_version".into(), Value::from(REPORT_FORMAT_VERSION));
    obj.insert("kind".into(), Value::from(kind));
    obj.insert("report".into(), round_json(body));
    obj.insert("config".into(), config.clone());
    Ok(Value::Object(obj).to_string())
}

fn stats_cells(s: Option<&LabelingStats>) -> [String; 3] {
    match s {
        Some(s) if s.f1_defined => [sig6(s.precision), sig6(s.recall), sig6(s.f1)],
        _ => [String::new(), String::new(), String::new()],
    }
}

/// Per-epoch CSV: two `#` comment lines (format version, resolved config as
/// JSON), a header row, then one row per epoch.
pub fn epoch_csv(reports: &[EpochReport], config: &Value) -> String {
    let mut out = format!("# format_version={REPORT_FORMAT_VERSION}\n# config={config}\n");
    out.push_str(&EPOCH_COLUMNS.join(","));
    out.push('\n');
    for r in reports {
        let [p, rc, f] = stats_cells(r.labeling.as_ref());
        let cells = [
            r.epoch.to_string(),
            sig6(r.lr),
            sig6(r.loss_total),
            sig6(r.loss_global),
            sig6(r.loss_local),
            sig6(r.loss_distill),
            r.num_clusters.to_string(),
            r.num_outliers.to_string(),
            p,
            rc,
            f,
            r.distill_skipped.to_string(),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn eval_csv_header() -> String {
    format!("{}\n", EVAL_COLUMNS.join(","))
}

pub fn eval_csv_row(seed: u64, r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        seed,
        sig6(r.map),
        sig6(r.cmc[0]),
        sig6(r.cmc[1]),
        sig6(r.cmc[2]),
        r.skipped_queries
    )
}
