//! Cross-camera retrieval evaluation: mAP and CMC.
//!
//! Gallery entries sharing both identity and camera with the query are
//! dropped before ranking. Ranking is by descending inner product, ties
//! broken by lower gallery position.

use ndarray::{Array2, ArrayView2};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::Serialize;

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::numerics::{pairwise_similarity, Rng};
use crate::synthdata::Dataset;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Entry {
    pub index: usize,
    pub true_id: usize,
    pub camera: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalSplit {
    pub query: Vec<Entry>,
    pub gallery: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub map: f64,
    /// CMC at ranks 1, 5, 10.
    pub cmc: [f64; 3],
    pub per_query_ap: Vec<f64>,
    /// Queries left out because no valid match survived the exclusion rule.
    pub skipped_queries: usize,
}

/// One query per identity, picked uniformly among that identity's
/// instances; everything else goes to the gallery.
pub fn make_split(dataset: &Dataset, rng: &mut Rng) -> Result<RetrievalSplit> {
    let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_identities];
    for inst in &dataset.instances {
        by_id[inst.true_id].push(inst.index);
    }
    let entry = |i: usize| {
        let inst = &dataset.instances[i];
        Entry {
            index: inst.index,
            true_id: inst.true_id,
            camera: inst.camera,
        }
    };
    let mut query = Vec::with_capacity(dataset.num_identities);
    for (id, members) in by_id.iter().enumerate() {
        let first_cam = members.first().map(|&i| dataset.instances[i].camera);
        if members.iter().all(|&i| Some(dataset.instances[i].camera) == first_cam) {
            return Err(Error::Split(format!("identity {id} is seen by fewer than 2 cameras")));
        }
        let pick = *members.choose(rng).expect("non-empty");
        query.push(entry(pick));
    }
    let chosen: std::collections::HashSet<usize> = query.iter().map(|e| e.index).collect();
    let gallery = (0..dataset.len()).filter(|i| !chosen.contains(i)).map(entry).collect();
    Ok(RetrievalSplit { query, gallery })
}

/// Relevance of the ranked, exclusion-filtered gallery for one query.
fn ranked_relevance(sims: &[f64], query: &Entry, gallery: &[Entry]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&g| !(gallery[g].true_id == query.true_id && gallery[g].camera == query.camera))
        .collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.iter().map(|&g| gallery[g].true_id == query.true_id).collect()
}

/// Mean over relevant ranks `r` of (relevant items at or above `r`) / `r`.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Metrics from precomputed embeddings (rows aligned with the entries).
pub fn evaluate_embeddings(
    query_emb: ArrayView2<'_, f64>,
    query: &[Entry],
    gallery_emb: ArrayView2<'_, f64>,
    gallery: &[Entry],
) -> Result<EvalReport> {
    if query_emb.nrows() != query.len() || gallery_emb.nrows() != gallery.len() {
        return Err(Error::Dimension {
            expected: query.len(),
            got: query_emb.nrows(),
        });
    }
    let sims = pairwise_similarity(query_emb, gallery_emb)?;
    let mut aps = Vec::with_capacity(query.len());
    let mut cmc_hits = [0usize; 3];
    let mut skipped = 0;
    for (qi, q) in query.iter().enumerate() {
        let row = sims.row(qi);
        let relevance = ranked_relevance(row.as_slice().expect("standard layout"), q, gallery);
        let Some(ap) = average_precision(&relevance) else {
            skipped += 1;
            continue;
        };
        aps.push(ap);
        let first = relevance.iter().position(|&r| r).expect("ap implies a hit");
        for (slot, &k) in CMC_RANKS.iter().enumerate() {
            if first < k {
                cmc_hits[slot] += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries had no valid cross-camera match and were skipped");
    }
    let n = aps.len();
    let denom = n.max(1) as f64;
    Ok(EvalReport {
        map: aps.iter().sum::<f64>() / denom,
        cmc: cmc_hits.map(|h| h as f64 / denom),
        per_query_ap: aps,
        skipped_queries: skipped,
    })
}

fn gather_raw(dataset: &Dataset, entries: &[Entry]) -> Array2<f64> {
    let mut m = Array2::zeros((entries.len(), dataset.d_raw));
    for (mut row, e) in m.rows_mut().into_iter().zip(entries) {
        row.assign(&ndarray::ArrayView1::from(&dataset.instances[e.index].raw[..]));
    }
    m
}

/// Embeds query and gallery with `encoder` in inference mode on unaugmented
/// features and scores the ranking.
pub fn evaluate(split: &RetrievalSplit, dataset: &Dataset, encoder: &EncoderState) -> Result<EvalReport> {
    if dataset.d_raw != encoder.arch.d_raw {
        return Err(Error::Dimension {
            expected: encoder.arch.d_raw,
            got: dataset.d_raw,
        });
    }
    let q = encoder.embed(gather_raw(dataset, &split.query).view())?;
    let g = encoder.embed(gather_raw(dataset, &split.gallery).view())?;
    evaluate_embeddings(q.view(), &split.query, g.view(), &split.gallery)
}

/// mAP of a uniformly random ranking, estimated by shuffling each query's
/// valid gallery `trials` times. Returns `(mean, standard deviation)` of the
/// per-trial mAP.
pub fn random_ranking_map(split: &RetrievalSplit, trials: usize, rng: &mut Rng) -> (f64, f64) {
    let patterns: Vec<Vec<bool>> = split
        .query
        .iter()
        .map(|q| {
            split
                .gallery
                .iter()
                .filter(|g| !(g.true_id == q.true_id && g.camera == q.camera))
                .map(|g| g.true_id == q.true_id)
                .collect::<Vec<bool>>()
        })
        .filter(|p| p.iter().any(|&r| r))
        .collect();
    if patterns.is_empty() || trials == 0 {
        return (0.0, 0.0);
    }
    let mut maps = Vec::with_capacity(trials);
    let mut buf = Vec::new();
    for _ in 0..trials {
        let mut total = 0.0;
        for p in &patterns {
            buf.clone_from(p);
            buf.shuffle(rng);
            total += average_precision(&buf).expect("pattern has a relevant item");
        }
        maps.push(total / patterns.len() as f64);
    }
    let mean = maps.iter().sum::<f64>() / trials as f64;
    let var = maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / trials as f64;
    (mean, var.sqrt())
}
