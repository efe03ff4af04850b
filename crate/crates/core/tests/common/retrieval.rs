//! Retrieval checks shared by the evaluation tests and the acceptance run.

use l2g_core::evaluation::{average_precision, evaluate_embeddings, make_split, random_ranking_map, RetrievalSplit};
use l2g_core::numerics::seeded_rng;
use l2g_core::synthdata::{generate, Dataset, GeneratorConfig};
use ndarray::Array2;

use super::unit_rows;

pub fn hard_split(seed: u64) -> (Dataset, RetrievalSplit) {
    let ds = generate(&GeneratorConfig {
        seed,
        ..GeneratorConfig::hard()
    })
    .unwrap();
    let split = make_split(&ds, &mut seeded_rng(seed)).unwrap();
    (ds, split)
}

/// AP for relevant items at ranks 1 and 3 of 3.
pub fn ap_hand_case() -> f64 {
    average_precision(&[true, false, true]).unwrap()
}

/// Random unit embeddings: returns (mAP, oracle mean, oracle σ, CMC).
pub fn random_embedding_map(seed: u64, permutations: usize) -> (f64, f64, f64, [f64; 3]) {
    let (_, split) = hard_split(seed);
    let mut rng = seeded_rng(seed + 1);
    let q = unit_rows(split.query.len(), 16, &mut rng);
    let g = unit_rows(split.gallery.len(), 16, &mut rng);
    let r = evaluate_embeddings(q.view(), &split.query, g.view(), &split.gallery).unwrap();
    let (mean, sd) = random_ranking_map(&split, permutations, &mut seeded_rng(seed + 2));
    (r.map, mean, sd, r.cmc)
}

/// One-hot identity codes give perfect retrieval.
pub fn one_hot_map(seed: u64) -> (f64, f64) {
    let (_, split) = hard_split(seed);
    let code = |id: usize| Array2::from_shape_fn((1, 20), |(_, j)| if j == id { 1.0 } else { 0.0 });
    let stack = |ids: Vec<usize>| {
        let rows: Vec<Array2<f64>> = ids.into_iter().map(code).collect();
        ndarray::concatenate(ndarray::Axis(0), &rows.iter().map(|r| r.view()).collect::<Vec<_>>()).unwrap()
    };
    let q = stack(split.query.iter().map(|e| e.true_id).collect());
    let g = stack(split.gallery.iter().map(|e| e.true_id).collect());
    let r = evaluate_embeddings(q.view(), &split.query, g.view(), &split.gallery).unwrap();
    (r.map, r.cmc[0])
}
