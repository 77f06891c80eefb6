//! Independent oracles shared by the property and acceptance targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rationale_core::joint::{autoregressive_table, flat_table, independent_table, inverse_table};
use rationale_core::{ConditionalNormalization, Factorization, JointTable, PromptKind};

/// Brute-force prediction: `(category, set, votes of the winner)`.
///
/// Each pair's rank is the number of pairs that beat it, counted directly;
/// the kept pairs are those ranked below `k`.
pub fn oracle_predict(table: &JointTable, k: usize) -> (usize, usize, usize) {
    let pairs: Vec<(f64, usize, usize)> = (0..table.n_sets())
        .flat_map(|s| (0..table.n_categories()).map(move |c| (s, c)))
        .map(|(s, c)| (table.joint[s][c], table.categories[c], table.set_indices[s]))
        .collect();
    let beats = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
    };
    let rank = |p: &(f64, usize, usize)| pairs.iter().filter(|q| beats(q, p)).count();
    let kept: Vec<(usize, (f64, usize, usize))> = pairs
        .iter()
        .map(|p| (rank(p), *p))
        .filter(|(r, _)| *r < k)
        .collect();

    let mut best: Option<(usize, usize, f64)> = None;
    for &c in &table.categories {
        let mine: Vec<_> = kept.iter().filter(|(_, p)| p.1 == c).collect();
        if mine.is_empty() {
            continue;
        }
        let votes = mine.len();
        let mass: f64 = {
            let mut ordered: Vec<_> = mine.iter().map(|(r, p)| (*r, p.0)).collect();
            ordered.sort_by_key(|(r, _)| *r);
            ordered.iter().map(|(_, v)| v).sum()
        };
        let wins = match best {
            None => true,
            Some((bc, bv, bm)) => {
                votes > bv || (votes == bv && (mass > bm || (mass == bm && c < bc)))
            }
        };
        if wins {
            best = Some((c, votes, mass));
        }
    }
    let (category, votes, _) = best.expect("k ≥ 1 keeps a pair");
    let set = kept
        .iter()
        .filter(|(_, p)| p.1 == category)
        .min_by_key(|(r, _)| *r)
        .map(|(_, p)| p.2)
        .expect("winner has a kept pair");
    (category, set, votes)
}

fn scores(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-spread..spread)).collect()
}

/// A table from one of the normalized builders on random scores. The
/// cross-product variant is left out: its mass is below one by design.
pub fn random_table(seed: u64, n_sets: usize, n_categories: usize) -> JointTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = rng.random_range(0.1..8.0);
    let id = rng.random_range(0..1000);
    let cond = scores(&mut rng, n_sets * n_categories, spread);
    match rng.random_range(0..4) {
        0 => autoregressive_table(
            id,
            &scores(&mut rng, n_sets, spread),
            &cond,
            n_categories,
            ConditionalNormalization::PerRationaleSet,
            PromptKind::CategoryGivenRationale,
        ),
        1 => independent_table(
            id,
            &scores(&mut rng, n_sets, spread),
            &scores(&mut rng, n_categories, spread),
        ),
        2 => inverse_table(id, &scores(&mut rng, n_categories, spread), &cond),
        _ => flat_table(id, &cond, n_categories),
    }
    .expect("finite scores build a table")
}

/// A table whose joint entries come from a handful of levels, so score and
/// vote ties are common.
pub fn tied_table(seed: u64, n_sets: usize, n_categories: usize) -> JointTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rng.random_range(1..5u32);
    let raw: Vec<Vec<f64>> = (0..n_sets)
        .map(|_| {
            (0..n_categories)
                .map(|_| f64::from(rng.random_range(1..=levels)))
                .collect()
        })
        .collect();
    let total: f64 = raw.iter().flatten().sum();
    let joint: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| row.iter().map(|v| v / total).collect())
        .collect();
    let p_r: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    JointTable {
        image_id: seed as usize,
        set_indices: (0..n_sets).collect(),
        categories: (0..n_categories).collect(),
        p_c_given_r: joint
            .iter()
            .zip(&p_r)
            .map(|(row, m)| row.iter().map(|v| v / m).collect())
            .collect(),
        p_r,
        joint,
        factorization: Factorization::Flat,
    }
}
