//! Top-k pair selection with plurality voting, and the four-way
//! category/rationale correctness breakdown.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoderParams;
use crate::error::{Error, Result};
use crate::joint::{joint_tables, EncoderScorer, Factorization, JointTable, LabelSpace};
use crate::prompt::{CategoryId, RationaleId};
use crate::world::{dataset_stats, Example, World};

/// Pairs kept before voting when no override is given.
pub const HARNESS_DEFAULT_K: usize = 5;

/// Mean rationales per example, rounded, at least 1.
pub fn default_k(examples: &[Example]) -> Result<usize> {
    if examples.is_empty() {
        return Err(Error::Contract("default_k of an empty dataset".into()));
    }
    let mean = dataset_stats(examples, 0).mean_rationales;
    Ok((mean.round() as usize).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub category: CategoryId,
    /// Row index into the table's rationale sets.
    pub set: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: usize,
    pub ranked: Vec<RankedPair>,
    pub category: CategoryId,
    /// Label-space index of the predicted rationale set.
    pub set: usize,
    /// `(category, votes)` for every category that received a vote,
    /// ascending by category.
    pub votes: Vec<(CategoryId, usize)>,
}

/// Order of the ranked list: score descending, then lower category, then
/// lower set.
pub fn pair_order(a: &RankedPair, b: &RankedPair) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.category.cmp(&b.category))
        .then(a.set.cmp(&b.set))
}

/// Keep the `k` best pairs, vote on their categories, and explain the
/// winning category with its best-scoring pair.
///
/// Vote ties go to the larger summed joint score, then the lower category.
pub fn predict(table: &JointTable, k: usize) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if table.n_sets() == 0 || table.n_categories() == 0 {
        return Err(Error::Contract(format!(
            "empty joint table for image {}",
            table.image_id
        )));
    }
    let mut pairs = Vec::with_capacity(table.n_sets() * table.n_categories());
    for (row, &set) in table.set_indices.iter().enumerate() {
        for (col, &category) in table.categories.iter().enumerate() {
            pairs.push(RankedPair {
                category,
                set,
                score: table.joint[row][col],
            });
        }
    }
    pairs.sort_by(pair_order);
    pairs.truncate(k);

    let mut tally: BTreeMap<CategoryId, (usize, f64)> = BTreeMap::new();
    for p in &pairs {
        let e = tally.entry(p.category).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += p.score;
    }
    // BTreeMap iterates ascending, so strict comparisons keep the lower id.
    let mut winner: Option<(CategoryId, usize, f64)> = None;
    for (&c, &(votes, mass)) in &tally {
        let better = match winner {
            None => true,
            Some((_, wv, wm)) => votes > wv || (votes == wv && mass > wm),
        };
        if better {
            winner = Some((c, votes, mass));
        }
    }
    let (category, _, _) = winner.expect("at least one pair");
    let set = pairs
        .iter()
        .find(|p| p.category == category)
        .expect("voted category has a pair")
        .set;
    Ok(Prediction {
        image_id: table.image_id,
        ranked: pairs,
        category,
        set,
        votes: tally.into_iter().map(|(c, (v, _))| (c, v)).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsQuad {
    pub rr: f64,
    pub rw: f64,
    pub wr: f64,
    pub ww: f64,
    /// `[rr, rw, wr, ww]`.
    pub counts: [usize; 4],
    pub n: usize,
}

impl MetricsQuad {
    pub fn from_counts(counts: [usize; 4]) -> Self {
        let n: usize = counts.iter().sum();
        let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        MetricsQuad {
            rr: frac(counts[0]),
            rw: frac(counts[1]),
            wr: frac(counts[2]),
            ww: frac(counts[3]),
            counts,
            n,
        }
    }

    pub fn merge(&self, other: &MetricsQuad) -> MetricsQuad {
        let mut c = self.counts;
        for (a, b) in c.iter_mut().zip(other.counts) {
            *a += b;
        }
        MetricsQuad::from_counts(c)
    }
}

/// Gold labels of one evaluated example.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldLabel {
    pub id: usize,
    pub category: CategoryId,
    pub rationales: Vec<RationaleId>,
}

impl From<&Example> for GoldLabel {
    fn from(ex: &Example) -> Self {
        GoldLabel {
            id: ex.id,
            category: ex.category,
            rationales: ex.rationales.clone(),
        }
    }
}

/// Classify each gold example by whether its predicted category and
/// rationale set (compared as sets) are right.
pub fn evaluate(
    predictions: &[Prediction],
    gold: &[GoldLabel],
    space: &LabelSpace,
) -> Result<MetricsQuad> {
    let by_id: BTreeMap<usize, &Prediction> = predictions.iter().map(|p| (p.image_id, p)).collect();
    let missing: Vec<usize> = gold
        .iter()
        .filter(|g| !by_id.contains_key(&g.id))
        .map(|g| g.id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Lookup(format!("no prediction for ids {missing:?}")));
    }
    let mut counts = [0usize; 4];
    for g in gold {
        let p = by_id[&g.id];
        let mut want = g.rationales.clone();
        want.sort_unstable();
        let cat_ok = p.category == g.category;
        let rat_ok = space.sets().get(p.set) == Some(&want);
        let slot = match (cat_ok, rat_ok) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts[slot] += 1;
    }
    Ok(MetricsQuad::from_counts(counts))
}

/// Observed training sets of a world as its label space.
pub fn label_space(world: &World, context_len: usize) -> Result<LabelSpace> {
    LabelSpace::new(
        world.vocabulary.clone(),
        world.train_stats().observed_sets,
        context_len,
    )
}

/// Score `examples` with frozen parameters and evaluate them.
pub fn evaluate_examples(
    params: &DualEncoderParams,
    space: &LabelSpace,
    examples: &[Example],
    factorization: Factorization,
    k: usize,
) -> Result<(Vec<Prediction>, MetricsQuad)> {
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let ids: Vec<usize> = examples.iter().map(|e| e.id).collect();
    let scorer = EncoderScorer::new(params, &images)?;
    let tables = joint_tables(&scorer, space, factorization, &ids)?;
    let predictions = tables
        .iter()
        .map(|t| predict(t, k))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<GoldLabel> = examples.iter().map(GoldLabel::from).collect();
    let quad = evaluate(&predictions, &gold, space)?;
    Ok((predictions, quad))
}

/// Evaluate parameters trained elsewhere on another world's test split,
/// with prompts rebuilt from that world's names and observed sets.
pub fn zero_shot_evaluate(
    params: &DualEncoderParams,
    target: &World,
    factorization: Factorization,
    k: usize,
) -> Result<MetricsQuad> {
    let space = label_space(target, params.config().context_len)?;
    Ok(evaluate_examples(params, &space, &target.test, factorization, k)?.1)
}

/// `1 / (categories · rationale sets)`.
pub fn chance_rr(space: &LabelSpace) -> f64 {
    1.0 / (space.n_categories() * space.n_sets()) as f64
}

pub const RESULTS_FORMAT_VERSION: u32 = 1;
pub const RESULTS_CSV_HEADER: &str = "run_id,dataset,ablation,RR,RW,WR,WW,n,seed,format_version";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub dataset: String,
    pub ablation: String,
    pub quad: MetricsQuad,
    pub seed: u64,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let q = &r.quad;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{RESULTS_FORMAT_VERSION}",
            r.run_id, r.dataset, r.ablation, q.rr, q.rw, q.wr, q.ww, q.n, r.seed
        );
    }
    out
}

/// Aligned text table: percentages, columns RR↑ RW↓ WR↓ WW↓.
pub fn results_table(rows: &[ResultRow]) -> String {
    let w_data = rows
        .iter()
        .map(|r| r.dataset.len())
        .max()
        .unwrap_or(0)
        .max(7);
    let w_abl = rows
        .iter()
        .map(|r| r.ablation.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut out = format!(
        "{:<w_data$}  {:<w_abl$}  {:>7} {:>7} {:>7} {:>7} {:>6} {:>5}\n",
        "dataset", "ablation", "RR↑", "RW↓", "WR↓", "WW↓", "n", "seed"
    );
    for r in rows {
        let q = &r.quad;
        let _ = writeln!(
            out,
            "{:<w_data$}  {:<w_abl$}  {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>5}",
            r.dataset,
            r.ablation,
            100.0 * q.rr,
            100.0 * q.rw,
            100.0 * q.wr,
            100.0 * q.ww,
            q.n,
            r.seed
        );
    }
    out
}
