mod common;

use common::{oracle_predict, random_table, tied_table};
use proptest::prelude::*;
use rationale_core::joint::autoregressive_table;
use rationale_core::metrics::{evaluate, predict, GoldLabel};
use rationale_core::{ConditionalNormalization, JointTable, LabelSpace, PromptKind, Vocabulary};

const TOL: f64 = 1e-9;

fn table_dims() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..12, 1usize..12)
}

fn check_distributions(t: &JointTable) -> std::result::Result<(), TestCaseError> {
    let pr: f64 = t.p_r.iter().sum();
    prop_assert!((pr - 1.0).abs() < TOL, "p_r sums to {pr}");
    prop_assert!((t.total_mass() - 1.0).abs() < TOL);
    for (row, pr) in t.p_c_given_r.iter().zip(&t.p_r) {
        let sum: f64 = row.iter().sum();
        if *pr > 0.0 {
            prop_assert!((sum - 1.0).abs() < TOL, "conditional row sums to {sum}");
        }
    }
    for (s, row) in t.joint.iter().enumerate() {
        for (c, j) in row.iter().enumerate() {
            prop_assert!(*j >= 0.0);
            prop_assert!((j - t.p_r[s] * t.p_c_given_r[s][c]).abs() < TOL);
        }
    }
    Ok(())
}

fn remap(t: &JointTable, f: impl Fn(f64) -> f64) -> JointTable {
    JointTable {
        joint: t
            .joint
            .iter()
            .map(|row| row.iter().map(|v| f(*v)).collect())
            .collect(),
        ..t.clone()
    }
}

proptest! {
    #[test]
    fn every_builder_yields_normalized_tables((seed, s, c) in table_dims()) {
        check_distributions(&random_table(seed, s, c))?;
    }

    #[test]
    fn cross_product_mass_never_exceeds_one(
        (seed, s, c) in table_dims(),
    ) {
        let t = random_table(seed, s, c);
        let set_scores: Vec<f64> = t.p_r.iter().map(|p| p.ln()).collect();
        let cond: Vec<f64> = (0..s * c).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let x = autoregressive_table(
            0, &set_scores, &cond, c, ConditionalNormalization::CrossProduct,
            PromptKind::CategoryGivenRationale,
        ).unwrap();
        prop_assert!(x.total_mass() <= 1.0 + TOL);
        let q: f64 = x.p_c_given_r.iter().flatten().sum();
        prop_assert!((q - 1.0).abs() < TOL);
    }

    #[test]
    fn set_scores_are_shift_invariant(
        (seed, s, c) in table_dims(),
        shift in -50.0f64..50.0,
    ) {
        let t = random_table(seed, s, c);
        let set_scores: Vec<f64> = t.p_r.iter().map(|p| p.ln()).collect();
        let cond: Vec<f64> = (0..c)
            .flat_map(|ci| (0..s).map(move |si| (si, ci)))
            .map(|(si, ci)| t.p_c_given_r[si][ci].max(1e-300).ln())
            .collect();
        let build = |scores: &[f64]| autoregressive_table(
            0, scores, &cond, c, ConditionalNormalization::PerRationaleSet,
            PromptKind::CategoryGivenRationale,
        ).unwrap();
        let base = build(&set_scores);
        let moved: Vec<f64> = set_scores.iter().map(|v| v + shift).collect();
        let shifted = build(&moved);
        for (a, b) in base.joint.iter().flatten().zip(shifted.joint.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_matches_brute_force(
        (seed, s, c) in table_dims(),
        k in 1usize..40,
        tied in any::<bool>(),
    ) {
        let t = if tied { tied_table(seed, s, c) } else { random_table(seed, s, c) };
        let p = predict(&t, k).unwrap();
        let (category, set, votes) = oracle_predict(&t, k);
        prop_assert_eq!((p.category, p.set), (category, set));
        let won = p.votes.iter().find(|(c, _)| *c == category).map(|(_, v)| *v);
        prop_assert_eq!(won, Some(votes));
        prop_assert_eq!(p.ranked.len(), k.min(s * c));
        prop_assert_eq!(p.votes.iter().map(|(_, v)| v).sum::<usize>(), p.ranked.len());
    }

    #[test]
    fn k_one_is_the_joint_argmax((seed, s, c) in table_dims(), tied in any::<bool>()) {
        let t = if tied { tied_table(seed, s, c) } else { random_table(seed, s, c) };
        let (bs, bc) = t.argmax().unwrap();
        let p = predict(&t, 1).unwrap();
        prop_assert_eq!((p.set, p.category), (t.set_indices[bs], t.categories[bc]));
    }

    /// Rank-only inputs: without a vote tie the sum tie-break never fires,
    /// so any strictly increasing map of the joint leaves the prediction
    /// unchanged.
    #[test]
    fn monotone_maps_preserve_untied_predictions(
        (seed, s, c) in table_dims(),
        k in 1usize..20,
        power in 0.2f64..4.0,
    ) {
        let t = random_table(seed, s, c);
        let p = predict(&t, k).unwrap();
        let top = p.votes.iter().map(|(_, v)| *v).max().unwrap();
        prop_assume!(p.votes.iter().filter(|(_, v)| *v == top).count() == 1);
        for mapped in [remap(&t, |v| v.powf(power)), remap(&t, |v| 3.0 * v + 1.0), remap(&t, f64::ln_1p)] {
            let q = predict(&mapped, k).unwrap();
            prop_assert_eq!((q.category, q.set), (p.category, p.set));
        }
    }

    /// Relabeling rows and columns moves the argmax with them.
    #[test]
    fn argmax_is_permutation_equivariant(
        (seed, s, c) in table_dims(),
        row_key in any::<u64>(),
        col_key in any::<u64>(),
    ) {
        let t = random_table(seed, s, c);
        let perm = |n: usize, key: u64| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|i| (*i as u64 + 1).wrapping_mul(key | 1).rotate_left(17));
            idx
        };
        let rows = perm(s, row_key);
        let cols = perm(c, col_key);
        let permuted = JointTable {
            set_indices: rows.iter().map(|&r| t.set_indices[r]).collect(),
            categories: cols.iter().map(|&q| t.categories[q]).collect(),
            p_r: rows.iter().map(|&r| t.p_r[r]).collect(),
            p_c_given_r: rows.iter().map(|&r| cols.iter().map(|&q| t.p_c_given_r[r][q]).collect()).collect(),
            joint: rows.iter().map(|&r| cols.iter().map(|&q| t.joint[r][q]).collect()).collect(),
            ..t.clone()
        };
        let distinct = {
            let mut v: Vec<f64> = t.joint.iter().flatten().copied().collect();
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|w| w[0] != w[1])
        };
        prop_assume!(distinct);
        let (s0, c0) = t.argmax().unwrap();
        let (s1, c1) = permuted.argmax().unwrap();
        prop_assert_eq!(
            (permuted.set_indices[s1], permuted.categories[c1]),
            (t.set_indices[s0], t.categories[c0])
        );
    }

    #[test]
    fn quads_partition_the_examples(
        n_categories in 1usize..6,
        n_rationales in 1usize..6,
        picks in prop::collection::vec((0usize..6, 0usize..6, 0usize..6, 0usize..6), 0..40),
    ) {
        let vocab = Vocabulary::new(
            (0..n_categories).map(|i| format!("cat{i}")).collect(),
            (0..n_rationales).map(|i| format!("rat{i}")).collect(),
        ).unwrap();
        let sets: Vec<Vec<usize>> = (0..n_rationales).map(|r| vec![r]).collect();
        let space = LabelSpace::new(vocab, sets, 32).unwrap();
        let mut preds = Vec::new();
        let mut gold = Vec::new();
        let mut oracle = [0usize; 4];
        for (id, (pc, ps, gc, gr)) in picks.into_iter().enumerate() {
            let (pc, ps, gc, gr) = (pc % n_categories, ps % n_rationales, gc % n_categories, gr % n_rationales);
            let table = tied_table(id as u64, n_rationales, n_categories);
            let mut p = predict(&JointTable { image_id: id, ..table }, 1).unwrap();
            p.category = pc;
            p.set = ps;
            preds.push(p);
            gold.push(GoldLabel { id, category: gc, rationales: vec![gr] });
            oracle[usize::from(pc != gc) * 2 + usize::from(ps != gr)] += 1;
        }
        let quad = evaluate(&preds, &gold, &space).unwrap();
        prop_assert_eq!(quad.counts, oracle);
        prop_assert_eq!(quad.counts.iter().sum::<usize>(), quad.n);
        if quad.n > 0 {
            prop_assert!((quad.rr + quad.rw + quad.wr + quad.ww - 1.0).abs() < 1e-12);
        }
    }
}
