use proptest::prelude::*;
use semergy_core::clustering::{exact_match_cluster, Clustering, Strategy};
use semergy_core::scoring::{
    cluster_energy, cluster_probs, normalized_response_probs, score_question, semantic_entropy,
    Method, ScoreConfig,
};
use semergy_core::synth::{brute_force_scores, generate_config, ClusterPlan, RegimeSpec, SynthConfig};
use semergy_core::QuestionRecord;

fn synth_questions(seed: u64, count: usize, n: usize, max_t: usize) -> Vec<QuestionRecord> {
    let config = SynthConfig::new(
        seed,
        vec![RegimeSpec::new(ClusterPlan::MultiCluster, count, n, 1)
            .token_len(1, max_t)
            .logits(6.0, 4.0)
            .clusters(4)],
    );
    generate_config(&config, 1).unwrap().questions
}

fn random_clustering(n: usize, raw: &[usize]) -> Clustering {
    // Relabel to contiguous ids in order of first appearance.
    let mut map = std::collections::HashMap::new();
    let assignments: Vec<usize> = raw[..n]
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect();
    Clustering { k: map.len(), assignments, strategy: Strategy::Exact }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn probabilities_normalize(seed in any::<u64>(), n in 1usize..10, raw in prop::collection::vec(0usize..4, 10)) {
        let q = &synth_questions(seed, 1, n, 12)[0];
        let c = random_clustering(n, &raw);
        for length_normalized in [false, true] {
            let p = normalized_response_probs(q, length_normalized).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let m = cluster_probs(q, &c, length_normalized).unwrap();
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn semantic_entropy_range(seed in any::<u64>(), n in 1usize..10, raw in prop::collection::vec(0usize..4, 10)) {
        let q = &synth_questions(seed, 1, n, 12)[0];
        let c = random_clustering(n, &raw);
        let h = semantic_entropy(q, &c, false).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (c.k as f64).ln() + 1e-12);
        prop_assert_eq!(h == 0.0, c.k == 1);
    }

    #[test]
    fn logit_shift_moves_only_energies(seed in any::<u64>(), shift in -20.0f64..20.0) {
        let q = synth_questions(seed, 1, 6, 10).remove(0);
        let c = exact_match_cluster(&q.responses).unwrap();
        let mut shifted = q.clone();
        for r in &mut shifted.responses {
            for t in &mut r.tokens {
                t.chosen_logit += shift;
            }
        }
        let cfg = ScoreConfig::default();
        let before = score_question(&q, &c, &cfg).unwrap();
        let after = score_question(&shifted, &c, &cfg).unwrap();
        let sizes = c.sizes();
        let n = q.responses.len() as f64;
        for (b, a) in before.iter().zip(&after) {
            for m in Method::ALL {
                let delta = a.scores[&m] - b.scores[&m];
                // Cluster energy divides by n, so a member's share of the
                // shift is |C_k| / n; -shift exactly when k = 1.
                let expect = match m {
                    Method::ResponseEnergy => -shift,
                    Method::SemanticEnergy => -shift * sizes[b.cluster] as f64 / n,
                    _ => 0.0,
                };
                prop_assert!((delta - expect).abs() <= 1e-9, "{m}: {delta} vs {expect}");
            }
        }
    }

    #[test]
    fn moving_a_response_shifts_cluster_energy_by_e_over_n(seed in any::<u64>(), n in 2usize..10) {
        let q = &synth_questions(seed, 1, n, 8)[0];
        // Response 0 alone in cluster 0 vs. response 0 joining cluster 1.
        let mut split = vec![1usize; n];
        split[0] = 0;
        let before = Clustering { assignments: split, k: 2, strategy: Strategy::Exact };
        let merged = Clustering { assignments: vec![0; n], k: 1, strategy: Strategy::Exact };
        let e0 = response_energy_of(q, 0);
        let gain = cluster_energy(q, &merged, 0, 1.0).unwrap() - cluster_energy(q, &before, 1, 1.0).unwrap();
        prop_assert!((gain - e0 / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn exact_match_scores_are_permutation_invariant(seed in any::<u64>(), rot in 0usize..6) {
        let q = synth_questions(seed, 1, 6, 8).remove(0);
        let mut p = q.clone();
        p.responses.rotate_left(rot);
        p.responses.swap(0, 5);
        let cfg = ScoreConfig::default();
        let rows_q = score_question(&q, &exact_match_cluster(&q.responses).unwrap(), &cfg).unwrap();
        let rows_p = score_question(&p, &exact_match_cluster(&p.responses).unwrap(), &cfg).unwrap();
        for row in &rows_q {
            let other = rows_p.iter().find(|r| r.response_id == row.response_id).unwrap();
            for m in Method::ALL {
                // Summation order changes with the permutation.
                prop_assert!((row.scores[&m] - other.scores[&m]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scores_match_brute_force(seed in any::<u64>(), n in 1usize..=10) {
        let q = &synth_questions(seed, 1, n, 12)[0];
        let c = exact_match_cluster(&q.responses).unwrap();
        let fast = score_question(q, &c, &ScoreConfig::default()).unwrap();
        let slow = brute_force_scores(q, &c).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            for m in Method::ALL {
                prop_assert!((a.scores[&m] - b.scores[&m]).abs() <= 1e-9);
            }
        }
    }
}

fn response_energy_of(q: &QuestionRecord, i: usize) -> f64 {
    semergy_core::scoring::response_energy(&q.responses[i], 1.0).unwrap()
}

#[test]
fn larger_clusters_of_confident_members_have_lower_energy() {
    // All logits positive, so every response energy is negative.
    let q = &synth_questions(5, 1, 6, 8)[0];
    let mut energies = Vec::new();
    for size in 1..=6 {
        let assignments: Vec<usize> = (0..6).map(|i| if i < size { 0 } else { 1 }).collect();
        let k = if size == 6 { 1 } else { 2 };
        energies.push(cluster_energy(q, &Clustering { assignments, k, strategy: Strategy::Exact }, 0, 1.0).unwrap());
    }
    assert!(energies.windows(2).all(|w| w[1] < w[0]), "{energies:?}");
}

#[test]
fn scores_finite_on_every_synthetic_question() {
    for q in synth_questions(99, 200, 8, 12) {
        let c = exact_match_cluster(&q.responses).unwrap();
        for row in score_question(&q, &c, &ScoreConfig::default()).unwrap() {
            assert!(row.scores.values().all(|v| v.is_finite()));
        }
    }
}
