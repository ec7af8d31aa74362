use super::*;
use proptest::prelude::*;
use rand::Rng;
use std::cell::RefCell;

fn set(labels: &[u8], scores: &[f64]) -> PredictionSet {
    let ids: Vec<String> = (0..labels.len()).map(|i| format!("c{i:03}")).collect();
    PredictionSet::from_parts(&ids, labels, scores).unwrap()
}

/// Fraction of (positive, negative) pairs ordered correctly, ties count half.
fn pairwise_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Two-sided p value by listing every sign assignment.
fn brute_wilcoxon(ranks: &[f64], w_plus: f64) -> f64 {
    let m = ranks.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << m) {
        let w: f64 = (0..m).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_plus + 1e-9 {
            le += 1;
        }
        if w >= w_plus - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << m) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

#[test]
fn auc_of_hand_examples() {
    assert_eq!(roc_auc_scores(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
    assert_eq!(roc_auc_scores(&[1, 1, 0, 0], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.0);
    assert_eq!(roc_auc_scores(&[0, 1, 0, 1], &[0.5; 4]).unwrap(), 0.5);
    // one discordant pair out of four
    assert_eq!(roc_auc_scores(&[0, 1, 0, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.75);
    assert!(roc_auc_scores(&[1, 1], &[0.1, 0.2]).is_err());
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(cases in prop::collection::vec((0u8..2, 0u8..6), 2..60)) {
        let labels: Vec<u8> = cases.iter().map(|c| c.0).collect();
        // coarse scores to force ties
        let scores: Vec<f64> = cases.iter().map(|c| f64::from(c.1) / 5.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let auc = roc_auc_scores(&labels, &scores).unwrap();
        prop_assert!((auc - pairwise_auc(&labels, &scores)).abs() < 1e-12);
    }

    #[test]
    fn exact_wilcoxon_matches_enumeration(d in prop::collection::vec(-4i32..=4, 1..13)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        for zero in [ZeroMethod::Wilcox, ZeroMethod::Pratt] {
            let (ranks, w) = signed_rank_statistic(&d, zero);
            prop_assume!(!ranks.is_empty());
            let p = wilcoxon_exact_p(&ranks, w);
            prop_assert!((p - brute_wilcoxon(&ranks, w)).abs() < 1e-12);
        }
    }
}

#[test]
fn threshold_metrics_of_hand_example() {
    // tp 2, fp 1, fn 1, tn 2
    let m = threshold_metrics_scores(&[1, 1, 1, 0, 0, 0], &[0.9, 0.5, 0.2, 0.7, 0.1, 0.4], 0.5);
    assert_eq!(m.accuracy, 4.0 / 6.0);
    assert_eq!(m.precision, 2.0 / 3.0);
    assert_eq!(m.recall, 2.0 / 3.0);
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    let none = threshold_metrics_scores(&[1, 0], &[0.1, 0.2], 0.5);
    assert_eq!((none.precision, none.recall, none.f1, none.accuracy), (0.0, 0.0, 0.0, 0.5));
}

#[test]
fn prediction_sets_are_sorted_and_unique() {
    let ids = vec!["b".to_string(), "a".to_string()];
    let s = PredictionSet::from_parts(&ids, &[1, 0], &[0.3, 0.2]).unwrap();
    assert_eq!(s.cases()[0].id, "a");
    assert_eq!(s.labels(), vec![0, 1]);
    let dup = vec!["a".to_string(), "a".to_string()];
    assert!(PredictionSet::from_parts(&dup, &[1, 0], &[0.3, 0.2]).is_err());
    assert!(PredictionSet::from_parts(&ids, &[1, 0], &[f64::NAN, 0.2]).is_err());
    assert!(PredictionSet::from_parts(&ids, &[2, 0], &[0.1, 0.2]).is_err());
}

#[test]
fn five_positive_differences_give_one_sixteenth() {
    let p = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    assert!((p - 0.0625).abs() < 1e-15);
    let p = wilcoxon_signed_rank(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!((p - 0.0625).abs() < 1e-15);
    let a: Vec<f64> = (1..=10).map(f64::from).collect();
    let p = wilcoxon_signed_rank(&a, &[0.0; 10]).unwrap();
    assert!((p - 2.0 / 1024.0).abs() < 1e-15);
}

#[test]
fn wilcoxon_edge_cases() {
    assert_eq!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
    assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    assert!(wilcoxon_signed_rank(&[], &[]).is_err());
    // symmetric differences: W+ sits at the centre of the distribution
    let p = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0], &[0.0; 4]).unwrap();
    assert_eq!(p, 1.0);
    // 2000 positive differences: normal branch, p underflow stays positive
    let a: Vec<f64> = (1..=2000).map(f64::from).collect();
    let p = wilcoxon_signed_rank(&a, &vec![0.0; 2000]).unwrap();
    assert!(p > 0.0 && p < 1e-100);
}

#[test]
fn pratt_keeps_zeros_in_the_ranking() {
    let d = [0.0, 1.0, 2.0, -3.0];
    let (wr, ww) = signed_rank_statistic(&d, ZeroMethod::Wilcox);
    assert_eq!((wr, ww), (vec![1.0, 2.0, 3.0], 3.0));
    let (pr, pw) = signed_rank_statistic(&d, ZeroMethod::Pratt);
    assert_eq!((pr, pw), (vec![2.0, 3.0, 4.0], 5.0));
}

#[test]
fn exact_and_normal_branches_agree_at_the_switch() {
    let mut rng = seeded(7);
    for _ in 0..50 {
        let d: Vec<f64> = (0..EXACT_MAX).map(|_| rng.random_range(-1.0..1.5)).collect();
        let (ranks, w) = signed_rank_statistic(&d, ZeroMethod::Wilcox);
        let exact = wilcoxon_exact_p(&ranks, w);
        let normal = wilcoxon_normal_p(&ranks, w);
        assert!((exact - normal).abs() < 0.02, "exact {exact} normal {normal}");
    }
}

#[test]
fn ties_use_the_corrected_variance() {
    // classical formula: m(m+1)(2m+1)/24 - sum(t^3 - t)/48
    let d = [1.0, 1.0, 1.0, 2.0, 3.0, 3.0, -4.0, 5.0];
    let (ranks, _) = signed_rank_statistic(&d, ZeroMethod::Wilcox);
    let m = 8.0;
    let classical = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - ((27.0 - 3.0) + (8.0 - 2.0)) / 48.0;
    let ours = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    assert!((classical - ours).abs() < 1e-12);
}

fn noisy_set(n: usize, seed: u64, signal: f64) -> PredictionSet {
    let mut rng = seeded(seed);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| (signal * f64::from(l) + rng.random_range(0.0..1.0)) / (1.0 + signal))
        .collect();
    set(&labels, &scores)
}

#[test]
fn bootstrap_reports_every_metric_reproducibly() {
    let p = noisy_set(40, 1, 0.5);
    let a = bootstrap(&p, 100, 0.5, 3).unwrap();
    let b = bootstrap(&p, 100, 0.5, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, bootstrap(&p, 100, 0.5, 4).unwrap());
    assert_eq!(a.results.len(), 5);
    for r in &a.results {
        assert_eq!(r.replicates.len(), 100);
        assert!(r.ci_lo <= r.point && r.point <= r.ci_hi, "{r:?}");
        assert_eq!(r.seed, 3);
    }
    let full = roc_auc(&p).unwrap();
    let auc = a.get(Metric::Auc);
    assert!(auc.ci_lo < full && full < auc.ci_hi);
    let report = MetricReport::from_bootstrap(&a);
    assert_eq!(report.get(Metric::F1).point, a.get(Metric::F1).point);
}

#[test]
fn bootstrap_of_perfect_classifier_is_degenerate() {
    let p = set(&[0, 1, 0, 1, 0, 1], &[0.1, 0.9, 0.2, 0.8, 0.3, 0.7]);
    let r = bootstrap(&p, 50, 0.5, 0).unwrap();
    let auc = r.get(Metric::Auc);
    assert!(auc.replicates.iter().all(|&v| v == 1.0));
    assert_eq!((auc.point, auc.ci_lo, auc.ci_hi), (1.0, 1.0, 1.0));
}

#[test]
fn small_sets_trigger_redraws() {
    let p = set(&[0, 1, 0], &[0.1, 0.9, 0.2]);
    let r = bootstrap(&p, 200, 0.5, 0).unwrap();
    assert!(r.redraws > 0);
    assert!(bootstrap(&set(&[1, 1], &[0.1, 0.2]), 10, 0.5, 0).is_err());
}

#[test]
fn comparison_pairs_index_sets() {
    let a = noisy_set(30, 1, 1.0);
    let b = noisy_set(30, 2, 0.1);
    let log = RefCell::new(Vec::new());
    let report = compare_methods_with(&a, &b, 20, 5, |p, idx| {
        log.borrow_mut().push(idx.to_vec());
        let (l, s) = p.resample(idx);
        roc_auc_scores(&l, &s)
    })
    .unwrap();
    let log = log.into_inner();
    assert_eq!(log.len(), 40);
    assert!(log.chunks(2).all(|pair| pair[0] == pair[1]));
    assert_eq!(report.metric_a.replicates.len(), 20);

    let plain = compare_methods(&a, &b, 20, 5).unwrap();
    assert_eq!(plain.metric_a.replicates, report.metric_a.replicates);
    assert_eq!(plain.p_value, report.p_value);
}

#[test]
fn comparison_detects_a_clear_gap() {
    let a = noisy_set(40, 1, 2.0);
    let b = noisy_set(40, 2, 0.0);
    let r = compare_methods(&a, &b, 100, 0).unwrap();
    assert!(r.metric_a.point > r.metric_b.point);
    assert!(r.significant && r.p_value < 1e-6);
    let same = compare_methods(&a, &a, 100, 0).unwrap();
    assert_eq!(same.p_value, 1.0);
    assert!(!same.significant);
}

#[test]
fn comparison_requires_the_same_cases() {
    let a = noisy_set(10, 1, 1.0);
    let b = noisy_set(12, 1, 1.0);
    assert!(compare_methods(&a, &b, 10, 0).is_err());
    let flipped = set(
        &a.labels().iter().map(|l| 1 - l).collect::<Vec<_>>(),
        &a.scores(),
    );
    assert!(compare_methods(&a, &flipped, 10, 0).is_err());
}

#[test]
fn confusion_matrix_three_one_one_five() {
    let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let scores = [0.9, 0.8, 0.7, 0.1, 0.6, 0.2, 0.2, 0.2, 0.2, 0.2];
    let m = threshold_metrics_scores(&labels, &scores, 0.5);
    assert_eq!((m.precision, m.recall, m.accuracy), (0.75, 0.75, 0.8));
    assert!((m.f1 - 0.75).abs() < 1e-15);
    assert_eq!(roc_auc_scores(&[1, 0, 1, 0], &[0.8, 0.7, 0.6, 0.5]).unwrap(), 0.75);
}

#[test]
fn percentile_ci_of_one_to_hundred() {
    let reps: Vec<f64> = (1..=100).rev().map(f64::from).collect();
    let (mean, lo, hi) = percentile_ci(&reps);
    // rank = p/100 * 99 on the sorted values 1..=100
    assert_eq!(mean, 50.5);
    assert!((lo - (1.0 + 0.025 * 99.0)).abs() < 1e-12);
    assert!((hi - (1.0 + 0.975 * 99.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms_and_flips(cases in prop::collection::vec((0u8..2, -5.0f64..5.0), 2..50)) {
        let labels: Vec<u8> = cases.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = cases.iter().map(|c| c.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let auc = roc_auc_scores(&labels, &scores).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-3.0 * s).exp())).collect();
        prop_assert_eq!(auc, roc_auc_scores(&labels, &squashed).unwrap());
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[0] < w[1]) {
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auc + roc_auc_scores(&labels, &flipped).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn ranked_against_anti_ranked_is_significant() {
    let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 2 == 0)).collect();
    let good: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.6 + i as f64 / 100.0 } else { i as f64 / 100.0 }).collect();
    let bad: Vec<f64> = good.iter().map(|s| 1.0 - s).collect();
    let r = compare_methods(&set(&labels, &good), &set(&labels, &bad), 100, 0).unwrap();
    assert!(r.p_value < 0.05 && r.significant);
    assert_eq!(r.metric_a.point, 1.0);
    assert_eq!(r.metric_b.point, 0.0);
}

#[test]
fn pairing_holds_under_an_index_hash_metric() {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let a = noisy_set(25, 1, 1.0);
    let b = noisy_set(25, 2, 1.0);
    // multiset hash of the index set, identical for both methods iff paired
    let hash = |_: &PredictionSet, idx: &[usize]| {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        let mut h = DefaultHasher::new();
        sorted.hash(&mut h);
        Ok((h.finish() % 1_000_003) as f64)
    };
    let r = compare_methods_with(&a, &b, 50, 9, hash).unwrap();
    assert_eq!(r.metric_a.replicates, r.metric_b.replicates);
    assert_eq!(r.p_value, 1.0);
}

#[test]
fn bootstrap_interval_usually_covers_the_full_set_auc() {
    let mut covered = 0;
    let trials = 40;
    for t in 0..trials {
        let p = noisy_set(200, 100 + t, 0.6);
        let full = roc_auc(&p).unwrap();
        let r = bootstrap(&p, 100, 0.5, t).unwrap();
        let auc = r.get(Metric::Auc);
        if auc.ci_lo <= full && full <= auc.ci_hi {
            covered += 1;
        }
    }
    assert!(covered as f64 >= 0.95 * trials as f64, "covered {covered} of {trials}");
}

#[test]
fn point_stays_inside_the_interval() {
    let constant = vec![0.7; 20];
    let (point, lo, hi) = percentile_ci(&constant);
    assert_eq!((point, lo, hi), (0.7, 0.7, 0.7));
    let mut skewed = vec![0.5; 99];
    skewed.push(1.0);
    let (point, lo, hi) = percentile_ci(&skewed);
    assert!(lo <= point && point <= hi);
}
