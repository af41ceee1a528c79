//! Metric cores against exhaustive counting and closed forms.

use ndarray::{array, Array2};
use rand::Rng;

use rft_core::nn::rng;
use rft_lab::eval::{
    deepfake_metrics, frechet_distance, preference_metrics, retrieval_topk, swap_flags, Confusion, Interval,
    MetricsReport,
};

fn random_scores(n: usize, labels: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let scores = Array2::from_shape_fn((n, labels), |_| r.random_range(-1.0..1.0));
    (scores, (0..n).map(|i| i % labels).collect())
}

/// Rank of motion `i` among itself and every motion of another label.
fn full_rank(scores: &Array2<f64>, labels: &[usize], i: usize) -> usize {
    let c = labels[i];
    let t = scores[[i, c]];
    (0..labels.len())
        .filter(|&j| labels[j] != c && (scores[[j, c]] > t || (scores[[j, c]] == t && j < i)))
        .count()
}

#[test]
fn retrieval_with_every_candidate_matches_exhaustive_ranking() {
    for seed in 0..10 {
        let (mut scores, labels) = random_scores(60, 4, seed);
        // Coarse scores force ties.
        scores.mapv_inplace(|v| (v * 4.0).round() / 4.0);
        let others = 60 - 15;
        let ks: Vec<usize> = (1..=others + 1).collect();
        let got = retrieval_topk(&scores, &labels, others + 1, &ks, seed).unwrap();
        for (k, acc) in got {
            let hits = (0..60).filter(|&i| full_rank(&scores, &labels, i) < k).count();
            assert_eq!(acc, hits as f64 / 60.0, "k={k}");
        }
    }
}

#[test]
fn retrieval_on_a_subset_never_ranks_worse_than_on_all_candidates() {
    let (scores, labels) = random_scores(200, 8, 3);
    let ks = [1, 2, 3, 5, 10, 32];
    let got = retrieval_topk(&scores, &labels, 32, &ks, 9).unwrap();
    for (k, acc) in &got {
        let full = (0..200).filter(|&i| full_rank(&scores, &labels, i) < *k).count() as f64 / 200.0;
        assert!(*acc >= full, "k={k}");
    }
    assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
    assert_eq!(got.last().unwrap().1, 1.0);
    assert_eq!(got, retrieval_topk(&scores, &labels, 32, &ks, 9).unwrap());
}

#[test]
fn retrieval_rejects_bad_requests() {
    let (scores, labels) = random_scores(20, 4, 1);
    assert!(retrieval_topk(&scores, &labels, 21, &[1], 0).is_err());
    assert!(retrieval_topk(&scores, &labels, 17, &[1], 0).is_err());
    assert!(retrieval_topk(&scores, &labels, 8, &[0], 0).is_err());
    assert!(retrieval_topk(&scores, &labels, 8, &[9], 0).is_err());
    assert!(retrieval_topk(&scores.slice(ndarray::s![..10, ..]).to_owned(), &labels, 8, &[1], 0).is_err());
}

#[test]
fn perfect_inverted_and_tied_preference_scorers() {
    let n = 500;
    let swapped = swap_flags(n, 4);
    let mut r = rng::seeded(5);
    let loser: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let winner: Vec<f64> = loser.iter().map(|l| l + 0.5).collect();
    let perfect = preference_metrics(&winner, &loser, &swapped).unwrap();
    assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
    let inverted = preference_metrics(&loser, &winner, &swapped).unwrap();
    assert_eq!(inverted.accuracy, 1.0 - perfect.accuracy);
    // Equal scores predict "first wins": accuracy is the unswapped share.
    let constant = preference_metrics(&vec![0.3; n], &vec![0.3; n], &swapped).unwrap();
    let unswapped = swapped.iter().filter(|s| !**s).count() as f64 / n as f64;
    assert_eq!(constant.accuracy, unswapped);
    assert_eq!(constant.recall, 1.0);
    assert!(preference_metrics(&winner, &loser[1..], &swapped).is_err());
}

#[test]
fn confusion_matches_exhaustive_counting() {
    let mut r = rng::seeded(6);
    for _ in 0..20 {
        let n = r.random_range(1..200);
        let prob: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let real: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        let m = deepfake_metrics(&prob, &real).unwrap();
        let mut cells = [[0usize; 2]; 2];
        for (p, t) in prob.iter().zip(&real) {
            cells[(*p >= 0.5) as usize][*t as usize] += 1;
        }
        let (tp, fp, tn, fn_) = (cells[1][1], cells[1][0], cells[0][0], cells[0][1]);
        let pred: Vec<bool> = prob.iter().map(|p| *p >= 0.5).collect();
        assert_eq!(Confusion::from_predictions(&pred, &real), Confusion { tp, fp, tn, fn_ });
        assert_eq!(m.accuracy, (tp + tn) as f64 / n as f64);
        if tp + fp > 0 {
            assert_eq!(m.precision, tp as f64 / (tp + fp) as f64);
        }
        if tp + fn_ > 0 {
            assert_eq!(m.recall, tp as f64 / (tp + fn_) as f64);
        }
    }
}

#[test]
fn perfect_and_all_positive_classifiers() {
    let real: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
    let perfect: Vec<f64> = real.iter().map(|&r| if r { 0.9 } else { 0.1 }).collect();
    let m = deepfake_metrics(&perfect, &real).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    let m = deepfake_metrics(&[0.5; 100], &real).unwrap();
    assert_eq!((m.accuracy, m.recall, m.precision), (0.5, 1.0, 0.5));
    assert!(deepfake_metrics(&[0.5; 3], &real).is_err());
}

#[test]
fn frechet_closed_forms() {
    let (a, _) = random_scores(50, 3, 7);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);

    // Values ±sqrt(3/4) over four rows have sample variance exactly 1.
    let s = 0.75f64.sqrt();
    let unit = array![[-s], [s], [-s], [s]];
    assert!((frechet_distance(&unit, &(&unit + 3.0)).unwrap() - 9.0).abs() < 1e-8);

    // Shifting one set by δ adds ‖δ‖².
    let delta = array![0.5, -1.0, 2.0];
    let shifted = &a + &delta;
    let d = frechet_distance(&a, &shifted).unwrap();
    assert!((d - delta.mapv(|v| v * v).sum()).abs() < 1e-8, "{d}");

    // Diagonal covariances commute: the trace term is Σ(σ₁ − σ₂)².
    let b = &a * &array![2.0, 1.0, 0.5];
    let var = |x: &Array2<f64>, j: usize| x.column(j).var(1.0);
    let expected: f64 = (0..3)
        .map(|j| {
            let (ma, mb) = (a.column(j).mean().unwrap(), b.column(j).mean().unwrap());
            let (va, vb) = (var(&a, j), var(&b, j));
            (ma - mb).powi(2) + va + vb - 2.0 * (va * vb).sqrt()
        })
        .sum();
    // Off-diagonal sample covariances are not exactly zero, so allow slack.
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 0.05 * expected);

    assert!(frechet_distance(&a.slice(ndarray::s![..1, ..]).to_owned(), &a).is_err());
    // Fewer rows than dimensions: singular covariances get the jitter.
    let (wide, _) = random_scores(3, 8, 2);
    assert!(frechet_distance(&wide, &(&wide + 1.0)).unwrap().is_finite());
}

#[test]
fn report_intervals_over_repetitions() {
    let reps: Vec<Vec<(String, f64)>> = (0..5).map(|i| vec![("m".to_string(), i as f64), ("c".to_string(), 2.0)]).collect();
    let report = MetricsReport::from_repetitions(&reps).unwrap();
    let m = report.get("m").unwrap();
    assert_eq!((m.mean, m.n), (2.0, 5));
    assert!(m.lo < 2.0 && m.hi > 2.0 && (m.hi - 2.0 - (2.0 - m.lo)).abs() < 1e-12);
    let c = report.get("c").unwrap();
    assert_eq!((c.lo, c.hi), (2.0, 2.0));
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    let mut txt = Vec::new();
    report.write_report(&mut txt).unwrap();
    assert!(String::from_utf8(txt).unwrap().lines().any(|l| l == "m = 2"));
    assert!(Interval::from_values(&[], 0.95).is_err());
}
