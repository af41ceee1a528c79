//! Hard-negative mining against brute-force oracles and the refinement loop
//! on an adversarial corpus.

use proptest::prelude::*;
use rand::Rng;

use rft_core::graph::{Tape, Tensor};
use rft_core::motion::{generate_corpus, CurveParams, MotionConfig, MotionSample, Representation};
use rft_core::nn::rng;
use rft_core::reward::{pretrain_semantic, RewardConfig, RewardModel, TrainConfig};
use rft_core::spl::{
    mine_all, mine_pair, mining_pool, refine, retrieve_topk, spl_loss_hard, spl_loss_value, SplConfig,
};

/// Sort everything by (score desc, id asc) and keep the first k.
fn oracle_topk(scores: &[f64], pool: &[usize], k: usize) -> Vec<usize> {
    let mut all = pool.to_vec();
    all.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
    all.truncate(k);
    all
}

#[test]
fn topk_matches_the_exhaustive_oracle() {
    let mut r = rng::seeded(12);
    let n = 200;
    for _ in 0..50 {
        // Coarse rounding forces many ties.
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(-1.0..1.0f64) * 20.0).round() / 20.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..50)).collect();
        let gt = r.random_range(0..n);
        for pool in [(0..n).collect::<Vec<_>>(), mining_pool(&labels, gt)] {
            for k in [1, 2, 5, 17, pool.len()] {
                let set = retrieve_topk(&scores, &pool, k).unwrap();
                assert_eq!(set.ids, oracle_topk(&scores, &pool, k));
                assert!(set.scores.windows(2).all(|w| w[0] >= w[1]));
                assert!(set.ids.iter().zip(&set.scores).all(|(&i, &s)| scores[i] == s));
            }
        }
    }
    let full = retrieve_topk(&[0.1, 0.1, 0.3], &[0, 1, 2], 3).unwrap();
    assert_eq!(full.ids, vec![2, 0, 1]);
}

#[test]
fn topk_on_model_scores() {
    let motion = MotionConfig::default();
    let m = RewardModel::new(RewardConfig::default(), motion.clone(), &mut rng::seeded(2)).unwrap();
    let corpus = generate_corpus(200, 6, 3, &motion).unwrap();
    let refs: Vec<&MotionSample> = corpus.iter().collect();
    let sem = m.semantic_matrix(&refs, Representation::Joint).unwrap();
    let pool: Vec<usize> = (0..200).collect();
    for c in 0..6 {
        let scores = sem.column(c).to_vec();
        for k in [1, 5, 50, 200] {
            assert_eq!(retrieve_topk(&scores, &pool, k).unwrap().ids, oracle_topk(&scores, &pool, k));
        }
    }
}

#[test]
fn mining_branches_against_brute_force() {
    let mut r = rng::seeded(5);
    let n = 60;
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    for _ in 0..100 {
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let gt = r.random_range(0..n);
        let pool = mining_pool(&labels, gt);
        assert!(pool.contains(&gt));
        assert!(pool.iter().all(|&i| i == gt || labels[i] != labels[gt]));
        let set = retrieve_topk(&scores, &pool, 5).unwrap();
        let pair = mine_pair(gt, &set);
        if set.contains(gt) {
            assert_eq!((pair.winner, pair.loser, pair.target), (gt, gt, [0.5, 0.5]));
        } else {
            let argmax = *set.ids.iter().max_by(|a, b| scores[**a].total_cmp(&scores[**b]).then(b.cmp(a))).unwrap();
            assert_eq!((pair.winner, pair.loser, pair.target), (gt, argmax, [1.0, 0.0]));
        }
        let all = retrieve_topk(&scores, &pool, pool.len()).unwrap();
        assert!(!mine_pair(gt, &all).is_hard());
    }
}

#[test]
fn loss_closed_forms() {
    assert_eq!(spl_loss_value(0.4, 0.4, [0.5, 0.5]), 0.0);
    assert!((spl_loss_value(0.4, 0.4, [1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(spl_loss_value(20.0, 0.0, [1.0, 0.0]) < 1e-8);
    let tape = Tape::new();
    let w = tape.watch(&Tensor::scalar(0.2));
    let l = tape.watch(&Tensor::scalar(0.5));
    let loss = spl_loss_hard(&tape, &w, &l).unwrap();
    assert!((loss.item() - spl_loss_value(0.2, 0.5, [1.0, 0.0])).abs() < 1e-15);
    let g = tape.backward_with(&loss, &[&w, &l]).unwrap();
    // ∂/∂r_w = −p_l, ∂/∂r_l = p_l.
    let p_l = 1.0 / (1.0 + (0.2f64 - 0.5).exp());
    assert!((g.wrt(&w).unwrap()[[0, 0]] + p_l).abs() < 1e-15);
    assert!((g.wrt(&l).unwrap()[[0, 0]] - p_l).abs() < 1e-15);
}

proptest! {
    #[test]
    fn loss_is_nonnegative_and_shift_invariant(a in -5.0f64..5.0, b in -5.0f64..5.0, s in -50.0f64..50.0) {
        for q in [[1.0, 0.0], [0.5, 0.5]] {
            let v = spl_loss_value(a, b, q);
            prop_assert!(v >= -1e-15);
            prop_assert!((v - spl_loss_value(a + s, b + s, q)).abs() < 1e-9);
        }
        prop_assert!(spl_loss_value(a, a, [0.5, 0.5]).abs() < 1e-15);
        prop_assert!(spl_loss_value(a, b, [1.0, 0.0]) > 0.0);
    }
}

/// A deliberately short semantic pre-training, so mining failures remain.
fn pretrained(corpus: &[MotionSample], motion: &MotionConfig, labels: usize) -> RewardModel {
    let cfg = RewardConfig { labels, ..Default::default() };
    let mut m = RewardModel::new(cfg, motion.clone(), &mut rng::seeded(4)).unwrap();
    let train = TrainConfig { epochs: 10, batch: 12, ..Default::default() };
    pretrain_semantic(&mut m, corpus, None, &train, 6).unwrap();
    m
}

#[test]
fn no_hard_negatives_means_no_update() {
    let motion = MotionConfig::default();
    let corpus = generate_corpus(24, 3, 7, &motion).unwrap();
    let mut m = pretrained(&corpus, &motion, 3);
    let before = m.clone();
    // k covers the whole pool, so every motion takes the (gt, gt) branch.
    let cfg = SplConfig { epochs: 3, k: corpus.len(), ..Default::default() };
    let log = refine(&mut m, &corpus, &cfg, 1).unwrap();
    assert!(log.rows.iter().all(|r| r.gt_in_topk && r.loss == 0.0));
    assert!(log.failure_rate.iter().all(|&f| f == 0.0));
    assert!(log.grad_norm.iter().all(|&g| g < 1e-10));
    assert!(m.params.bitwise_eq_where(&before.params, |_| true));
    assert!(mine_all(&m, &corpus, corpus.len(), Representation::Joint).unwrap().iter().all(|(p, l)| !p.is_hard() && *l == 0.0));
}

/// Per label, one near-match distractor: a motion of the label's own
/// family blended 20% toward the next family and labelled as the latter.
fn adversarial_corpus(motion: &MotionConfig, labels: usize, per_label: usize) -> Vec<MotionSample> {
    let w = 0.2;
    let mut corpus = generate_corpus(labels * per_label, labels, 21, motion).unwrap();
    let mut r = rng::seeded(22);
    for c in 0..labels {
        let other = (c + 1) % labels;
        let own = CurveParams::jittered(c, &mut r).joint_view(motion);
        let next = CurveParams::jittered(other, &mut r).joint_view(motion);
        let joint = &own * (1.0 - w) + &next * w;
        corpus.push(MotionSample::from_joint(joint, other, motion).unwrap());
    }
    corpus
}

#[test]
fn refinement_reduces_mining_failures_on_adversarial_duplicates() {
    let motion = MotionConfig::default();
    let corpus = adversarial_corpus(&motion, 3, 12);
    let mut m = pretrained(&corpus, &motion, 3);
    let cfg = SplConfig { epochs: 20, k: 3, ..Default::default() };
    let log = refine(&mut m, &corpus, &cfg, 2).unwrap();
    let first = log.failure_rate[0];
    let best = log.failure_rate.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(first > 0.0, "adversarial duplicates should start as mining failures");
    assert!(best < first);
    let end = mine_all(&m, &corpus, cfg.k, cfg.repr).unwrap();
    let end_rate = end.iter().filter(|(p, _)| p.is_hard()).count() as f64 / corpus.len() as f64;
    assert!(end_rate < first, "end {end_rate} vs start {first}");
}

#[test]
fn refinement_is_deterministic() {
    let motion = MotionConfig::default();
    let corpus = adversarial_corpus(&motion, 3, 6);
    let base = pretrained(&corpus, &motion, 3);
    let cfg = SplConfig { epochs: 4, k: 2, ..Default::default() };
    let (mut a, mut b) = (base.clone(), base);
    let la = refine(&mut a, &corpus, &cfg, 9).unwrap();
    let lb = refine(&mut b, &corpus, &cfg, 9).unwrap();
    assert_eq!(la, lb);
    assert!(a.params.bitwise_eq_where(&b.params, |_| true));
}
