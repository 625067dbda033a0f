//! Property tests for the invariants of every module.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpo_lab::data::{argmax_lowest, generate_preference_dataset};
use rpo_lab::env::{EnvConfig, ToyEnv};
use rpo_lab::eval::{evaluate_policy, Baseline, DecodeMode};
use rpo_lab::judge::{
    bt_log_likelihood, rm_pairwise_accuracy, train_reward_model, FeatureMask, RMTrainConfig,
};
use rpo_lab::metrics::{
    distance_multi, distance_multi_grad, distance_pair, distance_pair_grad, softmax, MarginPair,
    MetricKind, RewardVector,
};
use rpo_lab::objectives::{
    online_score_scales, rpo_loss_multi, LossConfig, PreferenceExample,
};
use rpo_lab::policy::{
    enumerate_responses, exact_log_partition, implicit_reward_hat, FactorizedPolicy, Response,
    Vocab, DEFAULT_ENUMERATION_CAP,
};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn rv(v: Vec<f64>) -> RewardVector {
    RewardVector::new(v).unwrap()
}

fn env() -> ToyEnv {
    ToyEnv::build(&EnvConfig::default()).unwrap()
}

/// Two equal-length reward vectors with K in 2..=8.
fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=8).prop_flat_map(|k| {
        (
            prop::collection::vec(-10.0f64..10.0, k),
            prop::collection::vec(-10.0f64..10.0, k),
        )
    })
}

fn multi_kind() -> impl Strategy<Value = MetricKind> {
    prop::sample::select(MetricKind::MULTI.to_vec())
}

fn shift_invariant_kind() -> impl Strategy<Value = MetricKind> {
    prop::sample::select(vec![
        MetricKind::Sqloo,
        MetricKind::BwdCategorical,
        MetricKind::FwdCategorical,
    ])
}

fn small_vocab() -> impl Strategy<Value = Vocab> {
    (2usize..=4, 1usize..=4).prop_map(|(v, l)| Vocab::new(v, l).unwrap())
}

fn random_policy(contexts: usize, vocab: Vocab, seed: u64) -> FactorizedPolicy {
    FactorizedPolicy::random(contexts, vocab, 1.5, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn multi_distances_are_non_negative_and_vanish_on_the_diagonal(
        kind in multi_kind(),
        (a, b) in vec_pair(),
    ) {
        prop_assert!(distance_multi(kind, &rv(a.clone()), &rv(b)).unwrap() >= 0.0);
        prop_assert!(distance_multi(kind, &rv(a.clone()), &rv(a)).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn pair_distances_are_non_negative_and_vanish_on_the_diagonal(
        a in -20.0f64..20.0,
        b in -20.0f64..20.0,
    ) {
        for kind in MetricKind::PAIR {
            prop_assert!(distance_pair(kind, &MarginPair::new(a, b)).unwrap() >= 0.0);
            prop_assert!(distance_pair(kind, &MarginPair::new(a, a)).unwrap().abs() <= 1e-12);
        }
        prop_assert!(distance_pair(MetricKind::BwdBernoulli, &MarginPair::dpo_limit(a)).unwrap() >= 0.0);
    }

    #[test]
    fn partition_offsets_cancel(
        kind in shift_invariant_kind(),
        (a, b) in vec_pair(),
        c in -50.0f64..50.0,
        d in -50.0f64..50.0,
    ) {
        let base = distance_multi(kind, &rv(a.clone()), &rv(b.clone())).unwrap();
        let shifted = distance_multi(
            kind,
            &rv(a).shifted(c).unwrap(),
            &rv(b).shifted(d).unwrap(),
        )
        .unwrap();
        prop_assert!(rel(base, shifted) <= 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn multi_gradients_match_central_differences(kind in multi_kind(), (a, b) in vec_pair()) {
        let h = 1e-5;
        let g = distance_multi_grad(kind, &rv(a.clone()), &rv(b.clone())).unwrap();
        let f = |x: &[f64]| distance_multi(kind, &rv(x.to_vec()), &rv(b.clone())).unwrap();
        let mut err = 0.0;
        let mut norm_g = 0.0;
        let mut norm_fd = 0.0;
        for i in 0..a.len() {
            let mut up = a.clone();
            up[i] += h;
            let mut dn = a.clone();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            err += (fd - g[i]).powi(2);
            norm_g += g[i] * g[i];
            norm_fd += fd * fd;
        }
        let scale = norm_g.sqrt().max(norm_fd.sqrt()).max(1e-3);
        prop_assert!(err.sqrt() / scale < 1e-5, "relative error {}", err.sqrt() / scale);
    }

    #[test]
    fn pair_gradients_match_central_differences(a in -15.0f64..15.0, b in -15.0f64..15.0) {
        let h = 1e-5;
        for (kind, target) in [
            (MetricKind::Sq, Some(b)),
            (MetricKind::BwdBernoulli, Some(b)),
            (MetricKind::BwdBernoulli, None),
        ] {
            let m = |x: f64| match target {
                Some(t) => MarginPair::new(x, t),
                None => MarginPair::dpo_limit(x),
            };
            let g = distance_pair_grad(kind, &m(a)).unwrap();
            let fd = (distance_pair(kind, &m(a + h)).unwrap() - distance_pair(kind, &m(a - h)).unwrap())
                / (2.0 * h);
            prop_assert!((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn sqloo_at_two_is_twice_the_pair_square(a in prop::array::uniform2(-10.0f64..10.0), b in prop::array::uniform2(-10.0f64..10.0)) {
        let multi = distance_multi(MetricKind::Sqloo, &rv(a.to_vec()), &rv(b.to_vec())).unwrap();
        let pair = distance_pair(MetricKind::Sq, &MarginPair::new(a[0] - a[1], b[0] - b[1])).unwrap();
        prop_assert!((multi - 2.0 * pair).abs() <= 1e-12 * 1f64.max(multi.abs()));
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-700.0f64..700.0, 2..12)) {
        let p = softmax(&rv(x));
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|q| (0.0..=1.0).contains(q)));
    }

    #[test]
    fn bwd_scales_sum_to_zero((a, b) in vec_pair(), eta in 0.1f64..10.0) {
        let s = online_score_scales(MetricKind::BwdCategorical, &rv(a), &rv(b), eta).unwrap();
        prop_assert!(s.as_slice().iter().sum::<f64>().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_probs_normalize_over_all_responses(vocab in small_vocab(), seed in any::<u64>(), contexts in 1usize..4) {
        let p = random_policy(contexts, vocab, seed);
        for x in 0..contexts {
            let total: f64 = enumerate_responses(&vocab, DEFAULT_ENUMERATION_CAP)
                .unwrap()
                .iter()
                .map(|y| p.log_prob(x, y).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn factorized_kl_matches_enumeration(vocab in small_vocab(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let p = random_policy(2, vocab, s1);
        let q = random_policy(2, vocab, s2);
        for x in 0..2 {
            let fast = p.exact_kl(&q, x).unwrap();
            let slow = p.exact_kl_enumerated(&q, x, DEFAULT_ENUMERATION_CAP).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-10);
        }
    }

    #[test]
    fn optimal_policy_is_a_fixed_point(
        vocab in small_vocab(),
        seed in any::<u64>(),
        beta in 0.05f64..5.0,
        u in prop::collection::vec(-3.0f64..3.0, 16),
    ) {
        // A position-separable reward keeps π* in the factorized class:
        // its logits are the reference logits plus u / β.
        let reference = random_policy(1, vocab, seed);
        let u: Vec<f64> = u.into_iter().take(vocab.size * vocab.max_len).collect();
        let reward = |y: &Response| -> f64 {
            y.tokens().iter().enumerate().map(|(t, &v)| u[t * vocab.size + v as usize]).sum()
        };
        let logits: Vec<f64> = reference.logits().iter().zip(&u).map(|(l, w)| l + w / beta).collect();
        let star = FactorizedPolicy::from_logits(1, vocab, logits).unwrap();
        let log_z = exact_log_partition(&reference, 0, reward, beta, DEFAULT_ENUMERATION_CAP).unwrap();
        for y in enumerate_responses(&vocab, DEFAULT_ENUMERATION_CAP).unwrap() {
            let implicit = implicit_reward_hat(&star, &reference, 0, &y, beta).unwrap();
            prop_assert!(rel(implicit, reward(&y) - beta * log_z) <= 1e-9);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed(vocab in small_vocab(), seed in any::<u64>(), k in 1usize..16) {
        let p = random_policy(1, vocab, seed);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            p.sample_with(0, k, 1.0, &mut rng).unwrap()
        };
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn multi_loss_ignores_response_order(
        seed in any::<u64>(),
        kind in multi_kind(),
        perm_seed in any::<u64>(),
        beta in 0.05f64..2.0,
    ) {
        let e = env();
        let policy = random_policy(e.reference.contexts(), e.vocab, seed);
        let ds = generate_preference_dataset(&e.reference, &e.gt, &e.split.train[..4], 6, seed, "reference").unwrap();
        let cfg = LossConfig::new(kind, beta, 1.0);
        for ex in &ds.examples {
            let mut order: Vec<usize> = (0..ex.k()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let pos = |i: usize| order.iter().position(|&o| o == i).unwrap();
            let permuted = PreferenceExample::new(
                ex.prompt_id,
                ex.context,
                order.iter().map(|&i| ex.responses[i].clone()).collect(),
                rv(order.iter().map(|&i| ex.gt_rewards.as_slice()[i]).collect()),
                pos(ex.chosen_idx),
                pos(ex.rejected_idx),
            )
            .unwrap();
            let a = rpo_loss_multi(&policy, &e.reference, ex, &cfg).unwrap();
            let b = rpo_loss_multi(&policy, &e.reference, &permuted, &cfg).unwrap();
            prop_assert!(rel(a, b) <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn labels_survive_exact_positive_scaling(seed in any::<u64>(), j in -8i32..8, k in 2usize..6) {
        // Powers of two scale every reward exactly, so ties break identically.
        let e = env();
        let scaled = e.gt.scaled(2f64.powi(j)).unwrap();
        let a = generate_preference_dataset(&e.reference, &e.gt, &e.split.train, k, seed, "reference").unwrap();
        let b = generate_preference_dataset(&e.reference, &scaled, &e.split.train, k, seed, "reference").unwrap();
        for (x, y) in a.examples.iter().zip(&b.examples) {
            prop_assert_eq!(&x.responses, &y.responses);
            prop_assert_eq!(x.chosen_idx, y.chosen_idx);
            prop_assert_eq!(x.rejected_idx, y.rejected_idx);
        }
    }

    #[test]
    fn chosen_stays_optimal_under_any_positive_scaling(seed in any::<u64>(), s in 0.01f64..100.0, k in 2usize..6) {
        // Exact ties may round either way, so only optimality is preserved.
        let e = env();
        let scaled = e.gt.scaled(s).unwrap();
        let a = generate_preference_dataset(&e.reference, &e.gt, &e.split.train, k, seed, "reference").unwrap();
        let b = generate_preference_dataset(&e.reference, &scaled, &e.split.train, k, seed, "reference").unwrap();
        for (x, y) in a.examples.iter().zip(&b.examples) {
            prop_assert_eq!(&x.responses, &y.responses);
            let r = x.gt_rewards.as_slice();
            let best = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(rel(r[y.chosen_idx], best) <= 1e-12);
        }
    }

    #[test]
    fn argmax_survives_strictly_increasing_transforms(r in prop::collection::vec(-5.0f64..5.0, 2..10)) {
        let transformed: Vec<Vec<f64>> = vec![
            r.iter().map(|x| x.exp()).collect(),
            r.iter().map(|x| x.powi(3) + 7.0).collect(),
            r.iter().map(|x| x.atan()).collect(),
        ];
        for t in transformed {
            prop_assert_eq!(argmax_lowest(&r), argmax_lowest(&t));
        }
    }

    #[test]
    fn dataset_regeneration_is_bit_identical(seed in any::<u64>(), k in 2usize..6) {
        let e = env();
        let gen = || generate_preference_dataset(&e.reference, &e.gt, &e.split.train, k, seed, "reference")
            .unwrap()
            .to_jsonl_string();
        prop_assert_eq!(gen(), gen());
    }

    #[test]
    fn win_rate_is_antisymmetric(s1 in any::<u64>(), s2 in any::<u64>(), decode_seed in any::<u64>()) {
        let e = env();
        let a = random_policy(e.reference.contexts(), e.vocab, s1);
        let b = random_policy(e.reference.contexts(), e.vocab, s2);
        for decode in [
            DecodeMode::Exact,
            DecodeMode::Greedy,
            DecodeMode::Sampled { seed: decode_seed, samples: 3 },
        ] {
            let ab = evaluate_policy(&a, &e.gt, &e.split.test, Baseline::Policy(&b), decode).unwrap();
            let ba = evaluate_policy(&b, &e.gt, &e.split.test, Baseline::Policy(&a), decode).unwrap();
            prop_assert_eq!(ab.win_rate + ba.win_rate, 1.0);
            let own = evaluate_policy(&a, &e.gt, &e.split.test, Baseline::Policy(&a), decode).unwrap();
            prop_assert_eq!(own.win_rate, 0.5);
        }
    }
}

#[test]
fn exact_reward_lies_in_the_sampled_interval() {
    let e = env();
    let trials = 200;
    let mut covered = 0;
    for t in 0..trials {
        let policy = random_policy(e.reference.contexts(), e.vocab, 10_000 + t);
        let eval = |decode| {
            evaluate_policy(&policy, &e.gt, &e.split.test, Baseline::Policy(&e.reference), decode)
                .unwrap()
        };
        let exact = eval(DecodeMode::Exact);
        let sampled = eval(DecodeMode::Sampled { seed: t, samples: 4 });
        if (exact.avg_reward - sampled.avg_reward).abs() <= sampled.ci95_reward {
            covered += 1;
        }
    }
    assert!(covered * 100 >= 95 * trials, "coverage {covered}/{trials}");
}

fn rm_data(e: &ToyEnv, prompts: &[rpo_lab::env::Prompt], seed: u64) -> Vec<PreferenceExample> {
    generate_preference_dataset(&e.reference, &e.gt, prompts, 4, seed, "reference")
        .unwrap()
        .examples
}

#[test]
fn bt_training_improves_likelihood_at_small_rates() {
    let e = env();
    let data = rm_data(&e, &e.split.train, 3);
    let untrained = train_reward_model(&e.feature_map, &data, &RMTrainConfig::default(), &FeatureMask::Empty)
        .unwrap();
    let initial = bt_log_likelihood(&untrained, &data).unwrap();
    assert!((initial - 0.5f64.ln()).abs() < 1e-12);
    for seed in 0..10 {
        let cfg = RMTrainConfig {
            learning_rate: 1e-3,
            steps: 200,
            seed,
            ..RMTrainConfig::default()
        };
        let rm = train_reward_model(&e.feature_map, &data, &cfg, &FeatureMask::Full).unwrap();
        assert!(bt_log_likelihood(&rm, &data).unwrap() >= initial, "seed {seed}");
    }
}

#[test]
fn swapping_labels_negates_the_learnt_direction() {
    let e = env();
    let data = rm_data(&e, &e.split.train, 4);
    let swapped: Vec<PreferenceExample> = data
        .iter()
        .map(|ex| {
            let mut s = ex.clone();
            std::mem::swap(&mut s.chosen_idx, &mut s.rejected_idx);
            s
        })
        .collect();
    let cfg = RMTrainConfig::default();
    let w = train_reward_model(&e.feature_map, &data, &cfg, &FeatureMask::Full).unwrap();
    let v = train_reward_model(&e.feature_map, &swapped, &cfg, &FeatureMask::Full).unwrap();
    let dot: f64 = w.weights().iter().zip(v.weights()).map(|(a, b)| a * b).sum();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = dot / (norm(w.weights()) * norm(v.weights()));
    assert!(cosine < -0.9, "cosine {cosine}");
}

#[test]
fn pairwise_accuracy_examples() {
    let e = env();
    let tie_free: Vec<PreferenceExample> = rm_data(&e, &e.split.valid, 5)
        .into_iter()
        .filter(|ex| !ex.is_tied())
        .collect();
    assert!(!tie_free.is_empty());
    assert_eq!(rm_pairwise_accuracy(&e.gt, &tie_free).unwrap(), 1.0);
    let negated = e.gt.scaled(-1.0).unwrap();
    assert_eq!(rm_pairwise_accuracy(&negated, &tie_free).unwrap(), 0.0);
    let constant =
        train_reward_model(&e.feature_map, &tie_free, &RMTrainConfig::default(), &FeatureMask::Empty)
            .unwrap();
    assert_eq!(rm_pairwise_accuracy(&constant, &tie_free).unwrap(), 0.5);
}
