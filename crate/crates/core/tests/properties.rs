use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vthinker_core::datamodel::{
    canonicalize, encode_png, read_shard, write_shard, ImageStore, Sample, SampleBody, MAX_DIFFICULTY_DEPTH,
};
use vthinker_core::executor::protocol::{read_frame, split_frames, write_frame};
use vthinker_core::forest::combos;
use vthinker_core::perception::sample_count;
use vthinker_core::rollout::{
    group_advantages, grpo_surrogate, reward_total, token_term, GrpoParams, RolloutGroup, RolloutOutput,
};
use vthinker_core::util::{answers_match, derive_seed, normalize_answer};
use vthinker_core::vtbench::expert_vote_gate;

const TOTALS: [f64; 6] = [0.0, 0.5, 1.0, 1.3, 1.5, 1.8];

fn output(reward: f64, lp: Vec<f64>, lr: Vec<f64>) -> RolloutOutput {
    let mut r = reward_total(false, false, false, &GrpoParams::default());
    r.total = reward;
    RolloutOutput {
        text: String::new(),
        logp_policy: lp,
        logp_ref: lr,
        reward: r,
    }
}

/// Rewards plus per-output `(logp_policy, logp_ref)` pairs.
fn group_strategy() -> impl Strategy<Value = Vec<(f64, Vec<(f64, f64)>)>> {
    prop::collection::vec(
        (
            prop::sample::select(TOTALS.to_vec()),
            prop::collection::vec((-5.0f64..-0.01, -5.0f64..-0.01), 0..16),
        ),
        1..6,
    )
}

fn to_group(spec: &[(f64, Vec<(f64, f64)>)]) -> RolloutGroup {
    RolloutGroup {
        question: "q".into(),
        outputs: spec
            .iter()
            .map(|(r, toks)| output(*r, toks.iter().map(|t| t.0).collect(), toks.iter().map(|t| t.1).collect()))
            .collect(),
    }
}

proptest! {
    #[test]
    fn reward_lands_in_the_allowed_set(a: bool, f: bool, t: bool) {
        let total = reward_total(a, f, t, &GrpoParams::default()).total;
        prop_assert!(TOTALS.contains(&total));
        if !a {
            prop_assert!(total <= 0.5);
        }
    }

    #[test]
    fn advantages_are_centered(rewards in prop::collection::vec(prop::sample::select(TOTALS.to_vec()), 1..12)) {
        let adv = group_advantages(&rewards, 1e-6);
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn advantages_ignore_a_reward_shift(
        rewards in prop::collection::vec(prop::sample::select(TOTALS.to_vec()), 1..12),
        shift in -10.0f64..10.0,
    ) {
        let a = group_advantages(&rewards, 1e-6);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = group_advantages(&shifted, 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn clipped_term_is_monotone_in_the_ratio(
        d1 in 0.0f64..4.0,
        d2 in 0.0f64..4.0,
        adv in -3.0f64..3.0,
        el in 0.0f64..0.5,
        eh in 0.0f64..0.5,
    ) {
        let p = GrpoParams { eps_low: el, eps_high: eh, ..Default::default() };
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (a, b) = (token_term(lo, adv, &p), token_term(hi, adv, &p));
        if adv >= 0.0 {
            prop_assert!(a <= b + 1e-12);
            // Positive advantages gain nothing past 1 + eps_high.
            prop_assert!(b <= (1.0 + eh) * adv + 1e-12);
        } else {
            prop_assert!(a >= b - 1e-12);
        }
    }

    #[test]
    fn surrogate_matches_a_direct_sum(spec in group_strategy()) {
        let group = to_group(&spec);
        let p = GrpoParams::default();
        let got = grpo_surrogate(&group, &p).unwrap();
        let rewards: Vec<f64> = spec.iter().map(|s| s.0).collect();
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let sd = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rewards.len() as f64).sqrt();
        let (mut total, mut n) = (0.0, 0usize);
        for (r, toks) in &spec {
            let a = (r - mean) / sd.max(1e-6);
            for (lp, lr) in toks {
                let d = (lp - lr).exp();
                total += (d * a).min(d.clamp(0.8, 1.2) * a);
                n += 1;
            }
        }
        let want = if n == 0 { 0.0 } else { total / n as f64 };
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn equal_rewards_at_unit_ratio_give_zero(
        r in prop::sample::select(TOTALS.to_vec()),
        lens in prop::collection::vec(0usize..16, 1..6),
    ) {
        let spec: Vec<_> = lens.iter().map(|&l| (r, vec![(-1.0, -1.0); l])).collect();
        prop_assert_eq!(grpo_surrogate(&to_group(&spec), &GrpoParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn vote_gate_is_a_majority(votes in prop::collection::vec(any::<bool>(), 5)) {
        let yes = votes.iter().filter(|v| **v).count();
        prop_assert_eq!(expert_vote_gate(&votes).unwrap(), yes >= 3);
    }

    #[test]
    fn vote_gate_needs_five(votes in prop::collection::vec(any::<bool>(), 0..12)) {
        prop_assume!(votes.len() != 5);
        prop_assert!(expert_vote_gate(&votes).is_err());
    }

    #[test]
    fn frames_round_trip(bodies in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 0..6)) {
        let mut buf = Vec::new();
        for b in &bodies {
            write_frame(&mut buf, b).unwrap();
        }
        let (frames, err) = split_frames(&buf);
        prop_assert!(err.is_none());
        prop_assert_eq!(frames, bodies);
    }

    #[test]
    fn truncated_frames_error_instead_of_panicking(body in prop::collection::vec(any::<u8>(), 1..200), cut in 1usize..200) {
        let mut buf = Vec::new();
        write_frame(&mut buf, &body).unwrap();
        let cut = cut.min(buf.len() - 1);
        prop_assert!(read_frame(&mut &buf[..cut]).is_err());
    }

    #[test]
    fn combos_are_sorted_distinct_members(n in 1usize..12, count in 0usize..20, seed: u64, arity in prop::option::of(1usize..4)) {
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match combos(&ids, arity, count, &mut rng) {
            Ok(cs) => {
                prop_assert_eq!(cs.len(), count);
                for c in cs {
                    prop_assert!(!c.is_empty() && c.len() <= 3);
                    if let Some(a) = arity {
                        prop_assert_eq!(c.len(), a);
                    }
                    prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
                }
            }
            Err(_) => prop_assert!(arity.is_some_and(|a| a > n)),
        }
    }

    #[test]
    fn sample_count_stays_in_range(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            prop_assert!((2..=20).contains(&sample_count(&mut rng)));
        }
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        prop_assert_eq!(answers_match(&s, &s), !once.is_empty());
    }

    #[test]
    fn derived_seeds_are_stable(seed: u64, a in "[a-z]{0,8}", b in "[a-z]{0,8}") {
        prop_assert_eq!(derive_seed(seed, &[&a, &b]), derive_seed(seed, &[&a, &b]));
    }
}

fn store_with_image() -> (tempfile::TempDir, ImageStore, vthinker_core::datamodel::ImageRef) {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path()).unwrap();
    let img = image::RgbaImage::from_pixel(4, 3, image::Rgba([10, 20, 30, 255]));
    let r = store.put(&encode_png(&img).unwrap()).unwrap();
    (dir, store, r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_round_trip_through_json_and_shards(
        question in "\\PC{1,60}",
        answer in "\\PC{0,20}",
        code in "[ -~\n]{0,80}",
        depth in 0u8..=MAX_DIFFICULTY_DEPTH,
        refs in prop::collection::vec("[a-z]{1,6}", 0..4),
    ) {
        let (dir, store, image) = store_with_image();
        let mut body = SampleBody::new(question, answer, code);
        body.original_image = Some(image);
        body.difficulty_depth = depth;
        body.knowledge_refs = refs;
        let sample = canonicalize(body.clone(), &store).unwrap();
        prop_assert!(sample.id_matches().unwrap());
        let json = serde_json::to_string(&sample).unwrap();
        let back: Sample = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &sample);
        prop_assert_eq!(canonicalize(body, &store).unwrap().id, sample.id.clone());
        let path = dir.path().join("s.jsonl");
        write_shard(std::slice::from_ref(&sample), &path).unwrap();
        prop_assert_eq!(read_shard(&path).unwrap(), vec![sample]);
    }
}
