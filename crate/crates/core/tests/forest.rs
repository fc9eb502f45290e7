use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vthinker_core::forest::{
    combos, read_snapshot, write_snapshot, ConceptProposal, ExpandParams, ForestError, HashingEmbedder,
    KnowledgeForest, Snapshot, ToolProposal, ToolSet,
};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}")).collect()
}

fn chi_square(counts: &BTreeMap<Vec<String>, usize>, cells: usize, draws: usize) -> f64 {
    assert_eq!(counts.len(), cells, "some cell was never drawn");
    let expected = draws as f64 / cells as f64;
    counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn single_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 8000;
    let mut counts = BTreeMap::new();
    for c in combos(&ids(8), Some(1), draws, &mut rng).unwrap() {
        *counts.entry(c).or_insert(0) += 1;
    }
    // df = 7, p = 0.001
    let stat = chi_square(&counts, 8, draws);
    assert!(stat < 24.32, "chi-square {stat}");
}

#[test]
fn pairs_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let draws = 14_000;
    let mut counts = BTreeMap::new();
    for c in combos(&ids(8), Some(2), draws, &mut rng).unwrap() {
        assert_ne!(c[0], c[1]);
        *counts.entry(c).or_insert(0) += 1;
    }
    // 28 unordered pairs, df = 27, p = 0.001
    let stat = chi_square(&counts, 28, draws);
    assert!(stat < 55.48, "chi-square {stat}");
}

#[test]
fn free_arity_is_uniform_over_one_to_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 6000;
    let mut by_len = [0usize; 4];
    for c in combos(&ids(6), None, draws, &mut rng).unwrap() {
        by_len[c.len()] += 1;
    }
    let expected = draws as f64 / 3.0;
    let stat: f64 = by_len[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // df = 2, p = 0.001
    assert!(stat < 13.82, "{by_len:?}");
}

#[test]
fn combo_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(combos(&[], None, 1, &mut rng), Err(ForestError::EmptySet)));
    assert!(matches!(combos(&ids(2), Some(0), 1, &mut rng), Err(ForestError::ZeroArity)));
    assert!(matches!(combos(&ids(2), Some(3), 1, &mut rng), Err(ForestError::ArityTooLarge { .. })));
}

fn forest() -> KnowledgeForest {
    KnowledgeForest::from_seeds(&[
        ConceptProposal::new("triangle median", "segment from a vertex to the midpoint of the opposite side"),
        ConceptProposal::new("inscribed circle", "circle tangent to every side of a polygon"),
    ])
    .unwrap()
}

#[test]
fn near_duplicates_are_gated() {
    let mut k = forest();
    let e = HashingEmbedder::default();
    let added = k
        .expand(
            &[
                ConceptProposal::new("Triangle  Median", "segment from a vertex to the midpoint of the opposite side"),
                ConceptProposal::new("angle bisector", "ray splitting an angle into two equal angles"),
                ConceptProposal::new("angle bisector", "ray splitting an angle into two equal angles"),
                ConceptProposal::new("  ", "blank names are ignored"),
            ],
            &e,
            ExpandParams::default(),
            1,
        )
        .unwrap();
    assert_eq!(added.len(), 1);
    assert_eq!(added[0].name, "angle bisector");
    assert_eq!(added[0].round, 1);
    assert_eq!(k.len(), 3);
    k.check_hierarchy().unwrap();
    assert_eq!(k.round_log().last().unwrap().added, vec![added[0].id.clone()]);
}

#[test]
fn threshold_one_admits_everything_but_exact_repeats() {
    let mut k = forest();
    let params = ExpandParams {
        threshold: 1.0,
        ..Default::default()
    };
    let added = k
        .expand(
            &[
                ConceptProposal::new("triangle median", "the same concept again"),
                ConceptProposal::new("triangle medians", "segment from a vertex to the midpoint of the opposite side"),
            ],
            &HashingEmbedder::default(),
            params,
            1,
        )
        .unwrap();
    assert_eq!(added.len(), 1);
}

#[test]
fn parent_hint_sets_depth_and_domain() {
    let mut k = KnowledgeForest::from_seeds(&[ConceptProposal {
        domain: Some("Geometry".into()),
        ..ConceptProposal::new("circle", "set of points at a fixed distance from a center")
    }])
    .unwrap();
    let child = ConceptProposal {
        parent: Some("Circle".into()),
        ..ConceptProposal::new("chord", "segment joining two points on a circle")
    };
    let added = k.expand(&[child], &HashingEmbedder::default(), ExpandParams::default(), 1).unwrap();
    assert_eq!(added[0].depth, 1);
    assert_eq!(added[0].domain, "Geometry");
    assert_eq!(k.stats().max_depth, 1);
}

#[test]
fn tools_dedup_and_snapshot_round_trip() {
    let k = forest();
    let mut t = ToolSet::from_seeds(&[ToolProposal::new("draw line", "connect two points")]).unwrap();
    let added = t
        .expand(
            &[
                ToolProposal::new("Draw Line", "connect two points"),
                ToolProposal::new("shade region", "fill a closed polygon with a translucent color"),
            ],
            &HashingEmbedder::default(),
            0.85,
            1,
        )
        .unwrap();
    assert_eq!(added.len(), 1);
    assert_eq!(t.per_round(), vec![1]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("forest.snapshot.jsonl");
    let snap = Snapshot {
        round: 1,
        forest: k.clone(),
        tools: t.clone(),
    };
    write_snapshot(&path, &snap).unwrap();
    let back = read_snapshot(&path).unwrap();
    assert_eq!(back.round, 1);
    assert_eq!(back.forest.digest(), k.digest());
    assert_eq!(back.tools.digest(), t.digest());

    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(read_snapshot(&path).is_err());
}

#[test]
fn duplicate_seeds_are_rejected() {
    let r = KnowledgeForest::from_seeds(&[ConceptProposal::new("a b", "x"), ConceptProposal::new("A  B", "y")]);
    assert!(r.is_err());
}
