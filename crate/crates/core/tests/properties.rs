//! Structural properties of the objectives, networks and evaluator.

mod common;

use std::collections::BTreeSet;

use confu::eval::{evaluate, Metric, RetrievalSpec};
use confu::nets::{embed_dataset, forward_all, EmbeddingValues};
use confu::objectives::{
    confu_loss, enumerate_subset_terms, fused_loss, gram_volume, objective_loss, symile_similarity,
    triangle_area, Direction, ObjectiveKind, SubsetTerm, TermMode,
};
use confu::rng::{substream, MASK};
use confu::synth::{generate, XorConfig};
use confu::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ObjectiveKind> {
    prop::sample::select(ObjectiveKind::ALL.to_vec())
}

const PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn unit_rows(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|r| (t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn relabeling_leaves_losses_unchanged(k in kind(), seed in 0u64..1000, p in 0usize..6, n in 2usize..10) {
        let sigma = PERMS[p];
        let b = common::bundle(3, 6, 5, seed, k);
        let batch = common::gaussian_batch(n, 3, seed);
        let orig = common::loss_and_grads(&b, k, 0.5, &batch, Direction::Symmetric);
        let pb = common::permute_bundle(&b, sigma);
        let perm = common::loss_and_grads(&pb, k, 0.5, &common::permute_batch(&batch, sigma), Direction::Symmetric);
        let tol = 1e-12 * orig.total.abs().max(1.0);
        prop_assert!((orig.total - perm.total).abs() <= tol, "{} vs {}", orig.total, perm.total);
        if let (Some(a), Some(c)) = (orig.pair, perm.pair) {
            let (sa, sc): (f64, f64) = (a.iter().sum(), c.iter().sum());
            prop_assert!((sa - sc).abs() <= tol);
            let (fa, fc): (f64, f64) = (orig.fused.unwrap().iter().sum(), perm.fused.unwrap().iter().sum());
            prop_assert!((fa - fc).abs() <= tol);
        }
    }

    #[test]
    fn lambda_endpoints_are_bit_identical(seed in 0u64..1000, n in 2usize..12) {
        let b = common::bundle(4, 8, 6, seed, ObjectiveKind::Confu);
        let batch = common::gaussian_batch(n, 4, seed);
        let at0 = common::loss(&b, ObjectiveKind::Confu, 0.0, &batch);
        let tri = common::loss(&b, ObjectiveKind::TriClip, 0.9, &batch);
        prop_assert_eq!(at0.to_bits(), tri.to_bits());

        let mut tape = Tape::new();
        let model = b.bind(&mut tape, true);
        let mut rng = substream(0, MASK);
        let e = forward_all(&b, &model, &mut tape, [&batch[0], &batch[1], &batch[2]], true, &mut rng).unwrap();
        let scale = b.critic.scale_var(&mut tape, model.log_scale);
        let (at1, _) = confu_loss(&mut tape, &e, scale, 1.0, Direction::Symmetric).unwrap();
        let f = fused_loss(&mut tape, &e, scale, Direction::Symmetric).unwrap();
        let pure = f.iter().map(|&v| tape.value(v).item()).fold(0.0, |acc, x| acc + x);
        prop_assert_eq!(tape.value(at1).item().to_bits(), pure.to_bits());
    }

    #[test]
    fn loss_terms_are_bounded(k in kind(), seed in 0u64..1000, n in 2usize..16) {
        let b = common::bundle(3, 6, 5, seed, k);
        let batch = common::gaussian_batch(n, 3, seed);
        let mut tape = Tape::new();
        let model = b.bind(&mut tape, true);
        let mut rng = substream(0, MASK);
        let e = forward_all(&b, &model, &mut tape, [&batch[0], &batch[1], &batch[2]], true, &mut rng).unwrap();
        let scale = b.critic.scale_var(&mut tape, model.log_scale);
        let out = objective_loss(&mut tape, &e, k, 0.5, scale, Direction::Symmetric).unwrap();
        // Unit-norm scores lie in [-s, s], so a cross-entropy term is at most ln N + 2s.
        let s = tape.value(scale).item();
        let cap = (n as f64).ln() + 2.0 * s;
        let terms: Vec<f64> = match (&out.confu, &out.anchors) {
            (Some(t), _) => t.pair.iter().chain(&t.fused).map(|&v| tape.value(v).item()).collect(),
            (None, Some(a)) => a.iter().map(|&v| tape.value(v).item()).collect(),
            _ => unreachable!(),
        };
        for t in terms {
            prop_assert!(t >= 0.0, "{k}: negative term {t}");
            if k.normalizes_embeddings() {
                prop_assert!(t <= cap, "{k}: {t} above {cap}");
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm(k in kind(), seed in 0u64..1000) {
        let b = common::bundle(4, 8, 6, seed, k);
        let batch = common::gaussian_batch(9, 4, seed);
        let emb = embed_dataset(&b, [&batch[0], &batch[1], &batch[2]], 4).unwrap();
        for f in &emb.fused {
            prop_assert!(unit_rows(f) < 1e-12);
        }
        for z in &emb.z {
            let dev = unit_rows(z);
            if k.normalizes_embeddings() {
                prop_assert!(dev < 1e-12);
            } else {
                prop_assert!(dev > 1e-6, "symile embeddings should keep their norm");
            }
        }
    }

    #[test]
    fn zero_mask_ratio_is_identity(seed in 0u64..1000, n in 1usize..8) {
        let b = common::bundle(3, 6, 5, seed, ObjectiveKind::Confu);
        let batch = common::gaussian_batch(n, 3, seed);
        let run = |training: bool, stream: u64| {
            let mut tape = Tape::new();
            let model = b.bind(&mut tape, false);
            let mut rng = substream(stream, MASK);
            let e = forward_all(&b, &model, &mut tape, [&batch[0], &batch[1], &batch[2]], training, &mut rng).unwrap();
            e.values(&tape)
        };
        let eval = run(false, 0);
        prop_assert_eq!(&run(true, 1), &eval);
        prop_assert_eq!(&run(true, 2), &eval);
    }

    #[test]
    fn symile_is_multilinear(
        a in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 12),
        c in prop::collection::vec(-1.0f64..1.0, 12),
        s in -3.0f64..3.0,
    ) {
        let t = |v: &[f64]| Tensor::from_vec(3, 4, v.to_vec()).unwrap();
        let base = symile_similarity(&t(&a), &t(&b), &t(&c)).unwrap();
        let scaled_b: Vec<f64> = b.iter().map(|x| x * s).collect();
        let scaled = symile_similarity(&t(&a), &t(&scaled_b), &t(&c)).unwrap();
        for (x, y) in base.iter().zip(&scaled) {
            prop_assert!((x * s - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_and_triangle_ranges(v in prop::collection::vec(-1.0f64..1.0, 15)) {
        let unit = |x: &[f64]| {
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-3);
            x.iter().map(|a| a / n).collect::<Vec<_>>()
        };
        let (a, b, c) = (unit(&v[0..5]), unit(&v[5..10]), unit(&v[10..15]));
        prop_assume!([&a, &b, &c].iter().all(|x| (x.iter().map(|y| y * y).sum::<f64>() - 1.0).abs() < 1e-9));
        let g = gram_volume(&[&a, &b, &c]).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
        let area = triangle_area(&a, &b, &c);
        let max_side2 = [(&a, &b), (&a, &c), (&b, &c)]
            .iter()
            .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
            .fold(0.0, f64::max);
        prop_assert!(area >= 0.0 && area <= 3f64.sqrt() / 2.0 * max_side2 / 2.0 + 1e-12);
        for (x, y, z) in [(&b, &a, &c), (&c, &b, &a), (&a, &c, &b), (&b, &c, &a)] {
            prop_assert!((triangle_area(x, y, z) - area).abs() < 1e-12);
        }
    }
}

#[test]
#[allow(clippy::manual_div_ceil)]
fn subset_term_counts_match_closed_forms() {
    assert_eq!(enumerate_subset_terms(3, TermMode::Full).unwrap().len(), 6);
    assert_eq!(
        enumerate_subset_terms(3, TermMode::Retrieval)
            .unwrap()
            .len(),
        9
    );
    assert_eq!(enumerate_subset_terms(4, TermMode::Full).unwrap().len(), 25);
    for m in 2..=8usize {
        let full = enumerate_subset_terms(m, TermMode::Full).unwrap();
        assert_eq!(
            full.len(),
            (3usize.pow(m as u32) - 2usize.pow(m as u32 + 1) + 1) / 2,
            "M={m}"
        );
        let ret = enumerate_subset_terms(m, TermMode::Retrieval).unwrap();
        assert_eq!(ret.len(), m * (2usize.pow(m as u32 - 1) - 1), "M={m}");
        let unique: BTreeSet<_> = full.iter().collect();
        assert_eq!(unique.len(), full.len());
        for t in full.iter().chain(&ret) {
            assert!(t.a.iter().all(|x| !t.b.contains(x)));
        }
    }
    assert!(enumerate_subset_terms(1, TermMode::Full).is_err());
}

#[test]
fn three_modality_terms_are_the_confu_terms() {
    let got: BTreeSet<SubsetTerm> = enumerate_subset_terms(3, TermMode::Full)
        .unwrap()
        .into_iter()
        .collect();
    let t = |a: &[usize], b: &[usize]| SubsetTerm {
        a: a.to_vec(),
        b: b.to_vec(),
    };
    let want: BTreeSet<SubsetTerm> = [
        t(&[1], &[2]),
        t(&[1], &[3]),
        t(&[2], &[3]),
        t(&[3], &[1, 2]),
        t(&[2], &[1, 3]),
        t(&[1], &[2, 3]),
    ]
    .into_iter()
    .collect();
    assert_eq!(got, want);
}

#[test]
fn evaluator_is_calibrated_on_random_embeddings() {
    let xor = XorConfig {
        n_test: 2000,
        seed: 4,
        ..XorConfig::default()
    };
    let (_, test) = generate(&xor).unwrap();
    let n = test.len();
    let rand_unit = |seed| {
        let g = common::gaussian(n, 16, seed);
        let mut d = g.data().to_vec();
        for r in d.chunks_mut(16) {
            let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= s);
        }
        Tensor::from_vec(n, 16, d).unwrap()
    };
    let emb = EmbeddingValues {
        z: [rand_unit(1), rand_unit(2), rand_unit(3)],
        fused: [rand_unit(4), rand_unit(5), rand_unit(6)],
    };
    for (queries, metric) in [
        (vec![1, 3], Metric::Accuracy),
        (vec![1], Metric::RecallAt(5)),
    ] {
        let spec = RetrievalSpec {
            queries,
            metric,
            n_pools: 2000,
            ..RetrievalSpec::xor_default()
        };
        let r = evaluate(ObjectiveKind::Confu, &emb, &test, &spec).unwrap();
        assert!(
            (r.value - r.chance).abs() <= 3.0 * r.std_err,
            "{metric}: {} vs chance {} (se {})",
            r.value,
            r.chance,
            r.std_err
        );
    }
}
