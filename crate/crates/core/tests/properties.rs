use proptest::prelude::*;

use hgprompt::alignment::{alignment_loss, cosine_similarity_matrix, NormMode, NormalizedGradientSet};
use hgprompt::bundle::{decode_bundle, encode_bundle, encode_bundle_as, FloatWidth};
use hgprompt::ensemble::{fuse_features, project_to_simplex};
use hgprompt::linalg::covariance;
use hgprompt::optimizer::{optimize_weights, Objective, OptimizerConfig};
use hgprompt::transferability::{h_score, CrossCovarianceCache, LabeledFeatures};
use hgprompt::{Exec, Matrix, PromptBundle, SimplexWeights};

const FLOOR: f64 = 1e-8;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn weights(m: usize) -> impl Strategy<Value = SimplexWeights> {
    prop::collection::vec(0.05f64..1.0, m).prop_map(|v| {
        let s: f64 = v.iter().sum();
        SimplexWeights::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `m` sources of `n×h` features with labels cycling through `c` classes.
fn sources(m: usize, n: usize, h: usize, c: usize) -> impl Strategy<Value = Vec<LabeledFeatures>> {
    prop::collection::vec(matrix(n, h), m).prop_map(move |fs| {
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        fs.into_iter()
            .map(|f| {
                // shift by the label so every class is distinguishable
                let f = Matrix::from_fn(n, h, |r, k| f[(r, k)] + (labels[r] * (k + 1)) as f64);
                LabeledFeatures::new(f, labels.clone(), c).unwrap()
            })
            .collect()
    })
}

fn gradient_sets(m: usize, p: usize, d: usize) -> impl Strategy<Value = Vec<Matrix>> {
    prop::collection::vec(matrix(p, d), m)
        .prop_filter("gradients bounded away from zero", |gs| gs.iter().all(|g| g.frobenius_norm() > 1e-3))
}

proptest! {
    #[test]
    fn projection_lands_on_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let w = project_to_simplex(&v).unwrap();
        let sum: f64 = w.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let once = project_to_simplex(&v).unwrap();
        let twice = project_to_simplex(once.as_slice()).unwrap();
        prop_assert!(once.max_abs_diff(&twice) <= 1e-15);
    }

    #[test]
    fn projection_is_non_expansive(
        (u, v) in (1usize..10).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        ))
    ) {
        let pu = project_to_simplex(&u).unwrap();
        let pv = project_to_simplex(&v).unwrap();
        prop_assert!(l2(pu.as_slice(), pv.as_slice()) <= l2(&u, &v) + 1e-12);
    }

    #[test]
    fn projection_is_closest_simplex_point(
        (v, w) in (2usize..8).prop_flat_map(|n| (prop::collection::vec(-3.0f64..3.0, n), weights(n)))
    ) {
        let p = project_to_simplex(&v).unwrap();
        prop_assert!(l2(p.as_slice(), &v) <= l2(w.as_slice(), &v) + 1e-12);
    }

    #[test]
    fn fusion_commutes_with_linear_maps(
        (fs, a, w) in (1usize..5).prop_flat_map(|m| (
            prop::collection::vec(matrix(6, 3), m),
            matrix(3, 4),
            weights(m),
        ))
    ) {
        let fused_then_mapped = fuse_features(&fs, &w).unwrap().matmul(&a).unwrap();
        let mapped: Vec<Matrix> = fs.iter().map(|f| f.matmul(&a).unwrap()).collect();
        let mapped_then_fused = fuse_features(&mapped, &w).unwrap();
        prop_assert!(fused_then_mapped.max_abs_diff(&mapped_then_fused) <= 1e-12);
    }

    #[test]
    fn cached_covariance_matches_fused_features(
        (srcs, w) in (1usize..5).prop_flat_map(|m| (sources(m, 12, 3, 3), weights(m)))
    ) {
        let cache = CrossCovarianceCache::build(&srcs).unwrap();
        let (total, _) = cache.fused_covariances(w.as_slice()).unwrap();
        let feats: Vec<Matrix> = srcs.iter().map(|s| s.features().clone()).collect();
        let direct = covariance(&fuse_features(&feats, &w).unwrap()).unwrap();
        prop_assert!(total.max_abs_diff(&direct) <= 1e-10 * direct.frobenius_norm().max(1.0));
        prop_assert!(total.is_symmetric(0.0));
    }

    #[test]
    fn h_score_is_nonnegative_and_bounded(
        (srcs, w) in (1usize..5).prop_flat_map(|m| (sources(m, 15, 3, 3), weights(m)))
    ) {
        let cache = CrossCovarianceCache::build(&srcs).unwrap();
        let h = h_score(&cache, w.as_slice(), 1e-6).unwrap().value;
        // tr(Σ⁻¹ Σ_b) never exceeds the between-class rank, here at most min(h, C-1) = 2
        prop_assert!(h >= -1e-12 && h <= 2.0 + 1e-9, "h = {}", h);
    }

    #[test]
    fn h_score_is_invariant_to_source_order(
        (srcs, w, shift) in (2usize..5).prop_flat_map(|m| (sources(m, 12, 3, 2), weights(m), 1..m))
    ) {
        let cache = CrossCovarianceCache::build(&srcs).unwrap();
        let mut rotated = srcs.clone();
        rotated.rotate_left(shift);
        let mut alpha = w.as_slice().to_vec();
        alpha.rotate_left(shift);
        let other = CrossCovarianceCache::build(&rotated).unwrap();
        let a = h_score(&cache, w.as_slice(), 1e-6).unwrap().value;
        let b = h_score(&other, &alpha, 1e-6).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn alignment_is_bounded_and_scale_invariant(
        (gs, w, scales) in (1usize..6).prop_flat_map(|m| (
            gradient_sets(m, 2, 3),
            weights(m),
            prop::collection::vec(1e-3f64..1e3, m),
        ))
    ) {
        let set = NormalizedGradientSet::from_matrices(&gs, FLOOR).unwrap();
        let Ok(base) = alignment_loss(&set, w.as_slice(), FLOOR, NormMode::Strict) else {
            return Ok(());
        };
        prop_assert!((-1e-15..=2.0 + 1e-15).contains(&base.loss));
        let scaled: Vec<Matrix> = gs.iter().zip(&scales).map(|(g, s)| g.scaled(*s)).collect();
        let set = NormalizedGradientSet::from_matrices(&scaled, FLOOR).unwrap();
        let moved = alignment_loss(&set, w.as_slice(), FLOOR, NormMode::Strict).unwrap();
        prop_assert!((moved.loss - base.loss).abs() <= 1e-12);
    }

    #[test]
    fn alignment_permutes_with_sources(
        (gs, w, shift) in (2usize..6).prop_flat_map(|m| (gradient_sets(m, 3, 2), weights(m), 1..m))
    ) {
        let set = NormalizedGradientSet::from_matrices(&gs, FLOOR).unwrap();
        let Ok(base) = alignment_loss(&set, w.as_slice(), FLOOR, NormMode::Guarded) else {
            return Ok(());
        };
        let mut rotated = gs.clone();
        rotated.rotate_left(shift);
        let mut alpha = w.as_slice().to_vec();
        alpha.rotate_left(shift);
        let set = NormalizedGradientSet::from_matrices(&rotated, FLOOR).unwrap();
        let moved = alignment_loss(&set, &alpha, FLOOR, NormMode::Guarded).unwrap();
        prop_assert_eq!(moved.loss, base.loss);
        let mut cos = base.cosines.clone();
        cos.rotate_left(shift);
        for (a, b) in cos.iter().zip(&moved.cosines) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn cosine_matrix_is_symmetric_with_unit_diagonal(gs in (1usize..6).prop_flat_map(|m| gradient_sets(m, 2, 2))) {
        let set = NormalizedGradientSet::from_matrices(&gs, FLOOR).unwrap();
        let cos = cosine_similarity_matrix(&set, Exec::Sequential);
        prop_assert!(cos.is_symmetric(0.0));
        for i in 0..gs.len() {
            prop_assert!((cos[(i, i)] - 1.0).abs() <= 1e-15);
            for j in 0..gs.len() {
                prop_assert!(cos[(i, j)].abs() <= 1.0 + 1e-15);
            }
        }
        prop_assert_eq!(cos, cosine_similarity_matrix(&set, Exec::Parallel));
    }
}

fn bundles() -> impl Strategy<Value = PromptBundle> {
    (1usize..4, 4usize..10, 1usize..4, 2usize..4, 1usize..3, 1usize..3, any::<bool>(), any::<Option<u64>>())
        .prop_flat_map(|(m, n, h, c, p, d, with_prompts, seed)| {
            (
                prop::collection::vec(matrix(n, h), m),
                prop::collection::vec(matrix(p, d), m),
                prop::collection::vec(matrix(p, d), m),
                Just((n, c, with_prompts, seed)),
            )
        })
        .prop_map(|(features, gradients, prompts, (n, c, with_prompts, seed))| PromptBundle {
            labels: (0..n).map(|i| (i % c) as i64).collect(),
            class_count: c,
            features,
            gradients,
            prompts: with_prompts.then_some(prompts),
            provenance: "property".into(),
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bundle_round_trip_is_exact(b in bundles()) {
        let bytes = encode_bundle(&b).unwrap();
        prop_assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn narrow_encoding_widens_to_rounded_values(b in bundles()) {
        let back = decode_bundle(&encode_bundle_as(&b, FloatWidth::F32).unwrap()).unwrap();
        for (x, y) in b.features.iter().zip(&back.features) {
            for (u, v) in x.data().iter().zip(y.data()) {
                prop_assert_eq!(*v, f64::from(*u as f32));
            }
        }
        prop_assert_eq!(back.labels, b.labels);
    }

    #[test]
    fn optimizer_lands_on_simplex_and_never_worsens(
        (srcs, gs) in (1usize..4).prop_flat_map(|m| (sources(m, 12, 3, 3), gradient_sets(m, 2, 2))),
        lambda in 0.0f64..5.0,
        seed in any::<u64>(),
    ) {
        let bundle = PromptBundle {
            labels: srcs[0].labels().iter().map(|&y| y as i64).collect(),
            class_count: 3,
            features: srcs.iter().map(|s| s.features().clone()).collect(),
            gradients: gs,
            prompts: None,
            provenance: "property".into(),
            seed: None,
        };
        let cfg = OptimizerConfig { lambda, epochs: 40, restarts: 2, seed, ..OptimizerConfig::default() };
        let Ok(trace) = optimize_weights(&bundle, &cfg) else { return Ok(()) };
        let alpha = trace.final_alpha();
        prop_assert!((alpha.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(alpha.as_slice().iter().all(|&a| a >= 0.0));
        let obj = Objective::from_bundle(&bundle, &cfg).unwrap();
        let uniform = obj.loss(SimplexWeights::uniform(srcs.len()).as_slice()).unwrap().total;
        prop_assert!(trace.final_loss() <= uniform + 1e-12);
        for r in &trace.restarts {
            for w in r.records.windows(2) {
                prop_assert!(w[1].loss <= w[0].loss + 1e-12);
            }
        }
    }
}
