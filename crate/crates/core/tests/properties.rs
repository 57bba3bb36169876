use keyopt::autodiff::{Tape, Tensor};
use keyopt::geometry::{self, ObjectModel, PointCloud, RigidTransform, ShapeKind, SyntheticSpec};
use keyopt::loss::{self, LossConfig, PreparedObject};
use keyopt::nn;
use keyopt::optimizer::{self, RansacConfig};
use keyopt::posesim::{self, ExperimentConfig, KeypointProvider, Method};
use keyopt::sampling::{self, KeypointSet, RandomMode};
use keyopt::votes::{self, VoteScheme, VoteValues};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Point3 = Vector3<f64>;

fn point(range: f64) -> impl Strategy<Value = Point3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(2.0), min..max)
}

fn pose() -> impl Strategy<Value = RigidTransform> {
    any::<u64>().prop_map(|seed| posesim::random_pose(&mut ChaCha8Rng::seed_from_u64(seed), 3.0))
}

fn spaced(points: &[Point3], gap: f64) -> bool {
    sampling::min_pairwise_distance(points) > gap
}

fn box_model(seed: u64) -> ObjectModel {
    geometry::make_synthetic_object("box", &SyntheticSpec { kind: ShapeKind::Box, extents: [1.0, 0.7, 0.5], n_points: 120 }, seed).unwrap()
}

fn radial(field: &votes::VoteField) -> Vec<Vec<f64>> {
    match &field.values {
        VoteValues::Scalar(r) => r.clone(),
        _ => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rigid_transforms_preserve_distances(points in cloud(2, 30), t in pose()) {
        let c = PointCloud::from_positions(points.clone());
        let moved = geometry::apply_transform(&c, &t).unwrap().position_vec();
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                prop_assert!(((points[i] - points[j]).norm() - (moved[i] - moved[j]).norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalization_round_trips(points in cloud(2, 40), probe in point(5.0)) {
        prop_assume!(spaced(&points, 1e-3));
        let m = ObjectModel::new("m", PointCloud::from_positions(points)).unwrap();
        let back = m.from_normalized(&m.to_normalized(&probe));
        prop_assert!((back - probe).norm() < 1e-12 * (1.0 + probe.norm()));
    }

    #[test]
    fn diameter_matches_brute_force(points in cloud(1, 80)) {
        let stats = geometry::object_stats(&PointCloud::from_positions(points.clone())).unwrap();
        let mut d: f64 = 0.0;
        for a in &points {
            for b in &points {
                d = d.max((a - b).norm());
            }
        }
        prop_assert!((stats.diameter - d).abs() < 1e-12);
    }

    #[test]
    fn synthetic_objects_are_bit_deterministic(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [ShapeKind::Box, ShapeKind::Ellipsoid, ShapeKind::LBracket][kind];
        let spec = SyntheticSpec { kind, extents: [1.0, 0.6, 0.4], n_points: 64 };
        let a = geometry::make_synthetic_object("s", &spec, seed).unwrap();
        let b = geometry::make_synthetic_object("s", &spec, seed).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn fps_ignores_duplicates_of_selected_points(points in cloud(5, 40), n in 3usize..5) {
        prop_assume!(spaced(&points, 1e-6));
        let c = PointCloud::from_positions(points.clone());
        let picked = sampling::fps_indices(&c, n, 0).unwrap();
        let mut extended = points.clone();
        extended.extend(picked.iter().map(|&i| points[i]));
        let again = sampling::fps_indices(&PointCloud::from_positions(extended), n, 0).unwrap();
        prop_assert_eq!(picked, again);
    }

    #[test]
    fn dispersion_score_invariances(points in cloud(3, 10), shift in point(5.0), seed in any::<u64>()) {
        let base = sampling::dispersion_score(&points);
        let moved: Vec<Point3> = points.iter().map(|p| p + shift).collect();
        prop_assert!((sampling::dispersion_score(&moved) - base).abs() < 1e-9);
        let mut shuffled = points.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((sampling::dispersion_score(&shuffled) - base).abs() < 1e-9);
    }

    #[test]
    fn sampled_keypoints_denormalize_round_trip(seed in any::<u64>(), n in 3usize..8) {
        let m = box_model(seed % 16);
        let k = sampling::random_keypoints(&m, RandomMode::BboxRegion, n, 0.1, seed).unwrap();
        let back = sampling::normalize_keypoints(&sampling::denormalize_keypoints(&k, &m), &m);
        for (a, b) in k.coords().iter().zip(back.coords()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn votes_under_rigid_motion(points in cloud(5, 40), keypoints in prop::collection::vec(point(3.0), 3..5), t in pose()) {
        prop_assume!(points.iter().all(|p| keypoints.iter().all(|k| (p - k).norm() > 1e-6)));
        let c = PointCloud::from_positions(points.clone());
        let moved = geometry::apply_transform(&c, &t).unwrap();
        let moved_k: Vec<Point3> = keypoints.iter().map(|k| t.apply(k)).collect();

        let r0 = radial(&votes::compute_votes(&c, &keypoints, VoteScheme::Radial).unwrap());
        let r1 = radial(&votes::compute_votes(&moved, &moved_k, VoteScheme::Radial).unwrap());
        for (a, b) in r0.iter().flatten().zip(r1.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (row, k) in r0.iter().zip(&keypoints) {
            let mut got = row.clone();
            let mut expected: Vec<f64> = points.iter().map(|p| (p - k).norm()).collect();
            got.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            prop_assert_eq!(got, expected);
        }

        let VoteValues::Vector(o0) = votes::compute_votes(&c, &keypoints, VoteScheme::Offset).unwrap().values else { unreachable!() };
        let VoteValues::Vector(o1) = votes::compute_votes(&moved, &moved_k, VoteScheme::Offset).unwrap().values else { unreachable!() };
        for (a, b) in o0.iter().flatten().zip(o1.iter().flatten()) {
            prop_assert!((t.rotation * a - b).norm() < 1e-9);
        }

        let VoteValues::Vector(v) = votes::compute_votes(&moved, &moved_k, VoteScheme::Vector).unwrap().values else { unreachable!() };
        prop_assert!(v.iter().flatten().all(|u| (u.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn loss_parts_and_translation(keypoints in prop::collection::vec(point(0.6), 3..5), shift in point(3.0), seed in 0u64..8) {
        prop_assume!(spaced(&keypoints, 0.05));
        let m = box_model(seed);
        let objects = loss::prepare_objects(std::slice::from_ref(&m));
        let cfg = LossConfig::default();
        let report = loss::combined_loss_prepared(&keypoints, &objects, &cfg).unwrap();
        prop_assert_eq!(report.total, cfg.alpha * report.similarity_sum() + cfg.beta * report.dispersion_sum());
        prop_assert!(report.dis_pairs.iter().all(|p| p.value > 0.0 && p.value <= 1.0));

        let moved_objects = vec![PreparedObject {
            id: objects[0].id.clone(),
            cloud: PointCloud::from_positions(objects[0].cloud.positions().map(|p| p + shift)),
        }];
        let moved_k: Vec<Point3> = keypoints.iter().map(|k| k + shift).collect();
        let moved = loss::combined_loss_prepared(&moved_k, &moved_objects, &cfg).unwrap();
        prop_assert!((moved.total - report.total).abs() < 1e-9);
    }

    #[test]
    fn dispersion_forces_cancel(keypoints in prop::collection::vec(point(1.0), 2..9), gamma in 0.1f64..5.0) {
        let g = loss::dispersion_gradient(&keypoints, gamma);
        prop_assert!(g.iter().sum::<Point3>().norm() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..6, cols in 2usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = nn::small_uniform(&mut rng, rows, cols, 3.0);
        prop_assume!((0..rows).all(|r| {
            let row = a.row(r);
            row.iter().any(|v| (v - row[0]).abs() > 1e-3)
        }));
        let mut tape = Tape::new();
        let x = tape.constant(a);
        let gain = tape.constant(Tensor::filled(1, cols, 2.0));
        let offset = tape.constant(Tensor::filled(1, cols, -1.0));
        let out = nn::layer_norm(&mut tape, x, gain, offset);
        let y = tape.value(out.normalized);
        for r in 0..rows {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ransac_improves_with_iterations(seed in any::<u64>(), short in 1usize..6, extra in 1usize..6) {
        let m = box_model(3);
        let cfg = RansacConfig { n: 3, iterations: short, rng_seed: seed, ..Default::default() };
        let a = optimizer::ransac_keypoint_search(&m, &cfg).unwrap();
        let b = optimizer::ransac_keypoint_search(&m, &RansacConfig { iterations: short + extra, ..cfg }).unwrap();
        prop_assert!(b.score <= a.score);
        prop_assert!(b.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn add_metric_properties(est in pose(), gt in pose(), seed in 0u64..8) {
        let m = box_model(seed);
        let add = posesim::add_metrics(&m, &est, &gt, false);
        let adds = posesim::add_metrics(&m, &est, &gt, true);
        prop_assert!(adds <= add + 1e-12);
        prop_assert_eq!(posesim::add_metrics(&m, &gt, &gt, false), 0.0);
    }

    #[test]
    fn auc_bounds_and_monotonicity(
        d in prop::collection::vec(0.0f64..0.3, 1..30),
        bump in prop::collection::vec(0.0f64..0.1, 30),
        diameter in 0.5f64..2.0,
    ) {
        let a = posesim::adds_auc(&d, diameter, 0.1).unwrap();
        let worse: Vec<f64> = d.iter().zip(&bump).map(|(x, b)| x + b).collect();
        let b = posesim::adds_auc(&worse, diameter, 0.1).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(b <= a);
    }

    #[test]
    fn horn_residual_survives_common_motion(model in prop::collection::vec(point(1.0), 4..10), noise_seed in any::<u64>(), t in pose(), common in pose()) {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let scene: Vec<Point3> = model.iter().map(|p| t.apply(p) + posesim::random_pose(&mut rng, 0.05).translation).collect();
        let r0 = posesim::horn_align(&model, &scene);
        prop_assume!(r0.is_ok());
        let moved_model: Vec<Point3> = model.iter().map(|p| common.apply(p)).collect();
        let moved_scene: Vec<Point3> = scene.iter().map(|p| common.apply(p)).collect();
        let r1 = posesim::horn_align(&moved_model, &moved_scene).unwrap();
        prop_assert!((r0.unwrap().residual - r1.residual).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noiseless_pipeline_is_exact(seed in any::<u64>(), scheme in 0usize..3) {
        let scheme = [VoteScheme::Radial, VoteScheme::Offset, VoteScheme::Vector][scheme];
        let m = box_model(seed % 16);
        let k = sampling::random_keypoints(&m, RandomMode::Sphere, scheme.default_keypoints(), 0.0, seed).unwrap();
        let cfg = ExperimentConfig { scheme, noise_levels: vec![0.0], trials: 3, rng_seed: seed, ..Default::default() };
        let methods = [Method { name: "random".into(), keypoints: KeypointProvider::Shared(KeypointSet::clone(&k)) }];
        let report = posesim::run_experiment(std::slice::from_ref(&m), &methods, &cfg).unwrap();
        prop_assert!(report.failures.is_empty(), "{:?}", report.failures);
        prop_assert!(report.trials.iter().all(|t| t.add < 1e-6));
    }
}
