//! Acceptance criteria 1–12, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines print without
//! `--nocapture`. Exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use keyopt::distances::{self, DivergenceKind};
use keyopt::encoder::{self, Architecture, GraphEncoder, TrainConfig};
use keyopt::geometry::{self, ObjectModel, RigidTransform, ShapeKind, SyntheticSpec};
use keyopt::loss::{self, LossConfig, Similarity};
use keyopt::optimizer::{self, CandidateSampler, OptimizeConfig, RansacConfig};
use keyopt::posesim::{self, ExperimentConfig, KeypointProvider, Method, VoteNoiseModel};
use keyopt::sampling::{self, KeypointSet, RandomMode};
use keyopt::votes::{self, VoteScheme};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Point3 = Vector3<f64>;
type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}, {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn synthetic(kind: ShapeKind, extents: [f64; 3], n_points: usize, seed: u64) -> ObjectModel {
    geometry::make_synthetic_object("obj", &SyntheticSpec { kind, extents, n_points }, seed).unwrap()
}

fn random_samples(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
}

/// Uniform-weight transport between two sample sets, solved as an integer
/// min-cost flow (supplies scaled by |A|·|B|) with Bellman-Ford augmenting paths.
fn transport_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let (src, sink, nodes) = (0, m + n + 1, m + n + 2);
    struct Edge {
        to: usize,
        cap: i64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj = vec![Vec::new(); nodes];
    let mut add = |edges: &mut Vec<Edge>, u: usize, v: usize, cap: i64, cost: f64| {
        adj[u].push(edges.len());
        edges.push(Edge { to: v, cap, cost });
        adj[v].push(edges.len());
        edges.push(Edge { to: u, cap: 0, cost: -cost });
    };
    for (i, x) in a.iter().enumerate() {
        add(&mut edges, src, 1 + i, n as i64, 0.0);
        for (j, y) in b.iter().enumerate() {
            add(&mut edges, 1 + i, 1 + m + j, i64::MAX / 4, (x - y).abs());
        }
    }
    for j in 0..n {
        add(&mut edges, 1 + m + j, sink, m as i64, 0.0);
    }

    let total = (m * n) as i64;
    let (mut sent, mut cost) = (0i64, 0.0);
    while sent < total {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let edge = &edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                        dist[edge.to] = dist[u] + edge.cost;
                        via[edge.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "no augmenting path");
        let mut push = total - sent;
        let mut v = sink;
        while v != src {
            let e = via[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != src {
            let e = via[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            cost += push as f64 * edges[e].cost;
            v = edges[e ^ 1].to;
        }
        sent += push;
    }
    cost / total as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (a, b) = (random_samples(&mut rng, 8), random_samples(&mut rng, 8));
        let w = distances::wasserstein1_exact(&a, &b).unwrap();
        worst = worst.max((w - transport_oracle(&a, &b)).abs());
    }
    if worst > 1e-9 {
        return Err(format!("max |exact − LP| = {worst:.3e} > 1e-9"));
    }
    within(start.elapsed(), Duration::from_secs(10), format!("200 pairs, max |exact − LP| = {worst:.3e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = |a: &[f64], b: &[f64]| distances::wasserstein1_exact(a, b).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b, c) = (random_samples(&mut rng, 20), random_samples(&mut rng, 20), random_samples(&mut rng, 20));
        worst = worst.max((w(&a, &b) - w(&b, &a)).abs());
        worst = worst.max(w(&a, &a)).max(w(&b, &b)).max(w(&c, &c));
        worst = worst.max(w(&a, &c) - w(&a, &b) - w(&b, &c));
    }
    check(worst <= 1e-9, format!("100 triples, worst axiom violation {worst:.3e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let p = votes::build_histogram(&samples, 32, 0.0, 1.0).unwrap();
    let kl = distances::divergence(DivergenceKind::Kl, &p, &p, distances::DEFAULT_EPSILON).unwrap();
    let ce = distances::divergence(DivergenceKind::Ce, &p, &p, distances::DEFAULT_EPSILON).unwrap();
    let h = distances::entropy(&p.mass);

    let left: Vec<f64> = (0..50).map(|i| 0.01 * i as f64 / 50.0).collect();
    let right: Vec<f64> = left.iter().map(|v| v + 0.98).collect();
    let q_left = votes::build_histogram(&left, 32, 0.0, 1.0).unwrap();
    let q_right = votes::build_histogram(&right, 32, 0.0, 1.0).unwrap();
    let js = distances::divergence(DivergenceKind::Js, &q_left, &q_right, 1e-12).unwrap();

    let ln2 = std::f64::consts::LN_2;
    let ok = kl.abs() <= 1e-12 && (js - ln2).abs() <= 1e-6 && (ce - h).abs() <= 1e-9;
    check(ok, format!("KL(P,P) = {kl:.3e}, JS(disjoint) − ln 2 = {:.3e}, CE(P,P) − H(P) = {:.3e}", js - ln2, ce - h))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut critic, mut exact) = (Vec::new(), Vec::new());
    for task in 0..20 {
        let mu = rng.random_range(-2.0..2.0);
        let sigma = rng.random_range(0.3..2.0);
        let a: Vec<f64> = (0..200).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let b: Vec<f64> = (0..200).map(|_| Normal::new(mu, sigma).unwrap().sample(&mut rng)).collect();
        exact.push(distances::wasserstein1_exact(&a, &b).unwrap());
        critic.push(
            distances::critic_distance(
                &a,
                &b,
                distances::DEFAULT_CRITIC_STEPS,
                distances::DEFAULT_CRITIC_LR,
                distances::DEFAULT_LAMBDA,
                100 + task,
            )
            .unwrap(),
        );
    }
    let rho = distances::spearman(&critic, &exact);
    if rho < 0.9 {
        return Err(format!("Spearman {rho:.4} < 0.9"));
    }
    within(start.elapsed(), Duration::from_secs(60), format!("20 tasks, Spearman {rho:.4}"))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn criterion_5() -> Outcome {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_loss: f64 = 0.0;
    let schemes = [VoteScheme::Radial, VoteScheme::Offset, VoteScheme::Vector];
    for config in 0..6 {
        let scheme = schemes[config % 3];
        let obj = synthetic(ShapeKind::Ellipsoid, [1.0, 0.8, 0.6], 150, 50 + config as u64);
        let objs = [obj];
        let cfg = LossConfig { scheme, ..Default::default() };
        let kp: Vec<Point3> = (0..4)
            .map(|_| Point3::from_fn(|_, _| rng.random_range(-0.6..0.6)))
            .collect();
        let grad = loss::loss_gradient(&kp, &objs, &cfg).unwrap();
        for k in 0..kp.len() {
            for axis in 0..3 {
                let (mut p, mut m) = (kp.clone(), kp.clone());
                p[k][axis] += h;
                m[k][axis] -= h;
                let fp = loss::combined_loss(&p, &objs, &cfg).unwrap().total;
                let fm = loss::combined_loss(&m, &objs, &cfg).unwrap().total;
                worst_loss = worst_loss.max(relative_error(grad[k][axis], (fp - fm) / (2.0 * h)));
            }
        }
    }

    let mut worst_enc: f64 = 0.0;
    for config in 0..5u64 {
        let objs = [synthetic(ShapeKind::Box, [1.0, 0.7, 0.5], 20 + 2 * config as usize, 60 + config)];
        let arch = Architecture { k: 3 + config as usize % 2, hidden: 8, n_k: 3, use_color: false };
        let enc = GraphEncoder::new(arch, 70 + config).unwrap();
        let cfg = LossConfig::default();
        let (_, grads) = encoder::loss_and_parameter_gradient(&enc, &objs, &cfg, 64).unwrap();
        for (k, g) in grads.iter().enumerate() {
            for i in (0..g.len()).step_by(3) {
                let (mut p, mut m) = (enc.clone(), enc.clone());
                p.params[k].data[i] += h;
                m.params[k].data[i] -= h;
                let fp = encoder::loss_and_parameter_gradient(&p, &objs, &cfg, 64).unwrap().0;
                let fm = encoder::loss_and_parameter_gradient(&m, &objs, &cfg, 64).unwrap().0;
                worst_enc = worst_enc.max(relative_error(g.data[i], (fp - fm) / (2.0 * h)));
            }
        }
    }
    check(
        worst_loss < 1e-4 && worst_enc < 1e-3,
        format!("max rel error: loss {worst_loss:.3e} (< 1e-4), encoder {worst_enc:.3e} (< 1e-3)"),
    )
}

/// Independent Radial corner scoring: own normalization, own votes, sorted-pairing W1.
fn corner_oracle(model: &ObjectModel, n: usize) -> (Vec<usize>, Vec<usize>) {
    let pts: Vec<Point3> = model.cloud.points.iter().map(|p| p.position).collect();
    let centroid = pts.iter().sum::<Point3>() / pts.len() as f64;
    let mut diameter: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            diameter = diameter.max((pts[i] - pts[j]).norm());
        }
    }
    let norm: Vec<Point3> = pts.iter().map(|p| (p - centroid) / diameter).collect();
    let mut lo = norm[0];
    let mut hi = norm[0];
    for p in &norm {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let corners: Vec<Point3> = (0..8)
        .map(|c| Point3::new(if c & 1 != 0 { hi.x } else { lo.x }, if c & 2 != 0 { hi.y } else { lo.y }, if c & 4 != 0 { hi.z } else { lo.z }))
        .collect();
    let sorted_votes: Vec<Vec<f64>> = corners
        .iter()
        .map(|k| {
            let mut v: Vec<f64> = norm.iter().map(|p| (k - p).norm()).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let w1 = |i: usize, j: usize| {
        sorted_votes[i].iter().zip(&sorted_votes[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / norm.len() as f64
    };

    let mut subsets = Vec::new();
    let mut stack = vec![0usize; 0];
    fn rec(start: usize, n: usize, stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if stack.len() == n {
            out.push(stack.clone());
            return;
        }
        for c in start..8 {
            stack.push(c);
            rec(c + 1, n, stack, out);
            stack.pop();
        }
    }
    rec(0, n, &mut stack, &mut subsets);

    let score = |s: &[usize]| {
        let mut t = 0.0;
        for a in 0..s.len() {
            for b in a + 1..s.len() {
                t += w1(s[a], s[b]);
            }
        }
        t
    };
    let (mut best, mut worst) = (0, 0);
    let scores: Vec<f64> = subsets.iter().map(|s| score(s)).collect();
    for i in 1..subsets.len() {
        if scores[i] < scores[best] {
            best = i;
        }
        if scores[i] > scores[worst] {
            worst = i;
        }
    }
    (subsets[best].clone(), subsets[worst].clone())
}

fn histogram_mean_variance(model: &ObjectModel, keypoints: &KeypointSet) -> f64 {
    let cloud = sampling::normalized_cloud(model);
    let field = votes::compute_votes(&cloud, keypoints.coords(), VoteScheme::Radial).unwrap();
    let channels = votes::scalar_channels(&field, &votes::axis_projections()).unwrap();
    let rows: Vec<&[f64]> = channels[0].iter().map(Vec::as_slice).collect();
    let (lo, hi) = votes::joint_range(rows.iter().copied());
    let means: Vec<f64> = rows.iter().map(|r| votes::build_histogram(r, 256, lo, hi).unwrap().mean()).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64
}

fn criterion_6() -> Outcome {
    let model = synthetic(ShapeKind::Box, [2.0, 1.0, 0.5], 600, 6);
    let (best, worst) = optimizer::exhaustive_corner_search(&model, 3, VoteScheme::Radial).unwrap();
    let (oracle_best, oracle_worst) = corner_oracle(&model, 3);
    let best_subset = best.subset.clone().unwrap();
    let worst_subset = worst.subset.clone().unwrap();
    let var_best = histogram_mean_variance(&model, &best.keypoints);
    let var_worst = histogram_mean_variance(&model, &worst.keypoints);
    let ok = best_subset == oracle_best && worst_subset == oracle_worst && best.score < worst.score && var_best < var_worst;
    check(
        ok,
        format!(
            "best {best_subset:?} (oracle {oracle_best:?}) score {:.4}, worst {worst_subset:?} (oracle {oracle_worst:?}) score {:.4}, \
             histogram-mean variance {var_best:.3e} vs {var_worst:.3e}",
            best.score, worst.score
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let model = synthetic(ShapeKind::LBracket, [1.0, 1.0, 0.4], 500, 7);
    let scheme = VoteScheme::Radial;
    let init = sampling::fps_sample(&sampling::normalized_cloud(&model), scheme.default_keypoints(), 0).unwrap();
    let cfg = OptimizeConfig { steps: 200, loss: LossConfig { scheme, ..Default::default() }, ..Default::default() };
    let result = optimizer::optimize_keypoints_direct(&init, std::slice::from_ref(&model), &cfg).unwrap();
    let prepared = loss::prepare_objects(std::slice::from_ref(&model));
    let projections = votes::axis_projections();
    let before = optimizer::pairwise_w1_sum(init.coords(), &prepared, scheme, &projections).unwrap();
    let after = optimizer::pairwise_w1_sum(result.keypoints.coords(), &prepared, scheme, &projections).unwrap();
    let monotone = result.trace.windows(2).all(|w| w[1] <= w[0]);
    let ratio = after / before;
    let detail = format!(
        "W1 sum {before:.4} → {after:.4} (ratio {ratio:.3}, need ≤ 0.7), min distance {:.3} (need ≥ 0.2), monotone {monotone}",
        result.min_distance
    );
    if !(ratio <= 0.7 && result.min_distance >= 0.2 && monotone) {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(120), detail)
}

fn criterion_8() -> Outcome {
    let ok = loss::weight_schedule(0) == (0.7, 0.3)
        && loss::weight_schedule(49) == (0.7, 0.3)
        && loss::weight_schedule(50) == (0.3, 0.7)
        && encoder::learning_rate(1e-3, 0) == 1e-3
        && encoder::learning_rate(1e-3, 50) == 1e-4
        && encoder::learning_rate(1e-3, 100) == 1e-5;
    check(
        ok,
        format!(
            "weights {:?} {:?} {:?}, lr {:e} {:e} {:e}",
            loss::weight_schedule(0),
            loss::weight_schedule(49),
            loss::weight_schedule(50),
            encoder::learning_rate(1e-3, 0),
            encoder::learning_rate(1e-3, 50),
            encoder::learning_rate(1e-3, 100)
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut horn_err: f64 = 0.0;
    for _ in 0..100 {
        let model: Vec<Point3> = (0..8).map(|_| Point3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let gt = posesim::random_pose(&mut rng, 2.0);
        let scene: Vec<Point3> = model.iter().map(|p| gt.apply(p)).collect();
        let est = posesim::horn_align(&model, &scene).unwrap().transform;
        horn_err = horn_err
            .max((est.rotation - gt.rotation).abs().max())
            .max((est.translation - gt.translation).abs().max());
    }

    let object = synthetic(ShapeKind::Box, [1.0, 0.6, 0.4], 300, 9);
    let mut worst_add: f64 = 0.0;
    for scheme in [VoteScheme::Radial, VoteScheme::Offset, VoteScheme::Vector] {
        let corners: Vec<usize> = (0..scheme.default_keypoints()).collect();
        let kp = sampling::bbox_corner_keypoints(&object, &corners).unwrap();
        let cfg = ExperimentConfig { scheme, noise_levels: vec![0.0], trials: 20, rng_seed: 9, ..Default::default() };
        let methods = [Method { name: "fps".into(), keypoints: KeypointProvider::Shared(kp) }];
        let report = posesim::run_experiment(std::slice::from_ref(&object), &methods, &cfg).unwrap();
        if !report.failures.is_empty() || report.trials.len() != 20 {
            return Err(format!("{scheme:?}: {} failed trials, first: {:?}", report.failures.len(), report.failures.first().map(|f| &f.reason)));
        }
        worst_add = report.trials.iter().map(|t| t.add).fold(worst_add, f64::max);
    }

    let mut trans_err: f64 = 0.0;
    for _ in 0..20 {
        let t = Point3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let add = posesim::add_metrics(&object, &RigidTransform::identity(), &RigidTransform::from_translation(t), false);
        trans_err = trans_err.max((add - t.norm()).abs());
    }
    check(
        horn_err < 1e-6 && worst_add < 1e-6 && trans_err <= 1e-9,
        format!("Horn max error {horn_err:.3e}, noiseless max ADD {worst_add:.3e}, translation-only |ADD − ‖t‖| {trans_err:.3e}"),
    )
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let object = synthetic(ShapeKind::Box, [1.0, 1.0, 1.0], 400, 10);
    let dispersed = KeypointSet::new(vec![Point3::new(0.5, 0.0, 0.0), Point3::new(0.0, 0.5, 0.0), Point3::new(0.0, 0.0, 0.5)]).unwrap();
    let collinear = KeypointSet::new(vec![Point3::new(-0.5, 0.0, 0.0), Point3::new(0.0, 0.03, 0.0), Point3::new(0.5, 0.0, 0.0)]).unwrap();
    let cfg = ExperimentConfig { noise_levels: vec![0.02], trials: 200, rng_seed: 10, ..Default::default() };
    let methods = [
        Method { name: "dispersed".into(), keypoints: KeypointProvider::Shared(dispersed) },
        Method { name: "collinear".into(), keypoints: KeypointProvider::Shared(collinear) },
    ];
    let report = posesim::run_experiment(std::slice::from_ref(&object), &methods, &cfg).unwrap();
    let d = report.summary("dispersed", 0.02).unwrap();
    let c = report.summary("collinear", 0.02).unwrap();
    let detail = format!(
        "mean rotation error {:.3}° dispersed vs {:.3}° near-collinear ({} / {} completed)",
        d.mean_rot_err_deg, c.mean_rot_err_deg, d.completed, c.completed
    );
    if !(d.completed == 200 && c.completed == 200 && d.mean_rot_err_deg < c.mean_rot_err_deg) {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn criterion_11() -> Outcome {
    let enc = GraphEncoder::new(Architecture { k: 6, hidden: 16, n_k: 4, use_color: false }, 11).unwrap();
    let object = synthetic(ShapeKind::Ellipsoid, [1.0, 0.7, 0.5], 80, 11);
    let cloud = sampling::normalized_cloud(&object);
    let mut shuffled = cloud.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in (1..shuffled.points.len()).rev() {
        shuffled.points.swap(i, rng.random_range(0..=i));
    }
    let invariant = encoder::encoder_forward_raw(&enc, &cloud).unwrap() == encoder::encoder_forward_raw(&enc, &shuffled).unwrap();

    let objs = [synthetic(ShapeKind::Box, [1.0, 0.7, 0.5], 120, 11)];
    let cfg = TrainConfig { epochs: 50, k: 6, hidden: 16, n_k: 4, rng_seed: 2, ..Default::default() };
    let (_, trace) = encoder::train_encoder(&objs, &cfg).unwrap();
    let (first, last) = (trace[0].loss, trace.last().unwrap().loss);
    check(invariant && last < first, format!("permutation invariant {invariant}, loss {first:.5} → {last:.5} over 50 epochs"))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap()
}

fn seeded_outputs() -> Vec<String> {
    let box_model = synthetic(ShapeKind::Box, [1.0, 0.6, 0.4], 200, 12);
    let bracket = synthetic(ShapeKind::LBracket, [1.0, 1.0, 0.4], 200, 12);
    let cloud = sampling::normalized_cloud(&box_model);
    let fps = sampling::fps_sample(&cloud, 8, 0).unwrap();
    let sphere = sampling::random_keypoints(&box_model, RandomMode::Sphere, 5, 0.0, 12).unwrap();
    let region = sampling::random_keypoints(&box_model, RandomMode::BboxRegion, 8, 0.05, 12).unwrap();
    let field = votes::compute_votes(&cloud, fps.coords(), VoteScheme::Offset).unwrap();
    let noise = VoteNoiseModel { gaussian_std: 0.02, outlier_rate: 0.1, rng_seed: 12, ..Default::default() };
    let noisy = posesim::perturb_votes(&field, &noise).unwrap();
    let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..80).map(|i| (i as f64 * 0.11).cos() + 0.5).collect();
    let critic = distances::train_critic(&a, &b, 50, distances::DEFAULT_CRITIC_LR, distances::DEFAULT_LAMBDA, 12).unwrap();
    let critic_loss = LossConfig { similarity: Similarity::Critic, ..Default::default() };
    let critic_report = loss::combined_loss(&sampling::fps_sample(&cloud, 3, 0).unwrap().into_coords(), std::slice::from_ref(&box_model), &critic_loss).unwrap();
    let direct = optimizer::optimize_keypoints_direct(
        &sampling::fps_sample(&sampling::normalized_cloud(&bracket), 3, 0).unwrap(),
        std::slice::from_ref(&bracket),
        &OptimizeConfig { steps: 20, schedule_swap: Some(10), ..Default::default() },
    )
    .unwrap();
    let ransac = optimizer::ransac_keypoint_search(
        &box_model,
        &RansacConfig { n: 3, iterations: 20, sampler: CandidateSampler::Random { mode: RandomMode::Sphere, region_radius: 0.0 }, rng_seed: 12, ..Default::default() },
    )
    .unwrap();
    let (trained, records) = encoder::train_encoder(
        std::slice::from_ref(&box_model),
        &TrainConfig { epochs: 3, k: 4, hidden: 8, n_k: 3, max_points: 64, rng_seed: 12, ..Default::default() },
    )
    .unwrap();
    let experiment = posesim::run_experiment(
        std::slice::from_ref(&box_model),
        &[Method { name: "fps".into(), keypoints: KeypointProvider::Shared(fps.clone()) }],
        &ExperimentConfig { scheme: VoteScheme::Offset, trials: 10, outlier_rate: 0.05, rng_seed: 12, ..Default::default() },
    )
    .unwrap();
    vec![
        json(&box_model),
        json(&bracket),
        json(&fps),
        json(&sphere),
        json(&region),
        json(&noisy),
        json(&critic.params().to_vec()),
        json(&critic_report),
        json(&direct),
        json(&ransac),
        json(&trained.params),
        json(&records),
        json(&experiment),
        experiment.to_csv(),
    ]
}

fn criterion_12() -> Outcome {
    let (first, second) = (seeded_outputs(), seeded_outputs());
    let differing: Vec<usize> = (0..first.len()).filter(|&i| first[i] != second[i]).collect();
    let bytes: usize = first.iter().map(String::len).sum();
    check(
        differing.is_empty(),
        format!("{} seeded outputs ({bytes} bytes) compared, differing indices {differing:?}", first.len()),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("W1 oracle equivalence", criterion_1),
        ("metric axioms", criterion_2),
        ("divergence anchors", criterion_3),
        ("critic fidelity", criterion_4),
        ("gradient checks", criterion_5),
        ("corner search best/worst ordering", criterion_6),
        ("optimization efficacy", criterion_7),
        ("schedule anchors", criterion_8),
        ("pose chain", criterion_9),
        ("dispersion effect", criterion_10),
        ("encoder sanity", criterion_11),
        ("determinism", criterion_12),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
