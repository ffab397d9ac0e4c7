//! Property tests of the invariants each module promises.

use proptest::prelude::*;

use jointdrive::assignment::{argmin, masked_distance};
use jointdrive::geometry::{path_min_distance, point_in_polygon, rect_overlap, DrivablePolygon};
use jointdrive::grpo::{clipped_objective, compute_advantages};
use jointdrive::losses::{focal_value, gaussian_nll_value};
use jointdrive::numerics::gradcheck::{central_difference, relative_error};
use jointdrive::numerics::{grouped_attention, Tape, Tensor, Var};
use jointdrive::reward::{aggregate, comfort_term, dd_from_distance, ttc_from_step, ComfortMetric};
use jointdrive::scene::{generate_scene, ScenarioTag};
use jointdrive::{Footprint, Point2, Polyline, Pose2};

type Op = for<'t> fn(Var<'t>) -> Var<'t>;

/// Compares the tape gradient of `f` with central differences at `x`.
fn fd_error(shape: &[usize], x: &[f64], f: Op) -> f64 {
    let value = |data: &[f64]| {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
        f(v).item()
    };
    let tape = Tape::new();
    let v = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap());
    let g = tape.backward(f(v)).unwrap();
    let analytic = g.get(v).unwrap().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let numeric = central_difference(x[i], 1e-6, |xi| {
            let mut d = x.to_vec();
            d[i] = xi;
            value(&d)
        });
        worst = worst.max(relative_error(analytic[i], numeric, 1e-4));
    }
    worst
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
}

const OPS: [(&str, Op); 8] = [
    ("softmax", |v| v.softmax(1).unwrap().square().sum()),
    ("log_softmax", |v| v.log_softmax(1).unwrap().sin().sum()),
    ("layer_norm", |v| v.layer_norm(1e-5).cos().sum()),
    ("gelu", |v| v.gelu().sum()),
    ("tanh_sigmoid", |v| v.tanh().mul(v.sigmoid()).unwrap().sum()),
    ("matmul", |v| v.matmul(v.transpose().unwrap()).unwrap().square().mean()),
    ("cumsum_slice", |v| v.cumsum_last().slice_cols(1, 2).unwrap().square().sum()),
    ("select_exp", |v| v.select_rows(&[2, 0, 2]).unwrap().scale(0.5).exp().sum_last().ln().sum()),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tape_gradients_match_finite_differences(x in matrix(3, 4), op in 0..OPS.len()) {
        let (name, f) = OPS[op];
        let e = fd_error(&[3, 4], &x, f);
        prop_assert!(e < 1e-5, "{name}: relative error {e}");
    }

    #[test]
    fn attention_gradient_matches_finite_differences(x in matrix(4, 4)) {
        let e = fd_error(&[4, 4], &x, |v| {
            let q = v.scale(0.7);
            let k = v.sin();
            grouped_attention(q, k, v, &[vec![0, 1, 2], vec![3]], 2).unwrap().square().sum()
        });
        prop_assert!(e < 1e-5, "relative error {e}");
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(3, 5)) {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![3, 5], x).unwrap());
        let s = v.softmax(1).unwrap().value();
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn local_world_round_trip(x in -50.0f64..50.0, y in -50.0f64..50.0, h in -4.0f64..4.0,
                              px in -50.0f64..50.0, py in -50.0f64..50.0) {
        let pose = Pose2::new(x, y, h);
        let p = Point2::new(px, py);
        let q = pose.to_world(pose.to_local(p));
        prop_assert!(q.dist(p) < 1e-9);
        prop_assert!((pose.to_local(p).norm() - p.dist(pose.position())).abs() < 1e-9);
    }

    #[test]
    fn overlap_is_symmetric_and_rigid(ax in -4.0f64..4.0, ay in -4.0f64..4.0, ah in -3.2f64..3.2,
                                      bx in -4.0f64..4.0, by in -4.0f64..4.0, bh in -3.2f64..3.2,
                                      l in 1.0f64..5.0, w in 0.5f64..2.5,
                                      fx in -30.0f64..30.0, fy in -30.0f64..30.0, fh in -3.2f64..3.2) {
        let fa = Footprint::new(l, w).unwrap();
        let fb = Footprint::new(w + 1.0, l * 0.5).unwrap();
        let (a, b) = (Pose2::new(ax, ay, ah), Pose2::new(bx, by, bh));
        let hit = rect_overlap(&a, &fa, &b, &fb);
        prop_assert_eq!(hit, rect_overlap(&b, &fb, &a, &fa));
        // any shared corner point implies overlap
        if fa.corners(&a).iter().any(|&c| fb.contains(&b, c)) {
            prop_assert!(hit);
        }
        let frame = Pose2::new(fx, fy, fh);
        let (a2, b2) = (frame.pose_to_world(&a), frame.pose_to_world(&b));
        // rigid motion may only flip cases within rounding of contact
        let moved = rect_overlap(&a2, &fa, &b2, &fb);
        if moved != hit {
            let grown = Footprint::new(l + 1e-6, w + 1e-6).unwrap();
            let shrunk = Footprint::new(l - 1e-6, w - 1e-6).unwrap();
            prop_assert!(rect_overlap(&a, &grown, &b, &fb) != rect_overlap(&a, &shrunk, &b, &fb));
        }
    }

    #[test]
    fn rectangle_contains_interior_and_rejects_exterior(x0 in -10.0f64..0.0, y0 in -10.0f64..0.0,
                                                        wx in 0.5f64..20.0, wy in 0.5f64..20.0,
                                                        u in 0.01f64..0.99, v in 0.01f64..0.99) {
        let poly = DrivablePolygon::new(vec![
            Point2::new(x0, y0), Point2::new(x0 + wx, y0), Point2::new(x0 + wx, y0 + wy), Point2::new(x0, y0 + wy),
        ]).unwrap();
        prop_assert!(point_in_polygon(Point2::new(x0 + u * wx, y0 + v * wy), &poly));
        prop_assert!(!point_in_polygon(Point2::new(x0 + wx + u, y0 + v * wy), &poly));
        prop_assert!(poly.vertices().iter().all(|&p| point_in_polygon(p, &poly)));
    }

    #[test]
    fn path_distance_is_zero_on_the_path(pts in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 2..6),
                                         s in 0.0f64..1.0, off in -3.0f64..3.0) {
        let points: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
        let Ok(path) = Polyline::new(points) else { return Ok(()); };
        let at = path.point_at(s * path.length());
        prop_assert!(path_min_distance(&[at], &path) < 1e-9);
        let n = { let t = path.tangent_at(s * path.length()); Point2::new(-t.y, t.x) };
        let d = path_min_distance(&[at.add(n.scale(off))], &path);
        prop_assert!(d <= off.abs() + 1e-9);
    }

    #[test]
    fn aggregate_stays_in_unit_interval(nc in 0.0f64..=1.0, dac in 0.0f64..=1.0, dd in 0.0f64..=1.0,
                                        ep in 0.0f64..=1.0, ttc in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        let r = aggregate(nc, dac, dd, ep, ttc, c);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(aggregate(0.0, dac, dd, ep, ttc, c), 0.0);
        prop_assert!((aggregate(1.0, 1.0, 1.0, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn subscores_are_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0, t in 1usize..20, h in 1usize..20, m in 0usize..6) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(dd_from_distance(lo) >= dd_from_distance(hi));
        let s = ttc_from_step(Some(t), h);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(ttc_from_step(Some(t + 1), h) >= s);
        let metric = ComfortMetric::ALL[m];
        let (c_lo, c_hi) = (comfort_term(metric, lo).score, comfort_term(metric, hi).score);
        prop_assert!(c_lo >= c_hi && c_hi > 0.0 && c_lo <= 1.0);
    }

    #[test]
    fn advantages_are_standardised(r in prop::collection::vec(0.0f64..1.0, 2..16), hit in prop::collection::vec(any::<bool>(), 16)) {
        let collided = &hit[..r.len()];
        let (a, t) = compute_advantages(&r, collided, 1e-6);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 1e-3 {
            let am = a.iter().sum::<f64>() / n;
            let asd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(am.abs() < 1e-9);
            // the additive offset shrinks the spread by exactly std/(std + eps)
            prop_assert!((asd - std / (std + 1e-6)).abs() < 1e-12);
            prop_assert!((asd - 1.0).abs() <= 1e-6 / std);
        }
        for i in 0..r.len() {
            if collided[i] {
                prop_assert_eq!(t[i], -1.0);
            } else {
                prop_assert_eq!(t[i], a[i].max(0.0));
            }
        }
    }

    #[test]
    fn clipping_is_pessimistic(ratio in 0.0f64..3.0, adv in -2.0f64..2.0, eps in 0.05f64..0.5) {
        let c = clipped_objective(ratio, adv, eps);
        prop_assert!(c <= ratio * adv + 1e-15);
        if (1.0 - eps..=1.0 + eps).contains(&ratio) {
            prop_assert_eq!(c, ratio * adv);
        }
    }

    #[test]
    fn focal_loss_is_nonnegative_and_shrinks_with_gamma(l in prop::collection::vec(-4.0f64..4.0, 2..7), k in 0usize..7, g in 0.0f64..4.0) {
        let k = k % l.len();
        let f0 = focal_value(&l, k, 0.0, 0.25);
        let fg = focal_value(&l, k, g, 0.25);
        prop_assert!(fg >= 0.0 && fg <= f0 + 1e-12);
    }

    #[test]
    fn gaussian_nll_minimised_at_the_mean(mx in -5.0f64..5.0, my in -5.0f64..5.0, s in 0.1f64..3.0, dx in -2.0f64..2.0) {
        let mu = [Point2::new(mx, my)];
        let sg = [Point2::new(s, s)];
        let at_mean = gaussian_nll_value(&mu, &sg, &mu, &[true]).unwrap();
        let off = gaussian_nll_value(&mu, &sg, &[Point2::new(mx + dx, my)], &[true]).unwrap();
        prop_assert!(off >= at_mean);
    }

    #[test]
    fn masked_distance_ignores_invalid_steps(p in prop::collection::vec((-9.0f64..9.0, -9.0f64..9.0), 8),
                                             junk in -100.0f64..100.0) {
        let pred: Vec<Point2> = p.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        let mut gt = pred.clone();
        let valid: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        for i in (1..8).step_by(2) {
            gt[i] = Point2::new(junk, junk);
        }
        prop_assert_eq!(masked_distance(&pred, &gt, &valid).unwrap(), 0.0);
    }

    #[test]
    fn argmin_picks_first_minimum(v in prop::collection::vec(-5i32..5, 1..10)) {
        let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let i = argmin(&f).unwrap();
        let m = f.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(f[i], m);
        prop_assert!(f[..i].iter().all(|&x| x > m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenes_are_valid_and_frame_invariant(seed in any::<u64>(), tag in 0usize..5,
                                                      fx in -40.0f64..40.0, fh in -3.2f64..3.2) {
        let s = generate_scene(seed, ScenarioTag::ALL[tag]).unwrap();
        prop_assert!(s.validate().is_ok());
        prop_assert_eq!(&generate_scene(seed, ScenarioTag::ALL[tag]).unwrap(), &s);
        let frame = Pose2::new(fx, -fx, fh);
        let back = s.to_frame(&frame).from_frame(&frame);
        prop_assert!(back.ego.current().position().dist(s.ego.current().position()) < 1e-9);
        for (a, b) in back.agents.iter().zip(&s.agents) {
            prop_assert!(a.current().position().dist(b.current().position()) < 1e-9);
        }
    }
}
