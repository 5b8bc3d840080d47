use mgmap::geom::{Point, Pose};
use mgmap::harness::metrics::{mask_iou, top_mask};
use mgmap::harness::{spl, Grid};
use mgmap::supervision::{coarse_localization_gt, localization_loss, softmax, waypoint_gt, GtMode};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    (-4.0..4.0f64, -4.0..4.0f64).prop_map(|(x, y)| Point::new(x, y))
}

fn pose() -> impl Strategy<Value = Pose> {
    (-1.0..1.0f64, -1.0..1.0f64, -3.1..3.1f64).prop_map(|(x, y, h)| Pose::new(x, y, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_gt_is_an_ordered_distribution(path in prop::collection::vec(point(), 2..5), pose in pose()) {
        let gt = coarse_localization_gt(&path, &pose, 12, 12, 0.12, GtMode::Soft, 0.72).unwrap();
        prop_assert!((gt.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for a in 0..gt.d.len() {
            for b in 0..gt.d.len() {
                if gt.d[a] < gt.d[b] {
                    prop_assert!(gt.p[a] > gt.p[b]);
                }
            }
        }
        prop_assert!(gt.p_prime.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn hard_gt_is_uniform_on_its_support(path in prop::collection::vec(point(), 2..5), pose in pose(), thr in 0.1..1.5f64) {
        let gt = coarse_localization_gt(&path, &pose, 10, 10, 0.12, GtMode::Hard, thr).unwrap();
        prop_assert!((gt.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let inside = gt.d.iter().filter(|&&d| d < thr).count();
        if inside > 0 {
            for (d, p) in gt.d.iter().zip(&gt.p) {
                prop_assert_eq!(*p, if *d < thr { 1.0 / inside as f64 } else { 0.0 });
            }
        }
    }

    #[test]
    fn waypoint_stays_in_the_circle(path in prop::collection::vec(point(), 1..6), pose in pose(), r in 0.5..4.0f64) {
        let w = waypoint_gt(&pose, &path, r);
        prop_assert!(w.norm() <= r + 1e-9);
        let goal = pose.to_local(*path.last().unwrap());
        if pose.position().dist(*path.last().unwrap()) > r + 1e-6 {
            prop_assert!((w.norm() - r).abs() < 1e-6);
        } else {
            prop_assert!(w.norm() <= r + 1e-9 && (w.dist(goal) < 1e-9 || (w.norm() - r).abs() < 1e-6));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(a in prop::collection::vec(-3.0..3.0f64, 2..30), b in prop::collection::vec(-3.0..3.0f64, 2..30)) {
        let n = a.len().min(b.len());
        let (p, q) = (softmax(&a[..n]), softmax(&b[..n]));
        prop_assert!(localization_loss(&q, &p).unwrap() >= -1e-12);
        prop_assert!(localization_loss(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn top_mask_takes_a_tenth(v in prop::collection::vec(0.0..1.0f32, 1..300), w in prop::collection::vec(0.0..1.0f32, 1..300)) {
        let m = top_mask(&v);
        prop_assert_eq!(m.iter().filter(|&&x| x).count(), v.len().div_ceil(10));
        let n = v.len().min(w.len());
        let (a, b) = (top_mask(&v[..n]), top_mask(&w[..n]));
        let iou = mask_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(iou, mask_iou(&b, &a));
        prop_assert_eq!(mask_iou(&a, &a), 1.0);
    }

    #[test]
    fn spl_is_a_fraction(d in 0.0..20.0f64, t in 0.0..40.0f64, s: bool) {
        let v = spl(s, d, t);
        prop_assert!((0.0..=1.0).contains(&v));
        if !s {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn grid_bytes_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed: u64) {
        let data: Vec<f32> = (0..h * w * c).map(|k| (k as u64 ^ seed) as f32 * 0.5).collect();
        let g = Grid::from_chw(c, h, w, &data).unwrap();
        let bytes = g.encode();
        prop_assert_eq!(bytes.len(), 16 + 4 * h * w * c);
        prop_assert_eq!(Grid::decode(&bytes).unwrap(), g);
    }

    #[test]
    fn local_and_world_frames_invert(p in point(), pose in pose()) {
        let back = pose.to_world(pose.to_local(p));
        prop_assert!(back.dist(p) < 1e-12);
    }
}
