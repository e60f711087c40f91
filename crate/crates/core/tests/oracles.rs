mod common;

use common::{naive_conv, naive_nms};
use patchtrack::eval::mma::{correct_counts, eval_mma};
use patchtrack::imgproc::{bilinear, nms_keypoints, Homography, Keypoint};
use patchtrack::infer::Correspondence;
use patchtrack::net::layers::conv2d_forward;
use proptest::prelude::*;

fn vec_f64(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

type ConvCase = (usize, usize, usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>);

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3]), 1usize..10, 1usize..10).prop_flat_map(
        |(cin, cout, k, w, h)| {
            (
                Just(cin),
                Just(cout),
                Just(k),
                Just(w),
                Just(h),
                vec_f64(cin * w * h),
                vec_f64(cout * cin * k * k),
                vec_f64(cout),
            )
        },
    )
}

proptest! {
    #[test]
    fn conv_matches_direct_sum((cin, cout, k, w, h, x, wt, b) in conv_case()) {
        let mut out = vec![0.0f64; cout * w * h];
        conv2d_forward(&x, cin, w, h, &wt, &b, cout, k, &mut out, None);
        let r = naive_conv(&x, cin, w, h, &wt, &b, cout, k);
        for (a, e) in out.iter().zip(&r) {
            prop_assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn nms_matches_quadratic_scan(
        raw in prop::collection::vec((0u16..120, 0u16..90, 0u8..12), 0..300),
        radius in 0.5f32..9.0,
    ) {
        let pts: Vec<Keypoint> = raw
            .iter()
            .map(|&(x, y, s)| Keypoint::with_score(x as f32 * 0.5, y as f32 * 0.5, s as f32))
            .collect();
        let kept = nms_keypoints(&pts, radius);
        prop_assert_eq!(&kept, &naive_nms(&pts, radius));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.distance(b) >= radius);
            }
        }
    }

    #[test]
    fn mma_counts_match_brute_force(
        raw in prop::collection::vec((0.0f32..300.0, 0.0f32..200.0, 0.0f64..8.0, 0.0f64..6.3), 1..120),
        tx in -5.0f64..5.0,
        ty in -5.0f64..5.0,
    ) {
        let h = Homography::new([[1.01, 0.02, tx], [-0.01, 0.99, ty], [5e-5, 2e-5, 1.0]]).unwrap();
        let corr: Vec<Correspondence> = raw
            .iter()
            .map(|&(x, y, e, a)| {
                let (u, v) = h.apply(x as f64, y as f64);
                Correspondence {
                    src: Keypoint::new(x, y),
                    dst: Keypoint::new((u + e * a.cos()) as f32, (v + e * a.sin()) as f32),
                    confidence: 1.0,
                    track_id: -1,
                }
            })
            .collect();
        let thr = [1.0, 2.0, 3.0, 5.0];
        let brute: Vec<usize> = thr
            .iter()
            .map(|&t| {
                corr.iter()
                    .filter(|c| {
                        let (u, v) = h.apply(c.src.x as f64, c.src.y as f64);
                        ((u - c.dst.x as f64).powi(2) + (v - c.dst.y as f64).powi(2)).sqrt() <= t
                    })
                    .count()
            })
            .collect();
        prop_assert_eq!(correct_counts(&corr, &h, &thr).unwrap(), brute.clone());
        let r = eval_mma(&corr, &h, &thr).unwrap();
        for (a, c) in r.accuracy.iter().zip(&brute) {
            prop_assert_eq!(*a, *c as f64 / corr.len() as f64);
        }
        prop_assert!(r.accuracy.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn bilinear_reproduces_bilinear_surfaces(
        c in prop::array::uniform4(-3.0f64..3.0),
        w in 2usize..12,
        h in 2usize..12,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        let f = |x: f64, y: f64| c[0] + c[1] * x + c[2] * y + c[3] * x * y;
        let grid: Vec<f64> = (0..w * h).map(|i| f((i % w) as f64, (i / w) as f64)).collect();
        let (x, y) = (fx * (w - 1) as f64, fy * (h - 1) as f64);
        prop_assert!((bilinear(&grid, w, h, x, y).unwrap() - f(x, y)).abs() <= 1e-10);
    }

    #[test]
    fn homography_inverse_round_trips(
        a in -0.1f64..0.1, b in -0.1f64..0.1, tx in -20.0f64..20.0, ty in -20.0f64..20.0,
        x in 0.0f64..500.0, y in 0.0f64..500.0,
    ) {
        let h = Homography::new([[1.0 + a, b, tx], [-b, 1.0 - a, ty], [1e-5, -1e-5, 1.0]]).unwrap();
        let (u, v) = h.apply(x, y);
        let (p, q) = h.inverse().unwrap().apply(u, v);
        prop_assert!((p - x).abs() < 1e-8 && (q - y).abs() < 1e-8);
    }
}

#[test]
fn bilinear_rejects_outside() {
    let g = vec![0.0f64; 16];
    assert!(bilinear(&g, 4, 4, 3.0, 3.0).is_ok());
    assert!(bilinear(&g, 4, 4, 3.0001, 1.0).is_err());
    assert!(bilinear(&g, 4, 4, 1.0, -1e-9).is_err());
}
