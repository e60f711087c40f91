use patchtrack::eval::synth::{generate, write_dataset, HomographyFamily, Manifest, Photometric, SynthSpec, Texture};
use patchtrack::flowlab::{lk_track, FlowConfig};
use patchtrack::imgproc::{detect_keypoints, warp_homography, DetectConfig, Homography};
use proptest::prelude::*;

fn clean(family: HomographyFamily, pad: usize) -> SynthSpec {
    SynthSpec { pairs: 2, family, photometric: Photometric::none(), pad, seed: 5, ..SynthSpec::default() }
}

#[test]
fn generation_is_seeded() {
    let spec = SynthSpec { pairs: 3, clips: 1, clip_len: 4, ..SynthSpec::default() };
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    let c = generate(&SynthSpec { seed: 1, ..spec.clone() }).unwrap();
    for (x, y) in a.pairs.iter().zip(&b.pairs) {
        assert_eq!((&x.a, &x.b, x.h), (&y.a, &y.b, y.h));
    }
    assert_eq!(a.clips[0].frames, b.clips[0].frames);
    assert_ne!(a.pairs[0].a, c.pairs[0].a);
}

#[test]
fn unpadded_pair_is_exact_warp() {
    let ds = generate(&clean(HomographyFamily::Projective { max_shift: 6.0 }, 0)).unwrap();
    for p in &ds.pairs {
        let w = warp_homography(&p.a, &p.h).unwrap();
        let q = patchtrack::eval::synth::quantize(&w);
        assert_eq!(q.data(), p.b.data());
    }
}

#[test]
fn integer_translation_shifts_content() {
    let h = Homography::translation(3.0, -2.0);
    let ds = generate(&clean(HomographyFamily::Fixed(h), 16)).unwrap();
    for p in &ds.pairs {
        assert_eq!(p.h, h);
        for y in 2..p.a.height() {
            for x in 0..p.a.width() - 3 {
                assert_eq!(p.a.get(x, y), p.b.get(x + 3, y - 2));
            }
        }
    }
}

#[test]
fn padded_pair_has_no_empty_border() {
    let ds = generate(&clean(HomographyFamily::Translation { max: 8.0 }, 16)).unwrap();
    for p in &ds.pairs {
        let (w, h) = (p.b.width(), p.b.height());
        let edge = (0..w).map(|x| p.b.get(x, 0)).chain((0..h).map(|y| p.b.get(w - 1, y)));
        assert!(edge.into_iter().all(|v| v > 0.0));
    }
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { pairs: 2, clips: 1, clip_len: 3, texture: Texture::Blobs, ..SynthSpec::default() };
    let ds = generate(&spec).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let m = Manifest::load(dir.path().join("manifest.json")).unwrap();
    let pairs = m.load_pairs().unwrap();
    for (l, g) in pairs.iter().zip(&ds.pairs) {
        assert_eq!((&l.a, &l.b), (&g.a, &g.b));
        let lh = l.h.unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((lh.matrix()[r][c] - g.h.matrix()[r][c]).abs() < 1e-12);
            }
        }
    }
    assert_eq!(m.load_clips().unwrap()[0], ds.clips[0].frames);
    assert_eq!(m.clips[0].motion.len(), 3);
}

#[test]
fn lk_labels_follow_translation_under_photometric_change() {
    let spec = SynthSpec {
        pairs: 3,
        family: HomographyFamily::Translation { max: 6.0 },
        photometric: Photometric { max_noise: 0.0, blur_prob: 0.0, ..Photometric::default() },
        seed: 3,
        ..SynthSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for p in &ds.pairs {
        let kps = detect_keypoints(&p.a, &DetectConfig::default());
        for t in lk_track(&p.a, &p.b, &kps, &FlowConfig::default()).unwrap().into_iter().filter(|t| t.valid) {
            let (x, y) = p.h.apply(t.src.x as f64, t.src.y as f64);
            sum += (x - t.dst.x as f64).hypot(y - t.dst.y as f64);
            n += 1;
        }
    }
    assert!(n > 50, "only {n} valid tracks");
    assert!(sum / (n as f64) < 0.3, "mean LK error {}", sum / n as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_homographies_are_invertible(seed in 0u64..10_000) {
        let spec = SynthSpec {
            pairs: 1,
            width: 64,
            height: 64,
            family: HomographyFamily::RotationScale { max_angle_deg: 15.0, max_log_scale: 0.2 },
            seed,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let h = ds.pairs[0].h;
        let (u, v) = h.apply(20.0, 30.0);
        let (x, y) = h.inverse().unwrap().apply(u, v);
        prop_assert!((x - 20.0).abs() < 1e-9 && (y - 30.0).abs() < 1e-9);
        prop_assert!(ds.pairs[0].a.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
