use patchtrack::imgproc::{Image, Keypoint};
use patchtrack::losses::{
    gaussian_density, gaussian_target, loss_self, loss_sup, weighted_total, LossTerms, LossWeights, SelfTerms,
    SupTerms,
};
use patchtrack::matching::{probability_map, refine_peak, sample_probability, soft_argmax, SimilarityMap};
use patchtrack::net::{init_params, sample_descriptor, ArchSpec, NormKind};
use patchtrack::patches::extract_patch;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sim_map() -> impl Strategy<Value = SimilarityMap<f64>> {
    (2usize..20, 2usize..20).prop_flat_map(|(w, h)| {
        prop::collection::vec(-1.0f64..1.0, w * h).prop_map(move |d| SimilarityMap::new(w, h, d).unwrap())
    })
}

proptest! {
    #[test]
    fn probability_maps_sum_to_one(s in sim_map(), t in 0.02f64..2.0) {
        let p = probability_map(&s, t);
        let sum: f64 = p.data.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.data.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sampled_probability_stays_in_unit_interval(s in sim_map(), fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let p = probability_map(&s, 0.1);
        let v = sample_probability(&p, fx * (s.width - 1) as f64, fy * (s.height - 1) as f64).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn soft_argmax_stays_in_window(s in sim_map(), t in 0.01f64..1.0) {
        let best = (0..s.data.len()).max_by(|&a, &b| s.data[a].total_cmp(&s.data[b])).unwrap();
        let c = (best % s.width, best / s.width);
        let (x, y) = soft_argmax(&s, c, 5, t);
        prop_assert!((x - c.0 as f64).abs() <= 2.0 + 1e-12 && (y - c.1 as f64).abs() <= 2.0 + 1e-12);
        prop_assert!(x >= 0.0 && y >= 0.0 && x <= (s.width - 1) as f64 && y <= (s.height - 1) as f64);
    }

    #[test]
    fn weighted_total_is_linear(v in prop::array::uniform7(0.0f64..10.0), k in 0.0f64..4.0) {
        let t = LossTerms { rp: v[0], lpk: v[1], hm: v[2], desc: v[3], srp: v[4], mrp: v[5], mhm: v[6] };
        let w = LossWeights::default();
        let ws = LossWeights {
            alpha: k * w.alpha, beta: k * w.beta, gamma: k * w.gamma, delta: k * w.delta,
            epsilon: k * w.epsilon, zeta: k * w.zeta, eta: k * w.eta,
        };
        prop_assert!((weighted_total(&t, &ws) - k * weighted_total(&t, &w)).abs() < 1e-9);
    }

    #[test]
    fn descriptors_are_unit_length(seed in 0u64..1000, x in 20.0f32..44.0, y in 20.0f32..44.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&ArchSpec::default(), &mut rng);
        let img = Image::from_fn(64, 64, |i, j| {
            let (u, v) = (i as f32 * 0.37 + seed as f32, j as f32 * 0.23);
            0.5 + 0.3 * (u.sin() * v.cos()) + 0.1 * ((u * 3.1).cos())
        });
        let m = params.forward(&extract_patch(&img, &Keypoint::new(x, y), 32).unwrap()).unwrap();
        for i in 0..m.plane() {
            let n: f32 = (0..m.dim).map(|c| m.data[c * m.plane() + i].powi(2)).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
        let d = sample_descriptor(&m, 15.3, 16.8).unwrap();
        prop_assert!((d.norm() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn gaussian_centre_values() {
    for &sigma in &[0.5f64, 1.0, 2.0, 3.3] {
        let d = gaussian_density(21, 17, (10.0, 8.0), sigma);
        let t = gaussian_target(21, 17, (10.0, 8.0), sigma);
        let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        assert!((d[8 * 21 + 10] - peak).abs() < 1e-15);
        assert_eq!(t[8 * 21 + 10], 1.0);
        assert!(t.iter().all(|&v| v <= 1.0));
    }
}

#[test]
fn default_weights_reproduce_reference_totals() {
    let w = LossWeights::default();
    assert_eq!(loss_sup(&SupTerms { rp: 1.0, lpk: 1.0, hm: 1.0, desc: 1.0 }, &w).total, 3.0);
    assert_eq!(loss_self(&SelfTerms { srp: 1.0, mrp: 1.0, mhm: 1.0 }, &w).total, 11.0);
}

#[test]
fn delta_map_peaks_exactly() {
    let mut d = vec![0.0f64; 32 * 32];
    d[13 * 32 + 9] = 1.0;
    let s = SimilarityMap::new(32, 32, d).unwrap();
    assert_eq!(refine_peak(&s, 5, 0.05), (9.0, 13.0));
}

#[test]
fn affine_network_keeps_unit_norm() {
    let arch = ArchSpec { norm: NormKind::InstanceAffine, ..ArchSpec::default() };
    let params = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(params.param_count(), 8216);
    let img = Image::from_fn(48, 48, |i, j| ((i * 7 + j * 13) % 17) as f32 / 17.0);
    let m = params.forward(&extract_patch(&img, &Keypoint::new(24.0, 24.0), 32).unwrap()).unwrap();
    let d = sample_descriptor(&m, 10.0, 20.0).unwrap();
    assert!((d.norm() - 1.0).abs() < 1e-5);
}
