use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchtrack::flowlab::{lk_track, FlowConfig};
use patchtrack::imgproc::{detect_keypoints, DetectConfig};
use patchtrack::infer::{match_points, MatchMode, PyramidConfig};
use patchtrack::losses::LossWeights;
use patchtrack::matching::{refine_peak, similarity_map};
use patchtrack::net::sample_descriptor;
use patchtrack::patches::extract_patch;
use patchtrack::train::{batch_loss_and_grad, ObjectiveConfig, PairItem, TrainItem};
use patchtrack_bench::{params, scene};

fn forward(c: &mut Criterion) {
    let p = params();
    let (a, _, pts) = scene(640, 480, 1, 80);
    let mut g = c.benchmark_group("forward");
    for side in [32usize, 64, 128] {
        let patch = extract_patch(&a, &pts[0], side).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(side), &patch, |bch, patch| {
            bch.iter(|| black_box(p.forward(patch).unwrap()))
        });
    }
    g.finish();
}

fn peak(c: &mut Criterion) {
    let p = params();
    let (a, b, pts) = scene(640, 480, 1, 40);
    let da = p.forward(&extract_patch(&a, &pts[0], 32).unwrap()).unwrap();
    let db = p.forward(&extract_patch(&b, &pts[0], 32).unwrap()).unwrap();
    let d = sample_descriptor(&da, 16.0, 16.0).unwrap();
    c.bench_function("similarity_and_soft_argmax_32", |bch| {
        bch.iter(|| {
            let s = similarity_map(&db, &d).unwrap();
            black_box(refine_peak(&s, 5, 0.05))
        })
    });
}

fn classical(c: &mut Criterion) {
    let (a, b, _) = scene(640, 480, 1, 40);
    c.bench_function("fast_nms_640x480", |bch| {
        bch.iter(|| black_box(detect_keypoints(&a, &DetectConfig::default())))
    });
    let kps = detect_keypoints(&a, &DetectConfig::default());
    c.bench_function("lk_forward_backward_640x480", |bch| {
        bch.iter(|| black_box(lk_track(&a, &b, &kps, &FlowConfig::default()).unwrap()))
    });
}

fn matching_1080p(c: &mut Criterion) {
    let p = params();
    let (a, b, pts) = scene(1920, 1080, 10, 72);
    let mut g = c.benchmark_group("match_10pts_1080p");
    g.sample_size(10);
    g.bench_function("single_128", |bch| {
        bch.iter(|| black_box(match_points(&p, &a, &b, &pts, &MatchMode::single(128), None).unwrap()))
    });
    let pyr = MatchMode::Pyramid(PyramidConfig::for_resolution(1080));
    g.bench_function("pyramid_128_32", |bch| {
        bch.iter(|| black_box(match_points(&p, &a, &b, &pts, &pyr, None).unwrap()))
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let p = params();
    let (a, b, pts) = scene(320, 240, 8, 40);
    let items: Vec<TrainItem> = pts
        .iter()
        .map(|k| {
            let kb = patchtrack::Keypoint::new(k.x + 3.0, k.y + 2.0);
            TrainItem::Pair(PairItem {
                a: extract_patch(&a, k, 32).unwrap(),
                b: extract_patch(&b, &kb, 32).unwrap(),
            })
        })
        .collect();
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("pair_batch8_grad_32", |bch| {
        bch.iter(|| black_box(batch_loss_and_grad(&p, &refs, &ObjectiveConfig::default(), &LossWeights::default()).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, forward, peak, classical, matching_1080p, train_step);
criterion_main!(benches);
