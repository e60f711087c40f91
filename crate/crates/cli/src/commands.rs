use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchtrack::config::KeyValues;
use patchtrack::eval::{
    bench, evaluate_pairs, load_hpatches, synth_generate, BenchConfig, BenchMode, HomographyFamily, Manifest, Photometric,
    SynthSpec, Texture,
};
use patchtrack::flowlab::{lk_track, write_pseudo_labels};
use patchtrack::imgproc::{detect_keypoints, load_image, Homography, Image, Keypoint};
use patchtrack::infer::{format_tsv, track_pair, track_stream, Correspondence, MatchMode, PyramidConfig, StreamConfig};
use patchtrack::net::{count_flops, init_params, ArchSpec, Checkpoint, NormKind, ParamSet, LAYER_NAMES};
use patchtrack::train::{train, TrainConfig};
use patchtrack::{Error, Result};

use crate::keys::Keys;

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::Format(format!("stdout: {e}"))),
        Some(p) if p.as_os_str() == "-" => write_output(None, text),
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
    }
}

fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    Ok(Checkpoint::load(path, None)?.params)
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?
        .install(f)
}

pub fn synth(kv: KeyValues) -> Result<()> {
    let mut k = Keys::new(kv, "synth");
    let d = SynthSpec::default();
    let out = k.path("out_dir").unwrap_or_else(|| PathBuf::from("data"));
    let family = match k.str("family").as_deref().unwrap_or("translation") {
        "translation" => HomographyFamily::Translation {
            max: k.num("max_translation", 8.0)?,
        },
        "rotation" | "rotation_scale" => HomographyFamily::RotationScale {
            max_angle_deg: k.num("max_angle", 10.0)?,
            max_log_scale: k.num("max_log_scale", 0.1)?,
        },
        "projective" => HomographyFamily::Projective {
            max_shift: k.num("max_shift", 8.0)?,
        },
        "fixed" => {
            let m: Vec<f64> = k
                .list("homography")?
                .unwrap_or_else(|| vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
            if m.len() != 9 {
                return Err(Error::Config("`homography` needs nine comma-separated values".into()));
            }
            HomographyFamily::Fixed(Homography::new([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]])?)
        }
        o => return Err(Error::Config(format!("unknown homography family `{o}`"))),
    };
    let photometric = if k.flag("photometric", true)? {
        let p = Photometric::default();
        Photometric {
            gain: (k.num("gain_min", p.gain.0)?, k.num("gain_max", p.gain.1)?),
            bias: (k.num("bias_min", p.bias.0)?, k.num("bias_max", p.bias.1)?),
            max_noise: k.num("noise", p.max_noise)?,
            blur_prob: k.num("blur_prob", p.blur_prob)?,
        }
    } else {
        Photometric::none()
    };
    let spec = SynthSpec {
        texture: Texture::parse(k.str("texture").as_deref().unwrap_or("mixed"))?,
        width: k.num("width", d.width)?,
        height: k.num("height", d.height)?,
        pairs: k.num("pairs", d.pairs)?,
        family,
        photometric,
        clips: k.num("clips", d.clips)?,
        clip_len: k.num("clip_len", d.clip_len)?,
        clip_speed: k.num("clip_speed", d.clip_speed)?,
        clip_noise: k.num("clip_noise", d.clip_noise)?,
        pad: k.num("pad", d.pad)?,
        seed: k.num("seed", d.seed)?,
    };
    k.finish()?;
    let m = synth_generate(&spec, &out)?;
    eprintln!(
        "wrote {} pairs and {} clips to {}",
        m.pairs.len(),
        m.clips.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}

pub fn label(kv: KeyValues) -> Result<()> {
    let mut k = Keys::new(kv, "label");
    let manifest = Manifest::load(k.required("manifest")?)?;
    let out = k.path("out_dir").unwrap_or_else(|| PathBuf::from("labels"));
    let detect = k.detect(200)?;
    let flow = k.flow()?;
    k.finish()?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Format(format!("{}: {e}", out.display())))?;
    let mut total = 0;
    for (i, pair) in manifest.load_pairs()?.iter().enumerate() {
        let kps = detect_keypoints(&pair.a, &detect);
        let tracks = lk_track(&pair.a, &pair.b, &kps, &flow)?;
        total += tracks.iter().filter(|t| t.valid).count();
        write_pseudo_labels(&tracks, out.join(format!("pair_{i:04}.labels")))?;
    }
    for (c, frames) in manifest.load_clips()?.iter().enumerate() {
        for (i, w) in frames.windows(2).enumerate() {
            let kps = detect_keypoints(&w[0], &detect);
            let tracks = lk_track(&w[0], &w[1], &kps, &flow)?;
            total += tracks.iter().filter(|t| t.valid).count();
            write_pseudo_labels(&tracks, out.join(format!("clip_{c:03}_{i:03}.labels")))?;
        }
    }
    eprintln!("wrote {total} valid pseudo-labels to {}", out.display());
    Ok(())
}

pub fn train_cmd(kv: KeyValues) -> Result<()> {
    let cfg = TrainConfig::from_key_values(&kv)?;
    let s = train(&cfg)?;
    if let Some(last) = s.epochs.last() {
        eprintln!("epoch {} mean loss {:.6}", last.epoch, last.mean_total);
    }
    eprintln!("trained on {} items; final checkpoint {}", s.items, s.final_checkpoint.display());
    Ok(())
}

/// Pair-matching mode from `mode`, `patch_side` and `level1_side` keys.
fn match_mode(k: &mut Keys, mode: &str, height: usize) -> Result<MatchMode> {
    let peak = k.peak()?;
    let single_side = k.num("patch_side", 32usize)?;
    let l1 = match k.str("level1_side").as_deref() {
        None | Some("auto") => PyramidConfig::level1_for_height(height),
        Some(v) => patchtrack::config::parse_num("level1_side", v)?,
    };
    let l2 = k.num("level2_side", patchtrack::infer::LEVEL2_SIDE)?;
    match mode {
        "single" => Ok(MatchMode::Single {
            patch_side: single_side,
            peak,
        }),
        "pyramid" => {
            let c = PyramidConfig {
                level1_side: l1,
                level2_side: l2,
                peak,
            };
            c.validate()?;
            Ok(MatchMode::Pyramid(c))
        }
        o => Err(Error::Config(format!("unknown matching mode `{o}`"))),
    }
}

fn frames_from(k: &mut Keys) -> Result<Vec<Image>> {
    if let Some(list) = k.str("frames") {
        return list.split(',').map(|p| load_image(p.trim())).collect();
    }
    let m = Manifest::load(k.required("manifest")?)?;
    let idx: usize = k.num("clip", 0)?;
    let clip = m
        .clips
        .get(idx)
        .ok_or_else(|| Error::InvalidArgument(format!("manifest has no clip {idx}")))?;
    clip.frames.iter().map(|f| load_image(m.resolve(f))).collect()
}

pub fn track(kv: KeyValues) -> Result<()> {
    let mut k = Keys::new(kv, "track");
    let params = load_params(&k.path("checkpoint").ok_or_else(|| Error::Config("track needs `checkpoint`".into()))?)?;
    let mode = k.str("mode").unwrap_or_else(|| "single".into());
    let output = k.path("output");
    let threads = k.num("threads", 0usize)?;
    let detect = k.detect(200)?;
    let text = if mode == "stream" {
        let frames = frames_from(&mut k)?;
        let matcher = k.str("matcher").unwrap_or_else(|| "single".into());
        let mm = match_mode(&mut k, &matcher, frames[0].height())?;
        let budget = k.num("budget", 200usize)?;
        let stats_path = k.path("stats");
        k.finish()?;
        let cfg = StreamConfig {
            mode: mm,
            budget,
            detect,
        };
        let out = with_threads(threads, || track_stream(&params, &frames, &cfg))?;
        let all: Vec<Correspondence> = out.per_frame.iter().flatten().copied().collect();
        let stats = out.stats();
        eprintln!(
            "{} tracks, mean length {:.2}, max live {}",
            stats.tracks, stats.mean_length, stats.max_live
        );
        if let Some(p) = stats_path {
            let json = serde_json::to_string_pretty(&stats).expect("stats serialise") + "\n";
            write_output(Some(&p), &json)?;
        }
        format_tsv(&all)
    } else {
        let a = load_image(k.required("img_a")?)?;
        let b = load_image(k.required("img_b")?)?;
        let mm = match_mode(&mut k, &mode, a.height())?;
        let (dx, dy) = (k.num("prior_dx", 0.0f32)?, k.num("prior_dy", 0.0f32)?);
        k.finish()?;
        let kps = detect_keypoints(&a, &detect);
        let prior: Vec<Keypoint> = kps.iter().map(|p| Keypoint::new(p.x + dx, p.y + dy)).collect();
        let out = with_threads(threads, || track_pair(&params, &a, &b, &kps, &mm, Some(&prior)))?;
        eprintln!(
            "{} matches, {} border skips, {} below confidence floor",
            out.correspondences.len(),
            out.border_skipped,
            out.low_confidence
        );
        format_tsv(&out.correspondences)
    };
    write_output(output.as_deref(), &text)
}

pub fn eval(kv: KeyValues) -> Result<()> {
    let mut k = Keys::new(kv, "eval");
    let params = load_params(&k.path("checkpoint").ok_or_else(|| Error::Config("eval needs `checkpoint`".into()))?)?;
    let pairs = match (k.path("manifest"), k.path("hpatches")) {
        (Some(m), None) => Manifest::load(m)?.load_pairs()?,
        (None, Some(root)) => load_hpatches(root)?.into_iter().flat_map(|s| s.pairs).collect(),
        _ => return Err(Error::Config("eval needs exactly one of `manifest` or `hpatches`".into())),
    };
    let first = pairs
        .first()
        .ok_or_else(|| Error::EmptyInput("no evaluation pairs".into()))?;
    let mode = k.str("mode").unwrap_or_else(|| "single".into());
    let mm = match_mode(&mut k, &mode, first.a.height())?;
    let detect = k.detect(200)?;
    let thresholds = k.list("thresholds")?.unwrap_or_else(|| patchtrack::eval::DEFAULT_THRESHOLDS.to_vec());
    let output = k.path("output");
    let threads = k.num("threads", 0usize)?;
    k.finish()?;
    let r = with_threads(threads, || evaluate_pairs(&params, &pairs, &mm, &detect, &thresholds))?;
    for (t, a) in r.mma.thresholds.iter().zip(&r.mma.accuracy) {
        eprintln!("MMA@{t}: {a:.4}");
    }
    let json = serde_json::to_string_pretty(&r).expect("report serialises") + "\n";
    write_output(output.as_deref(), &json)
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("resolution `{s}` is not WxH"));
    let (w, h) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn arch_from(k: &mut Keys) -> Result<ArchSpec> {
    let mut arch = ArchSpec::default();
    if let Some(n) = k.str("norm") {
        arch.norm = NormKind::parse(&n)?;
    }
    if k.flag("affine", false)? {
        arch.norm = NormKind::InstanceAffine;
    }
    Ok(arch)
}

pub fn bench_cmd(kv: KeyValues) -> Result<()> {
    let mut k = Keys::new(kv, "bench");
    let seed = k.num("seed", 0u64)?;
    let params = match k.path("checkpoint") {
        Some(p) => load_params(&p)?,
        None => init_params(&arch_from(&mut k)?, &mut ChaCha8Rng::seed_from_u64(seed)),
    };
    let d = BenchConfig::default();
    let resolutions = match k.str("resolutions") {
        Some(s) => s.split(',').map(parse_resolution).collect::<Result<_>>()?,
        None => d.resolutions,
    };
    let modes = match k.str("modes") {
        Some(s) => s.split(',').map(|m| BenchMode::parse(m.trim())).collect::<Result<_>>()?,
        None => d.modes,
    };
    let cfg = BenchConfig {
        resolutions,
        modes,
        points: k.num("points", d.points)?,
        reps: k.num("reps", d.reps)?,
        seed,
        threads: k.num("threads", 1)?,
        peak: k.peak()?,
    };
    let output = k.path("output");
    k.finish()?;
    let r = bench(&params, &cfg)?;
    for e in &r.entries {
        eprintln!(
            "{}x{} {:?}: {:.3} GFLOP/frame, network {:.1} ms, end-to-end {:.1} ms, {:.2} FPS",
            e.width, e.height, e.mode, e.gflops_per_frame, e.network_only.median_ms, e.end_to_end.median_ms, e.fps
        );
    }
    write_output(output.as_deref(), &r.to_json())
}

pub fn info(kv: KeyValues) -> Result<()> {
    let mut k = Keys::new(kv, "info");
    let side = k.num("side", 32usize)?;
    let (source, params) = match k.path("checkpoint") {
        Some(p) => (p.display().to_string(), load_params(&p)?),
        None => {
            let seed = k.num("seed", 0u64)?;
            ("fresh".to_string(), init_params(&arch_from(&mut k)?, &mut ChaCha8Rng::seed_from_u64(seed)))
        }
    };
    k.finish()?;
    let arch = params.arch();
    let f = count_flops(arch, side)?;
    let mut s = String::new();
    s += &format!("checkpoint: {source}\n");
    s += &format!("arch: {}\n", arch.to_text());
    s += &format!("params: {}\n", params.param_count());
    for t in params.tensors() {
        s += &format!("  {:<14} {:?}\n", t.name, t.dims);
    }
    s += &format!("flops@{side}: {}\n", f.total());
    for (name, c) in LAYER_NAMES.iter().zip(f.conv) {
        s += &format!("  {name:<6} {c}\n");
    }
    s += &format!(
        "  norm {} relu {} pool {} upsample {} l2 {}\n",
        f.norm, f.relu, f.pool, f.upsample, f.l2
    );
    write_output(None, &s)
}
