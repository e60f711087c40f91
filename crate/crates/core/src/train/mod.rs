//! Datasets, ADAM and the epoch loop.
//!
//! Every source of randomness is a ChaCha8 stream derived from
//! [`TrainConfig::seed`]: stream 0 initialises parameters, stream 1 builds
//! the dataset and stream 2 shuffles batches. The shuffle stream position is
//! stored in each checkpoint, so resuming reproduces an uninterrupted run bit
//! for bit.

mod adam;
mod data;
mod objective;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use adam::AdamState;
pub use data::{
    build_pair_dataset, build_sequence_dataset, pair_correspondences, ImagePair, LabelSource, PairDataConfig, PairItem,
    SequenceDataConfig, SequenceItem, TrainItem,
};
pub use objective::{batch_loss, batch_loss_and_grad, build_item_graph, ItemGraph, ObjectiveConfig, Term, ALL_TERMS};

use crate::config::{parse_bool, parse_num, KeyValues};
use crate::error::{Error, Result};
use crate::eval::Manifest;
use crate::flowlab::FlowConfig;
use crate::imgproc::DetectConfig;
use crate::losses::{LossReport, LossTerms, LossWeights};
use crate::net::{init_params, ArchSpec, Checkpoint, NormKind, ParamSet};
use crate::patches::SequenceConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Supervised terms on image pairs.
    Pair,
    /// Supervised plus consistency terms on clips.
    Sequence,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Self::Pair),
            "sequence" => Ok(Self::Sequence),
            o => Err(Error::Config(format!("unknown train mode `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub patch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate factor.
    pub lr_decay: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub flow: FlowConfig,
    pub detect: DetectConfig,
    pub labels: LabelSource,
    pub max_per_pair: usize,
    pub jitter_count: usize,
    pub jitter_offset: Option<usize>,
    pub window: usize,
    pub min_chain: usize,
    pub max_frames: usize,
    /// Dataset cap after shuffling.
    pub max_items: usize,
    pub arch: ArchSpec,
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Worker threads; 0 keeps the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pair,
            patch_size: 64,
            batch_size: 2,
            learning_rate: 2e-4,
            lr_decay: 1.0,
            epochs: 50,
            weights: LossWeights::default(),
            seed: 0,
            objective: ObjectiveConfig::default(),
            flow: FlowConfig::default(),
            detect: DetectConfig::default(),
            labels: LabelSource::Lk,
            max_per_pair: usize::MAX,
            jitter_count: 2,
            jitter_offset: None,
            window: 10,
            min_chain: 3,
            max_frames: usize::MAX,
            max_items: usize::MAX,
            arch: ArchSpec::default(),
            data: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/train"),
            resume: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let o = &mut self.objective;
        let w = &mut self.weights;
        match key {
            "mode" => self.mode = TrainMode::parse(v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "alpha" => w.alpha = parse_num(key, v)?,
            "beta" => w.beta = parse_num(key, v)?,
            "gamma" => w.gamma = parse_num(key, v)?,
            "delta" => w.delta = parse_num(key, v)?,
            "epsilon" => w.epsilon = parse_num(key, v)?,
            "zeta" => w.zeta = parse_num(key, v)?,
            "eta" => w.eta = parse_num(key, v)?,
            "soft_window" => o.soft_window = parse_num(key, v)?,
            "soft_temperature" => o.soft_temperature = parse_num(key, v)?,
            "prob_temperature" => o.prob_temperature = parse_num(key, v)?,
            "t_det" => o.t_det = parse_num(key, v)?,
            "peaky_n" => o.peaky_n = parse_num(key, v)?,
            "sigma" => o.sigma = parse_num(key, v)?,
            "tau" => o.tau = parse_num(key, v)?,
            "tau_sim" => o.tau_sim = parse_num(key, v)?,
            "lk_levels" => self.flow.levels = parse_num(key, v)?,
            "lk_window" => self.flow.window = parse_num(key, v)?,
            "lk_iters" => self.flow.max_iters = parse_num(key, v)?,
            "fb_threshold" => self.flow.fb_threshold = parse_num(key, v)?,
            "lk_normalize" => self.flow.normalize = parse_bool(key, v)?,
            "fast_threshold" => self.detect.threshold = parse_num(key, v)?,
            "max_points" => self.detect.max_points = parse_num(key, v)?,
            "nms_radius" => self.detect.nms_radius = parse_num(key, v)?,
            "labels" => self.labels = LabelSource::parse(v)?,
            "max_per_pair" => self.max_per_pair = parse_num(key, v)?,
            "jitter_count" => self.jitter_count = parse_num(key, v)?,
            "jitter_offset" => self.jitter_offset = Some(parse_num(key, v)?),
            "window" => self.window = parse_num(key, v)?,
            "min_chain" => self.min_chain = parse_num(key, v)?,
            "max_frames" => self.max_frames = parse_num(key, v)?,
            "max_items" => self.max_items = parse_num(key, v)?,
            "norm" => self.arch.norm = NormKind::parse(v)?,
            "affine" => {
                if parse_bool(key, v)? {
                    self.arch.norm = NormKind::InstanceAffine
                }
            }
            "data" => self.data = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "resume" => self.resume = Some(PathBuf::from(v)),
            "threads" => self.threads = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in kv.iter() {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.patch_size.is_multiple_of(4) || self.patch_size < 8 {
            return Err(Error::Config("patch_size must be a multiple of 4 and at least 8".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.objective.soft_window.is_multiple_of(2) || self.objective.peaky_n.is_multiple_of(2) {
            return Err(Error::Config("soft_window and peaky_n must be odd".into()));
        }
        Ok(())
    }

    fn pair_data(&self) -> PairDataConfig {
        PairDataConfig {
            patch_size: self.patch_size,
            detect: self.detect.clone(),
            flow: self.flow.clone(),
            labels: self.labels,
            max_per_pair: self.max_per_pair,
        }
    }

    fn sequence_data(&self) -> SequenceDataConfig {
        SequenceDataConfig {
            sequence: SequenceConfig {
                window: self.window,
                min_chain: self.min_chain,
                patch_size: self.patch_size,
                detect: self.detect.clone(),
                flow: self.flow.clone(),
            },
            jitter_count: self.jitter_count,
            jitter_offset: self.jitter_offset,
            max_frames: self.max_frames,
        }
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(id);
        r
    }

    /// Loss weights actually in effect: pair mode drops the consistency terms.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.mode == TrainMode::Pair {
            w.epsilon = 0.0;
            w.zeta = 0.0;
            w.eta = 0.0;
        }
        w
    }
}

/// Builds the training items the configuration describes from a manifest.
pub fn load_items(cfg: &TrainConfig) -> Result<Vec<TrainItem>> {
    let manifest = Manifest::load(&cfg.data)?;
    let mut rng = cfg.stream(1);
    let mut items: Vec<TrainItem> = match cfg.mode {
        TrainMode::Pair => {
            let pairs = manifest.load_pairs()?;
            build_pair_dataset(&pairs, &cfg.pair_data(), &mut rng)?
                .into_iter()
                .map(TrainItem::Pair)
                .collect()
        }
        TrainMode::Sequence => {
            let clips = manifest.load_clips()?;
            build_sequence_dataset(&clips, &cfg.sequence_data(), &mut rng)?
                .into_iter()
                .map(TrainItem::Sequence)
                .collect()
        }
    };
    items.truncate(cfg.max_items);
    Ok(items)
}

/// Pair items from in-memory pairs, as [`load_items`] would build them.
pub fn pair_items(cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<Vec<TrainItem>> {
    let mut rng = cfg.stream(1);
    let mut items: Vec<TrainItem> = build_pair_dataset(pairs, &cfg.pair_data(), &mut rng)?
        .into_iter()
        .map(TrainItem::Pair)
        .collect();
    items.truncate(cfg.max_items);
    Ok(items)
}

/// Sequence items from in-memory clips, as [`load_items`] would build them.
pub fn sequence_items(cfg: &TrainConfig, clips: &[Vec<crate::imgproc::Image>]) -> Result<Vec<TrainItem>> {
    let mut rng = cfg.stream(1);
    let mut items: Vec<TrainItem> = build_sequence_dataset(clips, &cfg.sequence_data(), &mut rng)?
        .into_iter()
        .map(TrainItem::Sequence)
        .collect();
    items.truncate(cfg.max_items);
    Ok(items)
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub mean_total: f64,
    pub mean_terms: LossTerms,
}

/// Optimiser, shuffle stream and epoch counter persisted for resuming.
#[derive(Clone, Debug, PartialEq)]
struct TrainState {
    epoch: u32,
    adam: AdamState,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
}

impl TrainState {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        for set in [&self.adam.m, &self.adam.v] {
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for t in set {
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    fn from_bytes(b: &[u8], params: &ParamSet<f32>) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed train_state".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = b.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        let epoch = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let rng_seed: [u8; 32] = take(32)?.try_into().unwrap();
        let rng_stream = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let rng_word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let mut sets = Vec::new();
        for _ in 0..2 {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut set = Vec::with_capacity(n.min(64));
            for _ in 0..n {
                let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let raw = take(len.checked_mul(4).ok_or_else(bad)?)?;
                set.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
            }
            sets.push(set);
        }
        let v = sets.pop().unwrap();
        let m = sets.pop().unwrap();
        let mut adam = AdamState::new(params);
        adam.m = m;
        adam.v = v;
        adam.step = step;
        if !adam.matches(params) {
            return Err(Error::Checkpoint("train_state does not match parameters".into()));
        }
        Ok(Self {
            epoch,
            adam,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }
}

/// Owns parameters and optimiser state across epochs.
pub struct Trainer {
    cfg: TrainConfig,
    items: Vec<TrainItem>,
    params: ParamSet<f32>,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("training dataset is empty".into()));
        }
        cfg.validate()?;
        let params = init_params(&cfg.arch, &mut cfg.stream(0));
        let adam = AdamState::new(&params);
        let rng = cfg.stream(2);
        Ok(Self {
            cfg,
            items,
            params,
            adam,
            rng,
            epoch: 0,
            log: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, items: Vec<TrainItem>, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, items)?;
        if ck.params.arch() != &t.cfg.arch {
            return Err(Error::Checkpoint("checkpoint architecture differs from configuration".into()));
        }
        let raw = ck
            .aux("train_state")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no train_state".into()))?;
        let st = TrainState::from_bytes(raw, &ck.params)?;
        t.params = ck.params.clone();
        t.adam = st.adam;
        let mut rng = ChaCha8Rng::from_seed(st.rng_seed);
        rng.set_stream(st.rng_stream);
        rng.set_word_pos(st.rng_word_pos);
        t.rng = rng;
        t.epoch = st.epoch as usize;
        Ok(t)
    }

    /// Appends step records to `path` as JSON lines.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        let st = TrainState {
            epoch: self.epoch as u32,
            adam: self.adam.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        };
        ck.set_aux("train_state", st.to_bytes());
        ck
    }

    /// One pass over the shuffled dataset.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut self.rng);
        let weights = self.cfg.effective_weights();
        let lr = self.cfg.learning_rate * self.cfg.lr_decay.powi(self.epoch as i32);
        let (mut steps, mut skipped) = (0usize, 0usize);
        let mut sum_total = 0.0;
        let mut sum_terms = [0.0f64; 7];
        for batch in order.chunks(self.cfg.batch_size) {
            let items: Vec<&TrainItem> = batch.iter().map(|&i| &self.items[i]).collect();
            let (mut report, grads) = batch_loss_and_grad(&self.params, &items, &self.cfg.objective, &weights)?;
            let finite = report.total.is_finite() && report.terms.is_finite();
            let applied = if finite {
                self.params.zero_grads();
                self.params.accumulate(&grads, 1.0);
                match self.adam.step(&mut self.params, lr) {
                    Ok(()) => true,
                    Err(Error::NonFinite(_)) => false,
                    Err(e) => return Err(e),
                }
            } else {
                false
            };
            if !applied {
                skipped += 1;
                report.filtered_counts.skipped += 1;
                log::warn!("epoch {}: skipping batch with non-finite loss or gradient", self.epoch);
            } else {
                steps += 1;
                sum_total += report.total;
                for (s, v) in sum_terms.iter_mut().zip(report.terms.as_array()) {
                    *s += v;
                }
            }
            if let Some(log) = self.log.as_mut() {
                let rec = StepRecord {
                    step: self.adam.step,
                    epoch: self.epoch,
                    report,
                };
                serde_json::to_writer(&mut *log, &rec).map_err(|e| Error::Format(e.to_string()))?;
                log.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
            }
        }
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io("training log", e))?;
        }
        if steps == 0 {
            return Err(Error::NonFinite(format!("every batch of epoch {} was non-finite", self.epoch)));
        }
        let n = steps as f64;
        let t = sum_terms.map(|v| v / n);
        let summary = EpochSummary {
            epoch: self.epoch,
            steps,
            skipped,
            mean_total: sum_total / n,
            mean_terms: LossTerms {
                rp: t[0],
                lpk: t[1],
                hm: t[2],
                desc: t[3],
                srp: t[4],
                mrp: t[5],
                mhm: t[6],
            },
        };
        self.epoch += 1;
        Ok(summary)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochSummary>,
    pub final_checkpoint: PathBuf,
    pub items: usize,
}

/// Trains from the configured manifest, writing `epoch_NNN.selc` after
/// every epoch, `final.selc` at the end, `train_log.jsonl` (one record per
/// step) and `epochs.jsonl`.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = || -> Result<TrainSummary> {
        let items = load_items(cfg)?;
        log::info!("training on {} items", items.len());
        run_training(cfg, items)
    };
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(run)
    } else {
        run()
    }
}

/// Epoch loop over prepared items, with the same outputs as [`train`].
pub fn run_training(cfg: &TrainConfig, items: Vec<TrainItem>) -> Result<TrainSummary> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n_items = items.len();
    let mut trainer = match &cfg.resume {
        Some(p) => Trainer::resume(cfg.clone(), items, &Checkpoint::load(p, Some(&cfg.arch))?)?,
        None => {
            for f in ["train_log.jsonl", "epochs.jsonl"] {
                let p = out.join(f);
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            Trainer::new(cfg.clone(), items)?
        }
    };
    trainer.log_to(&out.join("train_log.jsonl"))?;
    let epochs_path = out.join("epochs.jsonl");
    let mut summaries = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let s = trainer.run_epoch()?;
        log::info!("epoch {} mean loss {:.5} ({} steps)", s.epoch, s.mean_total, s.steps);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&epochs_path)
            .map_err(|e| Error::io(&epochs_path, e))?;
        let line = serde_json::to_string(&s).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&epochs_path, e))?;
        trainer.checkpoint().save(out.join(format!("epoch_{:03}.selc", s.epoch)))?;
        summaries.push(s);
    }
    let final_path = out.join("final.selc");
    trainer.checkpoint().save(&final_path)?;
    Ok(TrainSummary {
        epochs: summaries,
        final_checkpoint: final_path,
        items: n_items,
    })
}
