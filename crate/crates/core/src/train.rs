//! Training data, reconstruction loss and the optimization loop.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardVars, OfaNet, PipelineMode, Prepared, ViewFlows};
use crate::nn::{Adam, Grads, Graph, ParamStore, Var};
use crate::sensing::{encode, encode_single, normalize_and_add_noise, MaskSet, Measurement, VideoCube, ViewId};

/// Where one view of a pair was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSource {
    pub sequence: String,
    pub start: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x1: VideoCube,
    pub x2: VideoCube,
    pub sources: [PairSource; 2],
}

impl TrainPair {
    pub fn truth(&self) -> [&Array3<f32>; 2] {
        [self.x1.data(), self.x2.data()]
    }

    /// Snapshot of this pair under `masks`; for `sigma > 0` the snapshot is
    /// max-normalized before noise is added.
    pub fn measure(&self, masks: &MaskSet, mode: PipelineMode, sigma: f64, seed: u64) -> Result<Measurement> {
        let clean = match mode {
            PipelineMode::Dual => encode(&self.x1, &self.x2, masks, 0.0, 0)?,
            PipelineMode::SingleView => {
                let x = VideoCube::new(self.x1.data().clone(), ViewId::Single)?;
                encode_single(&x, masks, 0.0, 0)?
            }
        };
        if sigma > 0.0 {
            normalize_and_add_noise(&clean, sigma, seed)
        } else {
            Ok(clean)
        }
    }
}

// ---------------------------------------------------------------------------
// frame-directory corpus

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone)]
struct Sequence {
    name: String,
    frames: Vec<PathBuf>,
    rows: usize,
    cols: usize,
}

fn list_sequences(root: &Path) -> Result<Vec<Sequence>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let mut frames: Vec<PathBuf> = fs::read_dir(&d)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        if frames.is_empty() {
            continue;
        }
        frames.sort();
        let (w, h) = image::image_dimensions(&frames[0])?;
        out.push(Sequence {
            name: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            frames,
            rows: h as usize,
            cols: w as usize,
        });
    }
    Ok(out)
}

/// Grayscale frame in `[0, 1]` using BT.601 luma weights.
pub fn load_luma(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        let p = img.get_pixel(c as u32, r as u32).0;
        ((0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0) as f32
    }))
}

/// Deterministic random crops of `B`-frame cubes from two distinct
/// sequences per pair. `root` holds one subdirectory of frames per sequence.
pub fn build_corpus(root: &Path, crop: (usize, usize), frames: usize, count: usize, seed: u64) -> Result<Vec<TrainPair>> {
    if frames == 0 || crop.0 == 0 || crop.1 == 0 {
        return Err(Error::param("crop size and B must be positive"));
    }
    let seqs: Vec<Sequence> = list_sequences(root)?
        .into_iter()
        .filter(|s| s.frames.len() >= frames && s.rows >= crop.0 && s.cols >= crop.1)
        .collect();
    if seqs.len() < 2 {
        return Err(Error::Config(format!(
            "{} holds {} usable sequences (need 2 with >= {frames} frames of at least {}x{})",
            root.display(),
            seqs.len(),
            crop.0,
            crop.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<PathBuf, Array2<f32>> = HashMap::new();
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(0..seqs.len());
        let mut b = rng.random_range(0..seqs.len() - 1);
        if b >= a {
            b += 1;
        }
        let (a, b) = (a.min(b), a.max(b));
        let mut cut = |s: &Sequence, rng: &mut ChaCha8Rng| -> Result<(Array3<f32>, PairSource)> {
            let start = rng.random_range(0..=s.frames.len() - frames);
            let top = rng.random_range(0..=s.rows - crop.0);
            let left = rng.random_range(0..=s.cols - crop.1);
            let mut cube = Array3::<f32>::zeros((frames, crop.0, crop.1));
            for t in 0..frames {
                let path = &s.frames[start + t];
                if !cache.contains_key(path) {
                    let f = load_luma(path)?;
                    if f.dim() != (s.rows, s.cols) {
                        return Err(Error::shape(format!("{} differs in size from its sequence", path.display())));
                    }
                    cache.insert(path.clone(), f);
                }
                cube.index_axis_mut(Axis(0), t)
                    .assign(&cache[path].slice(s![top..top + crop.0, left..left + crop.1]));
            }
            Ok((
                cube,
                PairSource {
                    sequence: s.name.clone(),
                    start,
                    top,
                    left,
                },
            ))
        };
        let (c1, s1) = cut(&seqs[a], &mut rng)?;
        let (c2, s2) = cut(&seqs[b], &mut rng)?;
        pairs.push(TrainPair {
            x1: VideoCube::new(c1, ViewId::One)?,
            x2: VideoCube::new(c2, ViewId::Two)?,
            sources: [s1, s2],
        });
    }
    Ok(pairs)
}

/// One line per pair, for run-to-run comparison.
pub fn pair_manifest(pairs: &[TrainPair]) -> String {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let [a, b] = &p.sources;
            format!(
                "{i}\t{}:{}:{}:{}\t{}:{}:{}:{}\n",
                a.sequence, a.start, a.top, a.left, b.sequence, b.start, b.top, b.left
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synthetic scenes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    /// Upper bound on object speed in pixels per frame.
    pub max_speed: f64,
    /// Fixes every object's speed instead of drawing it from `[0, max_speed]`.
    #[serde(default)]
    pub speed: Option<f64>,
    pub max_objects: usize,
}

impl SynthConfig {
    pub fn new(rows: usize, cols: usize, frames: usize) -> Self {
        Self {
            rows,
            cols,
            frames,
            max_speed: 3.0,
            speed: None,
            max_objects: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthObject {
    pub shape: ShapeKind,
    /// Center at frame 0 (column, row) in pixel units.
    pub center: (f64, f64),
    /// Displacement per frame (columns, rows).
    pub velocity: (f64, f64),
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    pub background: Array2<f64>,
    pub objects: Vec<SynthObject>,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

const DISK_SUBSAMPLES: usize = 8;

impl SynthScene {
    pub fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (rows, cols) = (cfg.rows, cfg.cols);
        let mut waves = Vec::new();
        for _ in 0..3 {
            let f: (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.02..0.08);
            waves.push((f, phase, amp));
        }
        let base: f64 = rng.random_range(0.1..0.4);
        let background = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let v: f64 = waves
                .iter()
                .map(|((fx, fy), ph, a)| a * (fx * c as f64 + fy * r as f64 + ph).sin())
                .sum();
            (base + v).clamp(0.0, 1.0)
        });
        let n = rng.random_range(1..=cfg.max_objects.max(1));
        let span = (cfg.frames.saturating_sub(1)) as f64;
        let small = rows.min(cols) as f64;
        let objects = (0..n)
            .map(|_| {
                let shape = if rng.random_bool(0.5) {
                    ShapeKind::Rect {
                        half_w: rng.random_range(0.08..0.18) * small,
                        half_h: rng.random_range(0.08..0.18) * small,
                    }
                } else {
                    ShapeKind::Disk {
                        radius: rng.random_range(0.08..0.18) * small,
                    }
                };
                let speed = cfg.speed.unwrap_or_else(|| rng.random_range(0.0..=cfg.max_speed));
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let velocity = (speed * angle.cos(), speed * angle.sin());
                let (hw, hh) = match shape {
                    ShapeKind::Rect { half_w, half_h } => (half_w, half_h),
                    ShapeKind::Disk { radius } => (radius, radius),
                };
                let place = |half: f64, v: f64, len: usize, rng: &mut ChaCha8Rng| {
                    let lo = half + (-v * span).max(0.0);
                    let hi = len as f64 - half - (v * span).max(0.0);
                    if lo < hi {
                        rng.random_range(lo..hi)
                    } else {
                        len as f64 / 2.0
                    }
                };
                let cx = place(hw, velocity.0, cols, rng);
                let cy = place(hh, velocity.1, rows, rng);
                SynthObject {
                    shape,
                    center: (cx, cy),
                    velocity,
                    intensity: rng.random_range(0.55..1.0),
                }
            })
            .collect();
        Self {
            rows,
            cols,
            frames: cfg.frames,
            background,
            objects,
        }
    }

    /// Fraction of each pixel covered by `obj` at frame `t`. Exact for
    /// rectangles, `8x8` supersampled for disks.
    pub fn coverage(&self, obj: &SynthObject, t: usize) -> Array2<f64> {
        let cx = obj.center.0 + obj.velocity.0 * t as f64;
        let cy = obj.center.1 + obj.velocity.1 * t as f64;
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            let (r, c) = (r as f64, c as f64);
            match obj.shape {
                ShapeKind::Rect { half_w, half_h } => {
                    overlap(c, c + 1.0, cx - half_w, cx + half_w) * overlap(r, r + 1.0, cy - half_h, cy + half_h)
                }
                ShapeKind::Disk { radius } => {
                    let n = DISK_SUBSAMPLES;
                    let mut hit = 0;
                    for i in 0..n {
                        for j in 0..n {
                            let y = r + (i as f64 + 0.5) / n as f64 - cy;
                            let x = c + (j as f64 + 0.5) / n as f64 - cx;
                            if x * x + y * y <= radius * radius {
                                hit += 1;
                            }
                        }
                    }
                    hit as f64 / (n * n) as f64
                }
            }
        })
    }

    pub fn render(&self) -> Array3<f32> {
        let mut out = Array3::<f32>::zeros((self.frames, self.rows, self.cols));
        for t in 0..self.frames {
            let mut f = self.background.clone();
            for o in &self.objects {
                let cov = self.coverage(o, t);
                ndarray::Zip::from(&mut f).and(&cov).for_each(|p, &a| {
                    *p = *p * (1.0 - a) + o.intensity * a;
                });
            }
            out.index_axis_mut(Axis(0), t).assign(&f.mapv(|v| v.clamp(0.0, 1.0) as f32));
        }
        out
    }
}

/// Moving-shape pairs with the default scene parameters.
pub fn synth_corpus(rows: usize, cols: usize, frames: usize, count: usize, seed: u64) -> Result<Vec<TrainPair>> {
    synth_corpus_with(&SynthConfig::new(rows, cols, frames), count, seed)
}

pub fn synth_corpus_with(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<TrainPair>> {
    if cfg.rows == 0 || cfg.cols == 0 || cfg.frames == 0 {
        return Err(Error::param("synthetic geometry must be positive"));
    }
    if cfg.speed.is_some_and(|s| s > cfg.max_speed) {
        return Err(Error::param("fixed speed exceeds the speed bound"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let a = SynthScene::generate(cfg, &mut rng).render();
        let b = SynthScene::generate(cfg, &mut rng).render();
        let src = |k: usize| PairSource {
            sequence: format!("synth-{seed}-{i}-{k}"),
            start: 0,
            top: 0,
            left: 0,
        };
        pairs.push(TrainPair {
            x1: VideoCube::new(a, ViewId::One)?,
            x2: VideoCube::new(b, ViewId::Two)?,
            sources: [src(0), src(1)],
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// loss

fn sq_dist(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// `α · Σ_views ‖X̃ − X‖² + Σ_views ‖X̂ − X‖²`.
pub fn loss(coarse: &[Array3<f32>], refined: &[Array3<f32>], truth: &[Array3<f32>], alpha: f64) -> Result<f64> {
    if coarse.len() != truth.len() || refined.len() != truth.len() {
        return Err(Error::shape("loss needs one coarse and one refined cube per view"));
    }
    let mut sep = 0.0;
    let mut refn = 0.0;
    for ((c, r), x) in coarse.iter().zip(refined).zip(truth) {
        if c.dim() != x.dim() || r.dim() != x.dim() {
            return Err(Error::shape(format!("loss operands {:?} / {:?} vs {:?}", c.dim(), r.dim(), x.dim())));
        }
        sep += sq_dist(c, x);
        refn += sq_dist(r, x);
    }
    Ok(alpha * sep + refn)
}

/// Loss value and gradient seeds for a forward pass.
pub fn graph_loss(g: &Graph, fv: &crate::model::ForwardVars, truth: &[&Array3<f32>], alpha: f64) -> (f64, Vec<(Var, Array3<f32>)>) {
    let mut total = 0.0;
    let mut seeds = Vec::new();
    for (k, x) in truth.iter().enumerate() {
        let c = g.value(fv.coarse[k]);
        let d = c - *x;
        total += alpha * d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        if alpha != 0.0 {
            seeds.push((fv.coarse[k], d.mapv(|v| v * (2.0 * alpha) as f32)));
        }
        for (t, &fr) in fv.refined[k].iter().enumerate() {
            let target = x.slice(s![t..t + 1, .., ..]);
            let d = g.value(fr) - &target;
            total += d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            seeds.push((fr, d.mapv(|v| 2.0 * v)));
        }
    }
    (total, seeds)
}

/// A prepared network input with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub prep: Prepared,
    pub truth: Vec<Array3<f32>>,
}

impl Sample {
    pub fn new(model: &OfaNet, pair: &TrainPair, masks: &MaskSet, sigma: f64, seed: u64) -> Result<Self> {
        let y = pair.measure(masks, model.config.mode, sigma, seed)?;
        let truth = match model.config.mode {
            PipelineMode::Dual => vec![pair.x1.data().clone(), pair.x2.data().clone()],
            PipelineMode::SingleView => vec![pair.x1.data().clone()],
        };
        Ok(Self {
            prep: model.prepare(&y, masks)?,
            truth,
        })
    }
}

/// Loss of `model` evaluated with parameters `store`, plus its gradient when
/// requested. Returns the classical flows that were used.
pub fn evaluate_loss(
    model: &OfaNet,
    store: &ParamStore,
    sample: &Sample,
    alpha: f64,
    fixed_flows: Option<&[ViewFlows]>,
    with_grad: bool,
) -> Result<(f64, Option<Grads>, Vec<ViewFlows>)> {
    let mut g = Graph::new(store);
    let fv = model.forward_with(&mut g, &sample.prep, fixed_flows)?;
    let truth: Vec<&Array3<f32>> = sample.truth.iter().collect();
    let (l, seeds) = graph_loss(&g, &fv, &truth, alpha);
    let grads = with_grad.then(|| g.backward(seeds).params);
    Ok((l, grads, fv.flows))
}

fn replay_loss(vals: &[Array3<f64>], fv: &ForwardVars, truth: &[Array3<f32>], alpha: f64) -> f64 {
    let mut total = 0.0;
    for (k, x) in truth.iter().enumerate() {
        let c = &vals[fv.coarse[k].index()];
        total += alpha * c.iter().zip(x.iter()).map(|(&a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
        for (t, fr) in fv.refined[k].iter().enumerate() {
            let r = &vals[fr.index()];
            let target = x.slice(s![t..t + 1, .., ..]);
            total += r.iter().zip(target.iter()).map(|(&a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
        }
    }
    total
}

// ---------------------------------------------------------------------------
// optimization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Stops after this many optimizer steps, if set.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 2,
            lr: 3e-4,
            lr_decay: 0.9,
            decay_every: 10,
            alpha: 1.0,
            seed: 0,
            noise_sigma: 0.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::param("epochs, batch size and decay interval must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) || !(self.alpha >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::param("learning rate, decay, alpha and noise must be non-negative"));
        }
        Ok(())
    }

    /// `lr₀ · decay^⌊epoch / decay_every⌋` (epochs counted from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Receives `epoch-NNNN` checkpoint directories.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only step log.
    pub log: Option<PathBuf>,
    /// Written into every checkpoint.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs_completed: usize,
    pub mask_ref: String,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_HEADER: &str = "step\tepoch\tloss\tlr\twall_s";

fn dump_nonfinite(out: &TrainOutputs, step: usize, epoch: usize, pair: usize, loss: f64) -> String {
    let msg = format!("step {step} epoch {epoch} pair {pair}: loss {loss}");
    if let Some(dir) = &out.checkpoint_dir {
        let _ = fs::create_dir_all(dir);
        let _ = fs::write(dir.join(format!("nonfinite-step-{step}.txt")), format!("{msg}\n"));
    }
    msg
}

/// Optimizes `model` on `corpus`, regenerating every measurement from the
/// ground truth and the shared `masks`.
pub fn train(model: &mut OfaNet, masks: &MaskSet, corpus: &[TrainPair], cfg: &TrainConfig, out: &TrainOutputs) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::param("training corpus is empty"));
    }
    let mask_ref = masks.reference();
    let mut log = match &out.log {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            let fresh = !p.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut steps = Vec::new();
    let mut checkpoints = Vec::new();
    let started = Instant::now();
    let mut step = 0usize;
    let mut epochs_completed = 0;
    'epochs: for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut grads = Grads::new(model.store.len());
            let mut batch_loss = 0.0;
            for &i in batch {
                let noise_seed: u64 = rng.random();
                let sample = Sample::new(model, &corpus[i], masks, cfg.noise_sigma, noise_seed)?;
                let (l, g, _) = evaluate_loss(model, &model.store, &sample, cfg.alpha, None, true)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(dump_nonfinite(out, step, epoch, i, l)));
                }
                batch_loss += l;
                grads.merge(g.expect("requested"));
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite(dump_nonfinite(out, step, epoch, batch[0], f64::NAN)));
            }
            adam.step(&mut model.store, &grads);
            let rec = StepRecord {
                step,
                epoch,
                loss: batch_loss,
                lr: adam.lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}\t{}\t{:.9e}\t{:.6e}\t{:.3}", rec.step, rec.epoch, rec.loss, rec.lr, rec.seconds)?;
            }
            steps.push(rec);
            step += 1;
        }
        epochs_completed = epoch + 1;
        if let Some(dir) = &out.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch:04}"));
            model.save(
                &path,
                &[
                    ("step", step.to_string()),
                    ("epoch", epoch.to_string()),
                    ("config_hash", out.config_hash.clone()),
                    ("mask_ref", mask_ref.clone()),
                ],
            )?;
            checkpoints.push(path);
        }
    }
    Ok(TrainReport {
        steps,
        epochs_completed,
        mask_ref,
        checkpoints,
    })
}

/// Mean squared error of coarse and refined outputs over a set of samples.
pub fn dataset_mse(model: &OfaNet, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut sep = 0.0;
    let mut refn = 0.0;
    let mut n = 0usize;
    for s in samples {
        let mut g = Graph::new(&model.store);
        let fv = model.forward(&mut g, &s.prep)?;
        for (k, x) in s.truth.iter().enumerate() {
            sep += sq_dist(g.value(fv.coarse[k]), x);
            let r = crate::model::stack_frames(&g, &fv.refined[k]);
            refn += sq_dist(&r, x);
            n += x.len();
        }
    }
    Ok((sep / n as f64, refn / n as f64))
}

// ---------------------------------------------------------------------------
// gradient check

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
    /// Draws rejected because every tried step crossed a rectifier kink.
    pub kink_rejections: usize,
}

/// Relative discrepancy `|a − n| / max(|a|, |n|)`; zero when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// Central-difference check of `k` randomly drawn trainable scalars.
/// Classical flows are held at their unperturbed values, matching their
/// treatment as constants in the analytic gradient.
pub fn grad_check(model: &OfaNet, sample: &Sample, alpha: f64, k: usize, eps: f32, seed: u64) -> Result<GradCheckReport> {
    const HALVINGS: usize = 8;
    let mut g = Graph::new(&model.store);
    let fv = model.forward(&mut g, &sample.prep)?;
    let truth: Vec<&Array3<f32>> = sample.truth.iter().collect();
    let (_, seeds) = graph_loss(&g, &fv, &truth, alpha);
    let grads = g.backward(seeds).params;
    let candidates: Vec<_> = model
        .store
        .ids()
        .filter(|&id| model.store.is_trainable(id) && grads.get(id).is_some())
        .collect();
    if candidates.is_empty() {
        return Err(Error::param("no trainable parameters receive gradients"));
    }
    let mut params: Vec<ArrayD<f64>> = model.store.ids().map(|id| model.store.get(id).mapv(f64::from)).collect();
    let base = g.activation_pattern(&g.replay_f64(&params));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(k);
    let mut kink_rejections = 0;
    let mut draws = 0;
    while entries.len() < k && draws < k * 20 {
        draws += 1;
        let id = candidates[rng.random_range(0..candidates.len())];
        let index = rng.random_range(0..params[id.index()].len());
        let orig = params[id.index()].as_slice().expect("contiguous")[index];
        let mut at = |v: f64| -> (f64, Vec<bool>) {
            params[id.index()].as_slice_mut().expect("contiguous")[index] = v;
            let vals = g.replay_f64(&params);
            (replay_loss(&vals, &fv, &sample.truth, alpha), g.activation_pattern(&vals))
        };
        let mut step = f64::from(eps);
        let mut found = None;
        for _ in 0..HALVINGS {
            let (plus, pp) = at(orig + step);
            let (minus, pm) = at(orig - step);
            if pp == base && pm == base {
                found = Some((plus - minus) / (2.0 * step));
                break;
            }
            step *= 0.5;
        }
        params[id.index()].as_slice_mut().expect("contiguous")[index] = orig;
        let Some(numeric) = found else {
            kink_rejections += 1;
            continue;
        };
        let analytic = f64::from(grads.get(id).expect("candidate").as_slice().expect("contiguous")[index]);
        entries.push(GradCheckEntry {
            name: model.store.entry(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries,
        kink_rejections,
    })
}
