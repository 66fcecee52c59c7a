//! Quality metrics, frame-wise curves, noise / compression sweeps and timing.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Array3, Axis};

use crate::error::{Error, Result};
use crate::model::{OfaNet, PipelineMode};
use crate::sensing::{MaskSet, Measurement};
use crate::solvers::{gap_tv, gap_tv_single, pnp_solve, GapTvConfig, TvDenoiser};
use crate::train::TrainPair;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.01, 0.05, 0.1, 0.2];
pub const DEFAULT_RATES: [usize; 3] = [6, 10, 14];

fn check_same(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("frames differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty frame".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the frames agree.
pub fn psnr(reference: ArrayView2<f32>, est: ArrayView2<f32>, peak: f64) -> Result<f64> {
    check_same(reference, est)?;
    let mse = reference
        .iter()
        .zip(est.iter())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window actually used for a frame: 11, or the largest odd size that fits.
pub fn ssim_window_size(rows: usize, cols: usize) -> usize {
    let m = rows.min(cols).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

// separable filtering, valid region only
fn filter_valid(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let k = w.len();
    let (h, wd) = x.dim();
    let (ho, wo) = (h - k + 1, wd - k + 1);
    let mut tmp = Array2::<f64>::zeros((h, wo));
    for i in 0..h {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, &c) in w.iter().enumerate() {
                acc += c * x[[i, j + t]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, &c) in w.iter().enumerate() {
                acc += c * tmp[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean structural similarity with a Gaussian window (dynamic range 1).
pub fn ssim(reference: ArrayView2<f32>, est: ArrayView2<f32>) -> Result<f64> {
    check_same(reference, est)?;
    let (h, w) = reference.dim();
    let win = gaussian_window(ssim_window_size(h, w), SSIM_SIGMA);
    let x = reference.mapv(f64::from);
    let y = est.mapv(f64::from);
    let mx = filter_valid(&x, &win);
    let my = filter_valid(&y, &win);
    let sxx = filter_valid(&(&x * &x), &win) - &mx * &mx;
    let syy = filter_valid(&(&y * &y), &win) - &my * &my;
    let sxy = filter_valid(&(&x * &y), &win) - &mx * &my;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for (((&a, &b), (&vx, &vy)), &cxy) in mx.iter().zip(my.iter()).zip(sxx.iter().zip(syy.iter())).zip(sxy.iter()) {
        total += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub view: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-view, per-frame PSNR and SSIM.
pub fn framewise_report(refs: &[Array3<f32>], ests: &[Array3<f32>]) -> Result<Vec<FrameMetrics>> {
    if refs.len() != ests.len() {
        return Err(Error::Shape(format!("{} reference views vs {} estimates", refs.len(), ests.len())));
    }
    let mut out = Vec::new();
    for (v, (r, e)) in refs.iter().zip(ests).enumerate() {
        if r.dim() != e.dim() {
            return Err(Error::Shape(format!("view {} cube {:?} vs {:?}", v + 1, r.dim(), e.dim())));
        }
        for (t, (a, b)) in r.axis_iter(Axis(0)).zip(e.axis_iter(Axis(0))).enumerate() {
            out.push(FrameMetrics {
                view: v + 1,
                frame: t + 1,
                psnr: psnr(a, b, 1.0)?,
                ssim: ssim(a, b)?,
            });
        }
    }
    Ok(out)
}

/// Plot-ready CSV of frame-wise curves.
pub fn framewise_csv(rows: &[FrameMetrics]) -> String {
    let mut s = String::from("view,frame,psnr_db,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.view, r.frame, r.psnr, r.ssim);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSummary {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub algorithm: String,
    /// Per-frame metrics averaged over the evaluated measurements.
    pub frames: Vec<FrameMetrics>,
    pub views: Vec<ViewSummary>,
    pub average_psnr: f64,
    pub average_ssim: f64,
    pub seconds_per_measurement: f64,
    pub measurements: usize,
    pub config_hash: String,
}

impl EvalReport {
    /// Aggregates frame-wise metrics from several measurements of equal shape.
    pub fn from_frames(
        algorithm: &str,
        per_measurement: &[Vec<FrameMetrics>],
        seconds_per_measurement: f64,
        config_hash: &str,
    ) -> Result<Self> {
        let first = per_measurement
            .first()
            .ok_or_else(|| Error::param("nothing to evaluate"))?;
        let n = per_measurement.len() as f64;
        let mut frames = first.clone();
        for m in &per_measurement[1..] {
            if m.len() != frames.len() {
                return Err(Error::Shape("measurements disagree in frame count".into()));
            }
            for (acc, f) in frames.iter_mut().zip(m) {
                acc.psnr += f.psnr;
                acc.ssim += f.ssim;
            }
        }
        for f in &mut frames {
            f.psnr /= n;
            f.ssim /= n;
        }
        let nviews = frames.iter().map(|f| f.view).max().unwrap_or(0);
        let views: Vec<ViewSummary> = (1..=nviews)
            .map(|v| {
                let sel: Vec<_> = frames.iter().filter(|f| f.view == v).collect();
                let k = sel.len() as f64;
                ViewSummary {
                    view: v,
                    psnr: sel.iter().map(|f| f.psnr).sum::<f64>() / k,
                    ssim: sel.iter().map(|f| f.ssim).sum::<f64>() / k,
                }
            })
            .collect();
        let average_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / views.len() as f64;
        let average_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / views.len() as f64;
        Ok(Self {
            algorithm: algorithm.to_string(),
            frames,
            views,
            average_psnr,
            average_ssim,
            seconds_per_measurement,
            measurements: per_measurement.len(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "algorithm  {}", self.algorithm);
        let _ = writeln!(s, "config     {}", self.config_hash);
        let _ = writeln!(s, "samples    {}", self.measurements);
        let _ = writeln!(s, "{:<10}{:>12}{:>10}", "view", "PSNR(dB)", "SSIM");
        for v in &self.views {
            let _ = writeln!(s, "{:<10}{:>12.3}{:>10.4}", v.view, v.psnr, v.ssim);
        }
        let _ = writeln!(s, "{:<10}{:>12.3}{:>10.4}", "average", self.average_psnr, self.average_ssim);
        let _ = writeln!(s, "time/measurement {:.4} s", self.seconds_per_measurement);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("algorithm,view,psnr_db,ssim,seconds,config_hash\n");
        for v in &self.views {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{}",
                self.algorithm, v.view, v.psnr, v.ssim, self.seconds_per_measurement, self.config_hash
            );
        }
        let _ = writeln!(
            s,
            "{},average,{:.6},{:.6},{:.6},{}",
            self.algorithm, self.average_psnr, self.average_ssim, self.seconds_per_measurement, self.config_hash
        );
        s
    }
}

/// Anything that turns a measurement into one cube per view.
pub trait Reconstructor {
    fn name(&self) -> String;
    fn mode(&self) -> PipelineMode;
    fn reconstruct(&self, y: &Measurement, masks: &MaskSet) -> Result<Vec<Array3<f32>>>;
}

#[derive(Debug, Clone)]
pub struct GapTvReconstructor {
    pub config: GapTvConfig,
    pub mode: PipelineMode,
}

impl Reconstructor for GapTvReconstructor {
    fn name(&self) -> String {
        "gaptv".into()
    }

    fn mode(&self) -> PipelineMode {
        self.mode
    }

    fn reconstruct(&self, y: &Measurement, masks: &MaskSet) -> Result<Vec<Array3<f32>>> {
        match self.mode {
            PipelineMode::Dual => {
                let (a, b, _) = gap_tv(y, masks, &self.config)?;
                Ok(vec![a, b])
            }
            PipelineMode::SingleView => Ok(vec![gap_tv_single(y, masks, &self.config)?.0]),
        }
    }
}

/// Plug-and-play loop with the TV denoiser plugged in (dual view).
#[derive(Debug, Clone)]
pub struct PnpTvReconstructor {
    pub config: GapTvConfig,
}

impl Reconstructor for PnpTvReconstructor {
    fn name(&self) -> String {
        "pnp-tv".into()
    }

    fn mode(&self) -> PipelineMode {
        PipelineMode::Dual
    }

    fn reconstruct(&self, y: &Measurement, masks: &MaskSet) -> Result<Vec<Array3<f32>>> {
        self.config.validate()?;
        let tv = TvDenoiser {
            lambda: self.config.lambda,
            iterations: self.config.tv_iterations,
        };
        let (a, b, _) = pnp_solve(y, masks, &tv, self.config.iterations, self.config.accelerate)?;
        Ok(vec![a, b])
    }
}

impl Reconstructor for OfaNet {
    fn name(&self) -> String {
        let label = self.config.ablation.label();
        if label == "full" {
            "ofanet".into()
        } else {
            format!("ofanet[{label}]")
        }
    }

    fn mode(&self) -> PipelineMode {
        self.config.mode
    }

    fn reconstruct(&self, y: &Measurement, masks: &MaskSet) -> Result<Vec<Array3<f32>>> {
        Ok(OfaNet::reconstruct(self, y, masks)?.refined)
    }
}

fn truth_for(pair: &TrainPair, mode: PipelineMode) -> Vec<Array3<f32>> {
    let [a, b] = pair.truth();
    match mode {
        PipelineMode::Dual => vec![a.clone(), b.clone()],
        PipelineMode::SingleView => vec![a.clone()],
    }
}

/// Runs `algo` on every pair at noise level `sigma`; noise seeds derive from `seed`.
pub fn evaluate(
    algo: &dyn Reconstructor,
    pairs: &[TrainPair],
    masks: &MaskSet,
    sigma: f64,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::param("evaluation dataset is empty"));
    }
    let mut all = Vec::with_capacity(pairs.len());
    let mut seconds = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let y = pair.measure(masks, algo.mode(), sigma, seed.wrapping_add(i as u64))?;
        let t = Instant::now();
        let est = algo.reconstruct(&y, masks)?;
        seconds += t.elapsed().as_secs_f64();
        all.push(framewise_report(&truth_for(pair, algo.mode()), &est)?);
    }
    EvalReport::from_frames(&algo.name(), &all, seconds / pairs.len() as f64, config_hash)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: String,
    pub algorithm: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} sweep ({})", self.parameter, self.algorithm);
        let _ = writeln!(s, "{:<10}{:>12}{:>10}{:>12}", self.parameter, "PSNR(dB)", "SSIM", "time(s)");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10}{:>12.3}{:>10.4}{:>12.4}", r.label, r.psnr, r.ssim, r.seconds);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},psnr_db,ssim,seconds\n", self.parameter);
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.label, r.psnr, r.ssim, r.seconds);
        }
        s
    }

    /// Rows whose PSNR beats an earlier row (diagnostic only).
    pub fn monotonicity_flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for p in &self.rows[..i] {
                if r.psnr > p.psnr {
                    flags.push(format!(
                        "{}={} ({:.3} dB) beats {}={} ({:.3} dB)",
                        self.parameter, r.label, r.psnr, self.parameter, p.label, p.psnr
                    ));
                }
            }
        }
        flags
    }
}

fn row(label: String, r: &EvalReport) -> SweepRow {
    SweepRow {
        label,
        psnr: r.average_psnr,
        ssim: r.average_ssim,
        seconds: r.seconds_per_measurement,
    }
}

/// Average quality at each noise level. `σ = 0` is the clean measurement.
pub fn noise_sweep(
    algo: &dyn Reconstructor,
    pairs: &[TrainPair],
    masks: &MaskSet,
    sigmas: &[f64],
    seed: u64,
) -> Result<SweepTable> {
    if sigmas.is_empty() {
        return Err(Error::param("noise sweep needs at least one sigma"));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::param(format!("noise level {s} must be finite and >= 0")));
        }
        let r = evaluate(algo, pairs, masks, s, seed, "")?;
        rows.push(row(format!("{s}"), &r));
    }
    Ok(SweepTable {
        parameter: "sigma".into(),
        algorithm: algo.name(),
        rows,
    })
}

/// Everything needed to evaluate one compression rate.
pub struct RatePoint {
    pub algo: Box<dyn Reconstructor>,
    pub masks: MaskSet,
    pub pairs: Vec<TrainPair>,
}

/// Average quality per frame count `B`; `provide` supplies each point.
pub fn rate_sweep(
    frames: &[usize],
    seed: u64,
    mut provide: impl FnMut(usize) -> Result<RatePoint>,
) -> Result<SweepTable> {
    if frames.is_empty() {
        return Err(Error::param("rate sweep needs at least one B"));
    }
    let mut rows = Vec::with_capacity(frames.len());
    let mut name = String::new();
    for &b in frames {
        let p = provide(b)?;
        if p.masks.frames() != b {
            return Err(Error::param(format!("mask set for B={b} has {} frames", p.masks.frames())));
        }
        let r = evaluate(p.algo.as_ref(), &p.pairs, &p.masks, 0.0, seed, "")?;
        name = p.algo.name();
        rows.push(row(b.to_string(), &r));
    }
    Ok(SweepTable {
        parameter: "B".into(),
        algorithm: name,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub samples: Vec<f64>,
    pub median: f64,
}

/// Median wall time of `repetitions` reconstructions of one measurement.
pub fn time_reconstruction(
    algo: &dyn Reconstructor,
    y: &Measurement,
    masks: &MaskSet,
    repetitions: usize,
) -> Result<Timing> {
    if repetitions == 0 {
        return Err(Error::param("repetitions must be >= 1"));
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        algo.reconstruct(y, masks)?;
        samples.push(t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(Timing { samples, median })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn psnr_basics() {
        let a = Array2::from_elem((4, 4), 0.5f32);
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);
        let b = a.mapv(|v| v + 0.1);
        assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(a.view(), Array2::zeros((3, 4)).view(), 1.0).is_err());
    }

    #[test]
    fn ssim_basics() {
        let a = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 3 + j * 5) % 7) as f32 / 6.0);
        assert!((ssim(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.mapv(|v| 1.0 - v);
        assert!(ssim(a.view(), inv.view()).unwrap() < 0.0);
        assert_eq!(ssim_window_size(8, 20), 7);
        assert_eq!(ssim_window_size(64, 64), 11);
    }

    #[test]
    fn median_of_one() {
        struct Nop;
        impl Reconstructor for Nop {
            fn name(&self) -> String {
                "nop".into()
            }
            fn mode(&self) -> PipelineMode {
                PipelineMode::Dual
            }
            fn reconstruct(&self, _: &Measurement, _: &MaskSet) -> Result<Vec<Array3<f32>>> {
                Ok(vec![])
            }
        }
        let masks = MaskSet::generate(4, 4, 1, 0.5, (2, 0), 0).unwrap();
        let x = crate::sensing::VideoCube::new(Array3::zeros((1, 4, 4)), crate::sensing::ViewId::One).unwrap();
        let x2 = crate::sensing::VideoCube::new(Array3::zeros((1, 4, 4)), crate::sensing::ViewId::Two).unwrap();
        let y = crate::sensing::encode(&x, &x2, &masks, 0.0, 0).unwrap();
        let t = time_reconstruction(&Nop, &y, &masks, 1).unwrap();
        assert_eq!(t.samples.len(), 1);
        assert!(t.median > 0.0);
        assert!(time_reconstruction(&Nop, &y, &masks, 0).is_err());
    }
}
