//! Inter-frame motion estimation.
//!
//! The classical estimator is a coarse-to-fine Horn–Schunck solver with
//! warping between pyramid levels. A small convolutional estimator can be
//! plugged in instead; its weights come from a checkpoint container and may be
//! fine-tuned jointly with the reconstruction networks.

use std::path::PathBuf;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amplifier::{gaussian_smooth, SmoothingConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, Graph, ParamStore, Sequential, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// `t -> t+1`
    Forward,
    /// `t+1 -> t`
    Backward,
}

/// Per-pixel displacement (pixels per inter-frame interval).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
    pub direction: FlowDirection,
    pub pair_index: usize,
}

impl FlowField {
    pub fn zeros(rows: usize, cols: usize, direction: FlowDirection, pair_index: usize) -> Self {
        Self {
            u: Array2::zeros((rows, cols)),
            v: Array2::zeros((rows, cols)),
            direction,
            pair_index,
        }
    }

    /// Two-channel `(u, v)` tensor.
    pub fn to_tensor(&self) -> Array3<f32> {
        ndarray::stack(Axis(0), &[self.u.view(), self.v.view()]).expect("same shape")
    }

    pub fn from_tensor(t: &Array3<f32>, direction: FlowDirection, pair_index: usize) -> Self {
        Self {
            u: t.index_axis(Axis(0), 0).to_owned(),
            v: t.index_axis(Axis(0), 1).to_owned(),
            direction,
            pair_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    Classical,
    LearnedAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicalFlowParams {
    pub levels: usize,
    pub iterations: usize,
    /// Smoothness weight `alpha`; the data term is balanced against `alpha^2`.
    pub alpha: f64,
    pub max_displacement: f32,
}

impl Default for ClassicalFlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 50,
            alpha: 0.1,
            max_displacement: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowEstimatorSpec {
    pub kind: FlowKind,
    #[serde(default)]
    pub classical: ClassicalFlowParams,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub fine_tunable: bool,
}

impl Default for FlowEstimatorSpec {
    fn default() -> Self {
        Self::classical()
    }
}

impl FlowEstimatorSpec {
    pub fn classical() -> Self {
        Self {
            kind: FlowKind::Classical,
            classical: ClassicalFlowParams::default(),
            weights: None,
            fine_tunable: false,
        }
    }

    pub fn learned(weights: impl Into<PathBuf>, fine_tunable: bool) -> Self {
        Self {
            kind: FlowKind::LearnedAdapter,
            classical: ClassicalFlowParams::default(),
            weights: Some(weights.into()),
            fine_tunable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.classical;
        if p.levels == 0 || p.iterations == 0 {
            return Err(Error::param("flow pyramid levels and iterations must be >= 1"));
        }
        if !(p.alpha > 0.0) || !(p.max_displacement > 0.0) {
            return Err(Error::param("flow alpha and max displacement must be positive"));
        }
        if self.kind == FlowKind::Classical && self.fine_tunable {
            return Err(Error::Unsupported(
                "the classical flow estimator has no parameters to fine-tune".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// classical estimator

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Bilinear sample with edge replication.
fn sample(img: &ArrayView2<f32>, y: f32, x: f32) -> f32 {
    let (rows, cols) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let p = |r: isize, c: isize| img[[clamp_idx(r, rows), clamp_idx(c, cols)]];
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x0 + 1) * fx;
    let bot = p(y0 + 1, x0) * (1.0 - fx) + p(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// `img(x + u, y + v)` for every pixel.
pub fn warp(img: &Array2<f32>, u: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    let view = img.view();
    Array2::from_shape_fn(img.dim(), |(r, c)| {
        sample(&view, r as f32 + v[[r, c]], c as f32 + u[[r, c]])
    })
}

fn downsample(img: &Array2<f32>) -> Array2<f32> {
    let (rows, cols) = img.dim();
    let (hr, hc) = (rows.div_ceil(2), cols.div_ceil(2));
    Array2::from_shape_fn((hr, hc), |(r, c)| {
        let mut acc = 0.0;
        for dr in 0..2 {
            for dc in 0..2 {
                acc += img[[(2 * r + dr).min(rows - 1), (2 * c + dc).min(cols - 1)]];
            }
        }
        acc * 0.25
    })
}

/// Upsamples a flow component to `dim`, rescaling displacements.
fn upsample_flow(f: &Array2<f32>, dim: (usize, usize)) -> Array2<f32> {
    let (rows, cols) = f.dim();
    let sy = rows as f32 / dim.0 as f32;
    let sx = cols as f32 / dim.1 as f32;
    let view = f.view();
    Array2::from_shape_fn(dim, |(r, c)| {
        let y = (r as f32 + 0.5) * sy - 0.5;
        let x = (c as f32 + 0.5) * sx - 0.5;
        sample(&view, y, x) / sx.min(sy)
    })
}

/// Horn–Schunck neighborhood average (1/6 edge, 1/12 corner weights).
fn neighborhood_mean(f: &Array2<f32>) -> Array2<f32> {
    let (rows, cols) = f.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let p = |dr: isize, dc: isize| f[[clamp_idx(r + dr, rows), clamp_idx(c + dc, cols)]];
        (p(-1, 0) + p(1, 0) + p(0, -1) + p(0, 1)) / 6.0 + (p(-1, -1) + p(-1, 1) + p(1, -1) + p(1, 1)) / 12.0
    })
}

fn gradients(img: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (rows, cols) = img.dim();
    let ix = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let c = c as isize;
        0.5 * (img[[r, clamp_idx(c + 1, cols)]] - img[[r, clamp_idx(c - 1, cols)]])
    });
    let iy = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let r = r as isize;
        0.5 * (img[[clamp_idx(r + 1, rows), c]] - img[[clamp_idx(r - 1, rows), c]])
    });
    (ix, iy)
}

const PRESMOOTH: SmoothingConfig = SmoothingConfig { sigma: 1.0, radius: 3 };

fn horn_schunck(a: &Array2<f32>, b: &Array2<f32>, p: &ClassicalFlowParams) -> Result<(Array2<f32>, Array2<f32>)> {
    let a = gaussian_smooth(a, &PRESMOOTH)?;
    let b = gaussian_smooth(b, &PRESMOOTH)?;
    let mut pyr_a = vec![a];
    let mut pyr_b = vec![b];
    for _ in 1..p.levels {
        let last = pyr_a.last().expect("non-empty");
        if last.nrows() < 8 || last.ncols() < 8 {
            break;
        }
        let na = downsample(last);
        let nb = downsample(pyr_b.last().expect("non-empty"));
        pyr_a.push(na);
        pyr_b.push(nb);
    }
    let alpha2 = (p.alpha * p.alpha) as f32;
    let coarsest = pyr_a.last().expect("non-empty").dim();
    let mut u = Array2::<f32>::zeros(coarsest);
    let mut v = Array2::<f32>::zeros(coarsest);
    for (la, lb) in pyr_a.iter().zip(pyr_b.iter()).rev() {
        if u.dim() != la.dim() {
            u = upsample_flow(&u, la.dim());
            v = upsample_flow(&v, la.dim());
        }
        let bw = warp(lb, &u, &v);
        let mid = (la + &bw) * 0.5;
        let (ix, iy) = gradients(&mid);
        let it = &bw - la;
        let (u0, v0) = (u.clone(), v.clone());
        for _ in 0..p.iterations {
            let ub = neighborhood_mean(&u);
            let vb = neighborhood_mean(&v);
            ndarray::Zip::from(&mut u)
                .and(&mut v)
                .and(&ub)
                .and(&vb)
                .and(&u0)
                .and(&v0)
                .for_each(|u, v, &ub, &vb, &u0, &v0| {
                    *u = ub - u0;
                    *v = vb - v0;
                });
            // u, v temporarily hold the increment relative to the warp
            ndarray::Zip::from(&mut u)
                .and(&mut v)
                .and(&ix)
                .and(&iy)
                .and(&it)
                .for_each(|u, v, &gx, &gy, &gt| {
                    let k = (gx * *u + gy * *v + gt) / (alpha2 + gx * gx + gy * gy);
                    *u -= gx * k;
                    *v -= gy * k;
                });
            u += &u0;
            v += &v0;
        }
        let m = p.max_displacement;
        u.mapv_inplace(|x| x.clamp(-m, m));
        v.mapv_inplace(|x| x.clamp(-m, m));
    }
    Ok((u, v))
}

// ---------------------------------------------------------------------------
// learned adapter

/// Parameter namespace of the learned estimator.
pub const FLOW_PREFIX: &str = "flow.";

/// Small convolutional estimator mapping a frame pair to a 2-channel field.
#[derive(Debug, Clone)]
pub struct LearnedFlowNet {
    body: Sequential,
}

impl LearnedFlowNet {
    pub const WIDTH: usize = 8;

    /// Registers freshly initialized parameters under [`FLOW_PREFIX`].
    pub fn register(store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Self::WIDTH;
        let a = Activation::Leaky;
        let body = Sequential {
            layers: vec![
                Conv2d::new(store, &mut rng, "flow.c0", 2, w, (5, 5), 1, a),
                Conv2d::new(store, &mut rng, "flow.c1", w, w, (3, 3), 1, a),
                Conv2d::new(store, &mut rng, "flow.c2", w, 2, (3, 3), 1, Activation::Identity),
            ],
        };
        Self { body }
    }

    /// Writes a freshly initialized weight file.
    pub fn write_initial_weights(path: &std::path::Path, seed: u64) -> Result<()> {
        let mut store = ParamStore::new();
        Self::register(&mut store, seed);
        let mut c = store.to_container();
        c.set_meta("estimator", "learned-flow");
        c.write(path)
    }

    pub fn forward(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let x = g.concat(&[a, b]);
        self.body.forward(g, x)
    }
}

/// Outcome of wiring an estimator into a trainable parameter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineTuneContract {
    /// Scalar parameters contributed to the trainable set.
    pub trainable_params: usize,
    /// Whether reconstruction-loss gradients reach the estimator.
    pub gradients_flow: bool,
}

/// Registers the estimator's parameters (if any) in `store`, loading them
/// from the weight file and freezing them unless fine-tuning is enabled.
pub fn fine_tune_hook(spec: &FlowEstimatorSpec, store: &mut ParamStore) -> Result<(Option<LearnedFlowNet>, FineTuneContract)> {
    spec.validate()?;
    match spec.kind {
        FlowKind::Classical => Ok((
            None,
            FineTuneContract {
                trainable_params: 0,
                gradients_flow: false,
            },
        )),
        FlowKind::LearnedAdapter => {
            let path = spec
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("learned flow estimator requires a weight file".into()))?;
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
            let net = LearnedFlowNet::register(store, 0);
            let mut staged = ParamStore::new();
            LearnedFlowNet::register(&mut staged, 0);
            staged.load_from(&Container::read(path)?, path)?;
            for e in staged.entries() {
                let id = store.id(&e.name).expect("same registration");
                store.get_mut(id).assign(&e.value);
            }
            store.set_trainable(FLOW_PREFIX, spec.fine_tunable);
            let trainable_params = if spec.fine_tunable {
                store.count(FLOW_PREFIX)
            } else {
                0
            };
            Ok((
                Some(net),
                FineTuneContract {
                    trainable_params,
                    gradients_flow: spec.fine_tunable,
                },
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// public operations

fn check_pair(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("flow frames {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Displacement field taking `frame_a` toward `frame_b`, i.e.
/// `frame_a(x) ~ frame_b(x + flow(x))`.
pub fn estimate(spec: &FlowEstimatorSpec, frame_a: ArrayView2<f32>, frame_b: ArrayView2<f32>) -> Result<FlowField> {
    check_pair(&frame_a, &frame_b)?;
    spec.validate()?;
    let (u, v) = match spec.kind {
        FlowKind::Classical => horn_schunck(&frame_a.to_owned(), &frame_b.to_owned(), &spec.classical)?,
        FlowKind::LearnedAdapter => {
            let mut store = ParamStore::new();
            let (net, _) = fine_tune_hook(
                &FlowEstimatorSpec {
                    fine_tunable: false,
                    ..spec.clone()
                },
                &mut store,
            )?;
            let net = net.expect("learned kind");
            let mut g = Graph::new(&store);
            let a = g.input(frame_a.to_owned().insert_axis(Axis(0)));
            let b = g.input(frame_b.to_owned().insert_axis(Axis(0)));
            let f = net.forward(&mut g, a, b);
            let m = spec.classical.max_displacement;
            let t = g.value(f).mapv(|x| x.clamp(-m, m));
            (t.index_axis(Axis(0), 0).to_owned(), t.index_axis(Axis(0), 1).to_owned())
        }
    };
    Ok(FlowField {
        u,
        v,
        direction: FlowDirection::Forward,
        pair_index: 0,
    })
}

/// Forward (`t -> t+1`) and backward (`t+1 -> t`) fields for every adjacent
/// frame pair of a `(frame, row, col)` cube.
pub fn extract_bidirectional(spec: &FlowEstimatorSpec, video: ArrayView3<f32>) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    let frames = video.dim().0;
    if frames < 2 {
        return Err(Error::param(format!("bidirectional flow needs >= 2 frames, got {frames}")));
    }
    let mut fwd = Vec::with_capacity(frames - 1);
    let mut bwd = Vec::with_capacity(frames - 1);
    for t in 0..frames - 1 {
        let a = video.slice(s![t, .., ..]);
        let b = video.slice(s![t + 1, .., ..]);
        let mut f = estimate(spec, a, b)?;
        f.direction = FlowDirection::Forward;
        f.pair_index = t;
        let mut r = estimate(spec, b, a)?;
        r.direction = FlowDirection::Backward;
        r.pair_index = t;
        fwd.push(f);
        bwd.push(r);
    }
    Ok((fwd, bwd))
}

/// Standard color-wheel visualization (hue = direction, saturation = magnitude).
pub fn flow_to_rgb(flow: &FlowField) -> image::RgbImage {
    let (rows, cols) = flow.u.dim();
    let max_mag = flow
        .u
        .iter()
        .zip(flow.v.iter())
        .map(|(u, v)| (u * u + v * v).sqrt())
        .fold(1e-6f32, f32::max);
    let mut img = image::RgbImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = (flow.u[[r, c]], flow.v[[r, c]]);
            let mag = ((u * u + v * v).sqrt() / max_mag).min(1.0);
            let hue = (v.atan2(u) / std::f32::consts::TAU + 1.0).fract() * 6.0;
            let x = 1.0 - (hue % 2.0 - 1.0).abs();
            let (r1, g1, b1) = match hue as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let px = |ch: f32| ((1.0 - mag + mag * ch) * 255.0).round() as u8;
            img.put_pixel(c as u32, r as u32, image::Rgb([px(r1), px(g1), px(b1)]));
        }
    }
    img
}
