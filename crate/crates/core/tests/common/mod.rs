//! Straight-line scalar reference implementations used by the oracle and
//! acceptance tests. Everything here is plain nested loops in f64.

#![allow(dead_code)]

use dvsci::amplifier::DiversityBundle;
use dvsci::model::{Prepared, ViewFlows};
use dvsci::nn::{ParamStore, LEAKY_SLOPE};
use dvsci::separator::BranchMode;
use dvsci::{MaskSet, OfaNet};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(channels, rows, cols)` activation in double precision.
#[derive(Debug, Clone)]
pub struct T3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl T3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, d: vec![0.0; c * h * w] }
    }

    pub fn from_f32(a: &Array3<f32>) -> Self {
        let (c, h, w) = a.dim();
        let mut t = Self::zeros(c, h, w);
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    t.set(k, i, j, a[[k, i, j]] as f64);
                }
            }
        }
        t
    }

    pub fn from_planes(planes: &[Array2<f32>]) -> Self {
        let (h, w) = planes[0].dim();
        let mut t = Self::zeros(planes.len(), h, w);
        for (k, p) in planes.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    t.set(k, i, j, p[[i, j]] as f64);
                }
            }
        }
        t
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.d[(k * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.d[(k * self.h + i) * self.w + j] = v;
    }

    pub fn channel(&self, k: usize) -> T3 {
        let n = self.h * self.w;
        T3 { c: 1, h: self.h, w: self.w, d: self.d[k * n..(k + 1) * n].to_vec() }
    }

    pub fn max_abs_diff(&self, a: &Array3<f32>) -> f64 {
        assert_eq!((self.c, self.h, self.w), a.dim(), "oracle shape");
        let mut m: f64 = 0.0;
        for k in 0..self.c {
            for i in 0..self.h {
                for j in 0..self.w {
                    m = m.max((self.at(k, i, j) - a[[k, i, j]] as f64).abs());
                }
            }
        }
        m
    }

    pub fn max_abs_diff64(&self, a: &Array3<f64>) -> f64 {
        assert_eq!((self.c, self.h, self.w), a.dim(), "oracle shape");
        let mut m: f64 = 0.0;
        for k in 0..self.c {
            for i in 0..self.h {
                for j in 0..self.w {
                    m = m.max((self.at(k, i, j) - a[[k, i, j]]).abs());
                }
            }
        }
        m
    }

    /// Largest `|oracle − a| / max(1, |oracle|)`.
    pub fn max_scaled_diff(&self, a: &Array3<f32>) -> f64 {
        assert_eq!((self.c, self.h, self.w), a.dim(), "oracle shape");
        let mut m: f64 = 0.0;
        for k in 0..self.c {
            for i in 0..self.h {
                for j in 0..self.w {
                    let o = self.at(k, i, j);
                    m = m.max((o - a[[k, i, j]] as f64).abs() / o.abs().max(1.0));
                }
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.d.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn concat(parts: &[&T3]) -> T3 {
    let (h, w) = (parts[0].h, parts[0].w);
    let c = parts.iter().map(|p| p.c).sum();
    let mut d = Vec::with_capacity(c * h * w);
    for p in parts {
        assert_eq!((p.h, p.w), (h, w));
        d.extend_from_slice(&p.d);
    }
    T3 { c, h, w, d }
}

pub fn add(a: &T3, b: &T3) -> T3 {
    T3 { d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(), ..a.clone() }
}

pub fn leaky(x: &T3) -> T3 {
    let s = LEAKY_SLOPE as f64;
    T3 { d: x.d.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(), ..x.clone() }
}

fn param(store: &ParamStore, name: &str) -> (Vec<usize>, Vec<f64>) {
    let id = store.id(name).unwrap_or_else(|| panic!("parameter {name} missing"));
    let a = store.get(id);
    (a.shape().to_vec(), a.iter().map(|&v| v as f64).collect())
}

/// Zero-padded cross-correlation with `pad = k / 2`; weight `(cout, cin, kh, kw)`.
pub fn conv(x: &T3, store: &ParamStore, name: &str, kernel: (usize, usize), stride: usize) -> T3 {
    let (ws, w) = param(store, &format!("{name}.w"));
    let (_, b) = param(store, &format!("{name}.b"));
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!((kh, kw), kernel, "{name} kernel");
    assert_eq!(cin, x.c, "{name} input channels");
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = (x.h + 2 * ph - kh) / stride + 1;
    let wo = (x.w + 2 * pw - kw) / stride + 1;
    let mut out = T3::zeros(cout, ho, wo);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[o];
                for c in 0..cin {
                    for a in 0..kh {
                        for e in 0..kw {
                            let r = (i * stride + a) as isize - ph as isize;
                            let q = (j * stride + e) as isize - pw as isize;
                            if r < 0 || q < 0 || r as usize >= x.h || q as usize >= x.w {
                                continue;
                            }
                            acc += w[((o * cin + c) * kh + a) * kw + e] * x.at(c, r as usize, q as usize);
                        }
                    }
                }
                out.set(o, i, j, acc);
            }
        }
    }
    out
}

pub fn conv_leaky(x: &T3, store: &ParamStore, name: &str, kernel: (usize, usize), stride: usize) -> T3 {
    leaky(&conv(x, store, name, kernel, stride))
}

/// Stride-2 transposed convolution that exactly doubles the spatial size;
/// weight `(cin, cout, k, k)`, scatter definition.
pub fn deconv2x(x: &T3, store: &ParamStore, name: &str, k: usize) -> T3 {
    let (ws, w) = param(store, &format!("{name}.w"));
    let (_, b) = param(store, &format!("{name}.b"));
    let (cin, cout) = (ws[0], ws[1]);
    assert_eq!((ws[2], ws[3]), (k, k), "{name} kernel");
    assert_eq!(cin, x.c);
    let p = (k / 2) as isize;
    let (ho, wo) = (2 * x.h, 2 * x.w);
    let mut out = T3::zeros(cout, ho, wo);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                out.set(o, i, j, b[o]);
            }
        }
    }
    for c in 0..cin {
        for i in 0..x.h {
            for j in 0..x.w {
                for o in 0..cout {
                    for a in 0..k {
                        for e in 0..k {
                            let r = (2 * i + a) as isize - p;
                            let q = (2 * j + e) as isize - p;
                            if r < 0 || q < 0 || r as usize >= ho || q as usize >= wo {
                                continue;
                            }
                            let v = out.at(o, r as usize, q as usize) + x.at(c, i, j) * w[((c * cout + o) * k + a) * k + e];
                            out.set(o, r as usize, q as usize, v);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn resblock(x: &T3, store: &ParamStore, name: &str) -> T3 {
    let h = conv_leaky(x, store, &format!("{name}.c0"), (3, 3), 1);
    let h = conv_leaky(&h, store, &format!("{name}.c1"), (1, 1), 1);
    let h = conv_leaky(&h, store, &format!("{name}.c2"), (3, 3), 1);
    let skip = if store.id(&format!("{name}.proj.w")).is_some() {
        conv(x, store, &format!("{name}.proj"), (1, 1), 1)
    } else {
        x.clone()
    };
    add(&h, &skip)
}

/// One separator branch written out layer by layer.
pub fn branch(x: &T3, store: &ParamStore, name: &str) -> T3 {
    let h = conv_leaky(x, store, &format!("{name}.s1.c0"), (5, 5), 1);
    let h = conv_leaky(&h, store, &format!("{name}.s1.c1"), (3, 3), 1);
    let h = conv_leaky(&h, store, &format!("{name}.s1.c2"), (1, 1), 1);
    let h1 = conv_leaky(&h, store, &format!("{name}.s1.c3"), (3, 3), 2);
    let h = resblock(&h1, store, &format!("{name}.s2.r0"));
    let h = resblock(&h, store, &format!("{name}.s2.r1"));
    let h2 = resblock(&h, store, &format!("{name}.s2.r2"));
    let u = leaky(&deconv2x(&concat(&[&h2, &h1]), store, &format!("{name}.s3.up"), 3));
    let h = conv_leaky(&u, store, &format!("{name}.s3.c0"), (1, 1), 1);
    let h = conv_leaky(&h, store, &format!("{name}.s3.c1"), (3, 3), 1);
    conv(&h, store, &format!("{name}.s3.out"), (1, 1), 1)
}

/// Separator input stack `[Ybar, D1..D4, Ybar*C^1..Ybar*C^B]` built by hand.
pub fn separator_stack(bundle: &DiversityBundle, masks: &[&Array3<f32>], diversity: bool) -> T3 {
    let mut planes = vec![bundle.ybar.clone()];
    if diversity {
        planes.extend([bundle.d1.clone(), bundle.d2.clone(), bundle.d3.clone(), bundle.d4.clone()]);
    }
    for m in masks {
        let (b, r, c) = m.dim();
        for k in 0..b {
            planes.push(Array2::from_shape_fn((r, c), |(i, j)| bundle.ybar[[i, j]] * m[[k, i, j]]));
        }
    }
    T3::from_planes(&planes)
}

pub fn stack_view(bundle: &DiversityBundle, masks: &MaskSet, view: usize) -> T3 {
    let m = if view == 0 { masks.c1() } else { masks.c2() };
    separator_stack(bundle, &[m], true)
}

/// Refine-cell step: returns `(frame, hidden)`.
pub fn cell(store: &ParamStore, x: &T3, ffwd: &T3, fbwd: &T3, d: &T3, h: &T3) -> (T3, T3) {
    let ex = chain(x, store, "ref.fx", &[(5, 5), (1, 1), (3, 3), (1, 1), (3, 3)], false);
    let ef = chain(ffwd, store, "ref.ffwd", &[(5, 5), (3, 3), (1, 1)], false);
    let eb = chain(fbwd, store, "ref.fbwd", &[(5, 5), (3, 3), (1, 1)], false);
    let ed = chain(d, store, "ref.fd", &[(5, 5), (1, 1), (3, 3), (1, 1), (3, 3)], false);
    let z = concat(&[&ex, &ef, &eb, &ed, h]);
    let z = resblock(&z, store, "ref.h.r0");
    let z = resblock(&z, store, "ref.h.r1");
    let hid = chain(&z, store, "ref.h.t", &[(1, 3), (3, 1), (1, 3)], false);
    let out = chain(&hid, store, "ref.r", &[(3, 3), (1, 1), (3, 3), (1, 1), (3, 3), (1, 1)], true);
    (out, hid)
}

fn chain(x: &T3, store: &ParamStore, name: &str, kernels: &[(usize, usize)], last_identity: bool) -> T3 {
    let mut h = x.clone();
    for (i, &k) in kernels.iter().enumerate() {
        let y = conv(&h, store, &format!("{name}.c{i}"), k, 1);
        h = if last_identity && i + 1 == kernels.len() { y } else { leaky(&y) };
    }
    h
}

/// Refined frames of one view: an extra step for frame 1, then the recurrence.
pub fn refine_view(store: &ParamStore, frames: &[T3], fwd: &[T3], bwd: &[T3], d: &T3, hidden: usize) -> Vec<T3> {
    let (h, w) = (frames[0].h, frames[0].w);
    let zf = T3::zeros(2, h, w);
    let mut state = T3::zeros(hidden, h, w);
    let mut out = vec![cell(store, &frames[0], &zf, &bwd[0], d, &state).0];
    for t in 0..frames.len() - 1 {
        let (x, hn) = cell(store, &frames[t], &fwd[t], &bwd[t], d, &state);
        out.push(x);
        state = hn;
    }
    out
}

/// Replaces every bias with a uniform draw so the oracles exercise them.
pub fn randomize_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.entry(id).name.ends_with(".b") {
            store.get_mut(id).mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
}

pub fn random_cube(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f32> {
    Array3::from_shape_simple_fn(dim, || rng.random::<f32>())
}

pub fn random_masks(rng: &mut ChaCha8Rng, rows: usize, cols: usize, frames: usize) -> MaskSet {
    let shift = (rng.random_range(-3..=3i64) as isize, if rng.random() { 2 } else { -3 });
    MaskSet::generate(rows, cols, frames, 0.5, shift, rng.random()).unwrap()
}

// ---------------------------------------------------------------------------
// sensing and metric oracles

/// `y[i,j] = Σ_b X1[b,i,j]·C1[b,i,j] + X2[b,i,j]·C2[b,i,j]`.
pub fn encode_loop(x1: &Array3<f32>, x2: &Array3<f32>, c1: &Array3<f32>, c2: &Array3<f32>) -> Array2<f64> {
    let (b, r, c) = x1.dim();
    let mut y = Array2::<f64>::zeros((r, c));
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for k in 0..b {
                acc += x1[[k, i, j]] as f64 * c1[[k, i, j]] as f64 + x2[[k, i, j]] as f64 * c2[[k, i, j]] as f64;
            }
            y[[i, j]] = acc;
        }
    }
    y
}

/// Dense `Φ` as an explicit `(r·c) × (f·r·c)` matrix.
pub fn dense_phi(masks: &Array3<f32>) -> Vec<Vec<f64>> {
    let (f, r, c) = masks.dim();
    let n = r * c;
    let mut m = vec![vec![0.0; f * n]; n];
    for k in 0..f {
        for i in 0..r {
            for j in 0..c {
                m[i * c + j][k * n + i * c + j] = masks[[k, i, j]] as f64;
            }
        }
    }
    m
}

pub fn psnr_loop(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let (r, c) = a.dim();
    let mut s = 0.0;
    for i in 0..r {
        for j in 0..c {
            let d = a[[i, j]] as f64 - b[[i, j]] as f64;
            s += d * d;
        }
    }
    let mse = s / (r * c) as f64;
    10.0 * (1.0 / mse).log10()
}

/// Mean SSIM over every fully contained `win×win` window, each statistic
/// accumulated directly from the 2-D Gaussian weights.
pub fn ssim_direct(a: &Array2<f32>, b: &Array2<f32>, win: usize, sigma: f64) -> f64 {
    let c0 = (win as f64 - 1.0) / 2.0;
    let mut g = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (u, row) in g.iter_mut().enumerate() {
        for (v, x) in row.iter_mut().enumerate() {
            let d2 = (u as f64 - c0).powi(2) + (v as f64 - c0).powi(2);
            *x = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *x;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (r, c) = a.dim();
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..=r - win {
        for j in 0..=c - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let wgt = g[u][v] / total;
                    mx += wgt * a[[i + u, j + v]] as f64;
                    my += wgt * b[[i + u, j + v]] as f64;
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let wgt = g[u][v] / total;
                    let dx = a[[i + u, j + v]] as f64 - mx;
                    let dy = b[[i + u, j + v]] as f64 - my;
                    vx += wgt * dx * dx;
                    vy += wgt * dy * dy;
                    cxy += wgt * dx * dy;
                }
            }
            sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    sum / n as f64
}

// ---------------------------------------------------------------------------
// whole-assembly oracle

/// Coarse cubes and refined frames of `model` on prepared inputs, with the
/// classical flows supplied (empty when flows are ablated). The refine stage
/// starts from `refine_from` when given, otherwise from the oracle's own
/// coarse cubes.
pub fn model_oracle(
    model: &OfaNet,
    prep: &Prepared,
    masks: &MaskSet,
    flows: &[ViewFlows],
    refine_from: Option<&[Array3<f32>]>,
) -> (Vec<T3>, Vec<Vec<T3>>) {
    let sc = &model.separator.config;
    let bundle = &prep.bundle;
    let coarse: Vec<T3> = match sc.mode {
        BranchMode::Dual => vec![
            branch(&separator_stack(bundle, &[masks.c1()], sc.diversity), &model.store, "sep.v1"),
            branch(&separator_stack(bundle, &[masks.c2()], sc.diversity), &model.store, "sep.v2"),
        ],
        BranchMode::Joint => {
            let j = branch(&separator_stack(bundle, &[masks.c1(), masks.c2()], sc.diversity), &model.store, "sep.joint");
            let b = sc.frames;
            let n = j.h * j.w;
            let part = |k: usize| T3 { c: b, h: j.h, w: j.w, d: j.d[k * b * n..(k + 1) * b * n].to_vec() };
            vec![part(0), part(1)]
        }
        BranchMode::SingleView => {
            vec![branch(&separator_stack(bundle, &[masks.c1()], false), &model.store, "sep.single")]
        }
    };
    let Some(cell) = &model.cell else {
        let refined = coarse.iter().map(|v| (0..v.c).map(|t| v.channel(t)).collect()).collect();
        return (coarse, refined);
    };
    let ab = model.config.ablation;
    let (h, w) = (coarse[0].h, coarse[0].w);
    let d = if ab.no_diversity {
        T3::zeros(4, h, w)
    } else {
        T3::from_planes(&[bundle.d1.clone(), bundle.d2.clone(), bundle.d3.clone(), bundle.d4.clone()])
    };
    let b = model.config.frames;
    let start: Vec<T3> = match refine_from {
        Some(c) => c.iter().map(T3::from_f32).collect(),
        None => coarse.clone(),
    };
    let refined = start
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let frames: Vec<T3> = (0..b).map(|t| v.channel(t)).collect();
            let zero = vec![T3::zeros(2, h, w); b - 1];
            let (fwd, bwd) = if ab.no_flow {
                (zero.clone(), zero)
            } else {
                let fwd: Vec<T3> = flows[k].0.iter().map(T3::from_f32).collect();
                let bwd = if ab.no_backward { zero } else { flows[k].1.iter().map(T3::from_f32).collect() };
                (fwd, bwd)
            };
            refine_view(&model.store, &frames, &fwd, &bwd, &d, cell.config.hidden_width())
        })
        .collect();
    (coarse, refined)
}

/// Worst deviations of one assembly from the oracle:
/// `(f64 replay absolute, f32 forward scaled)`.
pub fn assembly_deviation(model: &OfaNet, prep: &Prepared, masks: &MaskSet) -> (f64, f64) {
    let mut g = dvsci::nn::Graph::new(&model.store);
    let fv = model.forward(&mut g, prep).unwrap();
    let params: Vec<_> = model.store.entries().iter().map(|e| e.value.mapv(f64::from)).collect();
    let vals = g.replay_f64(&params);
    let (coarse, refined) = model_oracle(model, prep, masks, &fv.flows, None);
    let lib: Vec<Array3<f32>> = fv.coarse.iter().map(|&v| g.value(v).clone()).collect();
    let (_, refined_from_lib) = model_oracle(model, prep, masks, &fv.flows, Some(&lib));
    assert_eq!(coarse.len(), fv.coarse.len());
    let (mut d64, mut d32): (f64, f64) = (0.0, 0.0);
    for k in 0..coarse.len() {
        assert!(coarse[k].max_abs() > 1e-3, "degenerate oracle output");
        d64 = d64.max(coarse[k].max_abs_diff64(&vals[fv.coarse[k].index()]));
        d32 = d32.max(coarse[k].max_scaled_diff(&lib[k]));
        for (t, &v) in fv.refined[k].iter().enumerate() {
            d64 = d64.max(refined[k][t].max_abs_diff64(&vals[v.index()]));
            d32 = d32.max(refined_from_lib[k][t].max_scaled_diff(g.value(v)));
        }
    }
    (d64, d32)
}
