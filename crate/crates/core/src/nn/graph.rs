//! Reverse-mode differentiation over channel-major `(channel, row, col)`
//! feature maps.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a borrowed [`ParamStore`]; [`Graph::backward`] returns their gradients.

use std::ops::AddAssign;

use ndarray::{linalg::general_mat_mul, s, Array2, Array3, ArrayD, ArrayView2, Axis, LinalgScalar, ScalarOperand};

use super::params::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: (usize, usize),
    },
    Deconv {
        x: Var,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: (usize, usize),
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Add(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Array3<f32>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Backward {
    pub params: Grads,
    nodes: Vec<Option<Array3<f32>>>,
}

impl Backward {
    /// Gradient with respect to a graph variable, if it was reached.
    pub fn var(&self, v: Var) -> Option<&Array3<f32>> {
        self.nodes[v.0].as_ref()
    }
}

/// Unrolls the `kh x kw` receptive fields of a `(c, h, w)` image into a
/// `(c * kh * kw, hout * wout)` matrix. Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: LinalgScalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (ph, pw): (usize, usize),
    (hout, wout): (usize, usize),
) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((c * kh * kw, hout * wout));
    let out = cols.as_slice_mut().expect("standard layout");
    let npix = hout * wout;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut out[row * npix..(row + 1) * npix];
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let drow = &mut dst[oi * wout..(oi + 1) * wout];
                    if stride == 1 {
                        // contiguous run of valid columns
                        let lo = pw.saturating_sub(kj);
                        let hi = (w + pw).saturating_sub(kj).min(wout);
                        if lo < hi {
                            let s0 = lo + kj - pw;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pw as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `(c, h, w)` image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: LinalgScalar + AddAssign>(
    cols: ArrayView2<T>,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (ph, pw): (usize, usize),
    (hout, wout): (usize, usize),
) -> Array3<T> {
    let mut img = Array3::<T>::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().expect("standard layout");
    let out = img.as_slice_mut().expect("standard layout");
    let npix = hout * wout;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &src_all[row * npix..(row + 1) * npix];
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let srow = &src[oi * wout..(oi + 1) * wout];
                    for (oj, &v) in srow.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pw as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
    img
}

fn dims4<T>(w: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 4, "convolution weight must be 4-D");
    (s[0], s[1], s[2], s[3])
}

fn flat<T>(x: &Array3<T>) -> ArrayView2<'_, T> {
    let (c, h, w) = x.dim();
    x.view().into_shape_with_order((c, h * w)).expect("standard layout")
}

fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel larger than padded input");
    (n + 2 * pad - k) / stride + 1
}

/// Convolution; `w` has shape `(cout, cin, kh, kw)`.
pub(crate) fn conv_forward<T: LinalgScalar + ScalarOperand + AddAssign>(
    x: &Array3<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    stride: usize,
    pad: (usize, usize),
) -> Array3<T> {
    let (cout, cin, kh, kw) = dims4(w);
    let (c, h, wd) = x.dim();
    assert_eq!(c, cin, "conv expects {cin} input channels, got {c}");
    let hout = conv_out_size(h, kh, stride, pad.0);
    let wout = conv_out_size(wd, kw, stride, pad.1);
    let w2 = w.view().into_shape_with_order((cout, cin * kh * kw)).expect("standard layout");
    let mut out = Array2::<T>::zeros((cout, hout * wout));
    if kh == 1 && kw == 1 && stride == 1 && pad == (0, 0) {
        general_mat_mul(T::one(), &w2, &flat(x), T::zero(), &mut out);
    } else {
        let x = x.as_standard_layout();
        let cols = im2col(
            x.as_slice().expect("standard layout"),
            (c, h, wd),
            (kh, kw),
            stride,
            pad,
            (hout, wout),
        );
        general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut out);
    }
    for (mut row, &bv) in out.outer_iter_mut().zip(b.iter()) {
        row += bv;
    }
    out.into_shape_with_order((cout, hout, wout)).expect("contiguous")
}

/// Transposed convolution; `w` has shape `(cin, cout, kh, kw)`. Output size
/// is `(n - 1) * stride - 2 * pad + k + (stride - 1)`, i.e. `stride * n` for
/// odd kernels with `pad = k / 2`.
pub(crate) fn deconv_forward<T: LinalgScalar + ScalarOperand + AddAssign>(
    x: &Array3<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    stride: usize,
    pad: (usize, usize),
) -> Array3<T> {
    let (cin, cout, kh, kw) = dims4(w);
    let (c, hin, win) = x.dim();
    assert_eq!(c, cin, "deconv expects {cin} input channels, got {c}");
    let hout = (hin - 1) * stride + kh + (stride - 1) - 2 * pad.0;
    let wout = (win - 1) * stride + kw + (stride - 1) - 2 * pad.1;
    let w2 = w.view().into_shape_with_order((cin, cout * kh * kw)).expect("standard layout");
    let mut cols = Array2::<T>::zeros((cout * kh * kw, hin * win));
    general_mat_mul(T::one(), &w2.t(), &flat(x), T::zero(), &mut cols);
    let mut out = col2im(cols.view(), (cout, hout, wout), (kh, kw), stride, pad, (hin, win));
    for (mut plane, &bv) in out.outer_iter_mut().zip(b.iter()) {
        plane += bv;
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array3<f32>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Array3<f32>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is tracked (see [`Backward::var`]).
    pub fn input_with_grad(&mut self, value: Array3<f32>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn value(&self, v: Var) -> &Array3<f32> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Re-evaluates the recorded tape in double precision with the given
    /// parameter values (indexed like the store). Inputs are widened.
    pub fn replay_f64(&self, params: &[ArrayD<f64>]) -> Vec<Array3<f64>> {
        let mut vals: Vec<Array3<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input => node.value.mapv(f64::from),
                Op::Conv { x, w, b, stride, pad } => {
                    conv_forward(&vals[x.0], &params[w.index()], &params[b.index()], *stride, *pad)
                }
                Op::Deconv { x, w, b, stride, pad } => {
                    deconv_forward(&vals[x.0], &params[w.index()], &params[b.index()], *stride, *pad)
                }
                Op::LeakyRelu { x, slope } => {
                    let k = f64::from(*slope);
                    vals[x.0].mapv(|v| if v > 0.0 { v } else { k * v })
                }
                Op::Add(a, b) => &vals[a.0] + &vals[b.0],
                Op::Concat(parts) => {
                    let views: Vec<_> = parts.iter().map(|p| vals[p.0].view()).collect();
                    ndarray::concatenate(Axis(0), &views).expect("matching spatial size")
                }
                Op::Slice { x, start } => {
                    let len = node.value.dim().0;
                    vals[x.0].slice(s![*start..*start + len, .., ..]).to_owned()
                }
            };
            vals.push(v);
        }
        vals
    }

    /// Sign bits of every leaky-relu input of a replay, in node order.
    pub fn activation_pattern(&self, vals: &[Array3<f64>]) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                bits.extend(vals[x.0].iter().map(|&v| v > 0.0));
            }
        }
        bits
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize, pad: (usize, usize)) -> Var {
        let value = conv_forward(self.value(x), self.params.get(w), self.params.get(b), stride, pad);
        let rg = self.rg(x) || self.params.is_trainable(w) || self.params.is_trainable(b);
        self.push(value, Op::Conv { x, w, b, stride, pad }, rg)
    }

    pub fn deconv2d(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize, pad: (usize, usize)) -> Var {
        let value = deconv_forward(self.value(x), self.params.get(w), self.params.get(b), stride, pad);
        let rg = self.rg(x) || self.params.is_trainable(w) || self.params.is_trainable(b);
        self.push(value, Op::Deconv { x, w, b, stride, pad }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching spatial size");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, .., ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Slice { x, start }, rg)
    }

    /// Propagates the seeded output gradients back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Array3<f32>)>) -> Backward {
        let mut grads: Vec<Option<Array3<f32>>> = vec![None; self.nodes.len()];
        let mut pgrads = Grads::new(self.params.len());
        fn acc(slot: &mut Option<Array3<f32>>, g: Array3<f32>) {
            match slot {
                Some(a) => *a += &g,
                None => *slot = Some(g),
            }
        }
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(v).dim(), "seed gradient shape");
            acc(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let xv = self.value(*x);
                    let wv = self.params.get(*w);
                    let (cout, cin, kh, kw) = dims4(wv);
                    let (c, h, wd) = xv.dim();
                    let (_, hout, wout) = g.dim();
                    let g2 = flat(&g);
                    if self.params.is_trainable(*b) {
                        pgrads.accumulate(*b, g2.sum_axis(Axis(1)).into_dyn());
                    }
                    let pointwise = kh == 1 && kw == 1 && *stride == 1 && *pad == (0, 0);
                    let need_w = self.params.is_trainable(*w);
                    let need_x = self.rg(*x);
                    if !need_w && !need_x {
                        continue;
                    }
                    let xs = xv.as_standard_layout();
                    let cols_owned;
                    let cols = if pointwise {
                        flat(xv)
                    } else {
                        cols_owned = im2col(
                            xs.as_slice().expect("standard layout"),
                            (c, h, wd),
                            (kh, kw),
                            *stride,
                            *pad,
                            (hout, wout),
                        );
                        cols_owned.view()
                    };
                    if need_w {
                        let mut dw = Array2::<f32>::zeros((cout, cin * kh * kw));
                        general_mat_mul(1.0, &g2, &cols.t(), 0.0, &mut dw);
                        pgrads.accumulate(
                            *w,
                            dw.into_shape_with_order((cout, cin, kh, kw)).expect("contiguous").into_dyn(),
                        );
                    }
                    if need_x {
                        let w2 = wv.view().into_shape_with_order((cout, cin * kh * kw)).expect("standard layout");
                        let mut dcols = Array2::<f32>::zeros((cin * kh * kw, hout * wout));
                        general_mat_mul(1.0, &w2.t(), &g2, 0.0, &mut dcols);
                        let dx = if pointwise {
                            dcols.into_shape_with_order((c, h, wd)).expect("contiguous")
                        } else {
                            col2im(dcols.view(), (c, h, wd), (kh, kw), *stride, *pad, (hout, wout))
                        };
                        acc(&mut grads[x.0], dx);
                    }
                }
                Op::Deconv { x, w, b, stride, pad } => {
                    let xv = self.value(*x);
                    let wv = self.params.get(*w);
                    let (cin, cout, kh, kw) = dims4(wv);
                    let (_, hin, win) = xv.dim();
                    let (_, hout, wout) = g.dim();
                    if self.params.is_trainable(*b) {
                        pgrads.accumulate(*b, flat(&g).sum_axis(Axis(1)).into_dyn());
                    }
                    let need_w = self.params.is_trainable(*w);
                    let need_x = self.rg(*x);
                    if !need_w && !need_x {
                        continue;
                    }
                    let gs = g.as_standard_layout();
                    let gcols = im2col(
                        gs.as_slice().expect("standard layout"),
                        (cout, hout, wout),
                        (kh, kw),
                        *stride,
                        *pad,
                        (hin, win),
                    );
                    if need_w {
                        let mut dw = Array2::<f32>::zeros((cin, cout * kh * kw));
                        general_mat_mul(1.0, &flat(xv), &gcols.t(), 0.0, &mut dw);
                        pgrads.accumulate(
                            *w,
                            dw.into_shape_with_order((cin, cout, kh, kw)).expect("contiguous").into_dyn(),
                        );
                    }
                    if need_x {
                        let w2 = wv.view().into_shape_with_order((cin, cout * kh * kw)).expect("standard layout");
                        let mut dx = Array2::<f32>::zeros((cin, hin * win));
                        general_mat_mul(1.0, &w2, &gcols, 0.0, &mut dx);
                        acc(&mut grads[x.0], dx.into_shape_with_order((cin, hin, win)).expect("contiguous"));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| {
                            if xv <= 0.0 {
                                *d *= *slope;
                            }
                        });
                    acc(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads[b.0], g);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).dim().0;
                        if self.rg(*p) {
                            acc(&mut grads[p.0], g.slice(s![off..off + n, .., ..]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let mut dx = Array3::<f32>::zeros(self.value(*x).dim());
                    let n = g.dim().0;
                    dx.slice_mut(s![*start..*start + n, .., ..]).assign(&g);
                    acc(&mut grads[x.0], dx);
                }
            }
        }
        Backward {
            params: pgrads,
            nodes: grads,
        }
    }
}

/// `sum (x - target)^2` and its gradient with respect to `x`.
pub fn squared_error(x: &Array3<f32>, target: &Array3<f32>) -> (f64, Array3<f32>) {
    assert_eq!(x.dim(), target.dim(), "squared error shape");
    let diff = x - target;
    let loss = diff.iter().map(|&d| d as f64 * d as f64).sum();
    (loss, diff * 2.0)
}
