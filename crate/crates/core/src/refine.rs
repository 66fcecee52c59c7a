//! Recurrent refinement of the coarse per-view frames.
//!
//! One cell is shared by both views. Frame `t+1` is emitted from the coarse
//! frame `t`, the forward and backward flow between `t` and `t+1`, the four
//! diversity images and the hidden state carried from the previous step.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scaled_width, Activation, Conv2d, Graph, ParamStore, ResBlock, Sequential, Var};

pub const PREFIX: &str = "ref.";

pub const FRAME_EMBED: [usize; 5] = [20; 5];
pub const FLOW_EMBED: [usize; 3] = [40; 3];
pub const DIVERSITY_EMBED: [usize; 5] = [20; 5];
pub const FUSION_RES_WIDTH: usize = 40;
pub const FUSION_RES_BLOCKS: usize = 2;
/// Fusion tail widths; the last entry is the hidden-state width.
pub const FUSION_TAIL: [usize; 3] = [20, 20, 10];
pub const HEAD: [usize; 5] = [40, 30, 20, 20, 20];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub width_scale: f64,
}

impl RefineConfig {
    pub fn new(width_scale: f64) -> Self {
        Self { width_scale }
    }

    fn w(&self, base: usize) -> usize {
        scaled_width(base, self.width_scale)
    }

    pub fn hidden_width(&self) -> usize {
        self.w(FUSION_TAIL[2])
    }

    /// Channels of the fusion input `[F_X, F_F→, F_F←, F_D, H]`.
    pub fn fusion_in(&self) -> usize {
        self.w(FRAME_EMBED[4]) + 2 * self.w(FLOW_EMBED[2]) + self.w(DIVERSITY_EMBED[4]) + self.hidden_width()
    }
}

/// Ablation switches for the refinement stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_flow: bool,
    pub no_backward: bool,
    pub no_diversity: bool,
    pub no_refine: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no_flow", "no_backward", "no_diversity", "no_refine"];

    /// Parses a comma-separated flag list; an empty string is the full model.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for flag in list.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "no_flow" => a.no_flow = true,
                "no_backward" => a.no_backward = true,
                "no_diversity" => a.no_diversity = true,
                "no_refine" => a.no_refine = true,
                other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_refine && (self.no_flow || self.no_backward || self.no_diversity) {
            return Err(Error::Config("no_refine cannot be combined with other ablation flags".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut v = Vec::new();
        if self.no_flow {
            v.push("no_flow");
        }
        if self.no_backward {
            v.push("no_backward");
        }
        if self.no_diversity {
            v.push("no_diversity");
        }
        if self.no_refine {
            v.push("no_refine");
        }
        if v.is_empty() {
            "full".into()
        } else {
            v.join(",")
        }
    }
}

fn chain<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    layers: &[(usize, (usize, usize))],
    last_identity: bool,
) -> Sequential {
    let mut c = cin;
    let n = layers.len();
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, &(cout, k))| {
            let act = if last_identity && i + 1 == n {
                Activation::Identity
            } else {
                Activation::Leaky
            };
            let l = Conv2d::new(store, rng, &format!("{name}.c{i}"), c, cout, k, 1, act);
            c = cout;
            l
        })
        .collect();
    Sequential { layers }
}

#[derive(Debug, Clone)]
pub struct RefineCell {
    pub config: RefineConfig,
    pub frame_embed: Sequential,
    pub flow_fwd_embed: Sequential,
    pub flow_bwd_embed: Sequential,
    pub diversity_embed: Sequential,
    pub fusion_res: Vec<ResBlock>,
    pub fusion_tail: Sequential,
    pub head: Sequential,
}

impl RefineCell {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: RefineConfig) -> Result<Self> {
        if !(config.width_scale > 0.0) || !config.width_scale.is_finite() {
            return Err(Error::param(format!("invalid width scale {}", config.width_scale)));
        }
        let w = |b: usize| config.w(b);
        let k5 = (5, 5);
        let k3 = (3, 3);
        let k1 = (1, 1);
        let fx = FRAME_EMBED.map(w);
        let frame_embed = chain(
            store,
            rng,
            "ref.fx",
            1,
            &[(fx[0], k5), (fx[1], k1), (fx[2], k3), (fx[3], k1), (fx[4], k3)],
            false,
        );
        let ff = FLOW_EMBED.map(w);
        let flow_layers = [(ff[0], k5), (ff[1], k3), (ff[2], k1)];
        let flow_fwd_embed = chain(store, rng, "ref.ffwd", 2, &flow_layers, false);
        let flow_bwd_embed = chain(store, rng, "ref.fbwd", 2, &flow_layers, false);
        let fd = DIVERSITY_EMBED.map(w);
        let diversity_embed = chain(
            store,
            rng,
            "ref.fd",
            4,
            &[(fd[0], k5), (fd[1], k1), (fd[2], k3), (fd[3], k1), (fd[4], k3)],
            false,
        );
        let wr = w(FUSION_RES_WIDTH);
        let fusion_res = (0..FUSION_RES_BLOCKS)
            .map(|i| {
                let cin = if i == 0 { config.fusion_in() } else { wr };
                ResBlock::new(store, rng, &format!("ref.h.r{i}"), cin, wr)
            })
            .collect();
        let t = FUSION_TAIL.map(w);
        let fusion_tail = chain(store, rng, "ref.h.t", wr, &[(t[0], (1, 3)), (t[1], (3, 1)), (t[2], (1, 3))], false);
        let h = HEAD.map(w);
        let head = chain(
            store,
            rng,
            "ref.r",
            t[2],
            &[(h[0], k3), (h[1], k1), (h[2], k3), (h[3], k1), (h[4], k3), (1, k1)],
            true,
        );
        Ok(Self {
            config,
            frame_embed,
            flow_fwd_embed,
            flow_bwd_embed,
            diversity_embed,
            fusion_res,
            fusion_tail,
            head,
        })
    }

    /// One recurrence step; returns `(frame, hidden)`.
    pub fn step(&self, g: &mut Graph, x_prev: Var, f_fwd: Var, f_bwd: Var, d: Var, h_prev: Var) -> (Var, Var) {
        let ex = self.frame_embed.forward(g, x_prev);
        let ef = self.flow_fwd_embed.forward(g, f_fwd);
        let eb = self.flow_bwd_embed.forward(g, f_bwd);
        let ed = self.diversity_embed.forward(g, d);
        let mut h = g.concat(&[ex, ef, eb, ed, h_prev]);
        for r in &self.fusion_res {
            h = r.forward(g, h);
        }
        let h = self.fusion_tail.forward(g, h);
        let x = self.head.forward(g, h);
        (x, h)
    }
}

/// Array-level single step: `(x_out, h_out)` from `x_prev` `(rows, cols)`,
/// flows `(2, rows, cols)`, `d` `(4, rows, cols)` and `h_prev`.
pub fn cell_step(
    cell: &RefineCell,
    store: &ParamStore,
    x_prev: &ndarray::Array2<f32>,
    f_fwd: &Array3<f32>,
    f_bwd: &Array3<f32>,
    d: &Array3<f32>,
    h_prev: &Array3<f32>,
) -> Result<(ndarray::Array2<f32>, Array3<f32>)> {
    let (rows, cols) = x_prev.dim();
    let expect = [
        (f_fwd.dim(), (2, rows, cols)),
        (f_bwd.dim(), (2, rows, cols)),
        (d.dim(), (4, rows, cols)),
        (h_prev.dim(), (cell.config.hidden_width(), rows, cols)),
    ];
    for (got, want) in expect {
        if got != want {
            return Err(Error::shape(format!("cell input {got:?}, expected {want:?}")));
        }
    }
    let mut g = Graph::new(store);
    let x = g.input(x_prev.clone().insert_axis(Axis(0)));
    let f = g.input(f_fwd.clone());
    let b = g.input(f_bwd.clone());
    let dv = g.input(d.clone());
    let h = g.input(h_prev.clone());
    let (xo, ho) = cell.step(&mut g, x, f, b, dv, h);
    Ok((g.value(xo).index_axis(Axis(0), 0).to_owned(), g.value(ho).clone()))
}

/// Graph-level inputs for refining one view.
pub struct ViewInputs<'a> {
    /// Coarse frames, one `(1, rows, cols)` node each.
    pub frames: &'a [Var],
    /// `F^{t→t+1}`, `(2, rows, cols)` each, `B-1` entries.
    pub forward: &'a [Var],
    /// `F^{t+1→t}`, `(2, rows, cols)` each, `B-1` entries.
    pub backward: &'a [Var],
    /// `(4, rows, cols)` diversity stack.
    pub diversity: Var,
}

/// Emits the `B` refined frames of one view.
///
/// Frame 1 comes from an extra step fed `(X̃^1, 0, F^{2→1}, D, 0)` whose
/// hidden output is discarded; frames `2..B` follow the recurrence with a
/// zero initial hidden state.
pub fn refine_view(g: &mut Graph, cell: &RefineCell, inp: &ViewInputs, ablation: &Ablation) -> Result<Vec<Var>> {
    ablation.validate()?;
    let b = inp.frames.len();
    if b < 2 {
        return Err(Error::param(format!("refinement needs B >= 2, got {b}")));
    }
    if inp.forward.len() != b - 1 || inp.backward.len() != b - 1 {
        return Err(Error::shape(format!(
            "expected {} flow fields per direction, got {}/{}",
            b - 1,
            inp.forward.len(),
            inp.backward.len()
        )));
    }
    if ablation.no_refine {
        return Ok(inp.frames.to_vec());
    }
    let (_, rows, cols) = g.value(inp.frames[0]).dim();
    let zero_flow = g.input(Array3::zeros((2, rows, cols)));
    let h0 = g.input(Array3::zeros((cell.config.hidden_width(), rows, cols)));
    let d = if ablation.no_diversity {
        g.input(Array3::zeros((4, rows, cols)))
    } else {
        inp.diversity
    };
    let fwd = |t: usize| if ablation.no_flow { zero_flow } else { inp.forward[t] };
    let bwd = |t: usize| {
        if ablation.no_flow || ablation.no_backward {
            zero_flow
        } else {
            inp.backward[t]
        }
    };
    let mut out = Vec::with_capacity(b);
    let (x1, _) = cell.step(g, inp.frames[0], zero_flow, bwd(0), d, h0);
    out.push(x1);
    let mut h = h0;
    for t in 0..b - 1 {
        let (x, hn) = cell.step(g, inp.frames[t], fwd(t), bwd(t), d, h);
        out.push(x);
        h = hn;
    }
    Ok(out)
}

/// Refines one view outside of training. `coarse` is `(B, rows, cols)`,
/// flows are `(2, rows, cols)` tensors and `diversity` is `(4, rows, cols)`.
pub fn refine(
    cell: &RefineCell,
    store: &ParamStore,
    coarse: &Array3<f32>,
    forward: &[Array3<f32>],
    backward: &[Array3<f32>],
    diversity: &Array3<f32>,
    ablation: &Ablation,
) -> Result<Array3<f32>> {
    let (_, rows, cols) = coarse.dim();
    for f in forward.iter().chain(backward) {
        if f.dim() != (2, rows, cols) {
            return Err(Error::shape(format!("flow tensor {:?}, expected (2, {rows}, {cols})", f.dim())));
        }
    }
    if diversity.dim() != (4, rows, cols) {
        return Err(Error::shape(format!("diversity stack {:?}", diversity.dim())));
    }
    let mut g = Graph::new(store);
    let frames: Vec<Var> = coarse
        .axis_iter(Axis(0))
        .map(|f| g.input(f.to_owned().insert_axis(Axis(0))))
        .collect();
    let fw: Vec<Var> = forward.iter().map(|f| g.input(f.clone())).collect();
    let bw: Vec<Var> = backward.iter().map(|f| g.input(f.clone())).collect();
    let d = g.input(diversity.clone());
    let out = refine_view(
        &mut g,
        cell,
        &ViewInputs {
            frames: &frames,
            forward: &fw,
            backward: &bw,
            diversity: d,
        },
        ablation,
    )?;
    let views: Vec<_> = out.iter().map(|&v| g.value(v).index_axis(Axis(0), 0).to_owned()).collect();
    let views: Vec<_> = views.iter().map(|v| v.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("same frame shape"))
}
