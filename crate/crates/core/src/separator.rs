//! Coarse per-view reconstruction from the measurement-derived stacks.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amplifier::DiversityBundle;
use crate::error::{Error, Result};
use crate::nn::{scaled_width, Activation, Conv2d, Deconv2d, Graph, ParamStore, ResBlock, Var};
use crate::sensing::{MaskSet, ViewId};

/// Stage-1 widths at scale 1.
pub const STAGE1_WIDTHS: [usize; 4] = [32, 64, 64, 64];
/// Residual-stage width at scale 1.
pub const RES_WIDTH: usize = 64;
pub const RES_BLOCKS: usize = 3;
/// Stage-3 widths at scale 1, before the `B`-channel output layer.
pub const STAGE3_WIDTHS: [usize; 3] = [64, 64, 32];
/// Spatial downsampling factor of the branch.
pub const DOWNSAMPLE: usize = 2;

pub const PREFIX: &str = "sep.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// One branch per view, each emitting `B` frames.
    Dual,
    /// One branch emitting both views as a `2B`-frame cube.
    Joint,
    /// Single-view system: one branch, no diversity channels.
    SingleView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub frames: usize,
    pub width_scale: f64,
    pub mode: BranchMode,
    /// Whether the four diversity images are part of the input stack.
    pub diversity: bool,
}

impl SeparatorConfig {
    pub fn dual(frames: usize, width_scale: f64) -> Self {
        Self {
            frames,
            width_scale,
            mode: BranchMode::Dual,
            diversity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::param("separator needs B >= 1"));
        }
        if !(self.width_scale > 0.0) || !self.width_scale.is_finite() {
            return Err(Error::param(format!("invalid width scale {}", self.width_scale)));
        }
        if self.mode == BranchMode::SingleView && self.diversity {
            return Err(Error::Config("single-view mode has no diversity channels".into()));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        match self.mode {
            BranchMode::Dual => 2,
            BranchMode::Joint | BranchMode::SingleView => 1,
        }
    }

    fn measurement_channels(&self) -> usize {
        if self.diversity {
            5
        } else {
            1
        }
    }

    pub fn in_channels(&self) -> usize {
        let modulated = match self.mode {
            BranchMode::Dual | BranchMode::SingleView => self.frames,
            BranchMode::Joint => 2 * self.frames,
        };
        self.measurement_channels() + modulated
    }

    pub fn out_channels(&self) -> usize {
        match self.mode {
            BranchMode::Dual | BranchMode::SingleView => self.frames,
            BranchMode::Joint => 2 * self.frames,
        }
    }

    pub fn stage1_widths(&self) -> [usize; 4] {
        STAGE1_WIDTHS.map(|w| scaled_width(w, self.width_scale))
    }

    pub fn res_width(&self) -> usize {
        scaled_width(RES_WIDTH, self.width_scale)
    }

    pub fn stage3_widths(&self) -> [usize; 3] {
        STAGE3_WIDTHS.map(|w| scaled_width(w, self.width_scale))
    }

    fn branch_names(&self) -> Vec<String> {
        match self.mode {
            BranchMode::Dual => vec![format!("{PREFIX}v1"), format!("{PREFIX}v2")],
            BranchMode::Joint => vec![format!("{PREFIX}joint")],
            BranchMode::SingleView => vec![format!("{PREFIX}single")],
        }
    }
}

/// One branch: feature extractor, residual stage, and upsampling head.
#[derive(Debug, Clone)]
pub struct Branch {
    pub stage1: [Conv2d; 4],
    pub stage2: Vec<ResBlock>,
    pub up: Deconv2d,
    pub stage3: [Conv2d; 3],
}

impl Branch {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &SeparatorConfig) -> Self {
        let a = Activation::Leaky;
        let [w0, w1, w2, w3] = cfg.stage1_widths();
        let wr = cfg.res_width();
        let [u0, u1, u2] = cfg.stage3_widths();
        let stage1 = [
            Conv2d::new(store, rng, &format!("{name}.s1.c0"), cfg.in_channels(), w0, (5, 5), 1, a),
            Conv2d::new(store, rng, &format!("{name}.s1.c1"), w0, w1, (3, 3), 1, a),
            Conv2d::new(store, rng, &format!("{name}.s1.c2"), w1, w2, (1, 1), 1, a),
            Conv2d::new(store, rng, &format!("{name}.s1.c3"), w2, w3, (3, 3), DOWNSAMPLE, a),
        ];
        let stage2 = (0..RES_BLOCKS)
            .map(|i| {
                let cin = if i == 0 { w3 } else { wr };
                ResBlock::new(store, rng, &format!("{name}.s2.r{i}"), cin, wr)
            })
            .collect();
        let up = Deconv2d::new(store, rng, &format!("{name}.s3.up"), wr + w3, u0, 3, a);
        let stage3 = [
            Conv2d::new(store, rng, &format!("{name}.s3.c0"), u0, u1, (1, 1), 1, a),
            Conv2d::new(store, rng, &format!("{name}.s3.c1"), u1, u2, (3, 3), 1, a),
            Conv2d::new(
                store,
                rng,
                &format!("{name}.s3.out"),
                u2,
                cfg.out_channels(),
                (1, 1),
                1,
                Activation::Identity,
            ),
        ];
        Self {
            stage1,
            stage2,
            up,
            stage3,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h1 = x;
        for c in &self.stage1 {
            h1 = c.forward(g, h1);
        }
        let mut h2 = h1;
        for r in &self.stage2 {
            h2 = r.forward(g, h2);
        }
        let cat = g.concat(&[h2, h1]);
        let mut h = self.up.forward(g, cat);
        for c in &self.stage3 {
            h = c.forward(g, h);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Separator {
    pub config: SeparatorConfig,
    pub branches: Vec<Branch>,
}

impl Separator {
    /// Registers the branch parameters in `store` (fan-in uniform weights,
    /// zero biases).
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: SeparatorConfig) -> Result<Self> {
        config.validate()?;
        let branches = config
            .branch_names()
            .iter()
            .map(|n| Branch::new(store, rng, n, &config))
            .collect();
        Ok(Self { config, branches })
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (c, r, w) = x.dim();
        if c != self.config.in_channels() {
            return Err(Error::shape(format!(
                "separator input has {c} channels, expected {}",
                self.config.in_channels()
            )));
        }
        if r % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || r == 0 || w == 0 {
            return Err(Error::shape(format!(
                "separator input {r}x{w} not divisible by {DOWNSAMPLE}"
            )));
        }
        Ok(())
    }

    /// Adds one output node per branch.
    pub fn forward(&self, g: &mut Graph, inputs: &[Var]) -> Vec<Var> {
        assert_eq!(inputs.len(), self.branches.len(), "one input stack per branch");
        self.branches
            .iter()
            .zip(inputs)
            .map(|(b, &x)| b.forward(g, x))
            .collect()
    }

    fn run(&self, store: &ParamStore, inputs: &[&Array3<f32>]) -> Result<Vec<Array3<f32>>> {
        for x in inputs {
            self.check_input(x)?;
        }
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|x| g.input((*x).clone())).collect();
        let outs = self.forward(&mut g, &vars);
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Input stacks in `(channel, row, col)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorInputs {
    pub stacks: Vec<Array3<f32>>,
}

fn measurement_channels(bundle: &DiversityBundle, diversity: bool) -> Vec<ndarray::Array2<f32>> {
    let mut v = vec![bundle.ybar.clone()];
    if diversity {
        v.extend(bundle.diversity().into_iter().cloned());
    }
    v
}

fn modulated(bundle: &DiversityBundle, c: &Array3<f32>) -> Vec<ndarray::Array2<f32>> {
    c.outer_iter().map(|cb| &bundle.ybar * &cb).collect()
}

fn stack(channels: Vec<ndarray::Array2<f32>>) -> Array3<f32> {
    let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
    ndarray::stack(Axis(0), &views).expect("channels share a shape")
}

/// Builds `[Ȳ, D1, D2, D3, D4, Ȳ⊙C^1 … Ȳ⊙C^B]` per branch; view `k` uses `Ck`.
/// Without diversity the four `D` channels are omitted.
pub fn assemble_inputs(bundle: &DiversityBundle, masks: &MaskSet, config: &SeparatorConfig) -> Result<SeparatorInputs> {
    if bundle.ybar.dim() != (masks.rows(), masks.cols()) {
        return Err(Error::shape(format!(
            "bundle {:?} vs masks {}x{}",
            bundle.ybar.dim(),
            masks.rows(),
            masks.cols()
        )));
    }
    if masks.frames() != config.frames {
        return Err(Error::shape(format!(
            "masks have {} frames, separator expects {}",
            masks.frames(),
            config.frames
        )));
    }
    let head = measurement_channels(bundle, config.diversity);
    let stacks = match config.mode {
        BranchMode::Dual => [ViewId::One, ViewId::Two]
            .iter()
            .map(|&v| {
                let mut ch = head.clone();
                ch.extend(modulated(bundle, masks.view(v)));
                stack(ch)
            })
            .collect(),
        BranchMode::Joint => {
            let mut ch = head;
            ch.extend(modulated(bundle, masks.c1()));
            ch.extend(modulated(bundle, masks.c2()));
            vec![stack(ch)]
        }
        BranchMode::SingleView => {
            let mut ch = head;
            ch.extend(modulated(bundle, masks.c1()));
            vec![stack(ch)]
        }
    };
    Ok(SeparatorInputs { stacks })
}

fn require_mode(sep: &Separator, mode: BranchMode) -> Result<()> {
    if sep.config.mode != mode {
        return Err(Error::Config(format!(
            "separator is in {:?} mode, operation requires {mode:?}",
            sep.config.mode
        )));
    }
    Ok(())
}

/// Dual-branch coarse reconstruction `(X̃1, X̃2)`, each `(B, rows, cols)`.
pub fn separate(sep: &Separator, store: &ParamStore, inputs: &SeparatorInputs) -> Result<(Array3<f32>, Array3<f32>)> {
    require_mode(sep, BranchMode::Dual)?;
    if inputs.stacks.len() != 2 {
        return Err(Error::shape("dual separator needs two input stacks"));
    }
    let mut out = sep.run(store, &[&inputs.stacks[0], &inputs.stacks[1]])?;
    let x2 = out.pop().expect("two outputs");
    let x1 = out.pop().expect("two outputs");
    Ok((x1, x2))
}

/// Single-branch reconstruction emitting both views as one `2B`-frame cube.
pub fn separate_single_branch(sep: &Separator, store: &ParamStore, inputs: &SeparatorInputs) -> Result<Array3<f32>> {
    require_mode(sep, BranchMode::Joint)?;
    if inputs.stacks.len() != 1 {
        return Err(Error::shape("joint separator needs one input stack"));
    }
    Ok(sep.run(store, &[&inputs.stacks[0]])?.remove(0))
}

/// Single-view reconstruction `(B, rows, cols)`.
pub fn separate_single_view(sep: &Separator, store: &ParamStore, inputs: &SeparatorInputs) -> Result<Array3<f32>> {
    require_mode(sep, BranchMode::SingleView)?;
    if inputs.stacks.len() != 1 {
        return Err(Error::shape("single-view separator needs one input stack"));
    }
    Ok(sep.run(store, &[&inputs.stacks[0]])?.remove(0))
}

/// Splits a joint `2B`-frame output into the two views.
pub fn split_joint(x: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    let b = x.dim().0 / 2;
    (x.slice(s![..b, .., ..]).to_owned(), x.slice(s![b.., .., ..]).to_owned())
}
