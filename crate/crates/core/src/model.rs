//! End-to-end reconstruction network: amplifier, separator, flow and refine
//! stages wired together over one parameter store.

use std::path::Path;

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amplifier::{build_bundle, build_single_view_bundle, AmplifierConfig, DiversityBundle};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::flow::{extract_bidirectional, fine_tune_hook, FineTuneContract, FlowEstimatorSpec, FlowKind, LearnedFlowNet};
use crate::nn::{Graph, ParamStore, Var};
use crate::refine::{refine_view, Ablation, RefineCell, RefineConfig, ViewInputs};
use crate::sensing::{MaskSet, Measurement};
use crate::separator::{assemble_inputs, BranchMode, Separator, SeparatorConfig, SeparatorInputs, DOWNSAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    Dual,
    SingleView,
}

impl PipelineMode {
    pub fn views(self) -> usize {
        match self {
            Self::Dual => 2,
            Self::SingleView => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: PipelineMode,
    pub frames: usize,
    pub width_scale: f64,
    /// Replace the two separator branches by one joint branch.
    #[serde(default)]
    pub joint_separator: bool,
    #[serde(default)]
    pub amplifier: AmplifierConfig,
    #[serde(default)]
    pub flow: FlowEstimatorSpec,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn dual(frames: usize, width_scale: f64) -> Self {
        Self {
            mode: PipelineMode::Dual,
            frames,
            width_scale,
            joint_separator: false,
            amplifier: AmplifierConfig::default(),
            flow: FlowEstimatorSpec::classical(),
            ablation: Ablation::default(),
        }
    }

    pub fn separator_config(&self) -> SeparatorConfig {
        let mode = match (self.mode, self.joint_separator) {
            (PipelineMode::SingleView, _) => BranchMode::SingleView,
            (PipelineMode::Dual, true) => BranchMode::Joint,
            (PipelineMode::Dual, false) => BranchMode::Dual,
        };
        SeparatorConfig {
            frames: self.frames,
            width_scale: self.width_scale,
            mode,
            diversity: self.mode == PipelineMode::Dual && !self.ablation.no_diversity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.separator_config().validate()?;
        self.flow.validate()?;
        self.amplifier.smoothing.validate()?;
        if self.frames < 2 && !self.ablation.no_refine {
            return Err(Error::Config("the refine stage needs B >= 2 frames per view".into()));
        }
        if self.mode == PipelineMode::SingleView && self.joint_separator {
            return Err(Error::Config("joint separator is a dual-view ablation".into()));
        }
        Ok(())
    }

    pub fn check_geometry(&self, rows: usize, cols: usize) -> Result<()> {
        if rows % DOWNSAMPLE != 0 || cols % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "geometry {rows}x{cols} must be divisible by {DOWNSAMPLE}"
            )));
        }
        Ok(())
    }
}

/// Deterministic network inputs derived from a measurement.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub bundle: DiversityBundle,
    pub inputs: SeparatorInputs,
    /// `(4, rows, cols)` stack `[D1, D2, D3, D4]`.
    pub diversity: Array3<f32>,
}

/// Forward and backward `(2, rows, cols)` flow tensors of one view.
pub type ViewFlows = (Vec<Array3<f32>>, Vec<Array3<f32>>);

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Coarse estimate per view, `(B, rows, cols)`.
    pub coarse: Vec<Var>,
    /// Refined frames per view, each `(1, rows, cols)`.
    pub refined: Vec<Vec<Var>>,
    /// Classical flows used per view (empty when flows live in the graph or
    /// are ablated).
    pub flows: Vec<ViewFlows>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub coarse: Vec<Array3<f32>>,
    pub refined: Vec<Array3<f32>>,
}

#[derive(Debug, Clone)]
pub struct OfaNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub separator: Separator,
    pub cell: Option<RefineCell>,
    pub flow_net: Option<LearnedFlowNet>,
    pub flow_contract: FineTuneContract,
}

impl OfaNet {
    /// Fresh model; parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let separator = Separator::new(&mut store, &mut rng, config.separator_config())?;
        let cell = if config.ablation.no_refine {
            None
        } else {
            Some(RefineCell::new(&mut store, &mut rng, RefineConfig::new(config.width_scale))?)
        };
        let (flow_net, flow_contract) = if config.ablation.no_refine || config.ablation.no_flow {
            (
                None,
                FineTuneContract {
                    trainable_params: 0,
                    gradients_flow: false,
                },
            )
        } else {
            fine_tune_hook(&config.flow, &mut store)?
        };
        Ok(Self {
            config,
            store,
            separator,
            cell,
            flow_net,
            flow_contract,
        })
    }

    /// Model with parameters restored from a checkpoint directory.
    pub fn load(config: ModelConfig, dir: &Path) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let c = Container::read(dir)?;
        m.store.load_from(&c, dir)?;
        Ok(m)
    }

    pub fn views(&self) -> usize {
        self.config.mode.views()
    }

    pub fn prepare(&self, y: &Measurement, masks: &MaskSet) -> Result<Prepared> {
        if masks.frames() != self.config.frames {
            return Err(Error::shape(format!(
                "masks carry {} frames, model expects {}",
                masks.frames(),
                self.config.frames
            )));
        }
        self.config.check_geometry(y.rows(), y.cols())?;
        let bundle = match self.config.mode {
            PipelineMode::Dual => build_bundle(y, masks, &self.config.amplifier)?,
            PipelineMode::SingleView => build_single_view_bundle(y, masks, &self.config.amplifier)?,
        };
        let inputs = assemble_inputs(&bundle, masks, &self.separator.config)?;
        let d = bundle.diversity();
        let views: Vec<_> = d.iter().map(|a| a.view()).collect();
        let diversity = ndarray::stack(Axis(0), &views).expect("same shape");
        Ok(Prepared {
            bundle,
            inputs,
            diversity,
        })
    }

    /// Builds the full forward pass in `g`.
    pub fn forward(&self, g: &mut Graph, prep: &Prepared) -> Result<ForwardVars> {
        self.forward_with(g, prep, None)
    }

    /// As [`forward`](Self::forward), optionally reusing classical flows from
    /// an earlier pass instead of re-estimating them.
    pub fn forward_with(&self, g: &mut Graph, prep: &Prepared, fixed_flows: Option<&[ViewFlows]>) -> Result<ForwardVars> {
        let inputs: Vec<Var> = prep.inputs.stacks.iter().map(|s| g.input(s.clone())).collect();
        let mut outs = self.separator.forward(g, &inputs);
        let b = self.config.frames;
        let coarse = if self.separator.config.mode == BranchMode::Joint {
            let joint = outs.remove(0);
            vec![g.slice(joint, 0, b), g.slice(joint, b, b)]
        } else {
            outs
        };
        let mut refined = Vec::with_capacity(coarse.len());
        let mut used = Vec::new();
        for (k, &view) in coarse.iter().enumerate() {
            let frames: Vec<Var> = (0..b).map(|t| g.slice(view, t, 1)).collect();
            let Some(cell) = &self.cell else {
                refined.push(frames);
                continue;
            };
            let (fwd, bwd) = self.flows(g, view, &frames, fixed_flows.and_then(|f| f.get(k)), &mut used)?;
            let d = g.input(prep.diversity.clone());
            let out = refine_view(
                g,
                cell,
                &ViewInputs {
                    frames: &frames,
                    forward: &fwd,
                    backward: &bwd,
                    diversity: d,
                },
                &self.config.ablation,
            )?;
            refined.push(out);
        }
        Ok(ForwardVars {
            coarse,
            refined,
            flows: used,
        })
    }

    fn flows(
        &self,
        g: &mut Graph,
        view: Var,
        frames: &[Var],
        fixed: Option<&ViewFlows>,
        used: &mut Vec<ViewFlows>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if self.config.ablation.no_flow {
            // fed zeros inside the refine stage
            let (_, r, c) = g.value(view).dim();
            let z = g.input(Array3::zeros((2, r, c)));
            let n = frames.len() - 1;
            return Ok((vec![z; n], vec![z; n]));
        }
        match (&self.flow_net, self.config.flow.kind) {
            (Some(net), FlowKind::LearnedAdapter) => {
                let mut fwd = Vec::new();
                let mut bwd = Vec::new();
                for t in 0..frames.len() - 1 {
                    fwd.push(net.forward(g, frames[t], frames[t + 1]));
                    bwd.push(net.forward(g, frames[t + 1], frames[t]));
                }
                Ok((fwd, bwd))
            }
            _ => {
                let flows = match fixed {
                    Some(f) => f.clone(),
                    None => {
                        let video = g.value(view).clone();
                        let (f, r) = extract_bidirectional(&self.config.flow, video.view())?;
                        (f.iter().map(|x| x.to_tensor()).collect(), r.iter().map(|x| x.to_tensor()).collect())
                    }
                };
                let fwd = flows.0.iter().map(|x| g.input(x.clone())).collect();
                let bwd = flows.1.iter().map(|x| g.input(x.clone())).collect();
                used.push(flows);
                Ok((fwd, bwd))
            }
        }
    }

    /// Inference on one measurement.
    pub fn reconstruct(&self, y: &Measurement, masks: &MaskSet) -> Result<Reconstruction> {
        let prep = self.prepare(y, masks)?;
        let mut g = Graph::new(&self.store);
        let fv = self.forward(&mut g, &prep)?;
        Ok(Reconstruction {
            coarse: fv.coarse.iter().map(|&v| g.value(v).clone()).collect(),
            refined: fv.refined.iter().map(|fr| stack_frames(&g, fr)).collect(),
        })
    }

    pub fn save(&self, dir: &Path, meta: &[(&str, String)]) -> Result<()> {
        let mut c = self.store.to_container();
        for (k, v) in meta {
            c.set_meta(k, v);
        }
        c.write(dir)
    }
}

/// Concatenates `(1, rows, cols)` frame nodes into a `(B, rows, cols)` cube.
pub fn stack_frames(g: &Graph, frames: &[Var]) -> Array3<f32> {
    let views: Vec<_> = frames.iter().map(|&v| g.value(v).view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same frame shape")
}
