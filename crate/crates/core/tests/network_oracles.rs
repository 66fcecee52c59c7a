mod common;

use common::*;
use dvsci::flow::{extract_bidirectional, FlowEstimatorSpec};
use dvsci::model::{ModelConfig, PipelineMode};
use dvsci::nn::ParamStore;
use dvsci::refine::{cell_step, refine, RefineCell, RefineConfig};
use dvsci::train::{grad_check, synth_corpus, Sample};
use dvsci::{Ablation, MaskSet, OfaNet};
use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
// f32 rounding through the deep stack, scaled by max(1, |oracle|)
const F32_ENVELOPE: f64 = 1e-4;

fn tiny(mode: PipelineMode, joint: bool, ablation: Ablation) -> ModelConfig {
    let mut c = ModelConfig::dual(2, 0.125);
    c.mode = mode;
    c.joint_separator = joint;
    c.ablation = ablation;
    c
}

fn ablations() -> Vec<Ablation> {
    let mut v = vec![Ablation::default()];
    for f in Ablation::FLAGS {
        v.push(Ablation::parse(f).unwrap());
    }
    v
}

fn configs() -> Vec<ModelConfig> {
    let mut v: Vec<_> = ablations().into_iter().map(|a| tiny(PipelineMode::Dual, false, a)).collect();
    v.push(tiny(PipelineMode::Dual, true, Ablation::default()));
    v.push(tiny(PipelineMode::SingleView, false, Ablation::default()));
    v
}

fn sample_for(model: &OfaNet, rows: usize, seed: u64) -> (Sample, MaskSet) {
    let masks = MaskSet::generate(rows, rows, model.config.frames, 0.5, (1, 2), seed).unwrap();
    let pair = synth_corpus(rows, rows, model.config.frames, 1, seed + 1).unwrap().remove(0);
    (Sample::new(model, &pair, &masks, 0.0, 0).unwrap(), masks)
}

#[test]
fn tiny_assemblies_match_straight_line_oracle() {
    for (i, cfg) in configs().into_iter().enumerate() {
        let mut model = OfaNet::new(cfg.clone(), 40 + i as u64).unwrap();
        randomize_biases(&mut model.store, 7 + i as u64);
        let (sample, masks) = sample_for(&model, 8, 3 + i as u64);
        let (d64, d32) = assembly_deviation(&model, &sample.prep, &masks);
        assert!(d64 < TOL, "{cfg:?}: double-precision forward off by {d64:e}");
        assert!(d32 < F32_ENVELOPE, "{cfg:?}: f32 forward off by {d32:e}");
    }
}

#[test]
fn cell_step_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cell = RefineCell::new(&mut store, &mut rng, RefineConfig::new(0.125)).unwrap();
    randomize_biases(&mut store, 3);
    let (r, c) = (6, 10);
    let x = random_cube(&mut rng, (1, r, c));
    let f = random_cube(&mut rng, (2, r, c)) - 0.5;
    let b = random_cube(&mut rng, (2, r, c)) - 0.5;
    let d = random_cube(&mut rng, (4, r, c));
    let h = random_cube(&mut rng, (cell.config.hidden_width(), r, c));
    let (xo, ho) = cell_step(&cell, &store, &x.index_axis(ndarray::Axis(0), 0).to_owned(), &f, &b, &d, &h).unwrap();
    let (ox, oh) = common::cell(&store, &T3::from_f32(&x), &T3::from_f32(&f), &T3::from_f32(&b), &T3::from_f32(&d), &T3::from_f32(&h));
    assert!(ox.max_scaled_diff(&xo.insert_axis(ndarray::Axis(0))) < F32_ENVELOPE);
    assert!(oh.max_scaled_diff(&ho) < F32_ENVELOPE);
}

#[test]
fn refine_is_a_chain_of_cell_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let cell = RefineCell::new(&mut store, &mut rng, RefineConfig::new(0.125)).unwrap();
    randomize_biases(&mut store, 10);
    let (b, r, c) = (4, 8, 8);
    let coarse = random_cube(&mut rng, (b, r, c));
    let fwd: Vec<_> = (0..b - 1).map(|_| random_cube(&mut rng, (2, r, c)) - 0.5).collect();
    let bwd: Vec<_> = (0..b - 1).map(|_| random_cube(&mut rng, (2, r, c)) - 0.5).collect();
    let d = random_cube(&mut rng, (4, r, c));
    let out = refine(&cell, &store, &coarse, &fwd, &bwd, &d, &Ablation::default()).unwrap();
    let frame = |t: usize| coarse.index_axis(ndarray::Axis(0), t).to_owned();
    let zero = Array3::zeros((2, r, c));
    let h0 = Array3::zeros((cell.config.hidden_width(), r, c));
    let (x1, _) = cell_step(&cell, &store, &frame(0), &zero, &bwd[0], &d, &h0).unwrap();
    assert_eq!(out.index_axis(ndarray::Axis(0), 0), x1);
    let mut h = h0;
    for t in 0..b - 1 {
        let (x, hn) = cell_step(&cell, &store, &frame(t), &fwd[t], &bwd[t], &d, &h).unwrap();
        assert_eq!(out.index_axis(ndarray::Axis(0), t + 1), x);
        h = hn;
    }
}

#[test]
fn zero_parameters_give_zero_outputs() {
    for cfg in configs() {
        let mut model = OfaNet::new(cfg.clone(), 1).unwrap();
        model.store.fill(0.0);
        let (sample, masks) = sample_for(&model, 8, 5);
        let y = sample.prep.bundle.ybar.clone();
        assert!(y.iter().any(|&v| v != 0.0));
        let pair = synth_corpus(8, 8, 2, 1, 6).unwrap().remove(0);
        let meas = pair.measure(&masks, cfg.mode, 0.0, 0).unwrap();
        let rec = model.reconstruct(&meas, &masks).unwrap();
        for x in rec.coarse.iter().chain(&rec.refined) {
            assert!(x.iter().all(|&v| v == 0.0), "{cfg:?}");
        }
    }
}

#[test]
fn output_shapes_across_configurations() {
    for (rows, cols) in [(8, 8), (16, 24), (24, 8)] {
        for b in [2, 3, 5] {
            for scale in [0.125, 0.25] {
                for mut cfg in configs() {
                    cfg.frames = b;
                    cfg.width_scale = scale;
                    let model = OfaNet::new(cfg.clone(), 2).unwrap();
                    let masks = MaskSet::generate(rows, cols, b, 0.5, (0, 2), 1).unwrap();
                    let pair = synth_corpus(rows, cols, b, 1, 3).unwrap().remove(0);
                    let y = pair.measure(&masks, cfg.mode, 0.0, 0).unwrap();
                    let rec = model.reconstruct(&y, &masks).unwrap();
                    let views = cfg.mode.views();
                    assert_eq!(rec.coarse.len(), views);
                    assert_eq!(rec.refined.len(), views);
                    for x in rec.coarse.iter().chain(&rec.refined) {
                        assert_eq!(x.dim(), (b, rows, cols), "{cfg:?}");
                        assert!(x.iter().all(|v| v.is_finite()));
                    }
                }
            }
        }
    }
}

#[test]
fn odd_geometry_is_rejected() {
    let model = OfaNet::new(tiny(PipelineMode::Dual, false, Ablation::default()), 2).unwrap();
    let masks = MaskSet::generate(9, 8, 2, 0.5, (0, 2), 1).unwrap();
    let pair = synth_corpus(9, 8, 2, 1, 3).unwrap().remove(0);
    let y = pair.measure(&masks, PipelineMode::Dual, 0.0, 0).unwrap();
    assert!(model.reconstruct(&y, &masks).is_err());
}

#[test]
fn one_refine_cell_serves_both_views() {
    let model = OfaNet::new(tiny(PipelineMode::Dual, false, Ablation::default()), 4).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    RefineCell::new(&mut store, &mut rng, RefineConfig::new(0.125)).unwrap();
    assert_eq!(model.store.count("ref."), store.count("ref."));
    assert!(model.store.count("sep.v1.") > 0);
    assert_eq!(model.store.count("sep.v1."), model.store.count("sep.v2."));
}

/// Refined frame `t` (0-based, `t >= 1`) must not move when any coarse frame
/// after `t` changes; frame 0 may see frame 1 through the backward flow only.
#[test]
fn recurrence_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let cell = RefineCell::new(&mut store, &mut rng, RefineConfig::new(0.125)).unwrap();
    let (b, r, c) = (5, 16, 16);
    let pair = synth_corpus(r, c, b, 1, 8).unwrap().remove(0);
    let coarse = pair.x1.data().clone();
    let d = random_cube(&mut rng, (4, r, c));
    let spec = FlowEstimatorSpec::classical();
    let run = |x: &Array3<f32>| {
        let (f, bw) = extract_bidirectional(&spec, x.view()).unwrap();
        let f: Vec<_> = f.iter().map(|v| v.to_tensor()).collect();
        let bw: Vec<_> = bw.iter().map(|v| v.to_tensor()).collect();
        refine(&cell, &store, x, &f, &bw, &d, &Ablation::default()).unwrap()
    };
    let base = run(&coarse);
    for s in 1..b {
        let mut p = coarse.clone();
        p.slice_mut(s![s, .., ..]).mapv_inplace(|v| 1.0 - v);
        let out = run(&p);
        for t in 0..b {
            let same = out.slice(s![t, .., ..]) == base.slice(s![t, .., ..]);
            let allowed_to_change = if t == 0 { s <= 1 } else { s <= t };
            if !allowed_to_change {
                assert!(same, "frame {t} changed after perturbing coarse frame {s}");
            } else if s == t {
                assert!(!same, "frame {t} ignores its own input");
            }
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    for ab in [Ablation::default(), Ablation::parse("no_refine").unwrap()] {
        let model = OfaNet::new(tiny(PipelineMode::Dual, false, ab), 5).unwrap();
        let (sample, _) = sample_for(&model, 8, 11);
        let rep = grad_check(&model, &sample, 1.0, 30, 1e-3, 6).unwrap();
        assert_eq!(rep.entries.len(), 30);
        assert!(rep.max_rel_error < 1e-3, "{ab:?}: {}", rep.max_rel_error);
    }
}

#[test]
fn grad_check_error_is_second_order_in_step() {
    let model = OfaNet::new(tiny(PipelineMode::Dual, false, Ablation::default()), 5).unwrap();
    let (sample, _) = sample_for(&model, 8, 11);
    let a = grad_check(&model, &sample, 1.0, 20, 1e-3, 8).unwrap();
    let b = grad_check(&model, &sample, 1.0, 20, 5e-4, 8).unwrap();
    assert!(b.max_rel_error <= 4.0 * a.max_rel_error, "{} -> {}", a.max_rel_error, b.max_rel_error);
}
