use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dvsci::amplifier::{build_bundle, build_single_view_bundle};
use dvsci::container::{
    export_png, load_cubes, load_masks, load_measurement, save_bundle, save_cubes, save_estimates, save_masks,
    save_measurement, Container,
};
use dvsci::eval::{
    evaluate, framewise_csv, framewise_report, noise_sweep, rate_sweep, EvalReport, GapTvReconstructor,
    PnpTvReconstructor, RatePoint, SweepRow, SweepTable,
};
use dvsci::solvers::{gap_tv, gap_tv_single, residual_table};
use dvsci::train::{build_corpus, pair_manifest, synth_corpus, train, PairSource, TrainOutputs};
use dvsci::{Ablation, Error, OfaNet, PipelineConfig, PipelineMode, Reconstructor, Result, TrainPair, VideoCube, ViewId};

#[derive(Parser)]
#[command(name = "dvsci", version, about = "Dual-view video snapshot compressive imaging")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a primary mask stack and its shifted copy.
    MaskGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write synthetic moving-object video pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode a stored video pair into a snapshot measurement.
    Simulate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute the normalized measurement and diversity maps.
    Amplify {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network and write per-epoch checkpoints.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct one measurement.
    Reconstruct {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        algo: AlgoArgs,
        /// Ground-truth pair for an evaluation report (defaults to the
        /// measurement's recorded source).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also export every frame as PNG.
        #[arg(long)]
        png: bool,
    },
    /// Evaluate an algorithm over a dataset.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        algo: AlgoArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Noise-level or compression-rate sweep.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        algo: AlgoArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Rate sweeps with the network read `<root>/b<B>` checkpoints.
        #[arg(long)]
        checkpoint_root: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate ablated variants, one report row per flag.
    Ablate {
        /// Comma-separated: full, no_flow, no_backward, no_diversity, no_refine.
        #[arg(long)]
        flags: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Per-variant checkpoints at `<root>/<flag>`; missing ones are trained.
        #[arg(long)]
        checkpoint_root: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Gaptv,
    PnpTv,
    Ofanet,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Noise,
    Rate,
}

#[derive(Args)]
struct AlgoArgs {
    #[arg(long, value_enum, default_value = "gaptv")]
    algo: Algo,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tv_lambda: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory of stored pairs (one container per subdirectory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Crop pairs from the frame corpus under the data root.
    #[arg(long)]
    corpus: bool,
    /// Number of pairs (synthetic or corpus).
    #[arg(long)]
    count: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Io(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn announce(cfg: &PipelineConfig) -> String {
    let h = cfg.hash();
    println!("config {h}");
    h
}

fn stamp(dir: &Path, command: &str, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("provenance.txt"),
        format!("command {command}\nconfig_hash {}\nseed {}\n", cfg.hash(), cfg.pipeline.seed),
    )?;
    cfg.write(&dir.join("config.toml"))
}

fn apply_seed(cfg: &mut PipelineConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
        cfg.train.seed = s;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::MaskGen { out, frames, seed } => {
            if let Some(b) = frames {
                cfg.geometry.frames = b;
            }
            if let Some(s) = seed {
                cfg.masks.seed = s;
                cfg.pipeline.seed = s;
            }
            cfg.validate()?;
            announce(&cfg);
            let masks = cfg.mask_set()?;
            save_masks(&out, &masks)?;
            stamp(&out, "mask-gen", &cfg)?;
            println!("masks {} written to {}", masks.reference(), out.display());
        }
        Command::Synth { out, count, seed } => {
            apply_seed(&mut cfg, seed);
            announce(&cfg);
            let g = cfg.geometry;
            let pairs = synth_corpus(g.rows, g.cols, g.frames, count, cfg.pipeline.seed)?;
            save_pairs(&out, &pairs, &cfg)?;
            println!("{} pairs written to {}", pairs.len(), out.display());
        }
        Command::Simulate {
            truth,
            masks,
            out,
            sigma,
            seed,
        } => {
            apply_seed(&mut cfg, seed);
            announce(&cfg);
            let pair = load_pair(&truth)?;
            let masks = load_masks(&masks)?;
            let y = pair.measure(&masks, cfg.pipeline.mode, sigma, cfg.pipeline.seed)?;
            let abs = truth.canonicalize()?;
            save_measurement(
                &out,
                &y,
                &[("config_hash", cfg.hash()), ("truth", abs.display().to_string())],
            )?;
            stamp(&out, "simulate", &cfg)?;
            println!("measurement {}x{} written to {}", y.rows(), y.cols(), out.display());
        }
        Command::Amplify {
            measurement,
            masks,
            out,
        } => {
            announce(&cfg);
            let y = load_measurement(&measurement)?;
            let masks = load_masks(&masks)?;
            let bundle = match cfg.pipeline.mode {
                PipelineMode::Dual => build_bundle(&y, &masks, &cfg.amplifier.params)?,
                PipelineMode::SingleView => build_single_view_bundle(&y, &masks, &cfg.amplifier.params)?,
            };
            save_bundle(&out, &bundle)?;
            stamp(&out, "amplify", &cfg)?;
            println!("diversity maps written to {} ({} degenerate pixels)", out.display(), bundle.degenerate_pixels);
        }
        Command::Train {
            out,
            data,
            masks,
            epochs,
            max_steps,
            lr,
            seed,
        } => {
            apply_seed(&mut cfg, seed);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            cfg.validate()?;
            let hash = announce(&cfg);
            let masks = match masks {
                Some(p) => load_masks(&p)?,
                None => cfg.mask_set()?,
            };
            let pairs = dataset(&data, &cfg, cfg.geometry.frames, cfg.train.seed)?;
            let mut model = OfaNet::new(cfg.model_config(), cfg.pipeline.seed)?;
            stamp(&out, "train", &cfg)?;
            fs::write(out.join("pairs.txt"), pair_manifest(&pairs))?;
            let outputs = TrainOutputs {
                checkpoint_dir: Some(out.join("checkpoints")),
                log: Some(out.join("train.log")),
                config_hash: hash.clone(),
            };
            let report = train(&mut model, &masks, &pairs, &cfg.train, &outputs)?;
            model.save(
                &out.join("final"),
                &[("config_hash", hash), ("steps", report.steps.len().to_string())],
            )?;
            let last = report.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} steps over {} epochs, last batch loss {last:.6e}",
                report.steps.len(),
                report.epochs_completed
            );
        }
        Command::Reconstruct {
            measurement,
            masks,
            out,
            algo,
            truth,
            png,
        } => {
            let hash = announce(&cfg);
            let y = load_measurement(&measurement)?;
            let masks = load_masks(&masks)?;
            let (views, residuals) = match algo.algo {
                Algo::Gaptv => {
                    let sc = solver_config(&cfg, &algo);
                    match cfg.pipeline.mode {
                        PipelineMode::Dual => {
                            let (a, b, st) = gap_tv(&y, &masks, &sc)?;
                            (vec![a, b], Some(residual_table(&st)))
                        }
                        PipelineMode::SingleView => {
                            let (a, st) = gap_tv_single(&y, &masks, &sc)?;
                            (vec![a], Some(residual_table(&st)))
                        }
                    }
                }
                _ => {
                    let r = reconstructor(&cfg, &algo)?;
                    (r.reconstruct(&y, &masks)?, None)
                }
            };
            save_estimates(&out, &views, &[("config_hash", hash.clone())])?;
            stamp(&out, "reconstruct", &cfg)?;
            if let Some(table) = residuals {
                fs::write(out.join("residuals.tsv"), table)?;
            }
            if png {
                for (v, cube) in views.iter().enumerate() {
                    for (t, frame) in cube.outer_iter().enumerate() {
                        export_png(&out.join(format!("view{}-frame{:02}.png", v + 1, t + 1)), &frame.to_owned())?;
                    }
                }
            }
            let truth = truth.or_else(|| recorded_truth(&measurement));
            if let Some(t) = truth {
                let pair = load_pair(&t)?;
                let refs = match cfg.pipeline.mode {
                    PipelineMode::Dual => vec![pair.x1.data().clone(), pair.x2.data().clone()],
                    PipelineMode::SingleView => vec![pair.x1.data().clone()],
                };
                let frames = framewise_report(&refs, &views)?;
                let name = algo_name(&algo);
                let report = EvalReport::from_frames(&name, &[frames], f64::NAN, &hash)?;
                write_report(&out, &report)?;
                print!("{}", report.to_text());
            }
            println!("estimates written to {}", out.display());
        }
        Command::Evaluate {
            out,
            algo,
            data,
            masks,
            sigma,
            seed,
        } => {
            apply_seed(&mut cfg, seed);
            let hash = announce(&cfg);
            let masks = match masks {
                Some(p) => load_masks(&p)?,
                None => cfg.mask_set()?,
            };
            let pairs = dataset(&data, &cfg, cfg.geometry.frames, cfg.pipeline.seed)?;
            let r = reconstructor(&cfg, &algo)?;
            let report = evaluate(r.as_ref(), &pairs, &masks, sigma, cfg.pipeline.seed, &hash)?;
            stamp(&out, "evaluate", &cfg)?;
            write_report(&out, &report)?;
            print!("{}", report.to_text());
        }
        Command::Sweep {
            kind,
            out,
            algo,
            data,
            checkpoint_root,
            seed,
        } => {
            apply_seed(&mut cfg, seed);
            announce(&cfg);
            let seed = cfg.pipeline.seed;
            let table = match kind {
                SweepKind::Noise => {
                    let masks = cfg.mask_set()?;
                    let pairs = dataset(&data, &cfg, cfg.geometry.frames, seed)?;
                    let r = reconstructor(&cfg, &algo)?;
                    noise_sweep(r.as_ref(), &pairs, &masks, &cfg.eval.sigmas, seed)?
                }
                SweepKind::Rate => {
                    if data.data.is_some() {
                        return Err(Error::Config("rate sweeps draw their own data per B; drop --data".into()));
                    }
                    let rates = cfg.eval.rates.clone();
                    rate_sweep(&rates, seed, |b| {
                        let mut c = cfg.clone();
                        c.geometry.frames = b;
                        c.validate()?;
                        let mut a = AlgoArgs {
                            algo: algo.algo,
                            iters: algo.iters,
                            tv_lambda: algo.tv_lambda,
                            checkpoint: algo.checkpoint.clone(),
                        };
                        if matches!(algo.algo, Algo::Ofanet) {
                            let root = checkpoint_root
                                .as_ref()
                                .ok_or_else(|| Error::Config("rate sweep with ofanet needs --checkpoint-root".into()))?;
                            a.checkpoint = Some(root.join(format!("b{b}")));
                        }
                        Ok(RatePoint {
                            algo: reconstructor(&c, &a)?,
                            masks: c.mask_set()?,
                            pairs: dataset(&data, &c, b, seed)?,
                        })
                    })?
                }
            };
            stamp(&out, "sweep", &cfg)?;
            write_table(&out, &table)?;
        }
        Command::Ablate {
            flags,
            out,
            data,
            checkpoint_root,
            max_steps,
            seed,
        } => {
            apply_seed(&mut cfg, seed);
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            let hash = announce(&cfg);
            let variants: Vec<(String, Ablation)> = flags
                .split(',')
                .map(str::trim)
                .filter(|f| !f.is_empty())
                .map(|f| {
                    let a = if f == "full" { Ablation::default() } else { Ablation::parse(f)? };
                    Ok((f.to_string(), a))
                })
                .collect::<Result<_>>()?;
            if variants.is_empty() {
                return Err(Error::Config("no ablation flags given".into()));
            }
            let masks = cfg.mask_set()?;
            let pairs = dataset(&data, &cfg, cfg.geometry.frames, cfg.pipeline.seed)?;
            stamp(&out, "ablate", &cfg)?;
            let mut rows = Vec::new();
            for (flag, ablation) in variants {
                let mut c = cfg.clone();
                c.network.ablation = ablation;
                c.validate()?;
                let ckpt = checkpoint_root.as_ref().map(|r| r.join(&flag));
                let model = match ckpt {
                    Some(p) if p.exists() => OfaNet::load(c.model_config(), &p)?,
                    _ => {
                        let mut m = OfaNet::new(c.model_config(), c.pipeline.seed)?;
                        let outputs = TrainOutputs {
                            checkpoint_dir: None,
                            log: Some(out.join(format!("train-{flag}.log"))),
                            config_hash: hash.clone(),
                        };
                        train(&mut m, &masks, &pairs, &c.train, &outputs)?;
                        m
                    }
                };
                let r = evaluate(&model, &pairs, &masks, 0.0, c.pipeline.seed, &hash)?;
                rows.push(SweepRow {
                    label: flag,
                    psnr: r.average_psnr,
                    ssim: r.average_ssim,
                    seconds: r.seconds_per_measurement,
                });
            }
            let table = SweepTable {
                parameter: "ablation".into(),
                algorithm: "ofanet".into(),
                rows,
            };
            write_table(&out, &table)?;
        }
    }
    Ok(())
}

fn solver_config(cfg: &PipelineConfig, a: &AlgoArgs) -> dvsci::GapTvConfig {
    let mut s = cfg.solver;
    if let Some(i) = a.iters {
        s.iterations = i;
    }
    if let Some(l) = a.tv_lambda {
        s.lambda = l;
    }
    s
}

fn algo_name(a: &AlgoArgs) -> String {
    match a.algo {
        Algo::Gaptv => "gaptv",
        Algo::PnpTv => "pnp-tv",
        Algo::Ofanet => "ofanet",
    }
    .into()
}

fn reconstructor(cfg: &PipelineConfig, a: &AlgoArgs) -> Result<Box<dyn Reconstructor>> {
    let sc = solver_config(cfg, a);
    sc.validate()?;
    Ok(match a.algo {
        Algo::Gaptv => Box::new(GapTvReconstructor {
            config: sc,
            mode: cfg.pipeline.mode,
        }),
        Algo::PnpTv => {
            if cfg.pipeline.mode != PipelineMode::Dual {
                return Err(Error::Unsupported("pnp-tv runs in dual mode only".into()));
            }
            Box::new(PnpTvReconstructor { config: sc })
        }
        Algo::Ofanet => {
            let dir = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("--algo ofanet needs --checkpoint".into()))?;
            Box::new(OfaNet::load(cfg.model_config(), dir)?)
        }
    })
}

fn recorded_truth(measurement: &Path) -> Option<PathBuf> {
    let c = Container::read(measurement).ok()?;
    c.meta("truth").map(PathBuf::from).filter(|p| p.exists())
}

fn load_pair(dir: &Path) -> Result<TrainPair> {
    let cubes = load_cubes(dir)?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let src = PairSource {
        sequence: name,
        start: 0,
        top: 0,
        left: 0,
    };
    let mut it = cubes.into_iter();
    let x1 = it.next().ok_or_else(|| Error::Config(format!("{} holds no video", dir.display())))?;
    let x1 = VideoCube::new(x1.into_data(), ViewId::One)?;
    let x2 = match it.next() {
        Some(c) => VideoCube::new(c.into_data(), ViewId::Two)?,
        None => VideoCube::new(x1.data().clone(), ViewId::Two)?,
    };
    Ok(TrainPair {
        x1,
        x2,
        sources: [src.clone(), src],
    })
}

fn save_pairs(out: &Path, pairs: &[TrainPair], cfg: &PipelineConfig) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        save_cubes(
            &out.join(format!("pair-{i:04}")),
            &[&p.x1, &p.x2],
            &[("config_hash", cfg.hash())],
        )?;
    }
    stamp(out, "synth", cfg)?;
    fs::write(out.join("pairs.txt"), pair_manifest(pairs))?;
    Ok(())
}

fn dataset(d: &DataArgs, cfg: &PipelineConfig, frames: usize, seed: u64) -> Result<Vec<TrainPair>> {
    let count = d.count.unwrap_or(cfg.eval.samples);
    let g = cfg.geometry;
    if let Some(dir) = &d.data {
        if !dir.exists() {
            return Err(Error::MissingFile(dir.clone()));
        }
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.txt").exists())
            .collect();
        subdirs.sort();
        if subdirs.is_empty() {
            return Err(Error::Config(format!("{} holds no stored pairs", dir.display())));
        }
        let pairs = subdirs.iter().take(count.max(1)).map(|p| load_pair(p)).collect::<Result<Vec<_>>>()?;
        for p in &pairs {
            if p.x1.data().dim() != (frames, g.rows, g.cols) {
                return Err(Error::Shape(format!(
                    "stored pair {:?} does not match geometry {}x{}x{frames}",
                    p.x1.data().dim(),
                    g.rows,
                    g.cols
                )));
            }
        }
        return Ok(pairs);
    }
    if d.corpus {
        return build_corpus(&cfg.data_root(), (g.rows, g.cols), frames, count, seed);
    }
    synth_corpus(g.rows, g.cols, frames, count, seed)
}

fn write_report(out: &Path, r: &EvalReport) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), r.to_text())?;
    fs::write(out.join("report.csv"), r.to_csv())?;
    fs::write(out.join("framewise.csv"), framewise_csv(&r.frames))?;
    Ok(())
}

fn write_table(out: &Path, t: &SweepTable) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("table.txt"), t.to_text())?;
    fs::write(out.join("table.csv"), t.to_csv())?;
    print!("{}", t.to_text());
    for f in t.monotonicity_flags() {
        println!("note: {f}");
    }
    Ok(())
}
