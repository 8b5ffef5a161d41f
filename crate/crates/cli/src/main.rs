//! `ptseg`: one binary, five workflows — inspect a perspective chain,
//! warp an image through it, synthesize a dataset, train the toy network,
//! and evaluate a checkpoint. Exit codes: 0 ok, 1 runtime failure, 2 config
//! error (stderr names the failing key or path).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use ptseg_core::autodiff::{load_checkpoint, save_checkpoint, AdamHyper, AdamState};
use ptseg_core::config::{ConfigError, RunConfig};
use ptseg_core::eval::{
    distance_binned_accuracy, distance_binned_miou, even_edges, lanes_from_instance_map, miou,
    tusimple_accuracy, tusimple_fp_fn, under_horizon_mask, under_horizon_records, BinSpace,
};
use ptseg_core::geometry::{build_ptl_chain, KeyPointSet, PTLChain};
use ptseg_core::ptseg::{build_model, PTSegModel};
use ptseg_core::scenedata::{
    generate_dataset, load_dataset, load_feature_map_png, save_feature_map_png, Dataset,
    SceneConfig, CLASS_LANE,
};
use ptseg_core::warp::{warp_forward, FeatureMap};
use ptseg_core::Tensor;

#[derive(Parser)]
#[command(name = "ptseg", about = "perspective transformer lane segmentation toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<config-hash>-<timestamp>.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BinAxis {
    Px,
    M,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the consecutive-homography decomposition of the configured chain.
    Decompose {
        /// Override [chain].steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Warp an image through every prefix of the chain; writes step PNGs.
    Warp {
        #[arg(long)]
        input: PathBuf,
        /// Write every intermediate view, not just the final one.
        #[arg(long)]
        all_steps: bool,
    },
    /// Render a synthetic dataset.
    Synth {
        /// Override [data].count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a generated dataset directory.
    Train {
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Drop every PTL (plain encoder-decoder baseline).
        #[arg(long)]
        no_ptl: bool,
        /// Repeat the first training sample every step.
        #[arg(long)]
        overfit_one: bool,
    },
    /// Evaluate a checkpoint on the held-out tail of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        bins: BinAxis,
        /// Restrict metrics to rows below the horizon.
        #[arg(long)]
        under_horizon: bool,
        /// Must match the flag the checkpoint was trained with.
        #[arg(long)]
        no_ptl: bool,
    },
    /// Export per-stage feature-map panels for one image.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        no_ptl: bool,
    },
}

enum AppError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for AppError {
            fn from(e: $t) -> Self { AppError::Runtime(e.to_string()) }
        }
    )*};
}
runtime_from!(
    std::io::Error,
    ptseg_core::geometry::GeometryError,
    ptseg_core::warp::WarpError,
    ptseg_core::autodiff::AutodiffError,
    ptseg_core::ptseg::PtsegError,
    ptseg_core::scenedata::SceneError,
    ptseg_core::eval::EvalError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, AppError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run_dir(cfg: &RunConfig, out_dir: &Option<PathBuf>) -> Result<PathBuf, AppError> {
    let dir = match out_dir {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from("runs").join(format!("{}-{secs}", cfg.short_hash()))
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn chain_from_config(cfg: &RunConfig, steps: usize) -> Result<PTLChain<f64>, AppError> {
    let view = cfg.view()?;
    let horizon = cfg.horizon()?;
    let kps = KeyPointSet::from_pixels(&cfg.keypoints()?)
        .map_err(|e| AppError::Config(format!("camera.keypoints: {e}")))?;
    let widths = if steps == cfg.chain.steps {
        cfg.chain_widths()
    } else {
        vec![cfg.camera.width; steps]
    };
    Ok(build_ptl_chain(view, horizon, &kps, steps, &widths)?)
}

fn chain_from_scene(scene: &SceneConfig<f64>, steps: usize) -> Result<PTLChain<f64>, AppError> {
    let view = scene.view()?;
    let kps = KeyPointSet::from_pixels(&scene.keypoints())?;
    Ok(build_ptl_chain(view, scene.horizon_points(), &kps, steps, &vec![scene.width; steps])?)
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::Decompose { steps } => cmd_decompose(&cfg, steps),
        Cmd::Warp { input, all_steps } => {
            let dir = run_dir(&cfg, &cli.out_dir)?;
            cmd_warp(&cfg, &input, all_steps, &dir)
        }
        Cmd::Synth { count } => {
            let dir = run_dir(&cfg, &cli.out_dir)?;
            cmd_synth(&cfg, count, &dir)
        }
        Cmd::Train { data, no_ptl, overfit_one } => {
            let dir = run_dir(&cfg, &cli.out_dir)?;
            cmd_train(&cfg, &data, no_ptl, overfit_one, &dir)
        }
        Cmd::Eval { checkpoint, data, bins, under_horizon, no_ptl } => {
            let dir = run_dir(&cfg, &cli.out_dir)?;
            cmd_eval(&cfg, &checkpoint, &data, bins, under_horizon, no_ptl, &dir)
        }
        Cmd::Viz { input, checkpoint, no_ptl } => {
            let dir = run_dir(&cfg, &cli.out_dir)?;
            cmd_viz(&cfg, &input, checkpoint.as_deref(), no_ptl, &dir)
        }
    }
}

fn cmd_decompose(cfg: &RunConfig, steps: Option<usize>) -> Result<(), AppError> {
    let n = steps.unwrap_or(cfg.chain.steps);
    if n == 0 {
        return Err(AppError::Config("chain.steps: must be at least 1".into()));
    }
    let chain = chain_from_config(cfg, n)?;
    for (i, step) in chain.steps.iter().enumerate() {
        let view = step.homography.target;
        println!("step {i}:");
        println!(
            "  viewport: {}x{} f={:.6} cx={:.6} cy={:.6}",
            view.width, view.height, view.intrinsics.f, view.intrinsics.cx, view.intrinsics.cy
        );
        println!("  R_{i} = {}", step.rotation.matrix().to_row_major_string());
        println!("  H_{i} = {}", step.homography.matrix().to_row_major_string());
    }
    let composed = chain.composed()?;
    let residual = composed.matrix().projective_distance(chain.integral.matrix());
    println!("integral H = {}", chain.integral.matrix().to_row_major_string());
    println!("composition residual = {residual:.3e}");
    Ok(())
}

fn cmd_warp(cfg: &RunConfig, input: &Path, all_steps: bool, dir: &Path) -> Result<(), AppError> {
    let image: FeatureMap<f64> = load_feature_map_png(input)?;
    let chain = chain_from_config(cfg, cfg.chain.steps)?;
    let src = chain.source_view();
    if image.shape() != (3, src.height as usize, src.width as usize) {
        return Err(AppError::Runtime(format!(
            "input is {:?}, camera view is {}x{}",
            image.shape(),
            src.width,
            src.height
        )));
    }
    save_feature_map_png(&image, &dir.join("step_00.png"))?;
    let mut current = image;
    for (i, step) in chain.steps.iter().enumerate() {
        current = warp_forward(&current, &step.homography)?;
        if all_steps || i + 1 == chain.len() {
            save_feature_map_png(&current, &dir.join(format!("step_{:02}.png", i + 1)))?;
        }
    }
    println!("wrote warped views to {}", dir.display());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, count: Option<usize>, dir: &Path) -> Result<(), AppError> {
    let count = count.unwrap_or(cfg.data.count);
    let scene = cfg.scene_config(cfg.seed);
    generate_dataset(&scene, count, cfg.seed, dir)?;
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

/// Per-class cross-entropy weights: background 1, everything else boosted.
fn class_weights(cfg: &RunConfig) -> Vec<f64> {
    let mut w = vec![cfg.train.foreground_weight; cfg.network.classes];
    w[0] = 1.0;
    w
}

fn build_from_dataset(
    cfg: &RunConfig,
    ds: &Dataset<f64>,
    no_ptl: bool,
) -> Result<PTSegModel<f64>, AppError> {
    let view = ds.cfg.view()?;
    let n = if no_ptl { 0 } else { cfg.network.ptl_steps };
    let chain = if n > 0 { Some(chain_from_scene(&ds.cfg, n)?) } else { None };
    Ok(build_model(cfg.network_config(view, chain, n), cfg.seed)?)
}

fn split_dataset<'a>(cfg: &RunConfig, ds: &'a Dataset<f64>) -> (&'a [ptseg_core::scenedata::SceneSample<f64>], &'a [ptseg_core::scenedata::SceneSample<f64>]) {
    let holdout = cfg.data.holdout.min(ds.samples.len().saturating_sub(1));
    ds.samples.split_at(ds.samples.len() - holdout)
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    no_ptl: bool,
    overfit_one: bool,
    dir: &Path,
) -> Result<(), AppError> {
    let ds = load_dataset::<f64>(data)?;
    if ds.samples.is_empty() {
        return Err(AppError::Runtime(format!("dataset {} is empty", data.display())));
    }
    let (train, _) = split_dataset(cfg, &ds);
    let mut model = build_from_dataset(cfg, &ds, no_ptl)?;
    let hyper = AdamHyper {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: 1e-8,
        weight_decay: cfg.train.weight_decay,
    };
    let shapes: Vec<&[usize]> = model.params.iter().map(|p| p.shape()).collect();
    let mut adam = AdamState::new(hyper, &shapes);
    let weights = class_weights(cfg);
    let mut log = String::from("step,loss\n");
    let mut last = f64::NAN;
    for step in 0..cfg.train.steps {
        let sample = if overfit_one { &train[0] } else { &train[step % train.len()] };
        let sem: Vec<i32> = sample.semantic.iter().map(|&c| c as i32).collect();
        let inst: Vec<u32> = sample.instance.iter().map(|&i| i as u32).collect();
        let mut pass = model.forward(&sample.image)?;
        let loss = model.loss(&mut pass, &sem, &inst, Some(&weights))?;
        last = pass.tape.value(loss).item();
        let _ = writeln!(log, "{step},{last}");
        pass.tape.backward(loss);
        let grads = model.grads(&pass);
        adam.step(&mut model.params, &grads)?;
    }
    std::fs::write(dir.join("loss.csv"), log)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &model.params, Some(&adam))?;
    let mut summary = String::new();
    let _ = writeln!(summary, "steps={}", cfg.train.steps);
    let _ = writeln!(summary, "final_loss={last}");
    let _ = writeln!(summary, "no_ptl={no_ptl}");
    std::fs::write(dir.join("summary.txt"), summary)?;
    println!("trained {} steps, final loss {last:.6}; artifacts in {}", cfg.train.steps, dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    bins: BinAxis,
    under_horizon: bool,
    no_ptl: bool,
    dir: &Path,
) -> Result<(), AppError> {
    let ds = load_dataset::<f64>(data)?;
    if ds.samples.is_empty() {
        return Err(AppError::Runtime(format!("dataset {} is empty", data.display())));
    }
    let mut model = build_from_dataset(cfg, &ds, no_ptl)?;
    let (params, _) = load_checkpoint::<f64>(checkpoint)?;
    model.load_params(params)?;
    let (_, held) = split_dataset(cfg, &ds);
    let held = if held.is_empty() { &ds.samples[..] } else { held };

    let mut pred_lanes = Vec::new();
    let mut gt_records = Vec::new();
    let mut pred_masks = Vec::new();
    let mut gt_masks = Vec::new();
    for sample in held {
        let (sem, inst) = model.predict(&sample.image, CLASS_LANE as usize)?;
        pred_lanes.push(lanes_from_instance_map(
            &inst.iter().map(|&i| i.min(255) as u8).collect::<Vec<_>>(),
            ds.cfg.width as usize,
            &sample.h_samples,
        ));
        gt_records.push(ptseg_core::scenedata::TuSimpleRecord {
            lanes: sample.lanes.clone(),
            h_samples: sample.h_samples.clone(),
            raw_file: String::new(),
        });
        pred_masks.push(sem);
        gt_masks.push(sample.semantic.clone());
    }
    let horizon_row = ds.cfg.horizon_row();
    const IGNORE: u8 = 255;
    if under_horizon {
        gt_records = under_horizon_records(&gt_records, horizon_row);
        for m in &mut gt_masks {
            *m = under_horizon_mask(m, ds.cfg.width as usize, horizon_row, IGNORE);
        }
    }

    let (acc, _) = tusimple_accuracy(&pred_lanes, &gt_records, cfg.eval.threshold)?;
    let (fp, fnr, _) =
        tusimple_fp_fn(&pred_lanes, &gt_records, cfg.eval.threshold, cfg.eval.lane_match_ratio)?;
    let classes = cfg.network.classes;
    let mut inter = vec![0.0; classes];
    let mut mean_sum = 0.0;
    let mut lane_iou_sum = 0.0;
    for (pm, gm) in pred_masks.iter().zip(&gt_masks) {
        let (per_class, mean) = miou(pm, gm, classes, Some(IGNORE))?;
        for (c, v) in per_class.iter().enumerate() {
            inter[c] += v.unwrap_or(0.0);
        }
        mean_sum += mean;
        lane_iou_sum += per_class[CLASS_LANE as usize].unwrap_or(0.0);
    }
    let n = held.len() as f64;

    let mut report = String::new();
    let _ = writeln!(report, "images={}", held.len());
    let _ = writeln!(report, "accuracy={acc}");
    let _ = writeln!(report, "fp={fp}");
    let _ = writeln!(report, "fn={fnr}");
    let _ = writeln!(report, "miou={}", mean_sum / n);
    let _ = writeln!(report, "lane_iou={}", lane_iou_sum / n);
    let _ = writeln!(report, "under_horizon={under_horizon}");

    let height = ds.cfg.height;
    if bins == BinAxis::Px || bins == BinAxis::Both {
        let edges = even_edges(height as f64, cfg.eval.pixel_bin);
        let acc_bins = distance_binned_accuracy(
            &pred_lanes,
            &gt_records,
            cfg.eval.threshold,
            &edges,
            BinSpace::PixelsFromBottom,
            height,
            None,
        )?;
        std::fs::write(dir.join("accuracy_px.csv"), acc_bins.to_csv())?;
        let miou_bins = distance_binned_miou(
            &pred_masks,
            &gt_masks,
            ds.cfg.width as usize,
            classes,
            Some(IGNORE),
            &edges,
            BinSpace::PixelsFromBottom,
            None,
        )?;
        std::fs::write(dir.join("miou_px.csv"), miou_bins.to_csv())?;
    }
    if bins == BinAxis::M || bins == BinAxis::Both {
        let max_range = ds.cfg.row_to_range(horizon_row + 2.0).unwrap_or(60.0).min(120.0);
        let edges = even_edges(max_range, cfg.eval.meter_bin);
        let acc_bins = distance_binned_accuracy(
            &pred_lanes,
            &gt_records,
            cfg.eval.threshold,
            &edges,
            BinSpace::Meters,
            height,
            Some(&ds.cfg),
        )?;
        std::fs::write(dir.join("accuracy_m.csv"), acc_bins.to_csv())?;
        let miou_bins = distance_binned_miou(
            &pred_masks,
            &gt_masks,
            ds.cfg.width as usize,
            classes,
            Some(IGNORE),
            &edges,
            BinSpace::Meters,
            Some(&ds.cfg),
        )?;
        std::fs::write(dir.join("miou_m.csv"), miou_bins.to_csv())?;
    }
    std::fs::write(dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

/// Grayscale panel per traced stage: channel-mean, min-max normalized.
fn cmd_viz(
    cfg: &RunConfig,
    input: &Path,
    checkpoint: Option<&Path>,
    no_ptl: bool,
    dir: &Path,
) -> Result<(), AppError> {
    let image: FeatureMap<f64> = load_feature_map_png(input)?;
    let view = cfg.view()?;
    let n = if no_ptl { 0 } else { cfg.network.ptl_steps };
    let chain = if n > 0 { Some(chain_from_config(cfg, n)?) } else { None };
    let mut model = build_model(cfg.network_config(view, chain, n), cfg.seed)?;
    if let Some(path) = checkpoint {
        let (params, _) = load_checkpoint::<f64>(path)?;
        model.load_params(params)?;
    }
    let pass = model.forward(&image)?;
    for (i, (label, tensor)) in pass.trace.iter().enumerate() {
        let panel = channel_mean_panel(tensor);
        save_feature_map_png(&panel, &dir.join(format!("{i:02}_{label}.png")))?;
    }
    println!("wrote {} stage panels to {}", pass.trace.len(), dir.display());
    Ok(())
}

fn channel_mean_panel(t: &Tensor) -> FeatureMap<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let npix = h * w;
    let mut mean = vec![0.0f64; npix];
    for ch in 0..c {
        for p in 0..npix {
            mean[p] += t.data()[ch * npix + p] / c as f64;
        }
    }
    let (lo, hi) = mean
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    let gray: Vec<f64> = mean.iter().map(|&v| (v - lo) * scale).collect();
    let mut out = FeatureMap::zeros(3, h, w);
    for ch in 0..3 {
        out.data_mut()[ch * npix..(ch + 1) * npix].copy_from_slice(&gray);
    }
    out
}
