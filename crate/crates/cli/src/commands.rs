//! Subcommands of the `worldtrack` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use worldtrack::adapt::{tta_optimize, AdaptState};
use worldtrack::camera::{solve_cameras_for_video, CameraSolverConfig};
use worldtrack::geometry::assemble_trajectories;
use worldtrack::gradcheck::{check_all, Component, GradCheckConfig};
use worldtrack::losses::LossWeights;
use worldtrack::metrics::{
    eval_recon, eval_tracking, subsample_indices, AlignmentMode, DynamicSubset, EvalOptions, MetricReport,
    Thresholds, EVAL_WINDOW,
};
use worldtrack::oracle::{corrupt, generate_scene_with, render, Preset, SceneOptions};

use crate::format::{read_sequence, write_atomic, write_sequence, Sequence};

#[derive(Debug, Parser)]
#[command(name = "worldtrack", version, about = "World-frame point tracking and reconstruction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence with exact ground truth.
    Synth(SynthArgs),
    /// Recover intrinsics and per-frame poses from the reconstruction pointmaps.
    SolveCamera(SolveCameraArgs),
    /// Run test-time adaptation on a sequence.
    Adapt(AdaptArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    CheckGrads(CheckGradsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    /// WIDTHxHEIGHT.
    #[arg(long, default_value = "64x48", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    /// Gaussian noise added to the tracking pointmaps, meters.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Drift added per frame along a random direction, meters.
    #[arg(long, default_value_t = 0.0)]
    pub drift: f64,
    /// Corrupt the reconstruction pointmaps as well.
    #[arg(long)]
    pub corrupt_recon: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveCameraArgs {
    pub seq_dir: PathBuf,
    /// Defaults to `<seq_dir>.cameras.json` next to the sequence.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    pub seq_dir: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Optimize the reconstruction pointmaps too.
    #[arg(long)]
    pub unfreeze_recon: bool,
    /// traj,depth,align.
    #[arg(long, default_value = "1,10,5", value_parser = parse_weights)]
    pub weights: LossWeights,
    #[arg(long)]
    pub cosine: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Track,
    Recon,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth sequence.
    pub seq_dir: PathBuf,
    /// Prediction sequence (tracking or reconstruction pointmaps).
    pub pred_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Track)]
    pub task: Task,
    #[arg(long, default_value = "median", value_parser = parse_mode)]
    pub mode: AlignmentMode,
    #[arg(long, default_value = "0.1,0.3,0.5,1.0", value_parser = parse_thresholds)]
    pub thresholds: Thresholds,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub subsample: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail when the sequence has no dynamic points.
    #[arg(long)]
    pub require_dynamic: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<Component>,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad number {v:?}")))
        .collect()
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let v = parse_floats(s)?;
    let [traj, depth, align] = v[..] else {
        return Err("expected three weights".into());
    };
    let w = LossWeights { traj, depth, align };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    Thresholds::new(parse_floats(s)?).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<AlignmentMode, String> {
    s.parse().map_err(|e: worldtrack::metrics::MetricError| e.to_string())
}

pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::SolveCamera(a) => solve_camera(a).map(|_| true),
        Command::Adapt(a) => adapt(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::CheckGrads(a) => check_grads(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn ensure_distinct(input: &Path, out: &Path) -> Result<()> {
    let a = input.canonicalize().unwrap_or_else(|_| input.to_path_buf());
    let b = out.canonicalize().unwrap_or_else(|_| out.to_path_buf());
    if a == b {
        bail!("output {} would overwrite the input", out.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let opts = SceneOptions {
        width: a.resolution.0,
        height: a.resolution.1,
        num_frames: a.frames,
        ..Default::default()
    };
    let mut seq = render(&generate_scene_with(a.preset, a.seed, &opts))?;
    if a.noise > 0.0 || a.drift > 0.0 {
        seq = corrupt(&seq, a.noise, a.drift, a.seed, a.corrupt_recon)?;
    }
    let mut meta = BTreeMap::new();
    meta.insert("dataset".into(), json!("synthetic"));
    meta.insert("label".into(), json!(seq.label));
    meta.insert("preset".into(), json!(a.preset.name()));
    meta.insert("seed".into(), json!(a.seed));
    meta.insert("corruption".into(), serde_json::to_value(seq.corruption)?);
    let path = write_sequence(&a.out, &Sequence::from_rendered(&seq, meta))?;
    println!("{}", path.display());
    Ok(())
}

fn sibling_path(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into());
    dir.with_file_name(format!("{name}{suffix}"))
}

#[derive(Serialize)]
struct FrameReport {
    frame: usize,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    rms_reprojection_error: f64,
    inliers: usize,
}

fn solve_camera(a: SolveCameraArgs) -> Result<()> {
    let seq = read_sequence(&a.seq_dir)?;
    let mut cfg = CameraSolverConfig::default();
    cfg.ransac.seed = a.seed;
    let sol = solve_cameras_for_video(seq.recon()?, seq.grid, &cfg)?;
    let frames: Vec<FrameReport> = sol
        .frames
        .iter()
        .enumerate()
        .map(|(frame, f)| {
            let rows = f.estimate.pose.to_rows();
            FrameReport {
                frame,
                rotation: rows.map(|r| [r[0], r[1], r[2]]),
                translation: rows.map(|r| r[3]),
                rms_reprojection_error: f.estimate.rms_reprojection_error,
                inliers: f.estimate.inlier_count(),
            }
        })
        .collect();
    let out = a.out.unwrap_or_else(|| sibling_path(&a.seq_dir, ".cameras.json"));
    write_json(
        &out,
        &json!({
            "intrinsics": sol.intrinsics,
            "solver": cfg,
            "frames": frames,
        }),
    )?;
    println!("focal {}", sol.intrinsics.focal);
    for f in &frames {
        println!("frame {} rms {}", f.frame, f.rms_reprojection_error);
    }
    println!("{}", out.display());
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    ensure_distinct(&a.seq_dir, &a.out)?;
    let seq = read_sequence(&a.seq_dir)?;
    let tracks = seq.track_supervision()?;
    let depth = seq.depth_supervision()?;
    let mut state = AdaptState::new(seq.tracking()?.to_vec(), seq.recon()?.to_vec());
    state.freeze_recon = !a.unfreeze_recon;
    state.step_size = a.lr;
    state.steps = a.steps;
    state.cosine_decay = a.cosine;
    state.seed = a.seed;
    let mut solver = CameraSolverConfig::default();
    solver.ransac.seed = a.seed;
    let outcome = tta_optimize(state, &tracks, &depth, &a.weights, &solver)?;

    let mut out = seq.clone();
    out.tracking = Some(outcome.state.tracking_params.clone());
    if a.unfreeze_recon {
        out.recon = Some(outcome.state.recon_pointmaps.clone());
    }
    out.meta.insert(
        "adapt".into(),
        json!({
            "steps": a.steps,
            "lr": a.lr,
            "freeze_recon": !a.unfreeze_recon,
            "weights": a.weights,
            "cosine": a.cosine,
            "seed": a.seed,
        }),
    );
    let manifest = write_sequence(&a.out, &out)?;
    let mut csv = String::from("step,traj,depth,align,total\n");
    for r in outcome.rows() {
        writeln!(csv, "{},{},{},{},{}", r.step, r.traj, r.depth, r.align, r.total)?;
    }
    write_atomic(&a.out.join("loss_trace.csv"), csv.as_bytes())?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), &outcome.final_loss) {
        println!("total loss {} -> {}", first.total, last.total);
    }
    println!("{}", manifest.display());
    Ok(())
}

fn fingerprint(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    ensure_distinct(&a.seq_dir, &a.out)?;
    ensure_distinct(&a.pred_dir, &a.out)?;
    let gt = read_sequence(&a.seq_dir)?;
    let pred = read_sequence(&a.pred_dir)?;
    if pred.grid != gt.grid || pred.num_frames != gt.num_frames {
        bail!("prediction and ground truth differ in resolution or frame count");
    }
    let opts = EvalOptions {
        mode: a.mode,
        thresholds: a.thresholds.clone(),
        window: EVAL_WINDOW,
        dynamic: if a.require_dynamic { DynamicSubset::Require } else { DynamicSubset::IfPresent },
    };
    let config = json!({
        "task": a.task,
        "mode": a.mode,
        "thresholds": a.thresholds,
        "window": EVAL_WINDOW,
        "subsample": a.subsample,
        "seed": a.seed,
    });
    let report: MetricReport = match a.task {
        Task::Track => {
            let gt_tracks = gt.tracks()?;
            let queries = gt.queries()?;
            let pred_tracks = assemble_trajectories(pred.tracking()?, &queries)?;
            let idx = subsample_indices(queries.len(), a.subsample as usize, a.seed)?;
            let dynamic: Vec<bool> = idx.iter().map(|&i| gt_tracks.dynamic_mask[i]).collect();
            eval_tracking(
                &pred_tracks.select_points(&idx),
                &gt_tracks.tracks3d.select_points(&idx),
                &dynamic,
                &opts,
            )
            .context("tracking evaluation")?
        }
        Task::Recon => {
            let depth: Vec<Vec<f64>> = gt
                .depth()?
                .iter()
                .map(|d| d.iter().map(|z| if z.is_finite() { *z } else { 0.0 }).collect())
                .collect();
            eval_recon(pred.recon()?, gt.recon()?, &depth, &opts).context("reconstruction evaluation")?
        }
    };

    let dataset = gt.meta.get("dataset").and_then(|v| v.as_str()).unwrap_or("custom").to_string();
    let sequence = gt
        .meta
        .get("label")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| a.seq_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    let fp = fingerprint(&config);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = MetricReport::csv_header(&report.thresholds);
    csv.push('\n');
    for row in report.csv_rows(&dataset, &sequence, &fp) {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "dataset": dataset,
            "sequence": sequence,
            "config": config,
            "fingerprint": fp,
            "report": report,
        }),
    )?;
    println!("all: APD {:.2} EPE {:.4}", report.all.apd_percent, report.all.epe_meters);
    if let Some(d) = &report.dynamic {
        println!("dynamic: APD {:.2} EPE {:.4}", d.apd_percent, d.epe_meters);
    }
    Ok(())
}

fn check_grads(a: CheckGradsArgs) -> Result<bool> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        trials: a.trials as usize,
        sign_flip: a.inject_sign_flip,
    };
    let results = check_all(&cfg)?;
    println!("{:<12} {:>7} {:>14}  status", "component", "trials", "max_rel_err");
    for r in &results {
        println!(
            "{:<12} {:>7} {:>14.3e}  {}",
            r.component.name(),
            r.trials,
            r.max_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(results.iter().all(|r| r.passed()))
}
