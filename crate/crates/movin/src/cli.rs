//! The `movin` command line. [`run`] parses and dispatches in-process and
//! returns the exit code: 0 on success, 1 on a usage error, 2 on a runtime
//! failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use movin_core::dataset::{generate_dataset, Dataset, Sequence, Split};
use movin_core::inference::{init_session, predict_teacher_forced, LatentPolicy};
use movin_core::metrics::{evaluate, Report};
use movin_core::motion::{MotionCategory, MotionSpec};
use movin_core::network::{ModelConfig, MovinModel};
use movin_core::postprocess::FootCleanup;
use movin_core::skeleton::{PoseFeatures, Skeleton, FRAME_RATE};
use movin_core::training::{train, EpochLog};

use crate::bvh::export_bvh;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::storage::{load_dataset, read_manifest, read_pose_file, save_dataset, write_pose_file};
use crate::stream::{send_frames, serve_connection, StreamOptions, StreamReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "movin", version, about = "Single-LiDAR motion capture: data, training, inference, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate motion clips and LiDAR scans into a dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run the model over a stored sequence and write a pose file.
    Infer(InferArgs),
    /// Serve live inference over TCP.
    Stream(StreamArgs),
    /// Compare a predicted pose file with ground truth.
    Eval(EvalArgs),
    /// Convert a pose file to BVH.
    ExportBvh(ExportBvhArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// Run configuration (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    pub out: PathBuf,
    /// Comma-separated motion categories, one sequence each.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<MotionCategory>>,
    /// Seconds per sequence.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Every n-th sequence goes to the test split; 0 keeps all for training.
    #[arg(long)]
    pub test_every: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Default)]
pub struct Ablation {
    /// Feed only the current scan, not the older ones.
    #[arg(long)]
    pub no_past_pcd: bool,
    /// Do not condition on the previous pose.
    #[arg(long)]
    pub no_autoregressive: bool,
    /// Points per resampled cloud.
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    /// Output directory for the checkpoint and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Model size preset; replaces the config file's `[model]` table.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: Ablation,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum InferMode {
    /// Feed each output back as the next condition.
    #[default]
    Rollout,
    /// Condition every frame on the ground truth of the frame before.
    TeacherForced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Latent {
    Zero,
    Sample,
}

impl From<Latent> for LatentPolicy {
    fn from(l: Latent) -> Self {
        match l {
            Latent::Zero => LatentPolicy::Zero,
            Latent::Sample => LatentPolicy::Sample,
        }
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence id; defaults to the first test sequence, else the first one.
    #[arg(long)]
    pub sequence: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub mode: InferMode,
    #[arg(long, value_enum)]
    pub latent: Option<Latent>,
    /// Pin contacting feet with leg IK.
    #[arg(long)]
    pub foot_ik: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    pub checkpoint: PathBuf,
    /// Address to accept one sender on.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    /// Also write every emitted pose to this pose file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replay this dataset's default sequence through the socket at the sensor rate.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub latent: Option<Latent>,
    #[arg(long)]
    pub foot_ik: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Take the skeleton from this dataset instead of the default humanoid.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ExportBvhArgs {
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Stream(a) => stream(a),
        Command::Eval(a) => eval(a),
        Command::ExportBvh(a) => export(a),
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = run_config(&a.common)?;
    if let Some(c) = a.categories {
        cfg.data.categories = c;
    }
    if let Some(d) = a.duration {
        cfg.data.duration_s = d;
    }
    if let Some(t) = a.test_every {
        cfg.data.test_every = t;
    }
    let specs: Vec<MotionSpec> = cfg.data.categories.iter().map(|&c| MotionSpec::new(c, cfg.data.duration_s)).collect();
    let dataset = generate_dataset(&specs, &cfg.sensor, cfg.data.test_every, cfg.seed)?;
    save_dataset(&dataset, &a.out)?;
    println!("wrote {} sequences to {}", dataset.sequences.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    cfg.train.seed = cfg.seed;
    if let Some(preset) = a.preset {
        cfg.model = match preset {
            Preset::Full => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
        };
    }
    apply_ablation(&mut cfg, &a.ablation);
    let dataset = load_dataset(&a.dataset)?;
    cfg.model.n_joints = dataset.skeleton.len();
    let mut model = match &a.resume {
        Some(path) => load_checkpoint(path)?,
        None => MovinModel::new(cfg.model.clone(), dataset.skeleton.clone(), cfg.seed)?,
    };
    fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(Error::io(&log_path))?);
    let started = Instant::now();
    let mut clock = || started.elapsed().as_secs_f64();
    let mut failure: Option<Error> = None;
    let mut on_epoch = |entry: &EpochLog, m: &MovinModel| -> movin_core::Result<()> {
        let step = (|| -> Result<()> {
            let line = serde_json::to_string(entry).map_err(|source| Error::Json { path: log_path.clone(), source })?;
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(Error::io(&log_path))?;
            save_checkpoint(m, &ckpt_path)?;
            println!(
                "epoch {:>4}  rec {:.5}  local {:.5}  fk {:.5}  global {:.5}  kl {:.5}",
                entry.epoch,
                entry.reconstruction(),
                entry.rec_local,
                entry.rec_fk,
                entry.rec_global,
                entry.kl
            );
            Ok(())
        })();
        step.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            movin_core::Error::Aborted(msg)
        })
    };
    let result = train(&mut model, &dataset, &cfg.train, &mut clock, &mut on_epoch);
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    if cfg.train.epochs == 0 {
        save_checkpoint(&model, &ckpt_path)?;
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn apply_ablation(cfg: &mut RunConfig, a: &Ablation) {
    if a.no_past_pcd {
        cfg.model.past_clouds = false;
    }
    if a.no_autoregressive {
        cfg.model.autoregressive = false;
    }
    if let Some(p) = a.points {
        cfg.model.points = p;
    }
}

/// The sequence named `id`, else the first test sequence, else the first.
pub fn pick_sequence<'d>(dataset: &'d Dataset, id: Option<&str>) -> Result<&'d Sequence> {
    let found = match id {
        Some(id) => dataset.sequences.iter().find(|s| s.info.id == id),
        None => dataset.split(Split::Test).next().or(dataset.sequences.first()),
    };
    found.ok_or_else(|| Error::Manifest {
        file: crate::storage::MANIFEST.into(),
        detail: match id {
            Some(id) => format!("no sequence `{id}`"),
            None => "no sequences".into(),
        },
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = run_config(&a.common)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.dataset)?;
    let sequence = pick_sequence(&dataset, a.sequence.as_deref())?;
    let n_joints = model.config().n_joints;
    let raw = match a.mode {
        InferMode::Rollout => {
            let policy = a.latent.map_or(cfg.inference.latent, LatentPolicy::from);
            let mut session = init_session(&model, None, policy, cfg.seed)?;
            sequence.scans.iter().map(|f| session.step(f)).collect::<movin_core::Result<Vec<_>>>()?
        }
        InferMode::TeacherForced => {
            // frame 0 has no predecessor; the ground truth stands in so lengths match
            let mut out = vec![sequence.pose(0, n_joints)?];
            out.extend(predict_teacher_forced(&model, sequence)?);
            out
        }
    };
    let poses = if a.foot_ik {
        let mut cleanup = FootCleanup::new(cfg.foot_ik);
        raw.iter().map(|p| cleanup.apply(p, model.skeleton()).map(|c| c.pose)).collect::<movin_core::Result<Vec<_>>>()?
    } else {
        raw
    };
    write_pose_file(&a.out, &poses)?;
    println!("wrote {} poses for sequence {} to {}", poses.len(), sequence.info.id, a.out.display());
    Ok(())
}

fn stream(a: StreamArgs) -> Result<()> {
    let cfg = run_config(&a.common)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let policy = a.latent.map_or(cfg.inference.latent, LatentPolicy::from);
    let mut session = init_session(&model, None, policy, cfg.seed)?;
    let listener = TcpListener::bind(&a.listen).map_err(|e| Error::Stream(format!("bind {}: {e}", a.listen)))?;
    let addr = listener.local_addr().map_err(|e| Error::Stream(e.to_string()))?;
    eprintln!("listening on {addr}");
    let options = StreamOptions { foot_ik: a.foot_ik.then_some(cfg.foot_ik), queue_capacity: None };
    let mut emitted: Vec<PoseFeatures> = Vec::new();
    let mut keep = |_: u64, p: &PoseFeatures| -> Result<()> {
        emitted.push(p.clone());
        Ok(())
    };
    let report: StreamReport = match &a.replay {
        Some(dir) => {
            let dataset = load_dataset(dir)?;
            let frames = pick_sequence(&dataset, None)?.scans.clone();
            let rate = dataset.sensor.rate;
            std::thread::scope(|scope| {
                let client = scope.spawn(move || send_frames(addr, &frames, rate));
                let report = serve_connection(&listener, &mut session, &options, &mut keep);
                let returned = client.join().expect("replay client panicked")?;
                eprintln!("replay client received {} poses", returned.len());
                report
            })?
        }
        None => serve_connection(&listener, &mut session, &options, &mut keep)?,
    };
    if let Some(out) = &a.out {
        write_pose_file(out, &emitted)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn skeleton_for(dataset: Option<&Path>) -> Result<Skeleton> {
    Ok(match dataset {
        Some(dir) => read_manifest(dir)?.skeleton,
        None => Skeleton::default_humanoid(),
    })
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    frames: usize,
    #[serde(flatten)]
    report: &'a Report,
}

/// Metric rows as `(name, unit, value)`.
pub fn metric_rows(report: &Report) -> Vec<(&'static str, &'static str, f64)> {
    let (p, v) = (&report.pose, &report.velocity);
    vec![
        ("MJPE", "cm", p.mjpe),
        ("MJRE", "deg", p.mjre),
        ("MPPE", "cm", p.mppe),
        ("MPRE", "deg", p.mpre),
        ("MJLVE", "cm/s", v.mjlve),
        ("MJAVE", "deg/s", v.mjave),
        ("MPLVE", "cm/s", v.mplve),
        ("MPAVE", "deg/s", v.mpave),
        ("Jitter", "cm/s^3", report.jitter),
        ("Cont.", "%", report.contact),
    ]
}

pub fn format_table(report: &Report) -> String {
    let mut out = format!("{:<8} {:>12}  {}\n", "metric", "value", "unit");
    for (name, unit, value) in metric_rows(report) {
        out.push_str(&format!("{name:<8} {value:>12.4}  {unit}\n"));
    }
    out
}

fn eval(a: EvalArgs) -> Result<()> {
    let skeleton = skeleton_for(a.dataset.as_deref())?;
    let pred = read_pose_file(&a.pred)?;
    let gt = read_pose_file(&a.gt)?;
    let report = evaluate(&pred, &gt, &skeleton)?;
    if a.json {
        let out = EvalOutput { frames: gt.len(), report: &report };
        println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    } else {
        print!("{}", format_table(&report));
    }
    Ok(())
}

fn export(a: ExportBvhArgs) -> Result<()> {
    let skeleton = skeleton_for(a.dataset.as_deref())?;
    let poses = read_pose_file(&a.poses)?;
    let text = export_bvh(&skeleton, &poses, 1.0 / FRAME_RATE)?;
    fs::write(&a.out, text).map_err(Error::io(&a.out))?;
    println!("wrote {} frames to {}", poses.len(), a.out.display());
    Ok(())
}
