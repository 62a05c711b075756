//! Command-line driver: `run`, `train` and `eval`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slamformer::eval::{ate_rmse, recon_metrics, AlignMode, EvalReport, DEFAULT_SAMPLES};
use slamformer::io::{read_ply_file, read_trajectory, write_trajectory};
use slamformer::model::SlamFormer;
use slamformer::pipeline::{
    generate_synthetic_sequence, load_tum_sequence, parse_synthetic_spec, run_sequence, training_iteration, Ablation,
    PipelineConfig, SequenceSource, Sgd, TrainingClip,
};
use slamformer::{Error, Result};

#[derive(Parser)]
#[command(name = "slamformer", version, about = "Transformer SLAM on toy-scale inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a sequence and write trajectory, point cloud and timing report.
    Run {
        /// TUM RGB-D directory or `synthetic:<key=value,...>`.
        #[arg(long)]
        input: String,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of f, f+eb, f+mb, f+mb+eb.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        /// Keyframes between mid-run backend passes.
        #[arg(long)]
        period: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Weights written by `train`; random weights from the seed otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on clips cut from one or more sequences.
    Train {
        /// TUM directory, directory of TUM directories, or `synthetic:<spec>`.
        #[arg(long)]
        clips: String,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        clip_len: usize,
        #[arg(long, default_value = "weights.sfwt")]
        out: PathBuf,
    },
    /// Compare a trajectory (and optionally a point cloud) with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, requires = "gt_cloud")]
        pointcloud: Option<PathBuf>,
        #[arg(long, requires = "pointcloud")]
        gt_cloud: Option<PathBuf>,
        /// sim3 (default) or se3.
        #[arg(long, default_value = "sim3")]
        align: String,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(p) = path {
        cfg.apply_key_values(&std::fs::read_to_string(p)?)?;
    }
    Ok(cfg)
}

fn load_source(input: &str, cfg: &PipelineConfig) -> Result<SequenceSource> {
    let (h, w) = cfg.model.image_hw;
    match input.strip_prefix("synthetic:") {
        Some(spec) => {
            let (spec, seed) = parse_synthetic_spec(spec, h, w)?;
            generate_synthetic_sequence(&spec, seed)
        }
        None => load_tum_sequence(Path::new(input), &cfg.model),
    }
}

fn load_model(cfg: &PipelineConfig, weights: Option<&Path>) -> Result<SlamFormer> {
    match weights {
        Some(p) => {
            let m = SlamFormer::read_checkpoint(BufReader::new(File::open(p)?))?;
            if m.config() != &cfg.model {
                return Err(Error::Config(format!("{} holds a model that does not match the configuration", p.display())));
            }
            Ok(m)
        }
        None => SlamFormer::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    input: &str,
    config: Option<&Path>,
    ablation: Option<&str>,
    tau: Option<f64>,
    period: Option<usize>,
    out: Option<PathBuf>,
    weights: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(a) = ablation {
        cfg.set_ablation(a.parse::<Ablation>()?);
    }
    if let Some(t) = tau {
        cfg.frontend.tau = t;
    }
    if let Some(p) = period {
        cfg.backend.trigger_period = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let source = load_source(input, &cfg)?;
    let model = load_model(&cfg, weights)?;
    let art = run_sequence(&source, &cfg, &model)?;
    art.write_to(&cfg.output_dir)?;
    if let Some(gt) = source.gt_trajectory().filter(|t| !t.is_empty()) {
        write_trajectory(&gt, &cfg.output_dir.join("groundtruth.txt"))?;
    }
    println!(
        "{} frames, {} keyframes, {} points, backend {}+{}, {:.1} fps -> {}",
        art.timing.frames,
        art.keyframes.len(),
        art.pointcloud.len(),
        art.backend_calls.mid,
        art.backend_calls.end,
        art.timing.fps,
        cfg.output_dir.display()
    );
    Ok(())
}

fn training_sources(clips: &str, cfg: &PipelineConfig) -> Result<Vec<SequenceSource>> {
    if clips.starts_with("synthetic:") || Path::new(clips).join("rgb.txt").exists() {
        return Ok(vec![load_source(clips, cfg)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(clips)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("rgb.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no TUM sequences under {clips}"))));
    }
    dirs.iter().map(|d| load_tum_sequence(d, &cfg.model)).collect()
}

fn cmd_train(clips: &str, iters: usize, seed: u64, config: Option<&Path>, clip_len: usize, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.seed = seed;
    cfg.validate()?;
    let mut set = Vec::new();
    for src in training_sources(clips, &cfg)? {
        for start in (0..src.frames.len()).step_by(clip_len.max(1)) {
            if start + clip_len <= src.frames.len() {
                set.push(TrainingClip::from_source(&src, start..start + clip_len)?);
            }
        }
    }
    if set.is_empty() {
        return Err(Error::Contract(format!("no clip of {clip_len} frames with ground truth could be cut")));
    }
    let mut model = SlamFormer::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut opt = Sgd::new();
    for i in 0..iters {
        let r = training_iteration(&set[i % set.len()], &mut model, &mut opt, &cfg.train, &cfg.loss)?;
        if i % 10 == 0 || i + 1 == iters {
            println!("iter {i} l_all {:.4} l_mode1 {:.4} l_mode2 {:.4} l_mode3 {:.4}", r.l_all, r.l_mode1, r.l_mode2, r.l_mode3);
        }
    }
    model.write_checkpoint(BufWriter::new(File::create(out)?))?;
    println!("{} clips, {} iterations -> {}", set.len(), iters, out.display());
    Ok(())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    clouds: Option<(&Path, &Path)>,
    align: &str,
    samples: usize,
    json: Option<&Path>,
) -> Result<()> {
    let mode = match align {
        "sim3" => AlignMode::Sim3,
        "se3" => AlignMode::Se3,
        other => return Err(Error::Config(format!("unknown alignment {other:?}; expected sim3 or se3"))),
    };
    let traj = ate_rmse(&read_trajectory(pred)?, &read_trajectory(gt)?, mode)?;
    let mut report = EvalReport::default().with_trajectory(&traj, mode);
    if let Some((p, g)) = clouds {
        let p: Vec<_> = read_ply_file(p)?.iter().map(|c| c.point()).collect();
        let g: Vec<_> = read_ply_file(g)?.iter().map(|c| c.point()).collect();
        report.recon = Some(recon_metrics(&p, &g, samples, 0)?);
    }
    print!("{}", report.to_kv_text());
    if let Some(j) = json {
        std::fs::write(j, report.to_json() + "\n")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { input, config, ablation, tau, period, out, weights, seed } => cmd_run(
            input,
            config.as_deref(),
            ablation.as_deref(),
            *tau,
            *period,
            out.clone(),
            weights.as_deref(),
            *seed,
        ),
        Command::Train { clips, iters, seed, config, clip_len, out } => {
            cmd_train(clips, *iters, *seed, config.as_deref(), *clip_len, out)
        }
        Command::Eval { pred, gt, pointcloud, gt_cloud, align, samples, json } => cmd_eval(
            pred,
            gt,
            pointcloud.as_deref().zip(gt_cloud.as_deref()),
            align,
            *samples,
            json.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
