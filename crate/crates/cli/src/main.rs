use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dsplats::camera::{read_pose_file, rig_with_size, write_pose_file, PoseRecord};
use dsplats::checkpoint::{checkpoint_id, Checkpoint};
use dsplats::data::{build_dataset, load_dataset, DatasetConfig, ObjectRecord};
use dsplats::diffusion::{cosine_schedule, sample, DEFAULT_SAMPLING_STEPS, DEFAULT_TIMESTEPS};
use dsplats::gaussians::GaussianCloud;
use dsplats::image::RgbImage;
use dsplats::metrics::{evaluate, EvalModel};
use dsplats::render::{render, WHITE};
use dsplats::training::{TrainConfig, Trainer};
use dsplats::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dsplats",
    version,
    about = "Single-image to 3D Gaussians through multiview latent diffusion"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural multiview dataset.
    GenData(GenData),
    /// Train the denoiser on a dataset.
    Train(Train),
    /// Generate Gaussians and rig views from one input image.
    Sample(Sample),
    /// Render a Gaussian cloud at the poses in a pose file.
    Render(Render),
    /// Score conditional generation on a dataset.
    Eval(Eval),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, default_value_t = 6)]
    views: usize,
    /// Extra random poses stored per object.
    #[arg(long, default_value_t = 2)]
    unseen: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Contiguous slice of a dataset's objects, in manifest order.
#[derive(Args)]
struct Selection {
    #[arg(long, default_value_t = 0)]
    skip: usize,
    #[arg(long)]
    take: Option<usize>,
}

impl Selection {
    fn apply(&self, objects: Vec<ObjectRecord>) -> Result<Vec<ObjectRecord>> {
        let n = objects.len();
        let take = self.take.unwrap_or(n.saturating_sub(self.skip));
        if self.skip + take > n || take == 0 {
            return Err(Error::Contract(format!(
                "selection skip={} take={take} does not fit {n} objects",
                self.skip
            )));
        }
        Ok(objects.into_iter().skip(self.skip).take(take).collect())
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; defaults apply to missing keys.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Overrides the config seed (ignored when resuming).
    #[arg(long)]
    seed: Option<u64>,
    /// Train until this global step; overrides `total_steps`.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    select: Selection,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Conditioning image, seen from the first rig pose.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    views: usize,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    cloud: PathBuf,
    /// Pose file, one JSON record per line.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use each object's ground-truth cloud as the denoiser.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long)]
    data: PathBuf,
    /// Report file (tab-separated).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    select: Selection,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.into(),
        source: e,
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = DatasetConfig {
        objects: a.objects,
        views: a.views,
        unseen: a.unseen,
        image_size: a.size,
        seed: a.seed,
    };
    let m = build_dataset(&cfg, &a.out)?;
    println!("wrote {} objects to {}", m.objects.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let objects = a.select.apply(load_dataset(&a.data)?.objects)?;
    let mut trainer = match &a.resume {
        Some(p) => Checkpoint::load(p)?.into_trainer()?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            Trainer::new(cfg)?
        }
    };
    let total = a.steps.unwrap_or(trainer.config.total_steps);
    create_dir(&a.out)?;
    let log = a.out.join("metrics.jsonl");
    let eval_log = a.out.join("eval.jsonl");
    let cfg = trainer.config.clone();
    while trainer.step < total {
        let m = trainer.train_step(&objects)?;
        append_line(&log, &serde_json::to_string(&m).expect("metrics serialize"))?;
        if m.step % 10 == 0 || m.step == total {
            eprintln!(
                "step {} l_render {:.5} l_diff {:.5} grad {:.3e} ({:.0} ms)",
                m.step, m.l_render, m.l_diff, m.grad_norm, m.wall_ms
            );
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            Checkpoint::from_trainer(&trainer).save(&a.out.join(format!("ckpt_{:06}.dsck", m.step)))?;
        }
        if cfg.eval_every > 0 && m.step % cfg.eval_every == 0 {
            let n = cfg.eval_objects.clamp(1, objects.len());
            let r = evaluate(
                EvalModel::Network(&trainer.net),
                &objects[..n],
                trainer.schedule(),
                cfg.eval_sampling_steps,
                cfg.seed,
                "training",
                "",
            )?;
            let (rig, unseen) = (r.rig(), r.unseen());
            let line = serde_json::json!({
                "step": m.step,
                "rig_psnr": rig.psnr,
                "rig_ssim": rig.ssim,
                "unseen_psnr": unseen.psnr,
                "unseen_ssim": unseen.ssim,
            });
            append_line(&eval_log, &line.to_string())?;
        }
    }
    let last = a.out.join("last.dsck");
    Checkpoint::from_trainer(&trainer).save(&last)?;
    println!("step {} checkpoint {}", trainer.step, last.display());
    Ok(())
}

fn sample_cmd(a: Sample) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ckpt.network();
    let input = RgbImage::load_png(&a.input)?;
    let rig = rig_with_size(a.views, input.width, input.height)?;
    let schedule = cosine_schedule(ckpt.config.timesteps)?;
    let out = sample(&input, &rig, &net, &schedule, a.steps, a.seed, WHITE)?;
    create_dir(&a.out)?;
    for (i, r) in out.renders.iter().enumerate() {
        r.image().save_png(&a.out.join(format!("view_{i:02}.png")))?;
    }
    out.cloud.save(&a.out.join("cloud.dspl"))?;
    let poses: Vec<PoseRecord> = rig.poses.iter().map(PoseRecord::from_pose).collect();
    write_pose_file(&a.out.join("poses.jsonl"), &poses)?;
    println!(
        "{} Gaussians, {} views in {}",
        out.cloud.len(),
        out.renders.len(),
        a.out.display()
    );
    Ok(())
}

fn render_cmd(a: Render) -> Result<()> {
    let cloud = GaussianCloud::load(&a.cloud)?;
    let poses = read_pose_file(&a.poses)?;
    create_dir(&a.out)?;
    for (i, p) in poses.iter().enumerate() {
        let pose = p.to_pose();
        pose.validate()?;
        render(&cloud, &pose, WHITE)?
            .image()
            .save_png(&a.out.join(format!("render_{i:02}.png")))?;
    }
    println!("rendered {} views to {}", poses.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let objects = a.select.apply(load_dataset(&a.data)?.objects)?;
    let report = match &a.checkpoint {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let ckpt = Checkpoint::from_bytes(&bytes, p)?;
            let net = ckpt.network();
            let config = serde_json::to_string(&ckpt.config).expect("config serializes");
            let schedule = cosine_schedule(ckpt.config.timesteps)?;
            evaluate(
                EvalModel::Network(&net),
                &objects,
                &schedule,
                a.steps,
                a.seed,
                &checkpoint_id(&bytes),
                &config,
            )?
        }
        None => evaluate(
            EvalModel::Oracle,
            &objects,
            &cosine_schedule(DEFAULT_TIMESTEPS)?,
            a.steps,
            a.seed,
            "oracle",
            "{}",
        )?,
    };
    report.save(&a.out)?;
    let (rig, unseen) = (report.rig(), report.unseen());
    println!(
        "rig psnr {:.3} ssim {:.4} | unseen psnr {:.3} ssim {:.4} | {} objects",
        rig.psnr,
        rig.ssim,
        unseen.psnr,
        unseen.ssim,
        objects.len()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DSPLATS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Contract(format!("DSPLATS_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
