use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use imd_cli::experiments::{self, Axis, Sweep};
use imd_cli::generate::{generate, DataKind};
use imd_cli::{overlay, RunConfig};
use imd_core::{Image, COARSE_STRIDE};
use imd_data::{read_png, write_dataset};
use imd_model::PromptMode;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "imd", version, about = "Diffusion-feature image matcher")]
struct Cli {
    /// Worker threads for per-pair matching; results keep input order.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write or print run configuration files.
    #[command(subcommand)]
    Config(ConfigCmd),
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and save its checkpoint.
    Train(TrainArgs),
    /// Match one image pair and write JSON-lines matches.
    Match(MatchArgs),
    /// Homography corner-error AUC and coarse precision.
    EvalHomography(EvalArgs),
    /// Relative-pose AUC.
    EvalPose(EvalArgs),
    /// Instance-mask IMIM score.
    EvalImim(EvalArgs),
    /// Train and evaluate one model per cell of a prompt-mode x timestep sweep.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Write every setting with its default value.
    Init {
        #[arg(long, default_value = "imd.json")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// `default` or `desk` (narrow model for CPU training).
        #[arg(long, default_value = "default")]
        preset: String,
    },
    /// Validate a config file and print it with all fields explicit.
    Show {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Training pairs.
    #[arg(long)]
    n: usize,
    /// Held-out pairs, generated after the training pairs.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Image size, texture and warp strength come from this file when given.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    #[arg(long)]
    prompt_mode: Option<PromptMode>,
    #[arg(long)]
    timestep: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = self.focal_gamma {
            cfg.matching.focal_gamma = v;
        }
        if let Some(v) = self.prompt_mode {
            cfg.model.cipm.mode = v;
        }
        if let Some(v) = self.timestep {
            cfg.matching.timestep = v;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; defaults to `train_data` of the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `out` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    image_a: PathBuf,
    image_b: PathBuf,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Side-by-side PNG with match lines.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; defaults to `test_data` of the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of prompt-mode,timestep.
    #[arg(long, value_delimiter = ',', required = true)]
    axes: Vec<Axis>,
    #[arg(long, value_delimiter = ',', default_value = "0,100")]
    timesteps: Vec<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Directory receiving ablation.json and ablation.md.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a command that can legitimately produce nothing.
enum Outcome {
    Done,
    Empty,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Empty) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let jobs = cli.jobs.max(1);
    match cli.cmd {
        Cmd::Config(ConfigCmd::Init { out, force, preset }) => {
            if out.exists() && !force {
                bail!("{} exists; pass --force to overwrite", out.display());
            }
            RunConfig::preset(&preset)?.save(&out)?;
            eprintln!("wrote {}", out.display());
        }
        Cmd::Config(ConfigCmd::Show { config }) => print!("{}", RunConfig::load(&config)?.to_json()),
        Cmd::GenData(a) => {
            let settings = match &a.config {
                Some(p) => RunConfig::load(p)?.data,
                None => RunConfig::default().data,
            };
            let records = generate(a.kind, a.n, a.n_test, a.seed, &settings)?;
            write_dataset(&a.out, &records)?;
            eprintln!("wrote {} pairs to {}", records.len(), a.out.display());
        }
        Cmd::Train(a) => train(a)?,
        Cmd::Match(a) => return cmd_match(a),
        Cmd::EvalHomography(a) => eval(a, |m, c, r| Ok(serde_json::to_value(experiments::eval_homography(m, c, r, jobs)?)?))?,
        Cmd::EvalPose(a) => eval(a, |m, c, r| Ok(serde_json::to_value(experiments::eval_pose(m, c, r, jobs)?)?))?,
        Cmd::EvalImim(a) => eval(a, |m, c, r| Ok(serde_json::to_value(experiments::eval_imim(m, c, r, jobs)?)?))?,
        Cmd::Ablate(a) => ablate(a, jobs)?,
    }
    Ok(Outcome::Done)
}

fn pick(flag: Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = flag.or_else(|| from_config.clone()).with_context(|| format!("no {what} given (flag or config)"))?;
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p)
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg)?;
    let data = pick(a.data, &cfg.train_data, "training data")?;
    let out = a.out.unwrap_or_else(|| cfg.out.clone());
    fs::create_dir_all(&out)?;
    let records = experiments::load_records(&data)?;
    let samples = experiments::to_samples(&experiments::split(&records, "train"), &cfg.matching)?;
    let mut effective = cfg.clone();
    effective.train_data = Some(data);
    effective.checkpoint = Some(out.join("checkpoint"));
    effective.save(&out.join("run.json"))?;

    let mut log = String::new();
    let started = Instant::now();
    let log_every = cfg.train.log_every.max(1);
    let ckpt_dir = (cfg.train.checkpoint_every > 0).then(|| out.join("checkpoints"));
    let model = experiments::train(&cfg, &samples, ckpt_dir, |step, v| {
        if step % log_every == 0 || step == cfg.train.steps {
            let line = serde_json::json!({"step": step, "total": v.total, "coarse": v.coarse, "fine_l1": v.fine_l1, "fine_l2": v.fine_l2});
            log.push_str(&line.to_string());
            log.push('\n');
        }
    })?;
    fs::write(out.join("train_log.jsonl"), log)?;
    model.save(&out.join("checkpoint"))?;
    eprintln!(
        "trained {} steps on {} pairs in {:.1}s; checkpoint in {}",
        cfg.train.steps,
        samples.len(),
        started.elapsed().as_secs_f64(),
        out.join("checkpoint").display()
    );
    Ok(())
}

fn load_padded(path: &Path) -> Result<(Image, (usize, usize))> {
    let img = read_png(path).with_context(|| format!("reading {}", path.display()))?;
    let dims = img.dims();
    Ok((img.pad_reflect_to_multiple(COARSE_STRIDE), dims))
}

fn cmd_match(a: MatchArgs) -> Result<Outcome> {
    let cfg = RunConfig::load(&a.config)?;
    let ckpt = pick(a.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let model = experiments::load_model(&cfg, Some(&ckpt))?;
    let (ia, da) = load_padded(&a.image_a)?;
    let (ib, db) = load_padded(&a.image_b)?;
    let fine = experiments::match_one(&model, &cfg, &ia, &ib)?.fine.crop_to(da, db);
    let text = experiments::match_lines(&fine);
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(p) = &a.overlay {
        overlay::write(p, &ia, &ib, &fine)?;
    }
    eprintln!("{} matches", fine.len());
    Ok(if fine.is_empty() { Outcome::Empty } else { Outcome::Done })
}

fn eval(
    a: EvalArgs,
    f: impl Fn(&imd_model::model::ImdModel, &RunConfig, &[&imd_data::PairRecord]) -> Result<serde_json::Value>,
) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ckpt = pick(a.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let data = pick(a.data, &cfg.test_data, "test data")?;
    let model = experiments::load_model(&cfg, Some(&ckpt))?;
    let records = experiments::load_records(&data)?;
    let report = f(&model, &cfg, &experiments::split(&records, "test"))?;
    write_json(a.out.as_deref(), &report)
}

fn ablate(a: AblateArgs, jobs: usize) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let train_dir = pick(a.train_data, &cfg.train_data, "training data")?;
    let test_dir = pick(a.test_data.or_else(|| cfg.test_data.clone()), &Some(train_dir.clone()), "test data")?;
    let train_records = experiments::load_records(&train_dir)?;
    let test_records = if test_dir == train_dir { train_records.clone() } else { experiments::load_records(&test_dir)? };
    let sweep = Sweep::new(&a.axes, &cfg, &a.timesteps);
    let report = experiments::ablate(
        &cfg,
        &experiments::split(&train_records, "train"),
        &experiments::split(&test_records, "test"),
        &sweep,
        jobs,
    )?;
    let out = a.out.unwrap_or_else(|| cfg.out.clone());
    fs::create_dir_all(&out)?;
    write_json(Some(&out.join("ablation.json")), &report)?;
    fs::write(out.join("ablation.md"), experiments::ablation_markdown(&report))?;
    print!("{}", experiments::ablation_markdown(&report));
    Ok(())
}
