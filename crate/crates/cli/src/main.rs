//! `zscir`: generate synthetic data, train, evaluate and run the sweeps.
//!
//! Exit codes: 0 on success, 2 for configuration errors (bad flags, bad
//! config file, missing inputs), 1 for anything that fails at run time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use zscir_core::artifact::{self, Manifest};
use zscir_core::config::Artifact;
use zscir_core::data::{read_collection, validate_collection, write_collection};
use zscir_core::eval::{build_eval_set, evaluate, export_gallery, read_eval_set, write_eval_set, QueryMode};
use zscir_core::experiments::{ablate, render_sweep_plot, scale_sweep, training_pool, Workbench};
use zscir_core::train::{finetune_combiner, train, TrainConfig};
use zscir_core::triplets::{build_dataset, TripletDataset};
use zscir_core::world::generate_world;
use zscir_core::{Checkpoint, EvalReport, RunConfig, Tokenizer};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "zscir", version, about = "Zero-shot composed image retrieval on a synthetic world")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts without an explicit path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the large-backbone optimizer settings (lr 2e-6, wd 0.1, B 32).
    #[arg(long, global = true)]
    large_backbone_preset: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the world, sample triplets and build the evaluation set.
    GenerateData,
    /// Train the reformulation network on the triplet dataset.
    Train,
    /// Fit the fusion weight with the backbone frozen.
    FinetuneCombiner,
    /// Score a checkpoint on the evaluation set.
    Evaluate {
        /// Defaults to the combiner checkpoint, or the trained one if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export ranked retrievals from a report as an HTML page.
    Gallery {
        #[arg(long, value_enum, default_value_t = ModeArg::Er)]
        mode: ModeArg,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Train and score the full model at each configured triplet count.
    ScaleSweep,
    /// Train and score every architecture variant on identical data.
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "e_r")]
    Er,
    #[value(name = "e_f")]
    Ef,
    ImageOnly,
    TextOnly,
    Sum,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Er => QueryMode::Reformulated,
            ModeArg::Ef => QueryMode::Fused,
            ModeArg::ImageOnly => QueryMode::ImageOnly,
            ModeArg::TextOnly => QueryMode::TextOnly,
            ModeArg::Sum => QueryMode::Sum,
        }
    }
}

/// Raised for problems with the invocation itself rather than the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<zscir_core::Error>().is_some_and(|e| e.is_config_error())
    })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!(
            "{what} `{}` does not exist; run the producing command first or set its path in [paths]",
            path.display()
        ))
        .into());
    }
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    seed: u64,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = RunConfig::load(cli.config.as_deref()).context("loading configuration")?;
        if let Some(seed) = cli.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &cli.out {
            cfg.set_out_dir(out);
        }
        if cli.large_backbone_preset {
            let p = TrainConfig::large_backbone_preset();
            cfg.train.learning_rate = p.learning_rate;
            cfg.train.weight_decay = p.weight_decay;
            cfg.train.batch_size = p.batch_size;
        }
        cfg.validate()?;
        let hash = cfg.hash()?;
        let seed = cfg.train.seed;
        Ok(Self { cfg, hash, seed })
    }

    fn path(&self, a: Artifact) -> PathBuf {
        self.cfg.paths.resolve(a)
    }

    fn manifest(&self, kind: &str) -> Result<Manifest> {
        Ok(Manifest::new(kind, &self.hash, self.seed, self.cfg.to_json()?))
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.cfg.paths.out_dir().join(name)
    }
}

fn finish(mut manifest: Manifest, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for p in inputs {
        manifest.add_input(p)?;
    }
    for p in outputs {
        manifest.add_output(p)?;
    }
    for p in outputs {
        manifest.write_for(p)?;
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn generate_data(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let images = generate_world(&cfg.world).context("generating the synthetic world")?;
    let (captioner, reformulator) = cfg.backend.build(&cfg.world)?;
    let dataset = build_dataset(
        &training_pool(&images),
        &cfg.sampling,
        &*captioner,
        &*reformulator,
        cfg.backend.word_cap,
    )
    .context("building the triplet dataset")?;
    let cases = build_eval_set(&images, &*captioner, &*reformulator, &cfg.eval_set, cfg.backend.word_cap)
        .context("building the evaluation set")?;
    let (coll, ds, ev) = (
        ctx.path(Artifact::Collection),
        ctx.path(Artifact::Dataset),
        ctx.path(Artifact::EvalSet),
    );
    write_collection(&coll, &images)?;
    dataset.write(&ds)?;
    write_eval_set(&ev, &cases)?;
    info!("{} images, {} triplets, {} eval cases", images.len(), dataset.len(), cases.len());
    finish(ctx.manifest("generate-data")?, &[], &[&coll, &ds, &ev])
}

fn load_collection(ctx: &Ctx) -> Result<(PathBuf, Vec<zscir_core::ImageRecord>)> {
    let path = ctx.path(Artifact::Collection);
    require(&path, "collection")?;
    let images = read_collection(&path).with_context(|| format!("reading {}", path.display()))?;
    validate_collection(&images)?;
    Ok((path, images))
}

fn load_dataset(ctx: &Ctx, images: &[zscir_core::ImageRecord]) -> Result<(PathBuf, TripletDataset)> {
    let path = ctx.path(Artifact::Dataset);
    require(&path, "triplet dataset")?;
    let ds = TripletDataset::read(&path).with_context(|| format!("reading {}", path.display()))?;
    ds.check_closure(images)?;
    Ok((path, ds))
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let (coll, images) = load_collection(ctx)?;
    let (ds_path, dataset) = load_dataset(ctx, &images)?;
    let tokenizer = Tokenizer::for_world(&ctx.cfg.world);
    let (ckpt, log) = train(&dataset, &images, &ctx.cfg.model, tokenizer, &ctx.cfg.train).context("training")?;
    let (ck, lg) = (ctx.path(Artifact::Checkpoint), ctx.path(Artifact::TrainLog));
    ckpt.save(&ck)?;
    log.write(&lg)?;
    if let Some(last) = log.epochs.last() {
        info!("final epoch loss {:.4}, tau {:.3}", last.mean_loss, last.tau);
    }
    finish(ctx.manifest("train")?, &[&coll, &ds_path], &[&ck, &lg])
}

fn finetune_cmd(ctx: &Ctx) -> Result<()> {
    let (coll, images) = load_collection(ctx)?;
    let (ds_path, dataset) = load_dataset(ctx, &images)?;
    let ck_in = ctx.path(Artifact::Checkpoint);
    require(&ck_in, "checkpoint")?;
    let ckpt = Checkpoint::load(&ck_in)?;
    let (tuned, log) = finetune_combiner(&ckpt, &dataset, &images, &ctx.cfg.train).context("fitting the combiner")?;
    let out = ctx.path(Artifact::CombinerCheckpoint);
    tuned.save(&out)?;
    let log_path = out.with_extension("log.jsonl");
    log.write(&log_path)?;
    info!("lambda {:.4} -> {:.4}", ckpt.lambda, tuned.lambda);
    finish(ctx.manifest("finetune-combiner")?, &[&coll, &ds_path, &ck_in], &[&out, &log_path])
}

fn evaluate_cmd(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let (coll, images) = load_collection(ctx)?;
    let ev = ctx.path(Artifact::EvalSet);
    require(&ev, "evaluation set")?;
    let cases = read_eval_set(&ev)?;
    let ck = match checkpoint {
        Some(p) => p,
        None => {
            let combiner = ctx.path(Artifact::CombinerCheckpoint);
            if combiner.exists() {
                combiner
            } else {
                log::warn!("no combiner checkpoint; evaluating the trained one");
                ctx.path(Artifact::Checkpoint)
            }
        }
    };
    require(&ck, "checkpoint")?;
    let ckpt = Checkpoint::load(&ck)?;
    let mut report = evaluate(&ckpt, &images, &cases, &ctx.cfg.eval).context("evaluating")?;
    report.config_hash = Some(ctx.hash.clone());
    let out = ctx.path(Artifact::Report);
    report.write(&out)?;
    let md = out.with_extension("md");
    artifact::write_atomic(&md, report.to_markdown().as_bytes())?;
    println!("{}", report.to_markdown());
    finish(ctx.manifest("evaluate")?, &[&coll, &ev, &ck], &[&out, &md])
}

fn gallery_cmd(ctx: &Ctx, mode: QueryMode, top_k: usize) -> Result<()> {
    if top_k == 0 {
        return Err(UsageError("--top-k must be positive".into()).into());
    }
    let (coll, images) = load_collection(ctx)?;
    let rp = ctx.path(Artifact::Report);
    require(&rp, "report")?;
    let report = EvalReport::read(&rp)?;
    let out = ctx.path(Artifact::Gallery);
    export_gallery(&report, mode, &images, top_k, &out).context("rendering the gallery")?;
    finish(ctx.manifest("gallery")?, &[&coll, &rp], &[&out])
}

fn sweep_cmd(ctx: &Ctx) -> Result<()> {
    let bench = Workbench::new(&ctx.cfg)?;
    let result = scale_sweep(&bench).context("scale sweep")?;
    let (csv, runs, png, json) = (
        ctx.out_file("sweep.csv"),
        ctx.out_file("sweep_runs.csv"),
        ctx.out_file("sweep.png"),
        ctx.out_file("sweep.json"),
    );
    artifact::write_atomic(&csv, result.to_csv().as_bytes())?;
    artifact::write_atomic(&runs, result.runs_csv().as_bytes())?;
    render_sweep_plot(&result, &["R@1", "R@5", "R@10"], &png)?;
    artifact::write_json_atomic(&json, &result)?;
    print!("{}", result.to_csv());
    finish(ctx.manifest("scale-sweep")?, &[], &[&csv, &runs, &png, &json])
}

fn ablate_cmd(ctx: &Ctx) -> Result<()> {
    let bench = Workbench::new(&ctx.cfg)?;
    let result = ablate(&bench).context("ablation")?;
    let (md, csv, json) = (
        ctx.out_file("ablation.md"),
        ctx.out_file("ablation.csv"),
        ctx.out_file("ablation.json"),
    );
    artifact::write_atomic(&md, result.to_markdown().as_bytes())?;
    artifact::write_atomic(&csv, result.to_csv().as_bytes())?;
    artifact::write_json_atomic(&json, &result)?;
    print!("{}", result.to_markdown());
    finish(ctx.manifest("ablate")?, &[], &[&md, &csv, &json])
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::load(cli)?;
    std::fs::create_dir_all(ctx.cfg.paths.out_dir())
        .with_context(|| format!("creating {}", ctx.cfg.paths.out_dir().display()))?;
    match &cli.command {
        Command::GenerateData => generate_data(&ctx),
        Command::Train => train_cmd(&ctx),
        Command::FinetuneCombiner => finetune_cmd(&ctx),
        Command::Evaluate { checkpoint } => evaluate_cmd(&ctx, checkpoint.clone()),
        Command::Gallery { mode, top_k } => gallery_cmd(&ctx, (*mode).into(), *top_k),
        Command::ScaleSweep => sweep_cmd(&ctx),
        Command::Ablate => ablate_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
