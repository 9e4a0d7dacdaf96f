use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use muse_core::config::RunConfig;
use muse_core::eval::{eval_scenes, EvalReport};
use muse_core::experiments::{layout_verdict, pretrain, resolve_thresholds, scale_verdict, strategy_verdict, Lab, Suite};
use muse_core::model::MuseModel;
use muse_core::trainer::{
    held_out_loss, load_checkpoint, save_checkpoint, scene_for_step, train_stage, CheckpointMeta, LogRecord, SceneSource,
    Stage, STREAM_SCENE,
};
use muse_core::verify::{gradient_suite, GRADCHECK_TOLERANCE};
use muse_core::world::{derive_seed, generate_scene, read_dataset, write_dataset, LayoutMode, Split, MIN_SUBJECTS};

#[derive(Parser, Debug)]
#[command(name = "muse", about = "Layout-controllable multi-subject diffusion on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Plain-text `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    stage: Option<String>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Classifier-free guidance weight.
    #[arg(long, global = true)]
    cfg: Option<f64>,
    /// Step budget of the command's training run.
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    suite: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, global = true)]
    values: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Write a training dataset file.
    Dataset,
    /// Train the text-only base model.
    Pretrain,
    /// Run one stage of a training strategy.
    Train,
    /// Sample one image for a held-out scene.
    Sample,
    /// Evaluate a checkpoint on the held-out benchmark.
    Eval,
    /// Run an ablation suite end to end.
    Ablate,
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut o: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| o.push((k.to_string(), v));
    if let Some(v) = cli.seed {
        put("seed", v.to_string());
    }
    if let Some(v) = &cli.out {
        put("out", v.display().to_string());
    }
    if let Some(v) = &cli.checkpoint {
        put("checkpoint", v.display().to_string());
    }
    if let Some(v) = &cli.stage {
        put("stage", v.clone());
    }
    if let Some(v) = &cli.strategy {
        put("strategy", v.clone());
    }
    if let Some(v) = cli.lambda {
        put("lambda", v.to_string());
    }
    if let Some(v) = cli.cfg {
        put("cfg_weight", v.to_string());
    }
    if let Some(v) = cli.steps {
        let key = if cli.command == Command::Pretrain { "pretrain_steps" } else { "stage_steps" };
        put(key, v.to_string());
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{kv}`"))?;
        put(k.trim(), v.trim().to_string());
    }
    Ok(o)
}

fn jsonl_logger(path: &Path) -> Result<impl FnMut(&LogRecord)> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    Ok(move |r: &LogRecord| {
        if let Ok(line) = serde_json::to_string(r) {
            let _ = writeln!(w, "{line}");
            let _ = w.flush();
        }
        eprintln!("{} {} step {} loss {:.5}", r.strategy, r.stage, r.step, r.loss);
    })
}

fn scene_source(cfg: &RunConfig, layout: LayoutMode) -> Result<SceneSource> {
    Ok(match &cfg.dataset {
        Some(path) => SceneSource::Dataset(Arc::new(read_dataset(path)?)),
        None => SceneSource::Generated(layout),
    })
}

fn load_model(cfg: &RunConfig) -> Result<(MuseModel, Option<CheckpointMeta>, Option<muse_core::nn::OptimizerState>)> {
    match &cfg.checkpoint {
        Some(p) => {
            let (m, opt, meta) = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            Ok((m, Some(meta), opt))
        }
        None => Ok((MuseModel::new(cfg.model()?, cfg.seed)?, None, None)),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_dataset(cfg: &RunConfig) -> Result<serde_json::Value> {
    let source = SceneSource::Generated(cfg.train_layout);
    let scenes = (0..cfg.dataset_scenes as u64)
        .map(|i| scene_for_step(&source, cfg.seed, STREAM_SCENE, i))
        .collect::<muse_core::Result<Vec<_>>>()?;
    let path = cfg.out.join("dataset.museds");
    write_dataset(&scenes, &path)?;
    Ok(json!({ "dataset": path, "scenes": scenes.len() }))
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut fresh = MuseModel::new(cfg.model()?, cfg.seed)?;
    let before = held_out_loss(&mut fresh, LayoutMode::Prior, cfg.seed, 64)?;
    let mut log = jsonl_logger(&cfg.out.join("train_log.jsonl"))?;
    let mut model = match &cfg.dataset {
        None => pretrain(cfg, &mut log)?,
        Some(_) => {
            let mut m = fresh.clone();
            let tc = muse_core::trainer::TrainConfig {
                stage: Stage::Pretrain,
                lr: cfg.pretrain_lr,
                ..cfg.train_config(cfg.pretrain_steps)
            };
            train_stage(&mut m, &tc, &scene_source(cfg, LayoutMode::Prior)?, None, None, &mut log)?;
            m
        }
    };
    let after = held_out_loss(&mut model, LayoutMode::Prior, cfg.seed, 64)?;
    let tc = muse_core::trainer::TrainConfig { stage: Stage::Pretrain, lr: cfg.pretrain_lr, ..cfg.train_config(cfg.pretrain_steps) };
    let meta = CheckpointMeta {
        model: model.config,
        init_seed: cfg.seed,
        conditioning: model.conditioning(),
        lambda: cfg.lambda,
        train: Some(tc),
        step: cfg.pretrain_steps,
    };
    let path = cfg.out.join("base.ckpt");
    save_checkpoint(&path, &model, None, &meta)?;
    Ok(json!({ "checkpoint": path, "held_out_loss_before": before, "held_out_loss_after": after }))
}

fn cmd_train(cfg: &RunConfig) -> Result<serde_json::Value> {
    if cfg.stage == Stage::Pretrain {
        bail!("use the `pretrain` command for the base model");
    }
    if cfg.checkpoint.is_none() {
        bail!("`train` needs --checkpoint (a pretrained base or a stage-1 result)");
    }
    let (mut model, meta, opt) = load_model(cfg)?;
    let tc = cfg.train_config(cfg.stage_steps);
    // Resume only a run of the same strategy, stage and settings.
    let resume = match (meta.as_ref(), opt) {
        (Some(m), Some(o)) if m.train == Some(tc) => Some((o, m.step)),
        _ => None,
    };
    let init_seed = meta.as_ref().map_or(cfg.seed, |m| m.init_seed);
    let mut log = jsonl_logger(&cfg.out.join("train_log.jsonl"))?;
    let outcome = train_stage(&mut model, &tc, &scene_source(cfg, cfg.train_layout)?, resume, None, &mut log)?;
    let meta = CheckpointMeta {
        model: model.config,
        init_seed,
        conditioning: model.conditioning(),
        lambda: tc.lambda,
        train: Some(tc),
        step: outcome.step,
    };
    let path = cfg.out.join(format!("{}_{}.ckpt", tc.strategy, tc.stage));
    save_checkpoint(&path, &model, Some(&outcome.optimizer), &meta)?;
    Ok(json!({ "checkpoint": path, "steps": outcome.step, "final_loss": outcome.log.last().map(|r| r.loss) }))
}

fn cmd_sample(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (model, _, _) = load_model(cfg)?;
    let n = MIN_SUBJECTS + (cfg.seed % 5) as usize;
    let scene = generate_scene(derive_seed(cfg.seed, 0x5CE, 0), n, LayoutMode::Uniform, Split::Eval)?;
    let image = model.generate(&[&scene], &cfg.sampler(), &[cfg.seed])?.images.remove(0);
    let stem = cfg.out.join(format!("sample_{}", cfg.seed));
    let ppm = stem.with_extension("ppm");
    image.write_ppm(&ppm)?;
    let sidecar = json!({
        "seed": cfg.seed,
        "prompt": scene.prompt_tokens,
        "subjects": scene.subjects.iter().map(|s| json!({
            "class": s.class.index(),
            "shape": format!("{:?}", s.class.shape()),
            "color": format!("{:?}", s.class.color()),
            "identity": s.identity.index(),
            "box": [s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1],
        })).collect::<Vec<_>>(),
        "sampler": cfg.sampler(),
        "conditioning": model.conditioning(),
    });
    let side = stem.with_extension("json");
    write_json(&side, &sidecar)?;
    Ok(json!({ "image": ppm, "sidecar": side }))
}

fn cmd_eval(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (model, _, _) = load_model(cfg)?;
    let thresholds = resolve_thresholds(cfg, &model)?;
    let scenes = eval_scenes(cfg.seed, cfg.eval_per_level)?;
    let label = cfg.checkpoint.as_ref().map_or("init".to_string(), |p| p.display().to_string());
    let report = EvalReport::evaluate(label, &model, &scenes, &cfg.sampler(), &cfg.eval_seeds, thresholds)?;
    write_json(&cfg.out.join("eval.json"), &report)?;
    fs::write(cfg.out.join("eval.csv"), EvalReport::to_csv(std::slice::from_ref(&report)))?;
    print!("{}", EvalReport::to_csv(std::slice::from_ref(&report)));
    Ok(json!({ "report": cfg.out.join("eval.json"), "csv": cfg.out.join("eval.csv") }))
}

fn cmd_ablate(cfg: &RunConfig, suite: Option<&str>, values: Option<&str>) -> Result<serde_json::Value> {
    let suite: Suite = suite.ok_or_else(|| anyhow!("`ablate` needs --suite layout|strategy|scale"))?.parse()?;
    let values: Vec<f64> = match values {
        Some(v) => v.split(',').map(|x| x.trim().parse().with_context(|| format!("bad --values entry `{x}`"))).collect::<Result<_>>()?,
        None => vec![0.6, 0.8, 1.0],
    };
    let mut log = jsonl_logger(&cfg.out.join("train_log.jsonl"))?;
    let base = match &cfg.checkpoint {
        Some(_) => load_model(cfg)?.0,
        None => pretrain(cfg, &mut log)?,
    };
    let mut lab = Lab::new(cfg.clone(), base, Box::new(log))?;
    let reports = lab.run(suite, &values)?;
    let verdict = match suite {
        Suite::Layout => layout_verdict(&reports, 0.05)?,
        Suite::Strategy => strategy_verdict(&reports, 0.10)?,
        Suite::Scale => scale_verdict(&reports, 0.01),
    };
    let name = format!("ablate_{}", format!("{suite:?}").to_lowercase());
    write_json(&cfg.out.join(format!("{name}.json")), &json!({ "reports": reports, "verdict": verdict }))?;
    fs::write(cfg.out.join(format!("{name}.csv")), EvalReport::to_csv(&reports))?;
    print!("{}", EvalReport::to_csv(&reports));
    println!("{}: {} ({})", if verdict.passed { "PASS" } else { "FAIL" }, verdict.claim, verdict.detail);
    Ok(json!({ "reports": reports.len(), "verdict": verdict }))
}

fn cmd_gradcheck() -> Result<serde_json::Value> {
    let entries = gradient_suite()?;
    let mut worst = 0.0f64;
    for e in &entries {
        println!("{:<28} max rel. error {:.3e} over {} coordinates", e.case, e.max_rel_error, e.coordinates);
        worst = worst.max(e.max_rel_error);
    }
    println!("max rel. error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if let Some(e) = entries.iter().find(|e| !e.passed()) {
        bail!("gradient check failed for {} at {:?}: {:.3e}", e.case, e.worst, e.max_rel_error);
    }
    Ok(json!({ "max_rel_error": worst, "cases": entries.len() }))
}

fn run(cli: &Cli) -> Result<()> {
    if cli.command == Command::Gradcheck {
        cmd_gradcheck()?;
        return Ok(());
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides(cli)?)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    cfg.archive(&cfg.out)?;
    let summary = match cli.command {
        Command::Dataset => cmd_dataset(&cfg)?,
        Command::Pretrain => cmd_pretrain(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Sample => cmd_sample(&cfg)?,
        Command::Eval => cmd_eval(&cfg)?,
        Command::Ablate => cmd_ablate(&cfg, cli.suite.as_deref(), cli.values.as_deref())?,
        Command::Gradcheck => unreachable!("handled above"),
    };
    eprintln!("{summary}");
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<muse_core::Error>() {
        Some(muse_core::Error::Config(_)) => "config",
        Some(muse_core::Error::Divergence { .. }) => "divergence",
        Some(muse_core::Error::Io(_)) => "io",
        Some(muse_core::Error::Format(_) | muse_core::Error::CheckpointParam { .. }) => "format",
        Some(_) => "runtime",
        None if e.downcast_ref::<clap::Error>().is_some() => "usage",
        None => "error",
    }
}

fn report_error(e: &anyhow::Error) -> ExitCode {
    let report = json!({ "error": { "kind": error_kind(e), "message": format!("{e:#}") } });
    eprintln!("{report}");
    ExitCode::from(if matches!(error_kind(e), "usage" | "config") { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error(&e.into()),
    };
    if let Some(n) = std::env::var("MUSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
