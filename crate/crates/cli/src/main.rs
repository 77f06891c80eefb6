//! `rationale`: generate worlds, train, evaluate, ablate, run zero-shot
//! grids and check gradients.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rationale_core::harness::{
    ablation_matrix, dump_tables, evaluate_on, load_document, output_root, run_training,
    tiny_gradient_check, write_report, zero_shot_grid, ReportCell, RunConfig, RunReport,
    WorldPreset, OUTPUT_ROOT_ENV, RATIONALE_RULE, REPORT_FORMAT_VERSION,
};
use rationale_core::metrics::{label_space, results_table};
use rationale_core::train::TrainScope;
use rationale_core::world::{generate_world, split_zero_shot};
use rationale_core::{
    AblationKind, DualEncoderParams, Error, ModelConfig, PromptMode, Result, World, WorldSpec,
};

#[derive(Parser)]
#[command(
    name = "rationale",
    version,
    about = "Rationale-first explainable recognition experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args)]
struct Common {
    /// Run config (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pairs kept before voting.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// ECOR or AB1..AB6.
    #[arg(long, global = true)]
    ablation: Option<AblationKind>,
    /// Visual prompt mode: shallow or deep.
    #[arg(long, global = true)]
    mode: Option<PromptMode>,
    /// Output root directory.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// World preset: tiny, small or large.
    #[arg(long, global = true)]
    preset: Option<WorldPreset>,
    /// Saved world directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write it to `<out>/worlds/<name>`.
    Generate {
        /// World spec file (.toml or .json); the preset is used otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        /// Also write the disjoint-category partner world with this many
        /// categories.
        #[arg(long)]
        zero_shot: Option<usize>,
    },
    /// Train and write the log, audit and per-epoch checkpoints.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        /// prompts, prompts_and_heads, frozen_text_backbone or all.
        #[arg(long)]
        scope: Option<TrainScope>,
    },
    /// Evaluate a checkpoint on a world split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the train split instead of the test split.
        #[arg(long)]
        train_split: bool,
        /// Also dump joint tables for this many test images.
        #[arg(long)]
        dump_tables: Option<usize>,
    },
    /// Train and evaluate the full method and all six ablations.
    Ablate,
    /// Train on world A, evaluate trained and untrained models on A and B.
    Zeroshot {
        /// Categories in world B.
        #[arg(long)]
        b_categories: Option<usize>,
    },
    /// Finite-difference check of the full training loss on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.k {
        cfg.k = Some(v);
    }
    if let Some(v) = c.ablation {
        cfg.train.ablation = v;
    }
    if let Some(v) = c.mode {
        cfg.model.prompt_mode = v;
    }
    if let Some(v) = &c.run_id {
        cfg.run_id = v.clone();
    }
    if let Some(v) = c.preset {
        cfg.preset = v;
        cfg.world = None;
    }
    if let Some(v) = &c.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = c.epochs {
        cfg.train.epochs = v;
    }
    if c.out.is_some() || cfg.output_dir.is_none() {
        cfg.output_dir = Some(output_root(c.out.as_deref()));
    }
    Ok(cfg)
}

fn root(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| output_root(None))
}

fn print_report(report: &RunReport, dir: &Path) {
    print!("{}", results_table(&report.rows()));
    println!("wrote {}", dir.display());
}

fn cmd_generate(
    cfg: &RunConfig,
    spec: Option<&Path>,
    name: Option<String>,
    zero_shot: Option<usize>,
) -> Result<()> {
    let spec: WorldSpec = match spec {
        Some(p) => load_document(p)?,
        None => cfg.world_spec(),
    };
    let name = name.unwrap_or_else(|| format!("{}-s{}", cfg.preset.label(), spec.seed));
    let base = root(cfg).join("worlds");
    let worlds: Vec<(String, World)> = match zero_shot {
        Some(n) => {
            let (a, b) = split_zero_shot(&spec, n)?;
            vec![(format!("{name}-A"), a), (format!("{name}-B"), b)]
        }
        None => vec![(name, generate_world(&spec)?)],
    };
    for (n, w) in worlds {
        let dir = base.join(&n);
        let manifest = w.save(&dir)?;
        println!(
            "{n}: {} train, {} test, hash {} -> {}",
            w.train.len(),
            w.test.len(),
            manifest.hash,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_train(
    cfg: &mut RunConfig,
    resume: Option<&Path>,
    lr: Option<f64>,
    scope: Option<TrainScope>,
) -> Result<()> {
    if let Some(v) = lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = scope {
        cfg.train.scope = v;
    }
    let cfg = cfg.effective()?;
    let world = cfg.load_world()?;
    let dir = root(&cfg).join(&cfg.run_id);
    let resume = match resume {
        Some(p) => {
            let (params, state) = DualEncoderParams::load(p, None)?;
            let state = state
                .ok_or_else(|| Error::Config(format!("{} holds no trainer state", p.display())))?;
            Some((params, state))
        }
        None => None,
    };
    let run = run_training(&cfg, &world, Some(&dir), resume)?;
    for r in &run.log {
        println!(
            "epoch {:>3}  term1 {:>10}  term2 {:>10}  total {:.6}",
            r.epoch,
            r.term1.map_or("-".into(), |v| format!("{v:.6}")),
            r.term2.map_or("-".into(), |v| format!("{v:.6}")),
            r.total
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    train_split: bool,
    dump: Option<usize>,
) -> Result<()> {
    let cfg = cfg.effective()?;
    let world = cfg.load_world()?;
    let (params, _) = DualEncoderParams::load(checkpoint, None)?;
    let expected = ModelConfig {
        init_seed: params.config().init_seed,
        ..cfg.model.model_config(&world, cfg.seed)
    };
    if params.config() != &expected {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model or world: {:?} vs {:?}",
            checkpoint.display(),
            params.config(),
            expected
        )));
    }
    label_space(&world, params.config().context_len)?;
    let quad = evaluate_on(&cfg, &params, &world, !train_split)?;
    let name = cfg.dataset_name();
    let split = if train_split { "train" } else { "test" };
    let mut report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        loss_curve: Vec::new(),
        cells: vec![ReportCell {
            train_world: name.clone(),
            eval_world: format!("{name}:{split}"),
            ablation: cfg.train.ablation,
            k: cfg.k(),
            quad,
        }],
        rationale_rule: RATIONALE_RULE.into(),
        wall_ms: 0,
        artifact_hashes: Default::default(),
    };
    let dir = root(&cfg).join(&cfg.run_id).join("eval");
    write_report(&dir, &mut report, "results")?;
    if let Some(n) = dump {
        let csv = dump_tables(&cfg, &params, &world, n)?;
        let path = dir.join("joint_tables.csv");
        std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
    }
    print_report(&report, &dir);
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, epsilon: f64, tolerance: f64) -> Result<()> {
    let cfg = cfg.effective()?;
    let report = tiny_gradient_check(cfg.seed, cfg.train.ablation, epsilon)?;
    for a in &report.arrays {
        println!(
            "{:<32} {:>6} entries  max rel error {:.3e}",
            a.name, a.entries, a.max_rel_error
        );
    }
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e} (tolerance {tolerance:e}, epsilon {epsilon:e})");
    let dir = root(&cfg).join(&cfg.run_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("gradcheck.json");
    let doc = serde_json::json!({ "format_version": 1, "report": report });
    std::fs::write(&path, doc.to_string()).map_err(|e| Error::Io { path, source: e })?;
    if report.passes(tolerance) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: {worst:.3e} > {tolerance:e}"
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Generate {
            spec,
            name,
            zero_shot,
        } => cmd_generate(&cfg, spec.as_deref(), name, zero_shot),
        Command::Train { resume, lr, scope } => cmd_train(&mut cfg, resume.as_deref(), lr, scope),
        Command::Eval {
            checkpoint,
            train_split,
            dump_tables,
        } => cmd_eval(&cfg, &checkpoint, train_split, dump_tables),
        Command::Ablate => {
            let dir = root(&cfg).join(&cfg.run_id).join("ablation");
            let report = ablation_matrix(&cfg, Some(&dir))?;
            print_report(&report, &dir);
            Ok(())
        }
        Command::Zeroshot { b_categories } => {
            if let Some(n) = b_categories {
                cfg.zero_shot_categories = n;
            }
            let dir = root(&cfg).join(&cfg.run_id).join("zeroshot");
            let report = zero_shot_grid(&cfg, Some(&dir))?;
            print_report(&report, &dir);
            Ok(())
        }
        Command::Gradcheck { epsilon, tolerance } => cmd_gradcheck(&cfg, epsilon, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
