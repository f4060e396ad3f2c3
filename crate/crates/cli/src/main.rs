//! `kvfuse`: dataset synthesis, training, generation-based evaluation, the
//! gold-position sweep, token-level match, and the logit-level permutation
//! check, all driven by one TOML config plus flag overrides (flags win).
//!
//! Exit codes: 0 success, 1 usage/config error, 2 contract or invariance
//! failure, 3 IO error.

mod config;

use std::fs::OpenOptions;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use kvfuse_core::data::{load_jsonl, save_jsonl, synth_generate};
use kvfuse_core::eval::{
    evaluate, logit_invariance, position_sweep, write_report, EvalConfig, EvalMode, EvalReport,
    ReportFormat,
};
use kvfuse_core::model::{load_model_file, save_model_file, Model};
use kvfuse_core::train::{
    load_train_state_file, save_train_state_file, train, TrainSinks, TrainState,
};
use kvfuse_core::Error;

#[derive(Parser)]
#[command(name = "kvfuse", version, about = "Order-invariant KV-cache fusion at toy scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// TOML config file; omitted fields take documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed override; every subsystem derives its stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (reports, checkpoints, resolved config).
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Overwrite existing dataset files.
    #[arg(long, global = true)]
    force: bool,

    /// Training steps override.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Evaluate only the first N instances.
    #[arg(long, global = true)]
    limit: Option<usize>,

    /// Passages per instance.
    #[arg(long, global = true)]
    n_passages: Option<usize>,

    /// Evaluation mode.
    #[arg(long, global = true, value_parser = ["fusion", "baseline"])]
    mode: Option<String>,

    /// Gold positions for the sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    positions: Option<Vec<usize>>,

    /// Seed for the shuffled arrangement.
    #[arg(long, global = true)]
    shuffle_seed: Option<u64>,

    /// Generation length cap.
    #[arg(long, global = true)]
    max_new: Option<usize>,

    /// Dataset file override (relative paths resolve under paths.data_dir).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Model checkpoint override (default: OUT/checkpoint.kvf).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/dev/test JSONL datasets.
    Synth,
    /// Train the fused-cache decoder against the frozen prefill decoder.
    Train {
        /// Resume from OUT/checkpoint.kvf + OUT/train_state.kvf.
        #[arg(long)]
        resume: bool,
        /// Checkpoint every N steps (0 = final only).
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Exact-match evaluation in stored passage order.
    Eval,
    /// Gold-position sweep plus the shuffled setting.
    Sweep,
    /// Token-level match between first-position and shuffled outputs.
    Tlm,
    /// Logit-level permutation-invariance check.
    Invariance {
        /// Number of random permutations to test.
        #[arg(long, default_value_t = 100)]
        permutations: usize,
        /// Max-abs logit difference tolerance.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f32,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 1,
        Error::Contract(_)
        | Error::Vocabulary { .. }
        | Error::Position(_)
        | Error::ShapeMismatch { .. } => 2,
        Error::Io(_) | Error::Checkpoint(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes help/version through the error path; those exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(limit) = cli.limit {
        cfg.eval.limit = Some(limit);
    }
    if let Some(n) = cli.n_passages {
        cfg.data.n_passages = n;
        cfg.train.n_passages = n;
    }
    if let Some(mode) = &cli.mode {
        cfg.eval.mode = mode.parse()?;
    }
    if let Some(positions) = &cli.positions {
        cfg.eval.positions = positions.clone();
    }
    if let Some(s) = cli.shuffle_seed {
        cfg.eval.shuffle_seed = Some(s);
    }
    if let Some(m) = cli.max_new {
        cfg.eval.max_new = m;
    }
    if let Some(data) = &cli.data {
        cfg.eval.dataset = data.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve_config(&cli)?;
    cfg.archive(&cli.out)?;
    match &cli.cmd {
        Cmd::Synth => cmd_synth(&cli, &cfg),
        Cmd::Train {
            resume,
            checkpoint_every,
        } => cmd_train(&cli, &cfg, *resume, *checkpoint_every),
        Cmd::Eval => cmd_eval(&cli, &cfg),
        Cmd::Sweep => cmd_sweep(&cli, &cfg),
        Cmd::Tlm => cmd_tlm(&cli, &cfg),
        Cmd::Invariance {
            permutations,
            threshold,
        } => cmd_invariance(&cli, &cfg, *permutations, *threshold),
    }
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.paths.data_dir)?;
    let splits = [
        ("train", cfg.data.train_count),
        ("dev", cfg.data.dev_count),
        ("test", cfg.data.test_count),
    ];
    for (split, count) in splits {
        let path = cfg.paths.data_dir.join(format!("{split}.jsonl"));
        if path.exists() && !cli.force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        let data = synth_generate(
            cfg.synth_seed(split),
            count,
            cfg.data.n_passages,
            cfg.data.distractor_style,
            cfg.data.unanswerable_rate,
        )?;
        save_jsonl(&data, &path)?;
        let unanswerable = data.iter().filter(|i| i.gold.is_none()).count();
        println!(
            "wrote {} instances ({} unanswerable) to {}",
            data.len(),
            unanswerable,
            path.display()
        );
    }
    Ok(())
}

/// The frozen prefill decoder: always re-derived from (config, root seed);
/// it starts identical to the trainable decoder.
fn prefill_decoder(cfg: &RunConfig) -> Result<Model, Error> {
    let mut d_p = Model::init(cfg.model.clone(), cfg.model_seed())?;
    d_p.freeze();
    Ok(d_p)
}

fn load_decoder(cli: &Cli, cfg: &RunConfig) -> Result<Model, Error> {
    let path = cli
        .checkpoint
        .clone()
        .unwrap_or_else(|| cli.out.join("checkpoint.kvf"));
    if path.exists() {
        let mut model = load_model_file(&path)?;
        model.set_frozen_flag(false);
        Ok(model)
    } else {
        println!(
            "note: no checkpoint at {}, using randomly initialized weights",
            path.display()
        );
        Model::init(cfg.model.clone(), cfg.model_seed())
    }
}

fn cmd_train(
    cli: &Cli,
    cfg: &RunConfig,
    resume: bool,
    checkpoint_every: Option<usize>,
) -> Result<(), Error> {
    let data_path = cli
        .data
        .as_ref()
        .map(|p| cfg.dataset_path(p))
        .unwrap_or_else(|| cfg.paths.data_dir.join("train.jsonl"));
    let dataset = load_jsonl(&data_path)?;
    let mut train_cfg = cfg.resolved_train();
    if let Some(every) = checkpoint_every {
        train_cfg.checkpoint_every = every;
    }

    let d_p = prefill_decoder(cfg)?;
    let ckpt_path = cli.out.join("checkpoint.kvf");
    let state_path = cli.out.join("train_state.kvf");
    let (mut d_t, mut state) = if resume {
        let mut model = load_model_file(&ckpt_path)?;
        model.set_frozen_flag(false);
        let state = load_train_state_file(&state_path, &model)?;
        println!("resuming from step {}", state.step);
        (model, state)
    } else {
        let d_t = Model::init(cfg.model.clone(), cfg.model_seed())?;
        let state = TrainState::new(&d_t, &train_cfg);
        (d_t, state)
    };

    let metrics_path = cli.out.join("metrics.jsonl");
    let mut metrics = if resume {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&metrics_path)?
    };
    let mut sinks = TrainSinks {
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(&cli.out),
    };
    let summary = train(&d_p, &mut d_t, &dataset, &train_cfg, &mut state, &mut sinks, None)?;

    save_model_file(&d_t, &ckpt_path)?;
    let names: Vec<String> = d_t.named_params().iter().map(|(n, _)| n.clone()).collect();
    save_train_state_file(&state, &names, &state_path)?;
    println!(
        "trained to step {} (loss {:.4}) in {:.1}s; checkpoint at {}",
        summary.steps_run,
        summary.final_loss,
        summary.wall_s,
        ckpt_path.display()
    );
    Ok(())
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        mode: cfg.eval.mode,
        positions: cfg.eval.positions.clone(),
        shuffle_seed: cfg.shuffle_seed(),
        max_new: cfg.eval.max_new,
        limit: cfg.eval.limit,
        n: cfg.train.n,
    }
}

fn load_eval_inputs(
    cli: &Cli,
    cfg: &RunConfig,
) -> Result<(Model, Model, Vec<kvfuse_core::QAInstance>), Error> {
    let d_p = prefill_decoder(cfg)?;
    let d_t = load_decoder(cli, cfg)?;
    let dataset = load_jsonl(cfg.dataset_path(&cfg.eval.dataset))?;
    Ok((d_p, d_t, dataset))
}

fn emit_report(cli: &Cli, name: &str, report: &EvalReport) -> Result<(), Error> {
    write_report(
        report,
        cli.out.join(format!("{name}.json")),
        ReportFormat::Json,
    )?;
    write_report(
        report,
        cli.out.join(format!("{name}.csv")),
        ReportFormat::Csv,
    )?;
    Ok(())
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let (d_p, d_t, dataset) = load_eval_inputs(cli, cfg)?;
    let ec = eval_config(cfg);
    let report = evaluate(&d_p, &d_t, &dataset, &ec)?;
    emit_report(cli, "eval_report", &report)?;
    let s = &report.settings[0];
    println!(
        "em accuracy {:.4} ({}/{} instances, {:.1}s)",
        s.accuracy, s.correct, s.evaluated, report.wall_s
    );
    Ok(())
}

fn cmd_sweep(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let (d_p, d_t, dataset) = load_eval_inputs(cli, cfg)?;
    let ec = eval_config(cfg);
    let report = position_sweep(&d_p, &d_t, &dataset, &ec)?;
    emit_report(cli, "sweep_report", &report)?;
    for s in &report.settings {
        println!(
            "{:>9}: accuracy {:.4} ({}/{})",
            s.setting, s.accuracy, s.correct, s.evaluated
        );
    }
    println!(
        "tlm {:.4}, near-tie exclusions {}, skipped {}, wall {:.1}s",
        report.tlm.unwrap_or(f64::NAN),
        report.tie_excluded,
        report.skipped,
        report.wall_s
    );
    if ec.mode == EvalMode::Fusion && !report.invariance_ok {
        return Err(Error::Contract(
            "position sweep: fusion predictions differ across gold positions".into(),
        ));
    }
    Ok(())
}

fn cmd_tlm(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let (d_p, d_t, dataset) = load_eval_inputs(cli, cfg)?;
    let mut ec = eval_config(cfg);
    ec.positions = vec![0];
    let report = position_sweep(&d_p, &d_t, &dataset, &ec)?;
    emit_report(cli, "tlm_report", &report)?;
    println!(
        "tlm {:.4} over {} instances ({} near-tie exclusions, {} skipped)",
        report.tlm.unwrap_or(f64::NAN),
        report.settings[0].evaluated,
        report.tie_excluded,
        report.skipped
    );
    Ok(())
}

fn cmd_invariance(
    cli: &Cli,
    cfg: &RunConfig,
    permutations: usize,
    threshold: f32,
) -> Result<(), Error> {
    let d_p = prefill_decoder(cfg)?;
    let d_t = load_decoder(cli, cfg)?;
    let dataset_path = cfg.dataset_path(&cfg.eval.dataset);
    let instance = if dataset_path.exists() {
        load_jsonl(&dataset_path)?
            .into_iter()
            .find(|i| i.gold.is_some())
            .ok_or_else(|| Error::Contract("dataset has no answerable instance".into()))?
    } else {
        synth_generate(
            cfg.synth_seed("invariance"),
            1,
            cfg.data.n_passages,
            cfg.data.distractor_style,
            0.0,
        )?
        .remove(0)
    };
    let report = logit_invariance(
        &d_p,
        &d_t,
        &instance,
        cfg.train.n,
        permutations,
        cfg.seed,
        threshold,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serialization: {e}")))?;
    std::fs::write(cli.out.join("invariance_report.json"), json + "\n")?;
    println!(
        "max abs logit diff {:.3e} over {} permutations (threshold {:.1e})",
        report.max_abs_diff, report.permutations, report.threshold
    );
    if !report.ok {
        return Err(Error::Contract(format!(
            "logit invariance violated: {:.3e} >= {:.1e}",
            report.max_abs_diff, report.threshold
        )));
    }
    Ok(())
}
