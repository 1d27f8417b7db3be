//! `cft`: data generation, training, evaluation, ablation, λ sweep, gradient check
//! and attention visualization for the dual-stream fundus transformer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cft_core::config::RunConfig;
use cft_core::experiment::{ablate, format_rows, format_sweep, sweep_lambda};
use cft_core::metrics::EvalReport;
use cft_core::model::Cft;
use cft_core::parallel;
use cft_core::rollout::{render_pgm, rollout_encoder, StreamId};
use cft_core::synth::{
    generate_dataset, generate_sample, load_dataset, save_dataset, stratified_split, Dataset,
};
use cft_core::trainer::{
    evaluate, grad_check, load_checkpoint, save_checkpoint, save_tensors, train, EpochRecord,
    ModelPredictor,
};
use cft_core::{Error, Float, Precision};

#[derive(Parser)]
#[command(
    name = "cft",
    version,
    about = "Dual-stream fundus transformer with cross-modal attention fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData(Common),
    /// Train the configured model and save a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the validation split.
    Eval(Common),
    /// Comparison and loss/fusion ablation tables.
    Ablate(Common),
    /// Validation metrics across loss weights λ.
    SweepLambda(Common),
    /// Compare analytic gradients with central finite differences (64-bit).
    Gradcheck(Common),
    /// Attention rollout heatmaps of one validation sample.
    Visualize(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Run single-threaded so every number is reproducible bit for bit.
    #[arg(long)]
    strict: bool,
    /// Floating-point width for training and inference.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

/// Failure category mapped to the exit status.
enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let reason = e.to_string();
            let first = reason
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!(
                "{}",
                json!({"status": "error", "kind": "config", "field": "argv", "reason": first})
            );
            return ExitCode::from(1);
        }
    };
    parallel::init_threads_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            let field = match &e {
                Error::InvalidConfig { field, .. } => field.clone(),
                _ => String::new(),
            };
            eprintln!(
                "{}",
                json!({"status": "error", "kind": "config", "field": field, "reason": e.to_string()})
            );
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!(
                "{}",
                json!({"status": "error", "kind": "runtime", "reason": e.to_string()})
            );
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CmdResult {
    let (name, common) = match &command {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::SweepLambda(c) => ("sweep-lambda", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Visualize(c) => ("visualize", c),
    };
    let cfg = resolve_config(common)?;
    parallel::set_strict(common.strict);
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    write(&out.join(format!("{name}.config.json")), cfg.echo())?;

    let started = Instant::now();
    match command {
        Command::GenData(_) => gen_data(&cfg)?,
        Command::Gradcheck(_) => gradcheck(&cfg)?,
        _ => match cfg.train.precision {
            Precision::F32 => dispatch::<f32>(name, &cfg)?,
            Precision::F64 => dispatch::<f64>(name, &cfg)?,
        },
    }
    eprintln!(
        "{name}: done in {:.1}s, artifacts in {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn dispatch<T: Float>(name: &str, cfg: &RunConfig) -> CmdResult {
    match name {
        "train" => train_cmd::<T>(cfg),
        "eval" => eval_cmd::<T>(cfg),
        "ablate" => ablate_cmd::<T>(cfg),
        "sweep-lambda" => sweep_cmd::<T>(cfg),
        "visualize" => visualize_cmd::<T>(cfg),
        _ => unreachable!("dispatched commands are listed above"),
    }
}

fn resolve_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Config(Error::InvalidConfig {
                    field: "--config".into(),
                    reason: format!("cannot read {}: {e}", path.display()),
                })
            })?;
            RunConfig::from_json_str(&text).map_err(|e| Failure::Config(as_config(e)))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = &c.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(seed) = c.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(p) = &c.precision {
        cfg.train.precision = if p == "64" {
            Precision::F64
        } else {
            Precision::F32
        };
    }
    cfg.validate().map_err(|e| Failure::Config(as_config(e)))?;
    Ok(cfg)
}

/// Every failure while reading the config is reported as a config error.
fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidConfig { .. } => e,
        other => Error::InvalidConfig {
            field: String::new(),
            reason: other.to_string(),
        },
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(e.into()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write(path, text + "\n")
}

fn write_metrics(cfg: &RunConfig, command: &str, value: &impl serde::Serialize) -> CmdResult {
    write_json(
        &cfg.output.dir.join(format!("{command}.metrics.json")),
        value,
    )
}

fn checkpoint<T: Float>(
    cfg: &RunConfig,
) -> std::result::Result<cft_core::trainer::Checkpoint<T>, Failure> {
    let dir = cfg.checkpoint_dir();
    load_checkpoint::<T>(&dir).map_err(|e| {
        Failure::Runtime(Error::Checkpoint(format!(
            "cannot load {}: {e}",
            dir.display()
        )))
    })
}

fn dataset(cfg: &RunConfig) -> std::result::Result<Dataset, Failure> {
    let ds = match &cfg.output.dataset {
        Some(path) => load_dataset(path)?,
        None => generate_dataset(&cfg.data)?,
    };
    Ok(ds)
}

fn splits(cfg: &RunConfig) -> std::result::Result<(Dataset, Dataset), Failure> {
    Ok(stratified_split(
        &dataset(cfg)?,
        cfg.train.train_frac,
        cfg.train.seed,
    )?)
}

fn progress(label: &str, r: &EpochRecord) {
    eprintln!(
        "{label} epoch {:>3} lr {:.3e} loss {:.4} val kappa {:.4} acc {:.4}",
        r.epoch, r.lr, r.train_loss, r.val.kappa, r.val.accuracy
    );
}

fn report_table(title: &str, r: &EvalReport) -> String {
    format!(
        "{title}\nKappa  Acc    F1\n{:<6.2} {:<6.2} {:.2}\n",
        100.0 * r.kappa,
        100.0 * r.accuracy,
        100.0 * r.macro_f1
    )
}

fn gen_data(cfg: &RunConfig) -> CmdResult {
    let ds = generate_dataset(&cfg.data)?;
    let path = cfg.output.dir.join("dataset.cftd");
    save_dataset(&path, &ds)?;
    let metrics = json!({
        "n_samples": ds.len(),
        "height": ds.height,
        "width": ds.width,
        "channels": ds.channels,
        "k": ds.k,
        "label_histogram": ds.label_histogram(),
        "file": "dataset.cftd",
    });
    write_metrics(cfg, "gen-data", &metrics)?;
    println!("{}", serde_json::to_string(&metrics).map_err(Error::from)?);
    Ok(())
}

fn train_cmd<T: Float>(cfg: &RunConfig) -> CmdResult {
    let (tr, va) = splits(cfg)?;
    let state = train::<T>(&tr, &va, cfg.model.clone(), &cfg.train)?;
    save_checkpoint(&cfg.checkpoint_dir(), &state, &cfg.train)?;
    let best = state.best.as_ref().ok_or(Error::Empty("training epochs"))?;
    let metrics = json!({
        "best_epoch": best.epoch,
        "best": best.report,
        "history": state.history,
    });
    write_metrics(cfg, "train", &metrics)?;
    let table = report_table(
        &format!("best validation (epoch {})", best.epoch),
        &best.report,
    );
    write(&cfg.output.dir.join("train.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval_cmd<T: Float>(cfg: &RunConfig) -> CmdResult {
    let ckpt = checkpoint::<T>(cfg)?;
    let (_, va) = splits(cfg)?;
    let model = ckpt.state.best_model();
    let report = evaluate(
        &ModelPredictor {
            model: &model,
            setup: ckpt.train_config.loss_setup(),
        },
        &va,
    )?;
    write_metrics(cfg, "eval", &report)?;
    let table = report_table("validation", &report);
    write(&cfg.output.dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd<T: Float>(cfg: &RunConfig) -> CmdResult {
    let (tr, va) = splits(cfg)?;
    let report = ablate::<T>(cfg, &tr, &va, progress)?;
    write_metrics(cfg, "ablate", &report)?;
    let table = format!(
        "comparison\n{}\nloss/fusion ablation\n{}",
        format_rows(&report.comparison),
        format_rows(&report.ablation)
    );
    write(&cfg.output.dir.join("ablate.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd<T: Float>(cfg: &RunConfig) -> CmdResult {
    let (tr, va) = splits(cfg)?;
    let report = sweep_lambda::<T>(cfg, &tr, &va, progress)?;
    write_metrics(cfg, "sweep-lambda", &report)?;
    let table = format_sweep(&report);
    write(&cfg.output.dir.join("sweep-lambda.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> CmdResult {
    let model = Cft::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
    let sample = generate_sample(
        &cfg.data,
        cfg.gradcheck.seed as usize % cfg.data.n_samples.max(1),
    );
    let report = grad_check(&model, &sample, &cfg.train.loss_setup(), &cfg.gradcheck)?;
    // Wall time varies between runs; keep it out of the metrics file.
    let mut metrics = serde_json::to_value(&report).map_err(Error::from)?;
    if let Value::Object(m) = &mut metrics {
        m.remove("seconds");
    }
    write_metrics(cfg, "gradcheck", &metrics)?;
    let summary = format!(
        "coords {}  params {}/{}  max rel err {:.3e}  median {:.3e}  within {:.1e}: {:.2}%  worst {}[{}]  {:.2}s\n",
        report.n_coords,
        report.params_covered,
        report.n_params,
        report.max_rel_err,
        report.median_rel_err,
        report.coord_tol,
        100.0 * report.frac_within,
        report.worst.param,
        report.worst.index,
        report.seconds
    );
    write(&cfg.output.dir.join("gradcheck.txt"), &summary)?;
    print!("{summary}");
    report.check(cfg.gradcheck.max_tol)?;
    Ok(())
}

fn visualize_cmd<T: Float>(cfg: &RunConfig) -> CmdResult {
    let ckpt = checkpoint::<T>(cfg)?;
    let model = ckpt.state.best_model();
    let (_, va) = splits(cfg)?;
    let idx = cfg.visualize.sample;
    let sample = va.samples.get(idx).ok_or_else(|| Error::InvalidConfig {
        field: "visualize.sample".into(),
        reason: format!("{idx} is beyond the {} validation samples", va.len()),
    })?;
    let mut g = cft_core::graph::Graph::new();
    let out = model.forward(&mut g, &sample.cfp.cast(), &sample.ifp.cast())?;

    let mut maps = Vec::new();
    let mut importance = serde_json::Map::new();
    for (stream, attn, s) in [
        (StreamId::Cfp, &out.attn_cf, &model.config.cfp),
        (StreamId::Ifp, &out.attn_if, &model.config.ifp),
    ] {
        if attn.is_empty() {
            continue;
        }
        let tag = match stream {
            StreamId::Cfp => "cfp",
            StreamId::Ifp => "ifp",
        };
        let r = rollout_encoder(attn, stream)?;
        let grid = (s.height / s.patch, s.width / s.patch);
        write(
            &cfg.output.dir.join(format!("rollout_{tag}.pgm")),
            render_pgm(&r, grid, cfg.visualize.upscale)?,
        )?;
        importance.insert(tag.into(), json!(r.importance));
        for (i, a) in attn.iter().enumerate() {
            maps.push((format!("{tag}/block{i}"), a.cast::<f64>()));
        }
    }
    for (name, a) in &out.cfa_maps {
        maps.push((format!("cfa/{name}"), a.cast::<f64>()));
    }
    let named: Vec<(String, &cft_core::Tensor<f64>)> =
        maps.iter().map(|(n, t)| (n.clone(), t)).collect();
    save_tensors(
        &cfg.output.dir,
        "attention",
        &named,
        &json!({"sample": idx, "label": sample.label}),
    )?;
    let metrics = json!({"sample": idx, "label": sample.label, "importance": importance});
    write_metrics(cfg, "visualize", &metrics)?;
    Ok(())
}
