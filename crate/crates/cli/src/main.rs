use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfwe::checkpoint::{self, check_compatible_labeled, Checkpoint};
use dfwe::evaluation::{
    evaluate_builtin, EvalError, EvalRequest, EvalResponse, LabeledDataset, MetricKind,
};
use dfwe::pipeline::{
    base_checkpoint, emit_report, finetune_experts, load_family, render, run_dfwe, save_family,
    train_experts, FamilySplits, ManifestEntry, PipelineError, ReportFormat, RunConfig, RunReport,
    StageError,
};
use dfwe::simplex::{optimize_mixture, MixtureError, NelderMeadConfig};
use dfwe::toybench::{gen_task_family, TrainOutcome};
use dfwe::weight_space::{interpolate, MixtureWeights};

#[derive(Parser)]
#[command(
    name = "dfwe",
    version,
    about = "Derivative-free weight-space ensembling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task family and write its splits.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the n+2 stage-1 experts from a shared base.
    TrainExperts {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory written by `gen`.
        #[arg(long)]
        family: PathBuf,
    },
    /// Finetune trained experts on the target task.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        family: PathBuf,
        /// Directory written by `train-experts`.
        #[arg(long)]
        experts: PathBuf,
    },
    /// Interpolate checkpoints with explicit weights.
    Merge {
        /// Comma-separated mixture weights, one per checkpoint.
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Search mixture weights that maximize a dev metric.
    Optimize {
        /// Directory with an `experts.json` manifest (from `finetune`).
        #[arg(long)]
        experts: PathBuf,
        /// Dev split to score candidates on.
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "accuracy")]
        metric: MetricKind,
        #[arg(long, default_value_t = 40)]
        max_iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long, required_unless_present = "stdio")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "stdio")]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "accuracy")]
        metric: MetricKind,
        /// Answer one JSON request from stdin, as an external evaluator.
        #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
        stdio: bool,
    },
    /// Run the whole experiment: baseline and ensembling arms, then reports.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a saved report.
    Report {
        /// A `report.json` file.
        input: PathBuf,
        /// Print one format to stdout instead of writing all three.
        #[arg(long)]
        format: Option<ReportFormat>,
        /// Where to write report.{json,txt,csv}; defaults to the input's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed. `run` needs one here, in the config file, or via `--set`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, seed_required: bool) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        match self.seed {
            Some(seed) => cfg.seed = seed,
            None if seed_required && !self.seed_in_config()? => {
                return Err(PipelineError::Config(
                    "a seed is required: pass --seed or set it in the config file".into(),
                )
                .into())
            }
            None => {}
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed_in_config(&self) -> Result<bool, CliError> {
        if self
            .overrides
            .iter()
            .any(|o| o.split('=').next().is_some_and(|k| k.trim() == "seed"))
        {
            return Ok(true);
        }
        let Some(path) = &self.config else {
            return Ok(false);
        };
        let text = fs::read_to_string(path).map_err(|e| StageError::Io {
            path: path.clone(),
            source: e,
        })?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Ok(table.contains_key("seed"))
    }
}

#[derive(Debug)]
enum CliError {
    Pipeline(PipelineError),
    Stage(StageError),
    Usage(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

macro_rules! stage_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Stage(e.into())
            }
        }
    )*};
}

stage_error_from!(
    StageError,
    dfwe::checkpoint::CheckpointError,
    dfwe::evaluation::EvalError,
    dfwe::simplex::SimplexError,
    dfwe::toybench::ToyError,
    dfwe::weight_space::WeightError
);

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) => e.exit_code() as u8,
            CliError::Stage(e) if e.is_protocol() => 4,
            CliError::Stage(_) => 3,
            CliError::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Stage(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gen { config } => gen(&config.resolve(false)?),
        Command::TrainExperts { config, family } => {
            stage1(&config.resolve(false)?, &load_family(&family)?)
        }
        Command::Finetune {
            config,
            family,
            experts,
        } => stage2(&config.resolve(false)?, &load_family(&family)?, &experts),
        Command::Merge {
            weights,
            out,
            checkpoints,
        } => merge(&weights, &out, &checkpoints),
        Command::Optimize {
            experts,
            dev,
            metric,
            max_iterations,
            out,
        } => optimize(&experts, &dev, &metric, max_iterations, &out),
        Command::Evaluate { stdio: true, .. } => serve_one_request(),
        Command::Evaluate {
            checkpoint,
            dataset,
            metric,
            ..
        } => {
            let c = checkpoint::load(&checkpoint.expect("required by clap"))?;
            let data = LabeledDataset::load(&dataset.expect("required by clap"))?;
            let score = evaluate_builtin(&c, &data, &metric)?;
            println!(
                "{}",
                serde_json::json!({ "score": score, "metric": metric.to_string() })
            );
            Ok(())
        }
        Command::Run { config } => {
            let cfg = config.resolve(true)?;
            let report = run_dfwe(&cfg)?;
            print!("{}", render(&report, ReportFormat::Text));
            Ok(())
        }
        Command::Report {
            input,
            format,
            out_dir,
        } => {
            let report = RunReport::load(&input)?;
            match format {
                Some(f) => print!("{}", render(&report, f)),
                None => {
                    let dir = out_dir
                        .or_else(|| input.parent().map(Path::to_path_buf))
                        .unwrap_or_default();
                    for p in emit_report(&report, &dir)? {
                        println!("{}", p.display());
                    }
                }
            }
            Ok(())
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.prepare_output_dir()?;
    Ok(&cfg.output_dir)
}

fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let family_cfg = cfg.family_config();
    let family = gen_task_family(&family_cfg).map_err(StageError::from)?;
    save_family(&FamilySplits::from(&family), Some(&family_cfg), dir)?;
    println!("{}", dir.display());
    Ok(())
}

const EXPERTS_INDEX: &str = "experts.json";

fn write_expert(
    dir: &Path,
    stage: &str,
    label: &str,
    out: &TrainOutcome,
) -> Result<ManifestEntry, CliError> {
    let sub = dir.join(stage);
    fs::create_dir_all(&sub).map_err(|e| StageError::Io {
        path: sub.clone(),
        source: e,
    })?;
    let path = sub.join(format!("{label}.ckpt"));
    checkpoint::save(&out.checkpoint, &path)?;
    let mut log = Vec::new();
    out.write_log(&mut log).expect("in-memory write");
    let log_path = sub.join(format!("{label}.log.jsonl"));
    fs::write(&log_path, log).map_err(|e| StageError::Io {
        path: log_path,
        source: e,
    })?;
    Ok(ManifestEntry {
        role: stage.to_string(),
        label: label.to_string(),
        path: format!("{stage}/{label}.ckpt"),
        sha256: checkpoint::file_hash(&path)?,
    })
}

fn write_index(dir: &Path, entries: &[ManifestEntry]) -> Result<(), CliError> {
    let path = dir.join(EXPERTS_INDEX);
    let json = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| StageError::Io { path, source: e })?;
    Ok(())
}

fn read_index(dir: &Path) -> Result<Vec<(String, Checkpoint)>, CliError> {
    let path = dir.join(EXPERTS_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| StageError::Io {
        path: path.clone(),
        source: e,
    })?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    entries
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.path);
            if checkpoint::file_hash(&p)? != e.sha256 {
                return Err(CliError::Usage(format!(
                    "{} does not match its recorded hash",
                    p.display()
                )));
            }
            Ok((e.label, checkpoint::load(&p)?))
        })
        .collect()
}

fn stage1(cfg: &RunConfig, family: &FamilySplits) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let base = base_checkpoint(cfg, family)?;
    checkpoint::save(&base, &dir.join("base.ckpt"))?;
    let jobs = train_experts(cfg, family, &base)?;
    let entries = jobs
        .iter()
        .map(|j| write_expert(dir, "stage1", &j.label, &j.outcome))
        .collect::<Result<Vec<_>, _>>()?;
    write_index(dir, &entries)?;
    for e in &entries {
        println!("{}  {}", e.sha256, e.path);
    }
    Ok(())
}

fn stage2(cfg: &RunConfig, family: &FamilySplits, experts: &Path) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let inputs = read_index(experts)?;
    let outs = finetune_experts(cfg, family, &inputs)?;
    let entries = inputs
        .iter()
        .zip(&outs)
        .map(|((label, _), out)| write_expert(dir, "stage2", label, out))
        .collect::<Result<Vec<_>, _>>()?;
    write_index(dir, &entries)?;
    for e in &entries {
        println!("{}  {}", e.sha256, e.path);
    }
    Ok(())
}

fn merge(weights: &[f64], out: &Path, paths: &[PathBuf]) -> Result<(), CliError> {
    let members = paths
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = paths
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let theta = check_compatible_labeled(members, labels)?;
    let w = MixtureWeights::new(weights.to_vec())?;
    let merged = interpolate(&theta, &w)?;
    checkpoint::save(&merged, out)?;
    println!("{}  {}", checkpoint::file_hash(out)?, out.display());
    Ok(())
}

fn optimize(
    experts: &Path,
    dev: &Path,
    metric: &MetricKind,
    max_iterations: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (labels, members): (Vec<String>, Vec<Checkpoint>) =
        read_index(experts)?.into_iter().unzip();
    let theta = check_compatible_labeled(members, labels)?;
    let data = LabeledDataset::load(dev)?;
    let cfg = NelderMeadConfig::default().with_max_iterations(max_iterations);
    let search = optimize_mixture(&theta, |c| evaluate_builtin(c, &data, metric), &cfg).map_err(
        |e| match e {
            MixtureError::Setup(s) => CliError::from(s),
            MixtureError::Evaluator { source, .. } => CliError::from(source),
        },
    )?;

    fs::create_dir_all(out).map_err(|e| StageError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut trace = Vec::new();
    search
        .trace
        .write_jsonl(&mut trace)
        .expect("in-memory write");
    let write = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
        let p = out.join(name);
        fs::write(&p, bytes).map_err(|e| StageError::Io { path: p, source: e })?;
        Ok(())
    };
    write("trace.jsonl", &trace)?;
    write(
        "search.json",
        &serde_json::to_vec_pretty(&search).expect("search result serializes"),
    )?;
    let merged = interpolate(&theta, &search.best_weights)?;
    checkpoint::save(&merged, &out.join("merged.ckpt"))?;
    println!(
        "{}",
        serde_json::json!({
            "members": theta.labels(),
            "alpha_star": search.best_weights.alphas(),
            "dev_score": search.best_dev_score,
        })
    );
    Ok(())
}

/// External-evaluator mode: one request line in, one response line out.
/// Evaluation problems are answered with `status: error`; only an
/// unreadable request makes the process fail.
fn serve_one_request() -> Result<(), CliError> {
    let mut line = String::new();
    std::io::stdin()
        .lock()
        .read_line(&mut line)
        .map_err(|e| CliError::Usage(format!("cannot read request: {e}")))?;
    let req: EvalRequest = serde_json::from_str(line.trim()).map_err(|e| {
        CliError::Stage(StageError::Eval(EvalError::Protocol {
            message: format!("malformed request ({e})"),
            line: line.trim().to_string(),
        }))
    })?;
    let answer = (|| -> Result<f64, EvalError> {
        let c = checkpoint::load(&req.checkpoint_path)?;
        let data = LabeledDataset::load(&req.dataset_path)?;
        if data.split() != req.split {
            return Err(EvalError::Dataset(format!(
                "{} holds the {} split, request asked for {}",
                req.dataset_path.display(),
                data.split(),
                req.split
            )));
        }
        evaluate_builtin(&c, &data, &req.metric)
    })();
    let resp = match answer {
        Ok(score) => EvalResponse::ok(score),
        Err(e) => EvalResponse::error(e.to_string()),
    };
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, &resp).expect("response serializes");
    stdout
        .write_all(b"\n")
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::Usage(format!("cannot write response: {e}")))
}
