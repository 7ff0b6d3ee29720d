//! `drim`: generate cohorts, train, evaluate, run the missing-modality
//! grid, stratify patients by risk and audit parameter counts.
//!
//! Any configuration field can be set with a flag of its dotted name, for
//! example `--train.lr 0.01`, `--generator.missing_rates=[0,0.2,0.4]` or
//! `--subsets=[[0],[1,2]]`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drim_core::experiment::{self, ExperimentSpec};
use drim_core::{checkpoint, DrimError, FusionKind, Regime};
use rayon::prelude::*;

#[derive(Parser, Debug)]
#[command(name = "drim", version, about = "Multimodal survival models with disentangled shared/unique representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// surv or unsup.
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// mafusion, mean, sum, max, concat or tensor.
    #[arg(long, global = true)]
    fusion: Option<FusionKind>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Extra `key=value` override; same as `--key value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort directory.
    Generate {
        /// Also write the generating factors.
        #[arg(long)]
        with_truth: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a cohort; writes checkpoint, epoch log and test metrics.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on its test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint under every listed modality subset.
    RobustnessGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Median risk split, Kaplan-Meier curves and log-rank test.
    Stratify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Exact parameter counts per module.
    AuditParams {
        /// Audit this checkpoint's architecture instead of the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::RobustnessGrid { common, .. }
            | Command::Stratify { common, .. }
            | Command::AuditParams { common, .. } => common,
        }
    }
}

enum Failure {
    Usage(String),
    Core(DrimError),
}

impl From<DrimError> for Failure {
    fn from(e: DrimError) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &DrimError) -> u8 {
    match e {
        DrimError::Config(_) | DrimError::Exists(_) => 1,
        DrimError::Numerical(_) | DrimError::Tensor(_) => 3,
        _ => 2,
    }
}

/// Top-level experiment fields without a dedicated flag.
const SPEC_FIELDS: [&str; 5] = ["subsets", "seeds", "fusion_kinds", "splits", "risk"];

/// Split `--a.b value` / `--a.b=value` flags out of argv.
fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') && !SPEC_FIELDS.contains(&key.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn build_spec(common: &Common, mut overrides: Vec<(String, String)>) -> Result<ExperimentSpec, Failure> {
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    let mut spec = experiment::load_spec(common.config.as_deref(), &overrides)?;
    if let Some(r) = common.regime {
        spec.train.regime = r;
    }
    if let Some(f) = common.fusion {
        spec.train.fusion = f;
        spec.fusion_kinds = vec![f];
    }
    if let Some(s) = common.seed {
        spec.generator.seed = s;
        spec.seeds = vec![s];
    }
    if let Some(d) = &common.output_dir {
        spec.output_dir = d.clone();
    }
    spec.validate()?;
    Ok(spec)
}

/// Output directory for commands that read a checkpoint: `--output-dir`,
/// else the checkpoint's own directory.
fn beside(checkpoint: &Path, common: &Common) -> PathBuf {
    common
        .output_dir
        .clone()
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Core(DrimError::io(dir, e)))
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Core(DrimError::Exists(path.to_path_buf())));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Failure> {
    let common = cli.command.common().clone();
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        // fails only if a pool already exists, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let spec = build_spec(&common, overrides)?;
    match cli.command {
        Command::Generate { with_truth, .. } => {
            let dir = spec.output_dir.clone();
            let batch = experiment::cmd_generate(&spec, &dir, with_truth, common.force)?;
            println!(
                "wrote {} patients, {} modalities, {:.1}% events to {}",
                batch.n_patients(),
                batch.n_modalities(),
                100.0 * batch.event_fraction(),
                dir.display()
            );
        }
        Command::Train { cohort, .. } => {
            let jobs: Vec<(FusionKind, u64)> = spec
                .fusion_kinds
                .iter()
                .flat_map(|&f| spec.seeds.iter().map(move |&s| (f, s)))
                .collect();
            let results: Vec<_> = jobs
                .par_iter()
                .map(|&(f, s)| experiment::cmd_train(&cohort, &spec, f, s, common.force))
                .collect();
            for r in results {
                let (run, art) = r?;
                println!(
                    "{}: C-index {:.4}  IBS {:.4}  INBLL {:.4}  CS {:.4}  -> {}",
                    run.run_id,
                    run.test.cindex,
                    run.test.ibs,
                    run.test.inbll,
                    run.test.cs,
                    art.dir.display()
                );
            }
        }
        Command::Eval { checkpoint, cohort, .. } => {
            let dir = beside(&checkpoint, &common);
            ensure_dir(&dir)?;
            let out = dir.join("eval_metrics.csv");
            refuse_existing(&out, common.force)?;
            let row = experiment::cmd_eval(&checkpoint, &cohort, &out)?;
            println!(
                "{}: C-index {:.4}  IBS {:.4}  INBLL {:.4}  CS {:.4}  log-rank p {}",
                row.run_id,
                row.cindex,
                row.ibs,
                row.inbll,
                row.cs,
                fmt_opt(row.logrank_p)
            );
        }
        Command::RobustnessGrid { checkpoint, cohort, .. } => {
            let dir = beside(&checkpoint, &common);
            ensure_dir(&dir)?;
            let out = dir.join("robustness_grid.csv");
            refuse_existing(&out, common.force)?;
            let rows = experiment::cmd_robustness_grid(&checkpoint, &cohort, &spec, &out)?;
            println!("{:<12} {:>5} {:>9} {:>8} {:>8}", "subset", "n", "train_%", "C-index", "CS");
            for r in &rows {
                println!(
                    "{:<12} {:>5} {:>9.1} {:>8} {:>8}",
                    r.subset,
                    r.n,
                    r.train_pct,
                    fmt_opt(r.cindex),
                    fmt_opt(r.cs)
                );
            }
            println!("-> {}", out.display());
        }
        Command::Stratify { checkpoint, cohort, .. } => {
            let dir = common
                .output_dir
                .clone()
                .unwrap_or_else(|| beside(&checkpoint, &common).join("stratify"));
            let row = experiment::cmd_stratify(&checkpoint, &cohort, &dir, common.force)?;
            println!(
                "high risk {} / low risk {}: log-rank chi2 {:.4}, p {:.3e} -> {}",
                row.n_high,
                row.n_low,
                row.chi2,
                row.p,
                dir.display()
            );
        }
        Command::AuditParams { checkpoint, .. } => {
            let config = match &checkpoint {
                Some(p) => checkpoint::load(p)?.0.config,
                None => spec
                    .train
                    .model_config(spec.generator.feature_dims.clone(), spec.generator.horizon),
            };
            let rows = experiment::audit(&config)?;
            for r in &rows {
                if r.reference.is_empty() {
                    println!("{:<32} {:>16}", r.item, r.params);
                } else {
                    println!("{:<32} {:>16}  (reference: {})", r.item, r.params, r.reference);
                }
            }
            if let Some(dir) = &common.output_dir {
                ensure_dir(dir)?;
                let out = dir.join("audit.csv");
                refuse_existing(&out, common.force)?;
                experiment::write_audit(&out, &rows)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match extract_dotted(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
