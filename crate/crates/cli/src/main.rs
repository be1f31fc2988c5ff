//! `fmatch` command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmatch::data::{self, SceneSample};
use fmatch::fsutil;
use fmatch::trainer::{
    agreement_between, evaluate, run_strategy, sweep_with_teacher, train_teacher, Checkpoint, RunConfig,
    RunReport, Strategy, Task, DEFAULT_BUDGETS,
};

#[derive(Debug, Parser)]
#[command(name = "fmatch", version, about = "Function-matching distillation for segmentation and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// INI run configuration; defaults apply to missing keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Task used when no config file is given.
    #[arg(long, value_name = "TASK")]
    task: Option<Task>,
    /// Run seed.
    #[arg(long, env = "FM_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the labeled and validation splits (and optionally unlabeled frames) as images.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of unlabeled stream frames to materialize as well.
        #[arg(long, default_value_t = 0)]
        unlabeled: usize,
    },
    /// Train the teacher on the labeled split.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a student with one strategy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the teacher (unless given) and every strategy at every budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step budgets.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print validation metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Reference checkpoint for agreement.
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
        /// Print CSV rows instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Print the validation pixel agreement of two segmentation checkpoints.
    Agree {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        a: PathBuf,
        #[arg(long, value_name = "CKPT")]
        b: PathBuf,
    },
    /// Merge run CSVs into one report.
    Report {
        #[arg(required = true, value_name = "CSV")]
        inputs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(fmatch::Error),
}

impl From<fmatch::Error> for Failure {
    fn from(e: fmatch::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = String::from_utf8(fsutil::read(path)?)
                .map_err(|_| Failure::Usage(format!("{} is not UTF-8", path.display())))?;
            RunConfig::from_ini(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::for_task(common.task.unwrap_or(Task::Segmentation)),
    };
    if let Some(task) = common.task {
        if task != cfg.task {
            return Err(Failure::Usage(format!(
                "--task {task} conflicts with task {} in the config file",
                cfg.task
            )));
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_teacher(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(fsutil::write_atomic(path, text.as_bytes())?)
}

/// Saves the resolved config next to the outputs so the run can be replayed.
fn record_config(cfg: &RunConfig) -> CliResult<()> {
    if let Some(dir) = &cfg.out_dir {
        write_text(&dir.join("config.ini"), &cfg.to_ini())?;
    }
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common, out, unlabeled } => {
            let cfg = resolve(&common)?;
            cfg.world.validate()?;
            let split = |ids: &mut dyn Iterator<Item = u64>| -> Vec<(u64, SceneSample)> {
                ids.map(|i| (i, data::generate_scene(&cfg.world, i))).collect()
            };
            data::write_dataset(&out.join("labeled"), &split(&mut cfg.world.labeled_indices()))?;
            data::write_dataset(&out.join("val"), &split(&mut cfg.world.val_indices()))?;
            // the stream has no annotations, so only images are written
            for f in data::unlabeled_stream(&cfg.world, 0).take(unlabeled) {
                data::write_image(&out.join("unlabeled").join(format!("{:06}.ppm", f.index)), &f.image)?;
            }
            write_text(&out.join("config.ini"), &cfg.to_ini())?;
            println!(
                "wrote {} labeled, {} val and {unlabeled} unlabeled scenes to {}",
                cfg.world.labeled_count,
                cfg.world.val_count,
                out.display()
            );
        }
        Command::TrainTeacher { common, steps, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.teacher_steps = s;
            }
            cfg.out_dir = out;
            record_config(&cfg)?;
            let teacher = train_teacher(&cfg)?;
            let report = evaluate(&teacher, &cfg, None)?;
            if let Some(dir) = &cfg.out_dir {
                write_text(&dir.join("teacher.csv"), &report.to_csv())?;
            }
            print!("{}", report.to_table());
        }
        Command::Train {
            common,
            strategy,
            steps,
            teacher,
            out,
        } => {
            if strategy.needs_teacher() && teacher.is_none() {
                return Err(Failure::Usage(format!(
                    "strategy {strategy} requires --teacher <CKPT>"
                )));
            }
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.out_dir = out;
            let teacher = teacher.as_deref().map(load_teacher).transpose()?;
            record_config(&cfg)?;
            let mut out = run_strategy(strategy, &cfg, teacher.as_ref())?;
            out.report.mark_best();
            if let Some(dir) = &cfg.out_dir {
                write_text(&dir.join(format!("{strategy}-{}.csv", cfg.steps)), &out.report.to_csv())?;
            }
            print!("{}", out.report.to_table());
        }
        Command::Sweep {
            common,
            budgets,
            teacher,
            out,
        } => {
            let mut cfg = resolve(&common)?;
            let budgets = budgets.unwrap_or_else(|| DEFAULT_BUDGETS.to_vec());
            if budgets.is_empty() || budgets.contains(&0) {
                return Err(Failure::Usage("--budgets needs positive step counts".into()));
            }
            cfg.out_dir = out;
            record_config(&cfg)?;
            let teacher = match teacher {
                Some(p) => load_teacher(&p)?,
                None => train_teacher(&cfg)?,
            };
            let out = sweep_with_teacher(&cfg, &budgets, teacher)?;
            print!("{}", out.report.to_table());
        }
        Command::Eval {
            common,
            ckpt,
            teacher,
            csv,
        } => {
            let cfg = resolve(&common)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let teacher = teacher.as_deref().map(load_teacher).transpose()?;
            let mut report = evaluate(&ckpt, &cfg, teacher.as_ref())?;
            report.mark_best();
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Agree { common, a, b } => {
            let cfg = resolve(&common)?;
            let a = Checkpoint::load(&a)?;
            let b = Checkpoint::load(&b)?;
            println!("{:.6}", agreement_between(&a, &b, &cfg)?);
        }
        Command::Report { inputs, out } => {
            let mut merged: Option<RunReport> = None;
            for path in &inputs {
                let text = String::from_utf8(fsutil::read(path)?)
                    .map_err(|_| Failure::Usage(format!("{} is not UTF-8", path.display())))?;
                let r = RunReport::from_csv(&text)?;
                match &mut merged {
                    None => merged = Some(r),
                    Some(m) if m.task != r.task => {
                        return Err(Failure::Usage(format!(
                            "{} holds {} rows but earlier inputs hold {} rows",
                            path.display(),
                            r.task,
                            m.task
                        )));
                    }
                    Some(m) => m.extend(r),
                }
            }
            let mut report = merged.expect("clap requires at least one input");
            report.dedup();
            report.mark_best();
            if let Some(dir) = &out {
                write_text(&dir.join("report.csv"), &report.to_csv())?;
                write_text(&dir.join("report.txt"), &report.to_table())?;
            }
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
