use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use backdoor_prune::detect::Verdict;
use backdoor_prune::error::{Error, Result};
use backdoor_prune::par;
use backdoor_prune::pipeline::*;

#[derive(Parser)]
#[command(name = "backdoor-prune", version, about = "Detect and prune backdoors in small image classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Defender budget: images per class or "datafree".
    #[arg(long, global = true)]
    budget: Option<String>,
    /// Overrides `shapley.iterations`.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the poisoned reference model.
    Attack,
    /// Reverse a trigger per class.
    Reverse {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Flag outlier trigger norms.
    Detect {
        #[arg(long)]
        norms: Option<PathBuf>,
    },
    /// Estimate neuron contributions for the suspected target.
    Shapley {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        triggers: Option<PathBuf>,
        #[arg(long)]
        detection: Option<PathBuf>,
    },
    /// Prune the selected neurons and fine-tune.
    Mitigate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long)]
        detection: Option<PathBuf>,
        /// Also write the pruning curve as CSV.
        #[arg(long)]
        plot: bool,
    },
    /// Run every stage.
    Full {
        /// Mitigate even when detection says clean.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        plot: bool,
    },
    /// Print the effective config as TOML.
    Config,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(b) = &common.budget {
        cfg.budget = match b.as_str() {
            "datafree" => Budget::DataFree,
            n => Budget::PerClass(n.parse().map_err(|_| {
                Error::Config(format!("budget must be an image count or \"datafree\", got {n:?}"))
            })?),
        };
    }
    if let Some(r) = common.iterations {
        cfg.shapley.iterations = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_exit(report: &MitigationReport) -> ExitCode {
    println!(
        "verdict {:?}; acc {:.4} -> {:.4}; asr {:.4} -> {:.4}; pruned {} of {}",
        report.verdict,
        report.acc_before,
        report.acc_after,
        report.asr_before,
        report.asr_after,
        report.pruned.len(),
        report.neuron_count
    );
    if report.verdict == Verdict::Poisoned && report.mitigated {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common).map_err(|e| e.in_stage("config"))?;
    let layout = Layout::new(&cfg.output_dir);
    let code = match cli.command {
        Command::Attack => {
            let s = cmd_attack(&cfg)?;
            println!(
                "acc {:.4} asr {:.4} poisoned {}",
                s.clean_accuracy, s.attack_success_rate, s.poisoned
            );
            ExitCode::SUCCESS
        }
        Command::Reverse { checkpoint } => {
            let norms = cmd_reverse(&cfg, &checkpoint.unwrap_or_else(|| layout.model()))?;
            let line: Vec<String> = norms.iter().map(|n| format!("{n:.3}")).collect();
            println!("norms {}", line.join(" "));
            ExitCode::SUCCESS
        }
        Command::Detect { norms } => {
            let report = cmd_detect(&cfg, &norms.unwrap_or_else(|| layout.norms()))?;
            println!("verdict {:?} flagged {:?}", report.verdict, report.flagged);
            ExitCode::SUCCESS
        }
        Command::Shapley {
            checkpoint,
            triggers,
            detection,
        } => {
            let tables = cmd_shapley(
                &cfg,
                &checkpoint.unwrap_or_else(|| layout.model()),
                &triggers.unwrap_or_else(|| layout.triggers()),
                &detection.unwrap_or_else(|| layout.detection()),
            )?;
            println!(
                "iterations {} aborted {}",
                tables.asr.iterations,
                tables.asr.aborted.len()
            );
            ExitCode::SUCCESS
        }
        Command::Mitigate {
            checkpoint,
            tables,
            detection,
            plot,
        } => {
            let report = cmd_mitigate(
                &cfg,
                &checkpoint.unwrap_or_else(|| layout.model()),
                &tables.unwrap_or_else(|| layout.tables()),
                &detection.unwrap_or_else(|| layout.detection()),
                plot,
            )?;
            report_exit(&report)
        }
        Command::Full { force, plot } => report_exit(&cmd_full(&cfg, force, plot)?),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            ExitCode::SUCCESS
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli.common.jobs;
    match par::with_jobs(jobs, move || run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
