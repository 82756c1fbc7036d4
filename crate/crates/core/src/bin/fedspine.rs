use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedspine::compare::compare;
use fedspine::config::{parse_config, ExperimentConfig, Mode};
use fedspine::fedsim::{run_experiment, MetricsSink};
use fedspine::selftest::run_selftest;
use fedspine::{Error, Result};

#[derive(Parser)]
#[command(name = "fedspine", about = "Federated LoRA fine-tuning with iterative structured pruning, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics.
    Run(RunArgs),
    /// Run several configurations over paired seeds and tabulate them.
    Compare {
        /// Comma-separated config paths; the first is the baseline for deltas.
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Accuracy used for time-to-target.
        #[arg(long, default_value_t = 0.9)]
        target_acc: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the built-in numerical checks.
    Selftest,
    /// Run one experiment and also dump per-round group importance scores.
    DumpImportance(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = std::env::var("FEDSPINE_SEED") {
        config.seed = s.trim().parse().map_err(|_| Error::Validation {
            key: "FEDSPINE_SEED".into(),
            msg: format!("cannot parse `{s}`"),
        })?;
    }
    Ok(config)
}

fn run(args: &RunArgs, importance: bool) -> Result<bool> {
    let mut config = load(args.config.as_deref())?;
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), config.echo())?;
    let mut sink = MetricsSink::create(&args.out, importance)?;
    let summary = run_experiment(&config, &mut sink)?;
    let violations = summary.total_violations();
    println!(
        "{} seed {}: {} rounds, final acc {:.4}, final loss {:.4}, mean gamma {:.4}, violations {}",
        config.mode,
        config.seed,
        summary.records.len(),
        summary.final_acc(),
        summary.final_loss(),
        summary.mean_gamma(),
        violations
    );
    Ok(violations == 0 && !summary.diverged())
}

fn label_for(path: &Path, taken: &[String]) -> String {
    let stem = path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
    let mut label = stem.clone();
    let mut k = 2;
    while taken.contains(&label) {
        label = format!("{stem}-{k}");
        k += 1;
    }
    label
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::DumpImportance(args) => run(args, true),
        Command::Compare {
            configs,
            seeds,
            target_acc,
            out,
        } => (|| {
            let mut named = Vec::new();
            for path in configs {
                let taken: Vec<String> = named.iter().map(|(l, _): &(String, _)| l.clone()).collect();
                named.push((label_for(path, &taken), load(Some(path))?));
            }
            let seeds: Vec<u64> = (0..*seeds).collect();
            let table = compare(&named, &seeds, *target_acc, Some(out))?;
            let text = table.render();
            print!("{text}");
            std::fs::write(out.join("compare.txt"), &text)?;
            std::fs::write(out.join("compare.json"), table.to_json()?)?;
            Ok(table.rows.iter().all(|r| r.flagged == 0))
        })(),
        Command::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
