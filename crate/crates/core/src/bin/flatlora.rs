use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flatlora::harness::{self, ExperimentConfig, VerifyOptions};
use flatlora::optimizers::Fault;
use flatlora::Error;

/// Default output directory when `--out` is not given.
const OUT_DIR_ENV: &str = "FLATLORA_OUT_DIR";

#[derive(Parser)]
#[command(name = "flatlora", version, about = "Sharpness-aware LoRA experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its metrics CSV and summary JSON.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
    },
    /// Run one configuration for several seeds in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
    },
    /// Run the invariant suite; exits nonzero if any invariant fails.
    Verify {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Time every optimizer on the configuration's task.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SkipRevert,
}

fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Numerical { .. } | Error::SvdNonConvergence { .. } | Error::NonFinite { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_file(config)?;
    let art = harness::run_to_dir(&cfg, out)?;
    println!("{}", art.csv.display());
    println!("{}", art.summary_json.display());
    println!(
        "{} final train loss {:.6e}, eval loss {:.6e}, sharpness {:.6e}",
        art.summary.optimizer, art.summary.final_train_loss, art.summary.final_eval_loss, art.summary.final_sharpness_sam
    );
    Ok(())
}

fn sweep(config: &Path, seeds: &[u64], out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_file(config)?;
    std::fs::create_dir_all(out)?;
    let mut first_err = None;
    for (seed, result) in seeds.iter().zip(harness::sweep(&cfg, seeds, out)) {
        match result {
            Ok(art) => println!(
                "seed {seed}: {} (train loss {:.6e})",
                art.csv.display(),
                art.summary.final_train_loss
            ),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn bench(config: &Path, repeats: usize, out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_file(config)?;
    let report = harness::bench(&harness::optimizer_set(&cfg), repeats)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{}.bench.json", cfg.file_stem()));
    harness::write_json(&path, &report)?;
    print!("{}", report.to_table());
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => run(&config, &out),
        Command::Sweep { config, seeds, out } => sweep(&config, &seeds, &out),
        Command::Bench { config, repeats, out } => bench(&config, repeats, &out),
        Command::Verify { inject_fault } => {
            let report = harness::verify(VerifyOptions {
                fault: inject_fault.map(|FaultArg::SkipRevert| Fault::SkipRevert),
            });
            print!("{}", report.to_text());
            return if report.passed() {
                println!("all invariants hold");
                ExitCode::SUCCESS
            } else {
                println!("{} invariant(s) failed", report.failures().count());
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
