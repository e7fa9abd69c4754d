use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatemem::harness::{self, ExperimentConfig};
use gatemem::model::Variant;
use gatemem::tensor::Fault;
use gatemem::{checkpoint, Error};

/// Gated structured memory experiments.
#[derive(Parser)]
#[command(name = "gatemem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent sweep cells, overriding `workers` from the config.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write records, metrics and checkpoints.
    Train(Common),
    /// Score a checkpoint on the config's held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train across slot counts (from `--capacities` or `sweep.capacities`).
    SweepCapacity {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        capacities: Vec<usize>,
    },
    /// Train across memory variants (from `--variants` or `sweep.variants`).
    SweepAblation {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Check every backward rule and parameter block against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the sigmoid backward rule to demonstrate detection.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Dump generated task instances as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Turn a records file into a smoothed loss-curve CSV.
    Curves {
        /// A `records-seed<S>.jsonl` file written by `train`.
        records: PathBuf,
        /// Output file; defaults to `curves.csv` next to the records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e).into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            let summary = harness::run_experiment(&cfg)?;
            for (seed, r) in &summary.reports {
                println!(
                    "seed {seed}: acc {:.4} em {:.4} f1 {:.4}",
                    r.acc, r.em, r.token_f1
                );
            }
            println!("wrote {}", summary.out_dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let model = checkpoint::load(&checkpoint)?;
            let seed = cfg.seeds[0];
            let r = harness::evaluate_checkpoint(&cfg, &model, seed)?;
            let mut csv = String::from("seed,acc,bleu1,rouge_l,em,token_f1,consistency\n");
            csv.push_str(&format!(
                "{seed},{},{},{},{},{},{}\n",
                r.acc,
                r.bleu1,
                r.rouge_l,
                r.em,
                r.token_f1,
                r.consistency.map(|c| c.to_string()).unwrap_or_default()
            ));
            write(&cfg.out_dir.join("eval.csv"), &csv)?;
            print!("{csv}");
        }
        Command::SweepCapacity { common, capacities } => {
            let cfg = resolve(&common)?;
            let caps = if capacities.is_empty() {
                cfg.sweep.capacities.clone()
            } else {
                capacities
            };
            let result = harness::capacity_sweep(&cfg, &caps)?;
            print!("{}", result.median_csv());
        }
        Command::SweepAblation { common, variants } => {
            let cfg = resolve(&common)?;
            let variants = if variants.is_empty() {
                cfg.sweep.variants.clone()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse::<Variant>())
                    .collect::<Result<Vec<_>, _>>()?
            };
            let result = harness::ablation_sweep(&cfg, &variants)?;
            print!("{}", result.median_csv());
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = inject_fault.then_some(Fault::DoubleSigmoidGrad);
            let report = harness::gradcheck_suite(seed, fault)?;
            for b in &report.blocks {
                let status = if b.max_rel_error < report.tolerance {
                    "ok"
                } else {
                    "FAIL"
                };
                println!("{:<36} {:>12.3e}  {status}", b.name, b.max_rel_error);
            }
            let failed: Vec<&str> = report.failures().map(|b| b.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure {
                    code: 2,
                    message: format!(
                        "{} block(s) exceed relative error {:e}: {}",
                        failed.len(),
                        report.tolerance,
                        failed.join(", ")
                    ),
                });
            }
            println!(
                "all {} blocks below {:e}",
                report.blocks.len(),
                report.tolerance
            );
        }
        Command::GenData { common, count } => {
            let cfg = resolve(&common)?;
            let mut buf = Vec::new();
            harness::dump_tasks(
                &cfg.task,
                cfg.model.vocab_size,
                cfg.seeds[0],
                count,
                &mut buf,
            )?;
            let path = cfg.out_dir.join("tasks.jsonl");
            write(&path, &String::from_utf8(buf).expect("JSON is UTF-8"))?;
            println!("wrote {count} instances to {}", path.display());
        }
        Command::Curves { records, out } => {
            let recs = harness::read_records(&records)?;
            let csv = harness::emit_curves(&recs)?;
            let path = out.unwrap_or_else(|| records.with_file_name("curves.csv"));
            write(&path, &csv)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
