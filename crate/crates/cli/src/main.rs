//! `lrctl`: runs learning-rate control experiments from TOML configs or
//! built-in presets and writes CSV artifacts.
//!
//! Exit status: 0 on success, 1 when artifacts cannot be written, 2 for
//! invalid configs or inputs, 3 for numerical failures (a `failure.txt`
//! with the diagnostics is left in the output directory).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrctl::harness::{self, ExperimentConfig, PRESETS};
use lrctl::Error;

const OUT_ENV: &str = "LRCTL_OUT_DIR";
const DEFAULT_OUT: &str = "lrctl-out";

#[derive(Parser)]
#[command(name = "lrctl", version, about = "Optimal learning-rate schedule experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run every point of the config's sweep grid.
    Sweep(Common),
    /// Run sequential episodes with the episodic-memory estimator.
    Metalearn(Common),
    /// Search for the final-performance estimate with the best closed-loop reward.
    Calibrate(Common),
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (see `lrctl presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides the config's `output_dir` and $LRCTL_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_file(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => unreachable!("clap requires one of --config and --preset"),
        };
        Ok(match self.seed {
            Some(seed) => cfg.with_seed(seed),
            None => cfg,
        })
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_path())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        3
    } else if matches!(err, Error::Io { .. }) {
        1
    } else {
        2
    }
}

fn write_failure(dir: &Path, err: &Error) {
    let mut text = format!("{err}\n");
    if let Error::NonConvergence { history, .. } = err {
        text.push_str("objective history:\n");
        for v in history {
            text.push_str(&format!("{v:.16e}\n"));
        }
    }
    let path = dir.join("failure.txt");
    if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, text)) {
        log::error!("cannot write {}: {e}", path.display());
    }
}

fn execute(command: &Command) -> Result<(), (Error, Option<PathBuf>)> {
    let common = match command {
        Command::Presets => {
            for (name, text) in PRESETS {
                let about = text
                    .lines()
                    .next()
                    .and_then(|l| l.strip_prefix("# "))
                    .unwrap_or("");
                println!("{name:10} {about}");
            }
            return Ok(());
        }
        Command::Run(c) | Command::Sweep(c) | Command::Metalearn(c) | Command::Calibrate(c) => c,
    };
    let cfg = common.load().map_err(|e| (e, None))?;
    let out = common.out_dir(&cfg);
    let fail = |e: Error| (e, Some(out.clone()));
    match command {
        Command::Run(_) => {
            if !cfg.sweep.is_empty() {
                log::warn!("config has a sweep grid; `run` uses the base values only");
            }
            let report = harness::run(&cfg).map_err(fail)?;
            report.write(&out).map_err(fail)?;
            let s = report.summary;
            println!(
                "total_reward {:.9} total_effort {:.9} final_performance {:.9}",
                s.total_reward, s.total_effort, s.final_performance
            );
        }
        Command::Sweep(_) => {
            let report = harness::run_sweep(&cfg, common.workers, Some(&out)).map_err(fail)?;
            let failed = report.points.iter().filter(|p| p.outcome.is_err()).count();
            println!("{} points, {failed} failed", report.points.len());
        }
        Command::Metalearn(_) => {
            let section = cfg
                .metalearn
                .clone()
                .ok_or_else(|| fail(Error::Config("no [metalearn] section in the config".into())))?;
            let report = harness::run_metalearn(&cfg).map_err(fail)?;
            report
                .write(&out, &section.eval_fractions, section.trace_stride)
                .map_err(fail)?;
            for s in &report.stats {
                println!("memory {:4} t/T {:.2} IQR {:.6}", s.memory_size, s.fraction, s.iqr());
            }
        }
        Command::Calibrate(_) => {
            let cal = harness::calibrate(&cfg).map_err(fail)?;
            harness::write_calibration_report(&cal, &out).map_err(fail)?;
            println!("final_estimate {:.9} reward {:.9}", cal.value, cal.reward);
        }
        Command::Presets => unreachable!(),
    }
    log::info!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, out)) => {
            eprintln!("error: {err}");
            let code = exit_code(&err);
            if code == 3 {
                if let Some(dir) = out {
                    write_failure(&dir, &err);
                }
            }
            ExitCode::from(code)
        }
    }
}
