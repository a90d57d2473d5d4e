use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use capmac::array::{resource_report, schedule_conv};
use capmac::dataset::{format_bitmap, letter_patterns, Glyph};
use capmac::device::trace_csv;
use capmac::experiment::{
    eval, run, trace_model, Checkpoint, EvalOptions, RawConfig, RunStatus, Settings,
};
use capmac::metrics::{waveform_csv, EnergyModel, PhaseTiming};
use capmac::netlab::Architecture;
use capmac::{Error, Result};

#[derive(Parser)]
#[command(
    name = "capmac",
    version,
    about = "Capacitive in-sensor MAC simulator and trainer"
)]
struct Cli {
    /// Worker threads for gradient evaluation; 1 keeps runs bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write artifacts and a manifest.
    Train {
        /// Experiment config file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.seed=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint on fresh noisy letters.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override a sensor setting, e.g. `--set sensor.noise_frac=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 25)]
        per_glyph: usize,
        /// Noisy letters reconstructed by an autoencoder checkpoint.
        #[arg(long, default_value_t = 8)]
        letters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fail unless the checkpoint holds this architecture.
        #[arg(long)]
        expect: Option<String>,
    },
    /// Run a checkpoint's analog layer on a clean glyph with phase capture.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "invz")]
        glyph: String,
        #[arg(long, value_enum, default_value_t = TraceFormat::Waveform)]
        format: TraceFormat,
        /// Output index (1-based) for `--format phases`.
        #[arg(long, default_value_t = 1)]
        output: usize,
        /// Override timing, energy or sensor settings.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the convolution window schedule and converter counts.
    Schedule {
        #[arg(long, default_value_t = 5)]
        rows: usize,
        #[arg(long, default_value_t = 5)]
        cols: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
    },
    /// Dump the canonical glyph bitmaps.
    Fixtures {
        #[arg(long, default_value_t = 3)]
        resolution: usize,
        /// Write one `<glyph>.txt` per glyph here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceFormat {
    /// time_ns, signal, value rows for switches and outputs.
    Waveform,
    /// Per-unit charge and voltage after each phase.
    Phases,
    /// Latency, energy and converter summary as JSON.
    Metrics,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn parse_architecture(name: &str) -> Result<Architecture> {
    Architecture::parse(name).ok_or_else(|| Error::Usage(format!("unknown architecture {name:?}")))
}

fn train_cmd(config: Option<&Path>, set: &[String], threads: Option<usize>) -> Result<ExitCode> {
    let text = match config {
        Some(path) => read_text(path)?,
        None => String::new(),
    };
    let mut raw = RawConfig::parse(&text)?;
    for assignment in set {
        raw.set(assignment)?;
    }
    if let Some(n) = threads {
        raw.set(&format!("train.threads={n}"))?;
    }
    let config = raw.resolve()?;
    let report = run(&config)?;
    let m = &report.manifest;
    println!("architecture: {}", m.architecture.name());
    println!("seed: {}", m.seed);
    println!("config sha256: {}", m.config_sha256);
    if let Some(last) = report.history.records.last() {
        println!("final loss: {}", last.loss);
        println!("final accuracy: {}", last.accuracy);
    }
    match report.history.first_perfect_epoch() {
        Some(e) => println!("first epoch at 100% accuracy: {e}"),
        None => println!("first epoch at 100% accuracy: none"),
    }
    for (file, _) in &m.artifacts {
        println!("wrote {}", config.output_dir.join(file).display());
    }
    println!("wrote {}", config.output_dir.join("manifest.txt").display());
    Ok(match &m.status {
        RunStatus::Completed { .. } => ExitCode::SUCCESS,
        RunStatus::Diverged { epoch, detail } => {
            eprintln!("diverged at epoch {epoch}: {detail}; checkpoint holds the last good model");
            ExitCode::from(
                Error::Divergence {
                    epoch: *epoch,
                    detail: detail.clone(),
                }
                .exit_code() as u8,
            )
        }
    })
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, set } => train_cmd(config.as_deref(), &set, cli.threads),
        Command::Eval {
            checkpoint,
            set,
            per_glyph,
            letters,
            seed,
            expect,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let settings = Settings {
                sensor: ckpt.sensor,
                timing: PhaseTiming::default(),
                energy: EnergyModel::default(),
            }
            .with_overrides(&set)?;
            let options = EvalOptions {
                sensor: settings.sensor,
                per_glyph,
                letters,
                seed,
                expect: expect.as_deref().map(parse_architecture).transpose()?,
            };
            print!("{}", eval(&ckpt, &options)?.to_text()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace {
            checkpoint,
            glyph,
            format,
            output,
            set,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let glyph = Glyph::parse(&glyph)
                .ok_or_else(|| Error::Usage(format!("unknown glyph {glyph:?}")))?;
            let s = Settings {
                sensor: ckpt.sensor,
                timing: PhaseTiming::default(),
                energy: EnergyModel::default(),
            }
            .with_overrides(&set)?;
            let report = trace_model(&ckpt.model, glyph, &s.sensor, &s.timing, &s.energy)?;
            let text = match format {
                TraceFormat::Waveform => waveform_csv(&report.waveform),
                TraceFormat::Metrics => report.summary.to_json() + "\n",
                TraceFormat::Phases => {
                    let bank = output
                        .checked_sub(1)
                        .and_then(|i| report.traces.get(i))
                        .ok_or_else(|| {
                            Error::Usage(format!(
                                "output must lie in 1..={}, got {output}",
                                report.traces.len()
                            ))
                        })?;
                    trace_csv(&bank.records, s.timing.durations())
                }
            };
            write_output(out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Schedule { rows, cols, kernel } => {
            let schedule = schedule_conv(rows, cols, kernel)?;
            let r = resource_report(rows, cols, kernel)?;
            println!("{}", schedule.to_json());
            eprintln!("dacs {} adcs {} steps {}", r.dacs, r.adcs, r.steps);
            Ok(ExitCode::SUCCESS)
        }
        Command::Fixtures { resolution, out } => {
            let patterns = letter_patterns(resolution)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| Error::Io {
                        path: dir.display().to_string(),
                        detail: e.to_string(),
                    })?;
                    for p in &patterns {
                        let path = dir.join(format!("{}.txt", p.glyph.name()));
                        write_output(Some(&path), &format_bitmap(&p.grid))?;
                    }
                }
                None => {
                    for p in &patterns {
                        println!("{}", p.glyph.name());
                        print!("{}", format_bitmap(&p.grid));
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
