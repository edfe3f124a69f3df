//! `speccond`: verification sweeps, one-shot analysis, training runs and λ sweeps.
//!
//! Exit status: 0 success, 1 property failure or diverged run, 2 usage or
//! configuration error. Outputs go under `$SPECCOND_OUT` (default `runs`).

mod analyze;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use speccond::conditioning::Conditioning;
use speccond::harness::{ablate_lambda, train, RunSpec, TrainRun};
use speccond::io::{metrics_csv, metrics_json, parse_config, parse_matrix, parse_params, ConfigFile, RunManifest};
use speccond::report::fmt_f64;
use speccond::Error;

const OUT_ENV: &str = "SPECCOND_OUT";

#[derive(Parser)]
#[command(name = "speccond", version, about = "Spectral conditioning of self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded property sweeps and write a JSON report.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: verify::Suite,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Report path (default: `$SPECCOND_OUT/verify-<suite>.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Spectra and Jacobian bound of supplied matrices, before and after correction.
    Analyze {
        /// Three stacked matrix blocks: W_Q, W_K, W_V.
        #[arg(long)]
        params: PathBuf,
        /// Token matrix X (N × D).
        #[arg(long)]
        x: PathBuf,
        /// `off`, `svd-cap` or `diag-shift`.
        #[arg(long, default_value = "svd-cap")]
        mode: String,
        #[arg(long, default_value_t = speccond::conditioning::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: analyze::Format,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the toy transformer and log conditioning trajectories.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's mode: `off`, `svd-cap`, `diag-shift` or `diag-shift:<λ>`.
        #[arg(long)]
        conditioning: Option<String>,
        /// Run directory (default: `$SPECCOND_OUT/train-seed<seed>-<mode>`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// One diagonal-shift run per λ; writes an ablation table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        lambdas: Vec<f64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

/// Errors carry the exit status they map to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Dimension(_) | Error::Constraint(_) | Error::Empty(_) => 2,
            Error::Io(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 2,
            msg: e.to_string(),
        }
    }
}

fn in_file(path: &Path, e: Error) -> Failure {
    let f = Failure::from(e);
    Failure {
        code: f.code,
        msg: format!("{}: {}", path.display(), f.msg),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<String, Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })?;
    Ok(path.display().to_string())
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", dir.display()),
    })
}

fn load_spec(config: &Path) -> Result<RunSpec, Failure> {
    parse_config(&read(config)?).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", config.display()),
    })
}

fn snapshot(spec: &RunSpec) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(ConfigFile::from_spec(spec)).map_err(|e| Failure::from(Error::from(e)))
}

fn probe_note(spec: &RunSpec) -> String {
    format!(
        "Jacobian bounds are measured on a fixed probe batch of {} sequence(s) drawn from stream 4 of seed {}",
        spec.probe_batch, spec.config.seed
    )
}

fn cmd_verify(suite: verify::Suite, seeds: u64, report: Option<PathBuf>) -> Result<(), Failure> {
    let r = verify::run(suite, seeds)?;
    let path = match report {
        Some(p) => p,
        None => {
            let root = out_root();
            ensure_dir(&root)?;
            root.join(format!("verify-{}.json", r.suite))
        }
    };
    let json = serde_json::to_string_pretty(&r).map_err(|e| Failure::from(Error::from(e)))? + "\n";
    fs::write(&path, json)?;
    for p in &r.properties {
        println!(
            "{} {} cases={} worst={} tol={}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.cases,
            fmt_f64(p.worst_residual),
            fmt_f64(p.tolerance)
        );
    }
    println!("report: {}", path.display());
    if r.passed {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: "one or more properties failed".into(),
        })
    }
}

fn cmd_train(config: &Path, conditioning: Option<String>, run_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut spec = load_spec(config)?;
    if let Some(mode) = conditioning {
        spec.config.conditioning = mode.parse::<Conditioning>()?;
    }
    let dir = run_dir.unwrap_or_else(|| {
        out_root().join(format!(
            "train-seed{}-{}",
            spec.config.seed,
            spec.config.conditioning.name()
        ))
    });
    ensure_dir(&dir)?;
    let mut manifest = RunManifest::new("train", snapshot(&spec)?, vec![spec.config.seed]);
    manifest.notes.push(probe_note(&spec));
    let run = train(TrainRun::new(spec.clone()))?;
    let cfg_path = write(&dir, "config.toml", &ConfigFile::from_spec(&spec).to_toml()?)?;
    manifest.output("config", cfg_path);
    manifest.output("metrics_csv", write(&dir, "metrics.csv", &metrics_csv(&run.metrics)?)?);
    manifest.output(
        "metrics_json",
        write(&dir, "metrics.json", &metrics_json(&run.metrics)?)?,
    );
    manifest.divergence = run.outcome.as_ref().and_then(|o| o.divergence.clone());
    if let Some(o) = &run.outcome {
        manifest.notes.push(format!(
            "corrections frozen: {}; optimizer tracks {} tensors for {} parameter tensors",
            o.corrections_frozen(),
            o.optimizer_tensors,
            o.parameter_tensors
        ));
    }
    manifest.finish();
    fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
    if let Some(last) = run.final_row() {
        println!("step {} eval_acc {}", last.step, last.eval_acc);
    }
    println!("run dir: {}", dir.display());
    match &manifest.divergence {
        Some(d) => Err(Failure {
            code: 1,
            msg: format!("training diverged at step {}: {}", d.step, d.reason),
        }),
        None => Ok(()),
    }
}

fn cmd_ablate(config: &Path, lambdas: &[f64], run_dir: Option<PathBuf>) -> Result<(), Failure> {
    if lambdas.is_empty() {
        return Err(Failure {
            code: 2,
            msg: "--lambdas needs at least one value".into(),
        });
    }
    let spec = load_spec(config)?;
    let table = ablate_lambda(&spec, lambdas)?;
    let dir = run_dir.unwrap_or_else(|| out_root().join(format!("ablate-seed{}", spec.config.seed)));
    ensure_dir(&dir)?;
    let mut manifest = RunManifest::new("ablate", snapshot(&spec)?, vec![spec.config.seed]);
    manifest.notes.push(probe_note(&spec));
    for d in &table.duplicates {
        manifest.warnings.push(format!("duplicate lambda {d} ignored"));
    }
    let mut csv = String::from("lambda,final_eval_acc,final_kappa_wc,final_kappa_w,final_kappa_j_effective,diverged\n");
    for (row, run) in table.rows.iter().zip(&table.runs) {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(row.lambda),
            fmt_f64(row.final_eval_acc),
            fmt_f64(row.final_kappa_corrected),
            fmt_f64(row.final_kappa_weights),
            fmt_f64(row.final_kappa_j_effective),
            row.diverged
        ));
        let sub = dir.join(format!("lambda-{}", row.lambda));
        ensure_dir(&sub)?;
        manifest.output(
            format!("metrics_csv lambda={}", row.lambda),
            write(&sub, "metrics.csv", &metrics_csv(&run.metrics)?)?,
        );
        manifest.output(
            format!("metrics_json lambda={}", row.lambda),
            write(&sub, "metrics.json", &metrics_json(&run.metrics)?)?,
        );
        if let Some(d) = run.outcome.as_ref().and_then(|o| o.divergence.clone()) {
            manifest.warnings.push(format!(
                "lambda {} diverged at step {}: {}",
                row.lambda, d.step, d.reason
            ));
        }
    }
    manifest.output("ablation_csv", write(&dir, "ablation.csv", &csv)?);
    manifest.finish();
    fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
    print!("{csv}");
    println!("run dir: {}", dir.display());
    if table.rows.iter().any(|r| r.diverged) {
        return Err(Failure {
            code: 1,
            msg: "at least one run diverged".into(),
        });
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Verify { suite, seeds, report } => cmd_verify(suite, seeds, report),
        Command::Analyze {
            params,
            x,
            mode,
            lambda,
            format,
            output,
        } => {
            let p = parse_params(&read(&params)?).map_err(|e| in_file(&params, e))?;
            let xm = parse_matrix(&read(&x)?).map_err(|e| in_file(&x, e))?;
            let conditioning = Conditioning::from_name(&mode, lambda)?;
            let text = analyze::run(&p, &xm, conditioning, format)?;
            match output {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Train {
            config,
            conditioning,
            run_dir,
        } => cmd_train(&config, conditioning, run_dir),
        Command::Ablate {
            config,
            lambdas,
            run_dir,
        } => cmd_ablate(&config, &lambdas, run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
