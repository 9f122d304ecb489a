//! Batch commands behind the `wave-ssm` binary.
//!
//! Every command is deterministic given its flags. Errors carry the process
//! exit code: 2 for a missing input file, 1 for everything else.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use wave_ssm::analysis::analyze;
use wave_ssm::autodiff::CheckReport;
use wave_ssm::gradcheck::run_suite;
use wave_ssm::io::RgbImage;
use wave_ssm::metrics::{psnr, ssim};
use wave_ssm::network::{Model, ModelConfig};
use wave_ssm::train::{train_toy, ToyOptions};

/// Environment variable capping the worker threads (0 or unset: automatic).
pub const THREADS_ENV: &str = "WAVE_SSM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "wave-ssm",
    version,
    about = "Wavelet state-space low-light enhancement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one PPM image with a checkpoint.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Wavelet energies and histograms of one image, or of a pair with the
    /// subband-swap distances.
    Analyze {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// PSNR and SSIM between two images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// `all` or a single case name.
        #[arg(long, default_value = "all")]
        ops: String,
    },
    /// Write a freshly initialized default checkpoint.
    Init {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit the reduced model to one low/target pair.
    TrainToy {
        #[arg(long, num_args = 2, value_names = ["LOW", "TARGET"])]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<wave_ssm::Error> for CliError {
    fn from(e: wave_ssm::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn fail<T>(message: impl Into<String>) -> CliResult<T> {
    Err(CliError {
        code: 1,
        message: message.into(),
    })
}

fn require(path: &Path) -> CliResult<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError {
            code: 2,
            message: format!("{}: no such file", path.display()),
        })
    }
}

fn read_image(path: &Path) -> CliResult<RgbImage> {
    RgbImage::read(require(path)?).map_err(|e| CliError {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(require(path)?).map_err(|e| CliError {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

/// Parses [`THREADS_ENV`]; `None` means automatic.
pub fn thread_count(value: Option<&str>) -> CliResult<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => fail(format!(
                "{THREADS_ENV} must be a non-negative integer, got {v:?}"
            )),
        },
    }
}

/// Formats a gradient-check table, one row per case.
pub fn gradcheck_table(reports: &[CheckReport]) -> String {
    let mut s = format!(
        "{:<20} {:>8} {:>8} {:>12} {:>8}  {:<6} {}\n",
        "op", "checked", "skipped", "max_rel_err", "tol", "status", "worst"
    );
    for r in reports {
        s += &format!(
            "{:<20} {:>8} {:>8} {:>12.3e} {:>8.0e}  {:<6} {}\n",
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tol,
            if r.passed { "ok" } else { "FAIL" },
            r.worst
        );
    }
    s
}

/// Runs one command, writing its normal output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Enhance {
            input,
            output,
            ckpt,
        } => {
            let img = read_image(&input)?;
            let model = load_model(&ckpt)?;
            let enhanced = model.forward(&img.to_tensor())?;
            RgbImage::from_tensor(&enhanced)?.write(&output)?;
            writeln!(out, "wrote {}", output.display())?;
        }
        Command::Analyze { a, b, report } => {
            let ia = read_image(&a)?.to_tensor::<f64>();
            let ib = b
                .as_deref()
                .map(read_image)
                .transpose()?
                .map(|i| i.to_tensor::<f64>());
            let r = analyze(&ia, ib.as_ref())?;
            let mut doc = json!({ "a_path": a.display().to_string() });
            if let Some(b) = &b {
                doc["b_path"] = json!(b.display().to_string());
            }
            doc["report"] = serde_json::to_value(&r).map_err(wave_ssm::Error::from)?;
            let text = serde_json::to_string_pretty(&doc).map_err(wave_ssm::Error::from)?;
            std::fs::write(&report, text + "\n")?;
            writeln!(out, "a: cA energy fraction {:.6}", r.a.energy.ca_fraction)?;
            if let Some(rb) = &r.b {
                writeln!(out, "b: cA energy fraction {:.6}", rb.energy.ca_fraction)?;
            }
            if let Some(s) = &r.swap {
                writeln!(
                    out,
                    "a: high-swap distance {:.6}, low-swap distance {:.6}",
                    s.a_high_swap, s.a_low_swap
                )?;
            }
            writeln!(out, "wrote {}", report.display())?;
        }
        Command::Metrics { a, b } => {
            let ia = read_image(&a)?.to_tensor::<f64>();
            let ib = read_image(&b)?.to_tensor::<f64>();
            writeln!(out, "psnr {}", psnr(&ia, &ib)?)?;
            writeln!(out, "ssim {}", ssim(&ia, &ib)?)?;
        }
        Command::Gradcheck { ops } => {
            let reports = run_suite(&ops, 0)?;
            write!(out, "{}", gradcheck_table(&reports))?;
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return fail(format!(
                    "{failed} of {} gradient checks failed",
                    reports.len()
                ));
            }
        }
        Command::Init { seed, out: path } => {
            let model = Model::build(&ModelConfig {
                seed,
                ..ModelConfig::default()
            })?;
            model.save(&path)?;
            writeln!(
                out,
                "wrote {} ({} parameters, checksum {:016x})",
                path.display(),
                model.param_count(),
                model.checksum()
            )?;
        }
        Command::TrainToy {
            input,
            steps,
            out: path,
        } => {
            let low = read_image(&input[0])?.to_tensor::<f32>();
            let target = read_image(&input[1])?.to_tensor::<f32>();
            let opts = ToyOptions {
                steps,
                ..ToyOptions::default()
            };
            let (model, report) = train_toy(&low, &target, &opts)?;
            model.save(&path)?;
            let summary = json!({
                "steps": report.steps,
                "initial_l1": report.initial_l1,
                "final_l1": report.final_l1,
                "ratio": report.ratio,
            });
            writeln!(out, "{summary}")?;
        }
    }
    Ok(())
}
