mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sumformer_core::attention::{mac_count, AttentionHead, HeadVariant};
use sumformer_core::train::{latent_sweep, run_cell, write_curve_csv, write_sweep_csv, RunSpec, TrainConfig};
use sumformer_core::verify::{run_verify, VerifyConfig};
use sumformer_core::{targets, AttentionKind, Error, Matrix};
use thiserror::Error as ThisError;

use config::{Overrides, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Verify(_) => EXIT_VERIFY,
            Self::Core(Error::Diverged { .. }) => EXIT_DIVERGED,
            _ => 1,
        }
    }
}

/// Sumformer verification, training, latent sweeps and attention cost
/// benchmarks.
#[derive(Parser, Debug)]
#[command(name = "sumformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant and oracle suite; writes verify_report.json.
    Verify(Overrides),
    /// Train one MLP Sumformer; writes curve.csv and manifest.json.
    Train(Overrides),
    /// Train over a grid of (d, d', seed); writes sweep.csv and manifest.json.
    Sweep(Overrides),
    /// Tabulate attention MAC counts over sequence lengths; writes bench.csv.
    Bench(Overrides),
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a RunConfig,
    result: T,
}

fn write_manifest<T: Serialize>(cfg: &RunConfig, command: &str, result: T) -> Result<(), CliError> {
    let m = Manifest {
        schema_version: sumformer_core::io::SCHEMA_VERSION,
        command,
        config: cfg,
        result,
    };
    fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn run_spec(cfg: &RunConfig) -> RunSpec {
    RunSpec {
        target: cfg.target.clone(),
        n: cfg.n,
        d: cfg.d,
        d_latent: cfg.d_latent,
        points: cfg.points,
        train: TrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            ..TrainConfig::default()
        },
        ..RunSpec::default()
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let vc = VerifyConfig {
        n: cfg.n,
        d: cfg.d,
        delta: cfg.delta,
        k: cfg.k,
        variant: cfg.variant,
        linformer_value_scale: cfg.linformer_scale,
        seed: cfg.seed,
        tol: cfg.tol,
        ..VerifyConfig::default()
    };
    let report = run_verify(&vc, Some(&cfg.out))?;
    fs::write(cfg.out.join("verify_report.json"), serde_json::to_string_pretty(&report)?)?;
    for r in &report.records {
        let status = format!("{:?}", r.status).to_lowercase();
        println!("{status:4}  {:36} residual {:.3e}  tol {:.1e}", r.name, r.max_residual, r.tol);
    }
    let failed: Vec<String> = report
        .failures()
        .map(|r| match &r.witness_path {
            Some(p) => format!("{} (witness {})", r.name, p.display()),
            None => r.name.clone(),
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let target = targets::by_name(&cfg.target)?;
    match run_cell(&target, &run_spec(cfg), cfg.seed) {
        Ok(report) => {
            write_curve_csv(&report, create(&cfg.out.join("curve.csv"))?)?;
            write_manifest(cfg, "train", &report)?;
            println!("best validation relative L2 error {:.4e}", report.best_validation_error);
            Ok(())
        }
        Err(Error::Diverged { epoch, last_report }) => {
            write_curve_csv(&last_report, create(&cfg.out.join("curve.csv"))?)?;
            write_manifest(cfg, "train", &*last_report)?;
            Err(Error::Diverged { epoch, last_report }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let target = targets::by_name(&cfg.target)?;
    let rows = latent_sweep(&target, &run_spec(cfg), &cfg.d_list, &cfg.dprime_list, &cfg.seeds)?;
    write_sweep_csv(&rows, create(&cfg.out.join("sweep.csv"))?)?;
    write_manifest(cfg, "sweep", &rows)?;
    println!("{} sweep cells written", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    variant: AttentionKind,
    n: usize,
    m: usize,
    k: usize,
    macs: u64,
    counted_macs: u64,
    ratio: Option<f64>,
}

/// MAC counts from the closed form, cross-checked against a counted forward
/// pass of a random head.
fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let m = cfg.d;
    let k = cfg.k.unwrap_or(2);
    let mut ns = cfg.n_list.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let variants = match cfg.variant {
        Some(v) => vec![v],
        None => vec![AttentionKind::Standard, AttentionKind::Linformer, AttentionKind::Performer],
    };
    for v in variants {
        let mut prev: Option<u64> = None;
        for &n in &ns {
            let rand = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
                Matrix::from_fn(r, c, |_, _| rand::Rng::random_range(rng, -1.0..1.0))
            };
            let variant = match v {
                AttentionKind::Standard => HeadVariant::Standard,
                AttentionKind::Linformer => HeadVariant::Linformer {
                    e: rand(k, n, &mut rng),
                    f: rand(k, n, &mut rng),
                },
                AttentionKind::Performer => HeadVariant::Performer {
                    omegas: rand(k, m, &mut rng),
                },
            };
            let head = AttentionHead::new(rand(m, m, &mut rng), rand(m, m, &mut rng), rand(m, m, &mut rng), variant)?;
            let mut counted = 0;
            head.forward_counted(&rand(n, m, &mut rng), &mut counted)?;
            let macs = mac_count(v, n as u64, m as u64, k as u64);
            rows.push(BenchRow {
                variant: v,
                n,
                m,
                k,
                macs,
                counted_macs: counted,
                ratio: prev.map(|p| macs as f64 / p as f64),
            });
            prev = Some(macs);
        }
    }
    let mut w = create(&cfg.out.join("bench.csv"))?;
    writeln!(w, "variant,n,m,k,macs,counted_macs,ratio")?;
    for r in &rows {
        let ratio = r.ratio.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{},{}", r.variant, r.n, r.m, r.k, r.macs, r.counted_macs, ratio)?;
        println!("{:9} n={:5} macs={:12} ratio={ratio}", r.variant.to_string(), r.n, r.macs);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, flags) = match &cli.command {
        Command::Verify(f) => ("verify", f),
        Command::Train(f) => ("train", f),
        Command::Sweep(f) => ("sweep", f),
        Command::Bench(f) => ("bench", f),
    };
    let cfg = RunConfig::resolve(flags)?;
    cfg.validate_for(name)?;
    fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::Verify(_) => cmd_verify(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
