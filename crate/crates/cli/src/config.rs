//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sumformer_core::construction::LinformerValueScale;
use sumformer_core::targets::TARGET_NAMES;
use sumformer_core::AttentionKind;

use crate::CliError;

/// Settings shared by every subcommand. Each one can also be set in the
/// `--config` file under the same name (with underscores).
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML file with any of the settings below.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seeds for sweeps, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Tokens per sequence.
    #[arg(long)]
    pub n: Option<usize>,
    /// Token width (model width for `bench`).
    #[arg(long)]
    pub d: Option<usize>,
    /// Latent width d'.
    #[arg(long)]
    pub d_latent: Option<usize>,
    /// Grid cells per axis of the discrete construction.
    #[arg(long)]
    pub delta: Option<usize>,
    /// Linformer projection rows / Performer features.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_name = "NAME")]
    pub target: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dataset size (train + validation).
    #[arg(long)]
    pub points: Option<usize>,
    /// Replaces every floating-point tolerance of `verify`.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub variant: Option<AttentionKind>,
    /// Value scale of the Linformer construction: `k` or `n`.
    #[arg(long, value_parser = parse_scale)]
    pub linformer_scale: Option<LinformerValueScale>,
    /// Sequences per optimizer step; 0 means full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Token widths for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub d_list: Option<Vec<usize>>,
    /// Latent widths for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub dprime_list: Option<Vec<usize>>,
    /// Sequence lengths for `bench`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
}

fn parse_scale(s: &str) -> Result<LinformerValueScale, String> {
    match s {
        "k" => Ok(LinformerValueScale::K),
        "n" => Ok(LinformerValueScale::N),
        other => Err(format!("expected `k` or `n`, got `{other}`")),
    }
}

/// The file form of [`Overrides`].
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    n: Option<usize>,
    d: Option<usize>,
    d_latent: Option<usize>,
    delta: Option<usize>,
    k: Option<usize>,
    target: Option<String>,
    epochs: Option<usize>,
    points: Option<usize>,
    tol: Option<f64>,
    variant: Option<AttentionKind>,
    linformer_scale: Option<LinformerValueScale>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    d_list: Option<Vec<usize>>,
    dprime_list: Option<Vec<usize>>,
    n_list: Option<Vec<usize>>,
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub d: usize,
    pub d_latent: usize,
    pub delta: usize,
    pub k: Option<usize>,
    pub target: String,
    pub epochs: usize,
    pub points: usize,
    pub tol: Option<f64>,
    pub variant: Option<AttentionKind>,
    pub linformer_scale: LinformerValueScale,
    /// `None` is full batch.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub d_list: Vec<usize>,
    pub dprime_list: Vec<usize>,
    pub n_list: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            seed: 0,
            seeds: Vec::new(),
            n: 3,
            d: 2,
            d_latent: 32,
            delta: 4,
            k: None,
            target: "cubic-rest".into(),
            epochs: 200,
            points: 2000,
            tol: None,
            variant: None,
            linformer_scale: LinformerValueScale::K,
            batch_size: Some(sumformer_core::train::DEFAULT_BATCH_SIZE),
            lr: 1e-3,
            d_list: Vec::new(),
            dprime_list: vec![2, 8, 32, 128],
            n_list: vec![32, 64, 128, 256],
        }
    }
}

fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

macro_rules! overlay {
    ($cfg:ident, $src:expr, [$($field:ident),*]) => {
        $(if let Some(v) = $src.$field { $cfg.$field = v; })*
    };
}

impl RunConfig {
    /// Defaults, then the config file, then flags; validated.
    pub fn resolve(flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            let file = read_file(path)?;
            cfg.apply_batch(file.batch_size);
            if file.k.is_some() {
                cfg.k = file.k;
            }
            if file.tol.is_some() {
                cfg.tol = file.tol;
            }
            if file.variant.is_some() {
                cfg.variant = file.variant;
            }
            overlay!(cfg, file, [out, seed, seeds, n, d, d_latent, delta, target, epochs, points,
                linformer_scale, lr, d_list, dprime_list, n_list]);
        }
        let flags = flags.clone();
        cfg.apply_batch(flags.batch_size);
        if flags.k.is_some() {
            cfg.k = flags.k;
        }
        if flags.tol.is_some() {
            cfg.tol = flags.tol;
        }
        if flags.variant.is_some() {
            cfg.variant = flags.variant;
        }
        overlay!(cfg, flags, [out, seed, seeds, n, d, d_latent, delta, target, epochs, points,
            linformer_scale, lr, d_list, dprime_list, n_list]);
        if cfg.seeds.is_empty() {
            cfg.seeds = vec![cfg.seed];
        }
        if cfg.d_list.is_empty() {
            cfg.d_list = vec![cfg.d];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_batch(&mut self, b: Option<usize>) {
        if let Some(b) = b {
            self.batch_size = (b > 0).then_some(b);
        }
    }

    /// Checks that depend on the subcommand.
    pub fn validate_for(&self, command: &str) -> Result<(), CliError> {
        let k = self.k.unwrap_or(2);
        match command {
            "verify" if self.k.is_some_and(|k| k >= self.n) => Err(CliError::Config(format!(
                "k must satisfy k < n = {}, got {k}",
                self.n
            ))),
            "bench" if self.n_list.iter().any(|&n| n <= k) => Err(CliError::Config(format!(
                "every n in n_list must exceed k = {k}"
            ))),
            _ => Ok(()),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.d == 0 || self.d_latent == 0 || self.delta == 0 {
            return bad("d, d_latent and delta must be positive".into());
        }
        if self.k == Some(0) {
            return bad("k must be positive".into());
        }
        if !TARGET_NAMES.contains(&self.target.as_str()) {
            return bad(format!(
                "unknown target `{}`; expected one of {}",
                self.target,
                TARGET_NAMES.join(", ")
            ));
        }
        if self.points < 2 {
            return bad(format!("points must be at least 2, got {}", self.points));
        }
        if let Some(t) = self.tol {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("tol must be a finite non-negative number, got {t}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if self.d_list.contains(&0) || self.dprime_list.is_empty() || self.dprime_list.contains(&0) {
            return bad("d_list and dprime_list must be nonempty lists of positive widths".into());
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return bad("n_list must be a nonempty list of positive lengths".into());
        }
        Ok(())
    }
}
