//! The verification suite: oracle and invariant checks over the
//! constructions, models and gradients, one record per property.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::construction::{build_sum_extraction, LinformerValueScale, PhiMap, SumExtractionConfig};
use crate::discrete::build_discrete_sumformer;
use crate::equivariance::{check_equivariance, EXHAUSTIVE_MAX_N};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, GRAD_REL_TOL};
use crate::multisym::{binomial, enumerate_multidegrees, generation_oracle, power_sum_vector, MultiDegree};
use crate::sumformer::{build_continuous_sumformer, sup_error, Polynomial, PsiTerm, SumformerModel};
use crate::targets::{poly_square, TargetFunction, TargetKind};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub n: usize,
    pub d: usize,
    pub delta: usize,
    /// Linformer projection rows / Performer features; `n − 1` when unset.
    pub k: Option<usize>,
    /// Restricts the sum-recovery checks to one attention variant.
    pub variant: Option<AttentionKind>,
    pub linformer_value_scale: LinformerValueScale,
    pub seed: u64,
    pub trials: usize,
    /// Replaces every floating-point tolerance when set.
    pub tol: Option<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n: 3,
            d: 2,
            delta: 4,
            k: None,
            variant: None,
            linformer_value_scale: LinformerValueScale::K,
            seed: 0,
            trials: 100,
            tol: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub status: Status,
    pub max_residual: f64,
    pub tol: f64,
    pub witness_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub records: Vec<Record>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.status == Status::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.status == Status::Fail)
    }
}

/// Input that produced the largest residual of a check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WitnessFile {
    pub name: String,
    pub residual: f64,
    pub input: Option<Matrix>,
    pub permutation: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

struct Outcome {
    residual: f64,
    input: Option<Matrix>,
    permutation: Option<Vec<usize>>,
    seed: Option<u64>,
}

impl Outcome {
    fn new(residual: f64) -> Self {
        Self {
            residual,
            input: None,
            permutation: None,
            seed: None,
        }
    }

    /// Keeps the worse of `self` and `other` (NaN counts as worst).
    fn worst(self, other: Self) -> Self {
        if other.residual > self.residual || (other.residual.is_nan() && !self.residual.is_nan()) {
            other
        } else {
            self
        }
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

/// Max over `trials` random inputs of `‖sums(X) − p(X)‖_∞` for the
/// sum-extraction network of the given variant.
#[allow(clippy::too_many_arguments)]
pub fn sigma_recovery_residual(
    variant: AttentionKind,
    n: usize,
    d: usize,
    k: Option<usize>,
    scale: LinformerValueScale,
    construction_seed: u64,
    trials: usize,
    seed: u64,
) -> Result<(f64, Option<Matrix>)> {
    let basis = enumerate_multidegrees(d, n)?;
    let mut config = SumExtractionConfig::new(variant, n)
        .with_seed(construction_seed)
        .with_linformer_scale(scale);
    config.k = k;
    let c = build_sum_extraction(d, PhiMap::Monomial { basis: basis.clone() }, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Outcome::new(0.0);
    for _ in 0..trials {
        let x = random_sequence(&mut rng, n, d);
        let sums = c.sums(&x)?;
        let p = power_sum_vector(&x, &basis)?;
        let r = sums
            .row_iter()
            .flat_map(|row| row.iter().zip(&p).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        worst = worst.worst(Outcome {
            residual: r,
            input: Some(x),
            permutation: None,
            seed: None,
        });
    }
    Ok((worst.residual, worst.input))
}

/// Continuous Sumformer with `ψ_c(x, Σ) = x_c + (Σ − φ(x))_{e_c}²`, i.e. the
/// lift of `x + (Σ rest)²`.
pub fn rest_square_sumformer(n: usize, d: usize) -> Result<SumformerModel> {
    let basis = enumerate_multidegrees(d, n)?;
    let arity = basis.len();
    let components = (0..d)
        .map(|c| {
            let mut e = vec![0u32; d];
            e[c] = 1;
            let unit = MultiDegree::new(e.clone());
            let pos = basis.position(&unit).expect("degree-one monomial is in the basis");
            let mut sq = vec![0u32; arity];
            sq[pos] = 2;
            Ok(vec![
                PsiTerm {
                    alpha: unit,
                    sigma: Polynomial::constant(arity, 1.0),
                },
                PsiTerm {
                    alpha: MultiDegree::new(vec![0; d]),
                    sigma: Polynomial::new(arity, vec![(1.0, sq)])?,
                },
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    build_continuous_sumformer(n, d, components)
}

fn check_sigma(cfg: &VerifyConfig, variant: AttentionKind) -> Result<Outcome> {
    let (n, d) = (cfg.n, cfg.d);
    let k = match variant {
        AttentionKind::Standard => None,
        _ => Some(cfg.k.unwrap_or(n.saturating_sub(1))),
    };
    let construction_seeds: Vec<u64> = match variant {
        AttentionKind::Performer => (0..10).map(|s| cfg.seed + s).collect(),
        _ => vec![cfg.seed],
    };
    let mut worst = Outcome::new(0.0);
    for cs in construction_seeds {
        let (r, x) = sigma_recovery_residual(variant, n, d, k, cfg.linformer_value_scale, cs, cfg.trials, cfg.seed)?;
        worst = worst.worst(Outcome {
            residual: r,
            input: x,
            permutation: None,
            seed: Some(cs),
        });
    }
    Ok(worst)
}

fn check_averaging(cfg: &VerifyConfig) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = Outcome::new(0.0);
    for n in [2, cfg.n.max(2), 16, 64] {
        let c = build_sum_extraction(
            1,
            PhiMap::Monomial {
                basis: enumerate_multidegrees(1, 2)?,
            },
            SumExtractionConfig::new(AttentionKind::Standard, n),
        )?;
        let x = random_sequence(&mut rng, n, 1);
        let a = c.attention_matrix(&x)?;
        let r = a.data().iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max);
        worst = worst.worst(Outcome {
            residual: r,
            input: Some(x),
            permutation: None,
            seed: None,
        });
    }
    Ok(worst)
}

fn equivariance_outcome(f: &(dyn Fn(&Matrix) -> Result<Matrix> + Sync), n: usize, d: usize, cfg: &VerifyConfig, tol: f64) -> Result<Outcome> {
    let r = check_equivariance(f, n, d, cfg.trials, cfg.seed, tol)?;
    Ok(Outcome {
        residual: r.max_violation,
        input: r.witness.as_ref().map(|w| w.input.clone()),
        permutation: r.witness.map(|w| w.permutation.indices().to_vec()),
        seed: None,
    })
}

fn check_discrete(cfg: &VerifyConfig) -> Result<Outcome> {
    // Exactness: anchors reproduce g and permutations act exactly.
    let target = poly_square();
    let (n, d) = (cfg.n.min(EXHAUSTIVE_MAX_N), cfg.d);
    let ds = build_discrete_sumformer(&target, cfg.delta, n, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = Outcome::new(0.0);
    for _ in 0..cfg.trials.min(20) {
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(0..cfg.delta) as f64 / cfg.delta as f64);
        let r = ds.forward(&x)?.max_abs_diff(&target.eval(&x)?)?;
        worst = worst.worst(Outcome {
            residual: r,
            input: Some(x),
            permutation: None,
            seed: None,
        });
    }
    let f = |x: &Matrix| ds.forward(x);
    let eq = check_equivariance(&f, n, d, cfg.trials.min(20), cfg.seed, 0.0)?;
    worst = worst.worst(Outcome {
        residual: eq.max_violation,
        input: eq.witness.as_ref().map(|w| w.input.clone()),
        permutation: eq.witness.map(|w| w.permutation.indices().to_vec()),
        seed: None,
    });
    Ok(worst)
}

/// `sup_error / (L·δ·√(nd))` for `g = x₁ + x₂²` at `n = 2, d = 1`; at most 1
/// when the modulus-of-continuity bound holds.
pub fn discrete_bound_ratio(delta: usize, samples: usize, seed: u64) -> Result<f64> {
    let target = x1_plus_x2_squared();
    let ds = build_discrete_sumformer(&target, delta, 2, 1)?;
    let f = |x: &Matrix| ds.forward(x);
    let err = sup_error(&f, &target, 2, 1, samples, seed)?;
    Ok(err / (5f64.sqrt() * 2f64.sqrt() / delta as f64))
}

/// `g(x₁, {x₂}) = x₁ + x₂²` for `d = 1`; Lipschitz with constant `√5` on
/// `[0,1)²`.
pub fn x1_plus_x2_squared() -> TargetFunction {
    TargetFunction::new("x1-plus-x2-squared", TargetKind::PolynomialType, true, |x, rest| {
        vec![x[0] + rest.iter().map(|r| r[0] * r[0]).sum::<f64>()]
    })
}

/// A scalar function of a whole sequence.
type SymFn = dyn Fn(&Matrix) -> f64;

fn check_oracle(cfg: &VerifyConfig) -> Result<Outcome> {
    let e2 = |x: &Matrix| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in i + 1..x.rows() {
                s += x.get(i, 0) * x.get(j, 0);
            }
        }
        s
    };
    let p1 = |x: &Matrix| (0..x.rows()).map(|i| x.get(i, 0)).sum::<f64>();
    let mixed = |x: &Matrix| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in i + 1..x.rows() {
                s += x.get(i, 0) * x.get(j, 1) + x.get(j, 0) * x.get(i, 1);
            }
        }
        s
    };
    let cases: [(&SymFn, usize, usize); 3] = [(&e2, 1, 2), (&p1, 1, 3), (&mixed, 2, 2)];
    let mut worst = Outcome::new(0.0);
    for (f, d, n) in cases {
        let fit = generation_oracle(f, d, n, 2 * n, 500, cfg.seed)?;
        worst = worst.worst(Outcome::new(fit.residual));
    }
    Ok(worst)
}

fn check_bridge(cfg: &VerifyConfig) -> Result<Outcome> {
    let (n, d) = (cfg.n, cfg.d);
    let model = rest_square_sumformer(n, d)?;
    let crate::sumformer::Psi::Continuous { psi } = &model.psi else {
        unreachable!("continuous construction");
    };
    let c = build_sum_extraction(d, model.phi.clone(), SumExtractionConfig::new(AttentionKind::Standard, n))?;
    let target = poly_square();
    let dl = model.d_latent;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = Outcome::new(0.0);
    for _ in 0..cfg.trials {
        let x = random_sequence(&mut rng, n, d);
        let direct = model.forward(&x)?;
        let out = c.forward(&x)?;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row = out.row(i);
                let phi = &row[1 + d..1 + d + dl];
                let sigma = &row[1 + d + dl..];
                let rest: Vec<f64> = sigma.iter().zip(phi).map(|(s, p)| s - p).collect();
                psi.eval(x.row(i), &rest)
            })
            .collect();
        let via_attention = Matrix::from_rows(&rows)?;
        let r = direct
            .max_abs_diff(&via_attention)?
            .max(direct.max_abs_diff(&target.eval(&x)?)?);
        worst = worst.worst(Outcome {
            residual: r,
            input: Some(x),
            permutation: None,
            seed: None,
        });
    }
    Ok(worst)
}

fn check_gradients(cfg: &VerifyConfig) -> Result<Outcome> {
    let mut worst = Outcome::new(0.0);
    for s in 0..100 {
        let seed = cfg.seed + s;
        let g = gradient_check(seed, GRAD_REL_TOL)?;
        worst = worst.worst(Outcome {
            residual: g.rel_error,
            input: None,
            permutation: None,
            seed: Some(seed),
        });
    }
    Ok(worst)
}

fn check_latent_count() -> Result<Outcome> {
    let mut worst = Outcome::new(0.0);
    for d in 1..=6 {
        for n in 1..=8 {
            let count = enumerate_multidegrees(d, n)?.len();
            let formula = binomial(n + d, d).expect("small binomial") - 1;
            worst = worst.worst(Outcome::new(count.abs_diff(formula) as f64));
        }
    }
    Ok(worst)
}

fn write_witness(dir: &Path, name: &str, o: &Outcome) -> Result<PathBuf> {
    let dir = dir.join("witnesses");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.json"));
    let w = WitnessFile {
        name: name.to_string(),
        residual: o.residual,
        input: o.input.clone(),
        permutation: o.permutation.clone(),
        seed: o.seed,
    };
    fs::write(&path, serde_json::to_string_pretty(&w)?)?;
    Ok(path)
}

/// Runs every check. Failing checks write a witness file under
/// `out/witnesses/` when `out` is given.
pub fn run_verify(cfg: &VerifyConfig, out: Option<&Path>) -> Result<VerifyReport> {
    if cfg.n < 2 || cfg.d == 0 || cfg.delta == 0 || cfg.trials == 0 {
        return Err(Error::Contract(format!(
            "verify needs n ≥ 2, d ≥ 1, Δ ≥ 1, trials ≥ 1 (got n={}, d={}, Δ={}, trials={})",
            cfg.n, cfg.d, cfg.delta, cfg.trials
        )));
    }
    let tol = |default: f64| cfg.tol.unwrap_or(default);
    let mut checks: Vec<(String, f64, Outcome)> = Vec::new();

    checks.push(("latent-dimension-count".into(), 0.0, check_latent_count()?));
    let variants = match cfg.variant {
        Some(v) => vec![v],
        None => vec![AttentionKind::Standard, AttentionKind::Linformer, AttentionKind::Performer],
    };
    for v in variants {
        let t = match v {
            AttentionKind::Performer => tol(1e-8),
            _ => tol(1e-10),
        };
        checks.push((format!("sigma-recovery-{v}"), t, check_sigma(cfg, v)?));
    }
    checks.push(("averaging-attention".into(), tol(1e-12), check_averaging(cfg)?));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d) = (cfg.n, cfg.d);
    let mlp_model = SumformerModel::mlp(d, 8, 2, 16, &mut rng)?;
    let poly_model = SumformerModel::polynomial(n, d, 2, 16, &mut rng)?;
    let ext = build_sum_extraction(
        d,
        PhiMap::Monomial {
            basis: enumerate_multidegrees(d, n)?,
        },
        SumExtractionConfig::new(AttentionKind::Standard, n),
    )?;
    let t = tol(1e-10);
    checks.push((
        "equivariance-sumformer-mlp".into(),
        t,
        equivariance_outcome(&|x: &Matrix| mlp_model.forward(x), n, d, cfg, t)?,
    ));
    checks.push((
        "equivariance-sumformer-polynomial".into(),
        t,
        equivariance_outcome(&|x: &Matrix| poly_model.forward(x), n, d, cfg, t)?,
    ));
    checks.push((
        "equivariance-sum-extraction".into(),
        t,
        equivariance_outcome(&|x: &Matrix| ext.forward(x), n, d, cfg, t)?,
    ));

    checks.push(("discrete-exactness".into(), 0.0, check_discrete(cfg)?));
    let ratio = discrete_bound_ratio(cfg.delta, 1000, cfg.seed)?;
    checks.push(("discrete-lipschitz-bound".into(), 1.0, Outcome::new(ratio)));
    checks.push(("generation-oracle".into(), tol(1e-8), check_oracle(cfg)?));
    checks.push(("continuous-bridge".into(), tol(1e-8), check_bridge(cfg)?));
    checks.push(("gradient-check".into(), tol(GRAD_REL_TOL), check_gradients(cfg)?));

    let mut records = Vec::with_capacity(checks.len());
    for (name, tol, outcome) in checks {
        let pass = outcome.residual <= tol;
        let witness_path = match (pass, out) {
            (false, Some(dir)) => Some(write_witness(dir, &name, &outcome)?),
            _ => None,
        };
        records.push(Record {
            name,
            status: if pass { Status::Pass } else { Status::Fail },
            max_residual: outcome.residual,
            tol,
            witness_path,
        });
    }
    Ok(VerifyReport {
        config: cfg.clone(),
        records,
    })
}
