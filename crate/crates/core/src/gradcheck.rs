//! Central finite-difference check of tape gradients on random MLPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mlp::{mlp_forward, Mlp, MlpParams, MlpSpec};
use crate::tape::Tape;
use crate::tensor::{matmul, Matrix};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
/// Inputs whose pre-activations come this close to a ReLU kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheck {
    pub seed: u64,
    pub widths: Vec<usize>,
    /// `‖g_tape − g_fd‖₂ / max(‖g_tape‖₂, ‖g_fd‖₂)` over all parameters.
    pub rel_error: f64,
    pub resamples: usize,
    pub passed: bool,
}

fn loss(spec: &MlpSpec, params: &MlpParams, x: &Matrix, r: &Matrix) -> Result<f64> {
    let y = mlp_forward(spec, params, x)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

fn min_preactivation(mlp: &Mlp, x: &Matrix) -> Result<f64> {
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    let last = mlp.params.layers.len() - 1;
    for (i, l) in mlp.params.layers.iter().enumerate() {
        let z = matmul(&h, &l.weight)?.add_row(l.bias.data())?;
        if i < last {
            min = z.data().iter().fold(min, |m, v| m.min(v.abs()));
            h = z.map(|v| v.max(0.0));
        }
    }
    Ok(min)
}

/// Compares the tape gradient of `Σ Y ⊙ R` for a random MLP (widths ≤ 16),
/// random inputs in `[−1,1]` and random `R` against central differences.
pub fn gradient_check(seed: u64, tol: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=4);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=16)).collect();
    let spec = MlpSpec::new(widths.clone())?;
    let mut mlp = Mlp::init(spec.clone(), &mut rng);
    let rows = rng.random_range(1..=4);
    let mut resamples = 0;
    let x = loop {
        // A dead layer can pin a later pre-activation near zero; redraw weights.
        if resamples > 0 && resamples % 100 == 0 {
            mlp = Mlp::init(spec.clone(), &mut rng);
        }
        let x = Matrix::from_fn(rows, widths[0], |_, _| rng.random_range(-1.0..=1.0));
        if min_preactivation(&mlp, &x)? >= KINK_MARGIN {
            break x;
        }
        resamples += 1;
    };
    let r = Matrix::from_fn(rows, *widths.last().expect("nonempty"), |_, _| rng.random_range(-1.0..=1.0));

    let mut tape = Tape::new();
    let vars = mlp.register(&mut tape);
    let xv = tape.constant(x.clone());
    let y = mlp.forward_on_tape(&mut tape, &vars, xv)?;
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv)?;
    let total = tape.sum(prod);
    let grads = tape.gradient(total)?;
    let analytic: Vec<f64> = vars
        .vars()
        .flat_map(|v| grads.get(v).expect("parameter").data().to_vec())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut params = mlp.params.clone();
    let count = params.parameter_count();
    for k in 0..count {
        let slot = locate(&mut params, k);
        let orig = *slot;
        *slot = orig + FD_STEP;
        let up = loss(&spec, &params, &x, &r)?;
        *locate(&mut params, k) = orig - FD_STEP;
        let down = loss(&spec, &params, &x, &r)?;
        *locate(&mut params, k) = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let rel_error = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    Ok(GradCheck {
        seed,
        widths,
        rel_error,
        resamples,
        passed: rel_error <= tol,
    })
}

fn locate(params: &mut MlpParams, mut k: usize) -> &mut f64 {
    for m in params.matrices_mut() {
        let len = m.data().len();
        if k < len {
            return &mut m.data_mut()[k];
        }
        k -= len;
    }
    panic!("parameter index out of range")
}
