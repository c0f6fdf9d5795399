//! Token permutations, the semi-invariant ↔ equivariant lift, and sampling
//! checks for both properties.
//!
//! Checks are exhaustive over all permutations when `n ≤ 6` and sample one
//! random permutation per trial otherwise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

/// Largest `n` for which checks enumerate every permutation.
pub const EXHAUSTIVE_MAX_N: usize = 6;

/// A bijection on `0..n`; applied to a sequence, row `i` of the output is row
/// `indices[i]` of the input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; indices.len()];
        for &i in &indices {
            if i >= indices.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("{indices:?} is not a bijection")));
            }
        }
        Ok(Self(indices))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    /// `self ∘ other`: permuting by `other` and then by `self` equals
    /// permuting by `self.compose(other)`.
    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0.iter().map(|&i| other.0[i]).collect())
    }

    /// Every permutation of `0..n` in lexicographic order.
    pub fn all(n: usize) -> Vec<Self> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..n).collect();
        loop {
            out.push(Self(cur.clone()));
            // next lexicographic permutation
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                return out;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
    }
}

pub fn permute(x: &Matrix, p: &Permutation) -> Result<Matrix> {
    if p.len() != x.rows() {
        return Err(shape_err(
            "permute",
            format!("permutation of {} for {} rows", p.len(), x.rows()),
        ));
    }
    let rows: Vec<&[f64]> = p.0.iter().map(|&i| x.row(i)).collect();
    Matrix::from_rows(&rows)
}

/// A sequence-to-sequence map.
pub type SeqFn<'a> = dyn Fn(&Matrix) -> Result<Matrix> + Sync + 'a;

/// Semi-invariant sequence-to-point map `g(x₁, {x₂,…,x_n})`.
pub type SemiInvariantFn = dyn Fn(&[f64], &[&[f64]]) -> Vec<f64> + Send + Sync;

/// Row `i` of the result is `g(xᵢ, all other tokens in row order)`.
pub fn lift(g: &SemiInvariantFn, x: &Matrix) -> Result<Matrix> {
    let rows: Vec<&[f64]> = x.row_iter().collect();
    let mut out = Vec::with_capacity(rows.len());
    let mut rest = Vec::with_capacity(rows.len().saturating_sub(1));
    for i in 0..rows.len() {
        rest.clear();
        rest.extend(rows.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, r)| *r));
        out.push(g(rows[i], &rest));
    }
    Matrix::from_rows(&out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Witness {
    pub input: Matrix,
    pub permutation: Permutation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub max_violation: f64,
    pub tol: f64,
    pub passed: bool,
    /// Input and permutation attaining `max_violation`.
    pub witness: Option<Witness>,
}

fn permutations_for(n: usize, fix_first: bool, rng: &mut ChaCha8Rng) -> Vec<Permutation> {
    let free = if fix_first { n.saturating_sub(1) } else { n };
    let lift_fixed = |p: Permutation| {
        if fix_first {
            let mut v = vec![0];
            v.extend(p.0.iter().map(|i| i + 1));
            Permutation(v)
        } else {
            p
        }
    };
    if n <= EXHAUSTIVE_MAX_N {
        Permutation::all(free).into_iter().map(lift_fixed).collect()
    } else {
        vec![lift_fixed(Permutation::random(free, rng))]
    }
}

/// Max over trials and permutations of `‖f(πX) − πf(X)‖_∞` on `X` uniform in
/// `[0,1)^{n×d}`.
pub fn check_equivariance(
    f: &SeqFn<'_>,
    n: usize,
    d: usize,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        max_violation: 0.0,
        tol,
        passed: true,
        witness: None,
    };
    for _ in 0..trials.max(1) {
        let x = Matrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let fx = f(&x)?;
        for p in permutations_for(n, false, &mut rng) {
            let lhs = f(&permute(&x, &p)?)?;
            let rhs = permute(&fx, &p)?;
            let v = lhs.max_abs_diff(&rhs)?;
            if v > report.max_violation || (v.is_nan() && !report.max_violation.is_nan()) {
                report.max_violation = v;
                report.witness = Some(Witness {
                    input: x.clone(),
                    permutation: p,
                });
            }
        }
    }
    report.passed = report.max_violation <= tol;
    Ok(report)
}

/// Like [`check_equivariance`] for sequence-to-point maps, using
/// permutations that fix the first token.
pub fn check_semi_invariance(
    g: &(dyn Fn(&Matrix) -> Vec<f64> + Sync),
    n: usize,
    d: usize,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        max_violation: 0.0,
        tol,
        passed: true,
        witness: None,
    };
    for _ in 0..trials.max(1) {
        let x = Matrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let gx = g(&x);
        for p in permutations_for(n, true, &mut rng) {
            let gp = g(&permute(&x, &p)?);
            let v = gx
                .iter()
                .zip(&gp)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            if v > report.max_violation {
                report.max_violation = v;
                report.witness = Some(Witness {
                    input: x.clone(),
                    permutation: p,
                });
            }
        }
    }
    report.passed = report.max_violation <= tol;
    Ok(report)
}

/// Adapts a semi-invariant `g(x₁, rest)` to the sequence-to-point form used by
/// [`check_semi_invariance`].
pub fn as_sequence_to_point(g: &SemiInvariantFn) -> impl Fn(&Matrix) -> Vec<f64> + Sync + '_ {
    move |x: &Matrix| {
        let rest: Vec<&[f64]> = x.row_iter().skip(1).collect();
        g(x.row(0), &rest)
    }
}
