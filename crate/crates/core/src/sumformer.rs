//! The Sumformer: `Σ = Σₖ φ(xₖ)` once per sequence, then `ψ(xᵢ, Σ)` per token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::construction::PhiMap;
use crate::equivariance::SeqFn;
use crate::error::{shape_err, Error, Result};
use crate::mlp::{Mlp, MlpSpec, MlpVars};
use crate::multisym::{enumerate_multidegrees, MultiDegree};
use crate::tape::{group_repeat, group_sum, Tape, Var};
use crate::targets::TargetFunction;
use crate::tensor::Matrix;

/// Sparse polynomial `Σ c · ∏ sⱼ^{eⱼ}` in a fixed number of variables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub arity: usize,
    pub terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    pub fn new(arity: usize, terms: Vec<(f64, Vec<u32>)>) -> Result<Self> {
        if let Some((_, e)) = terms.iter().find(|(_, e)| e.len() != arity) {
            return Err(Error::Contract(format!(
                "exponent vector of length {} in a polynomial of arity {arity}",
                e.len()
            )));
        }
        Ok(Self { arity, terms })
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        Self {
            arity,
            terms: vec![(c, vec![0; arity])],
        }
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        self.terms.iter().fold(0.0, |acc, (c, e)| {
            acc + e
                .iter()
                .zip(s)
                .fold(*c, |p, (&k, &v)| if k == 0 { p } else { p * v.powi(k as i32) })
        })
    }
}

/// One summand `x^α · σ_α(Σ − φ(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiTerm {
    pub alpha: MultiDegree,
    pub sigma: Polynomial,
}

/// Polynomial `ψ`; entry `c` of `components` lists the terms of output
/// coordinate `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPsi {
    pub components: Vec<Vec<PsiTerm>>,
}

impl ContinuousPsi {
    /// `ψ(x, ·)` given the sums over the other tokens, `Σ − φ(x)`.
    pub fn eval(&self, x: &[f64], rest_sums: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .fold(0.0, |acc, t| acc + t.alpha.monomial(x) * t.sigma.eval(rest_sums))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Psi {
    Mlp { mlp: Mlp },
    Continuous { psi: ContinuousPsi },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumformerModel {
    pub d: usize,
    pub d_latent: usize,
    pub phi: PhiMap,
    pub psi: Psi,
}

/// Tape handles of the trainable parts of a [`SumformerModel`].
#[derive(Clone, Debug)]
pub struct SumformerVars {
    pub phi: Option<MlpVars>,
    pub psi: MlpVars,
}

impl SumformerVars {
    /// In the same order as [`SumformerModel::trainable_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.phi.iter().flat_map(|p| p.vars()).collect();
        v.extend(self.psi.vars());
        v
    }
}

impl SumformerModel {
    pub fn new(d: usize, phi: PhiMap, psi: Psi) -> Result<Self> {
        let d_latent = phi.output_width();
        if phi.input_width() != d {
            return Err(shape_err(
                "SumformerModel::new",
                format!("φ takes {} inputs for d = {d}", phi.input_width()),
            ));
        }
        match &psi {
            Psi::Mlp { mlp } => {
                if mlp.spec.input_width() != d + d_latent {
                    return Err(shape_err(
                        "SumformerModel::new",
                        format!(
                            "ψ takes {} inputs, expected d + d' = {}",
                            mlp.spec.input_width(),
                            d + d_latent
                        ),
                    ));
                }
            }
            Psi::Continuous { psi } => {
                for t in psi.components.iter().flatten() {
                    if t.alpha.dim() != d || t.sigma.arity != d_latent {
                        return Err(Error::Contract(format!(
                            "ψ term with |α| length {} and σ arity {} for d = {d}, d' = {d_latent}",
                            t.alpha.dim(),
                            t.sigma.arity
                        )));
                    }
                }
            }
        }
        Ok(Self {
            d,
            d_latent,
            phi,
            psi,
        })
    }

    /// MLP `φ: ℝ^d → ℝ^{d'}` and MLP `ψ: ℝ^{d+d'} → ℝ^d`, both with
    /// `hidden` layers of `units` ReLU units.
    pub fn mlp(d: usize, d_latent: usize, hidden: usize, units: usize, rng: &mut impl Rng) -> Result<Self> {
        let phi = Mlp::init(MlpSpec::uniform(d, hidden, units, d_latent)?, rng);
        let psi = Mlp::init(MlpSpec::uniform(d + d_latent, hidden, units, d)?, rng);
        Self::new(d, PhiMap::Mlp { mlp: phi }, Psi::Mlp { mlp: psi })
    }

    /// Monomial `φ` for sequences of length `n` and an MLP `ψ`.
    pub fn polynomial(n: usize, d: usize, hidden: usize, units: usize, rng: &mut impl Rng) -> Result<Self> {
        let basis = enumerate_multidegrees(d, n)?;
        let psi = Mlp::init(MlpSpec::uniform(d + basis.len(), hidden, units, d)?, rng);
        Self::new(d, PhiMap::Monomial { basis }, Psi::Mlp { mlp: psi })
    }

    pub fn output_width(&self) -> usize {
        match &self.psi {
            Psi::Mlp { mlp } => mlp.spec.output_width(),
            Psi::Continuous { psi } => psi.components.len(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_stacked(x, x.rows())
    }

    /// Evaluates many sequences of `n` tokens stacked row-wise.
    pub fn forward_stacked(&self, x: &Matrix, n: usize) -> Result<Matrix> {
        if x.cols() != self.d {
            return Err(shape_err(
                "sumformer_forward",
                format!("{} columns for d = {}", x.cols(), self.d),
            ));
        }
        let phi = self.phi.apply_rows(x)?;
        let sigma = group_sum(&phi, n)?;
        let sigma_rows = group_repeat(&sigma, n)?;
        match &self.psi {
            Psi::Mlp { mlp } => mlp.forward(&x.hstack(&sigma_rows)?),
            Psi::Continuous { psi } => {
                let mut out = Vec::with_capacity(x.rows());
                let mut rest = vec![0.0; self.d_latent];
                for i in 0..x.rows() {
                    for ((r, s), p) in rest.iter_mut().zip(sigma_rows.row(i)).zip(phi.row(i)) {
                        *r = s - p;
                    }
                    out.push(psi.eval(x.row(i), &rest));
                }
                if psi.components.is_empty() {
                    return Ok(Matrix::zeros(x.rows(), 1));
                }
                Matrix::from_rows(&out)
            }
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.psi, Psi::Mlp { .. })
    }

    /// Trainable matrices: `φ` (if an MLP) then `ψ`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        if let PhiMap::Mlp { mlp } = &mut self.phi {
            out.extend(mlp.params.matrices_mut());
        }
        if let Psi::Mlp { mlp } = &mut self.psi {
            out.extend(mlp.params.matrices_mut());
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let PhiMap::Mlp { mlp } = &self.phi {
            out.extend(mlp.params.matrices());
        }
        if let Psi::Mlp { mlp } = &self.psi {
            out.extend(mlp.params.matrices());
        }
        out
    }

    pub fn register(&self, tape: &mut Tape) -> Result<SumformerVars> {
        let Psi::Mlp { mlp: psi } = &self.psi else {
            return Err(Error::Contract("polynomial ψ has no trainable parameters".into()));
        };
        let phi = match &self.phi {
            PhiMap::Mlp { mlp } => Some(mlp.register(tape)),
            PhiMap::Monomial { .. } => None,
        };
        Ok(SumformerVars {
            phi,
            psi: psi.register(tape),
        })
    }

    /// Records the stacked forward pass. `phi_rows` may carry precomputed
    /// monomial features for a frozen `φ`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &SumformerVars,
        x: &Matrix,
        phi_rows: Option<&Matrix>,
        n: usize,
    ) -> Result<Var> {
        let Psi::Mlp { mlp: psi } = &self.psi else {
            return Err(Error::Contract("polynomial ψ cannot be recorded".into()));
        };
        let xv = tape.constant(x.clone());
        let phi = match (&self.phi, &vars.phi) {
            (PhiMap::Mlp { mlp }, Some(pv)) => mlp.forward_on_tape(tape, pv, xv)?,
            (PhiMap::Monomial { .. }, _) => {
                let rows = match phi_rows {
                    Some(r) => r.clone(),
                    None => self.phi.apply_rows(x)?,
                };
                tape.constant(rows)
            }
            (PhiMap::Mlp { .. }, None) => {
                return Err(Error::Contract("MLP φ was not registered".into()))
            }
        };
        let sigma = tape.group_sum(phi, n)?;
        let sigma_rows = tape.group_repeat(sigma, n)?;
        let input = tape.hconcat(xv, sigma_rows)?;
        psi.forward_on_tape(tape, &vars.psi, input)
    }
}

/// Sumformer with monomial `φ` over `|α| ≤ n` and the polynomial `ψ` given by
/// `components` (one term list per output coordinate).
pub fn build_continuous_sumformer(n: usize, d: usize, components: Vec<Vec<PsiTerm>>) -> Result<SumformerModel> {
    let basis = enumerate_multidegrees(d, n)?;
    SumformerModel::new(
        d,
        PhiMap::Monomial { basis },
        Psi::Continuous {
            psi: ContinuousPsi { components },
        },
    )
}

/// Largest `‖f(X) − target(X)‖_∞` over `samples` inputs uniform in
/// `[0,1)^{n×d}`. A Monte-Carlo estimate, hence a lower bound on the true
/// supremum.
pub fn sup_error(
    f: &SeqFn<'_>,
    target: &TargetFunction,
    n: usize,
    d: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("sup_error needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let x = Matrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let e = f(&x)?.max_abs_diff(&target.eval(&x)?)?;
        worst = if e.is_nan() { e } else { worst.max(e) };
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariance::check_equivariance;

    fn seq(v: &[f64]) -> Matrix {
        Matrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn term(alpha: &[u32], arity: usize, terms: Vec<(f64, Vec<u32>)>) -> PsiTerm {
        PsiTerm {
            alpha: MultiDegree::new(alpha.to_vec()),
            sigma: Polynomial::new(arity, terms).unwrap(),
        }
    }

    #[test]
    fn zero_psi_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SumformerModel::mlp(2, 4, 2, 8, &mut rng).unwrap();
        if let Psi::Mlp { mlp } = &mut m.psi {
            *mlp = Mlp::zeros(mlp.spec.clone());
        }
        let x = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.1);
        assert_eq!(m.forward(&x).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn projection_psi_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = Mlp::init(MlpSpec::new(vec![2, 5, 3]).unwrap(), &mut rng);
        let mut w = Matrix::zeros(5, 2);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let psi = Mlp::affine(w, vec![0.0; 2]).unwrap();
        let m = SumformerModel::new(2, PhiMap::Mlp { mlp: phi }, Psi::Mlp { mlp: psi }).unwrap();
        let x = Matrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64 * 0.1);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_set_sigma_reproduces_x1_plus_x2x3() {
        // q(x₁,{x₂,x₃}) = x₁ + x₂x₃ with x₂x₃ = (s₁² − s₂)/2 on the rest.
        let m = build_continuous_sumformer(
            3,
            1,
            vec![vec![
                term(&[1], 3, vec![(1.0, vec![0, 0, 0])]),
                term(&[0], 3, vec![(0.5, vec![2, 0, 0]), (-0.5, vec![0, 1, 0])]),
            ]],
        )
        .unwrap();
        let y = m.forward(&seq(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[7.0, 5.0, 5.0]);
    }

    #[test]
    fn constant_in_x_term_gives_rest_sum() {
        let m = build_continuous_sumformer(2, 1, vec![vec![term(&[0], 2, vec![(1.0, vec![1, 0])])]]).unwrap();
        assert_eq!(m.forward(&seq(&[1.0, 4.0])).unwrap().data(), &[4.0, 1.0]);
    }

    #[test]
    fn fitted_psi_reproduces_pairwise_products_of_the_rest() {
        use crate::multisym::generation_oracle;
        let e2 = |x: &Matrix| x.get(0, 0) * x.get(1, 0);
        let fit = generation_oracle(&e2, 1, 2, 2, 200, 11).unwrap();
        assert!(fit.residual < 1e-9);
        // Generators over two tokens are p1, p2; pad with p3 at exponent 0.
        let sigma: Vec<(f64, Vec<u32>)> = fit
            .terms
            .iter()
            .zip(&fit.coefficients)
            .map(|(t, &c)| (c, vec![t[0], t[1], 0]))
            .collect();
        let m = build_continuous_sumformer(3, 1, vec![vec![term(&[1], 3, vec![(1.0, vec![0, 0, 0])]), term(&[0], 3, sigma)]])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let y = m.forward(&seq(&v)).unwrap();
            for i in 0..3 {
                let rest: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| v[j]).collect();
                let want = v[i] + rest[0] * rest[1];
                assert!((y.get(i, 0) - want).abs() <= 1e-9, "{} vs {want}", y.get(i, 0));
            }
        }
    }

    #[test]
    fn empty_terms_are_the_zero_function() {
        let m = build_continuous_sumformer(2, 1, vec![vec![]]).unwrap();
        assert_eq!(m.forward(&seq(&[0.3, 0.9])).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let r = build_continuous_sumformer(2, 1, vec![vec![term(&[0], 3, vec![(1.0, vec![1, 0, 0])])]]);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(Polynomial::new(2, vec![(1.0, vec![1])]).is_err());
    }

    #[test]
    fn sumformers_are_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let models = [
            SumformerModel::mlp(2, 6, 2, 10, &mut rng).unwrap(),
            SumformerModel::polynomial(3, 2, 2, 10, &mut rng).unwrap(),
        ];
        for m in &models {
            let f = |x: &Matrix| m.forward(x);
            let r = check_equivariance(&f, 3, 2, 20, 4, 1e-10).unwrap();
            assert!(r.passed, "violation {}", r.max_violation);
        }
    }

    #[test]
    fn stacked_forward_matches_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SumformerModel::mlp(2, 4, 2, 6, &mut rng).unwrap();
        let a = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.1);
        let b = Matrix::from_fn(3, 2, |i, j| (2 * i + j) as f64 * 0.05);
        let stacked = Matrix::from_rows(&a.row_iter().chain(b.row_iter()).collect::<Vec<_>>()).unwrap();
        let y = m.forward_stacked(&stacked, 3).unwrap();
        let expected = m.forward(&a).unwrap();
        assert_eq!(&y.data()[..6], expected.data());
        assert_eq!(&y.data()[6..], m.forward(&b).unwrap().data());
    }

    #[test]
    fn tape_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for m in [
            SumformerModel::mlp(2, 4, 2, 6, &mut rng).unwrap(),
            SumformerModel::polynomial(3, 2, 1, 6, &mut rng).unwrap(),
        ] {
            let x = Matrix::from_fn(6, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
            let mut tape = Tape::new();
            let vars = m.register(&mut tape).unwrap();
            let y = m.forward_on_tape(&mut tape, &vars, &x, None, 3).unwrap();
            assert_eq!(tape.value(y), &m.forward_stacked(&x, 3).unwrap());
        }
    }
}
