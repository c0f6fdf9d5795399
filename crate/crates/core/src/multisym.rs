//! Multidegrees, the monomial feature map, and multisymmetric power sums.
//!
//! Degrees are kept in graded-lexicographic order: by total degree, then
//! lexicographically descending exponent vectors, so `(1,0)` precedes
//! `(0,1)` and `(2,0)` precedes `(1,1)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equivariance::{permute, Permutation};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

/// Exponent vector `α`; the monomial is `x₁^α₁ ⋯ x_d^α_d`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MultiDegree(pub Vec<u32>);

impl MultiDegree {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|α| = α₁ + … + α_d`.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .fold(1.0, |acc, (&a, &v)| acc * v.powi(a as i32))
    }
}

/// All multidegrees with `1 ≤ |α| ≤ n_max` in `d` variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeBasis {
    d: usize,
    n_max: usize,
    degrees: Vec<MultiDegree>,
}

impl DegreeBasis {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn degrees(&self) -> &[MultiDegree] {
        &self.degrees
    }

    /// The latent dimension `d'`.
    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn position(&self, alpha: &MultiDegree) -> Option<usize> {
        self.degrees.iter().position(|a| a == alpha)
    }
}

/// `C(n, k)` with overflow detection.
pub fn binomial(n: usize, k: usize) -> Option<usize> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    usize::try_from(acc).ok()
}

/// `C(n_max + d, d) − 1`, the number of multidegrees with `1 ≤ |α| ≤ n_max`.
pub fn latent_dimension(d: usize, n_max: usize) -> Result<usize> {
    n_max
        .checked_add(d)
        .and_then(|top| binomial(top, d))
        .map(|c| c - 1)
        .ok_or(Error::CountOverflow { d, n_max })
}

pub fn enumerate_multidegrees(d: usize, n_max: usize) -> Result<DegreeBasis> {
    if d == 0 || n_max == 0 {
        return Err(Error::Contract(format!(
            "enumerate_multidegrees needs d ≥ 1 and n_max ≥ 1, got d={d}, n_max={n_max}"
        )));
    }
    let count = latent_dimension(d, n_max)?;
    let mut degrees = Vec::with_capacity(count);
    let mut scratch = vec![0u32; d];
    for total in 1..=n_max as u32 {
        compositions(total, 0, &mut scratch, &mut degrees);
    }
    debug_assert_eq!(degrees.len(), count);
    Ok(DegreeBasis { d, n_max, degrees })
}

// Writes every split of `remaining` over scratch[pos..], first coordinate
// largest first.
fn compositions(remaining: u32, pos: usize, scratch: &mut [u32], out: &mut Vec<MultiDegree>) {
    if pos == scratch.len() - 1 {
        scratch[pos] = remaining;
        out.push(MultiDegree(scratch.to_vec()));
        return;
    }
    for e in (0..=remaining).rev() {
        scratch[pos] = e;
        compositions(remaining - e, pos + 1, scratch, out);
    }
}

/// The monomial map `φ(x)`, one entry per degree of `basis`.
pub fn monomial_features(x: &[f64], basis: &DegreeBasis) -> Result<Vec<f64>> {
    if x.len() != basis.d {
        return Err(shape_err(
            "monomial_features",
            format!("token of length {} for d = {}", x.len(), basis.d),
        ));
    }
    Ok(basis.degrees.iter().map(|a| a.monomial(x)).collect())
}

/// `φ` applied to every row of `x`.
pub fn monomial_feature_rows(x: &Matrix, basis: &DegreeBasis) -> Result<Matrix> {
    let mut data = Vec::with_capacity(x.rows() * basis.len());
    for row in x.row_iter() {
        data.extend(monomial_features(row, basis)?);
    }
    Matrix::new(x.rows(), basis.len(), data)
}

/// `p_α(X) = Σᵢ (xᵢ)^α`, summed in row order.
pub fn power_sum(x: &Matrix, alpha: &MultiDegree) -> Result<f64> {
    if alpha.dim() != x.cols() {
        return Err(shape_err(
            "power_sum",
            format!("degree of length {} for {} columns", alpha.dim(), x.cols()),
        ));
    }
    Ok(x.row_iter().fold(0.0, |acc, row| acc + alpha.monomial(row)))
}

/// `Σ = Σᵢ φ(xᵢ)`, summed in row order.
pub fn power_sum_vector(x: &Matrix, basis: &DegreeBasis) -> Result<Vec<f64>> {
    if x.cols() != basis.d {
        return Err(shape_err(
            "power_sum_vector",
            format!("{} columns for d = {}", x.cols(), basis.d),
        ));
    }
    let mut acc = vec![0.0; basis.len()];
    for row in x.row_iter() {
        for (a, alpha) in acc.iter_mut().zip(&basis.degrees) {
            *a += alpha.monomial(row);
        }
    }
    Ok(acc)
}

/// [`power_sum_vector`] after sorting tokens lexicographically, which makes
/// the result bitwise invariant under row permutations.
pub fn power_sum_vector_canonical(x: &Matrix, basis: &DegreeBasis) -> Result<Vec<f64>> {
    let mut rows: Vec<&[f64]> = x.row_iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    power_sum_vector(&Matrix::from_rows(&rows)?, basis)
}

/// Result of fitting a symmetric target by a polynomial in power sums.
#[derive(Clone, Debug)]
pub struct FitReport {
    /// Power sums `p_α` with `|α| ≤ n` used as generators.
    pub generators: DegreeBasis,
    /// Each term is a product `∏ p_{α_j}^{e_j}`; entry `j` is `e_j`.
    pub terms: Vec<Vec<u32>>,
    pub coefficients: Vec<f64>,
    /// Largest absolute residual over the sample points.
    pub residual: f64,
}

impl FitReport {
    /// Coefficient of the product given as `(generator, power)` pairs; an
    /// empty slice selects the constant term.
    pub fn coefficient(&self, factors: &[(&MultiDegree, u32)]) -> Option<f64> {
        let mut exps = vec![0u32; self.generators.len()];
        for (alpha, power) in factors {
            exps[self.generators.position(alpha)?] += power;
        }
        self.terms
            .iter()
            .position(|t| *t == exps)
            .map(|i| self.coefficients[i])
    }
}

/// Least-squares fit of `target` over products of power sums (`|α| ≤ n`,
/// at most `max_product_degree` factors per product) on `sample_count`
/// uniform points of `[0,1]^{n×d}`.
pub fn generation_oracle(
    target: &dyn Fn(&Matrix) -> f64,
    d: usize,
    n: usize,
    max_product_degree: usize,
    sample_count: usize,
    seed: u64,
) -> Result<FitReport> {
    let generators = enumerate_multidegrees(d, n)?;
    let terms = product_terms(generators.len(), max_product_degree as u32);
    if terms.len() >= sample_count {
        return Err(Error::Contract(format!(
            "{} product terms need more than {sample_count} samples",
            terms.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Matrix> = (0..sample_count)
        .map(|_| Matrix::from_fn(n, d, |_, _| rng.random::<f64>()))
        .collect();
    let values: Vec<f64> = samples.iter().map(target).collect();

    for (x, &v) in samples.iter().zip(&values).take(10) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let p = Permutation::new(idx)?;
        let moved = target(&permute(x, &p)?);
        let residual = (moved - v).abs();
        if residual > 1e-9 {
            return Err(Error::InvarianceViolation {
                permutation: p.indices().to_vec(),
                residual,
            });
        }
    }

    let mut design = DMatrix::<f64>::zeros(sample_count, terms.len());
    for (r, x) in samples.iter().enumerate() {
        let p = power_sum_vector(x, &generators)?;
        for (c, t) in terms.iter().enumerate() {
            design[(r, c)] = t
                .iter()
                .zip(&p)
                .fold(1.0, |acc, (&e, &v)| acc * v.powi(e as i32));
        }
    }
    let rhs = DVector::from_vec(values.clone());
    let svd = design.clone().svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-12;
    let coef = svd.solve(&rhs, cutoff).map_err(|e| Error::Solver(e.to_string()))?;
    let fitted = &design * &coef;
    let residual = fitted
        .iter()
        .zip(&values)
        .fold(0.0_f64, |m, (f, v)| m.max((f - v).abs()));

    Ok(FitReport {
        generators,
        terms,
        coefficients: coef.iter().copied().collect(),
        residual,
    })
}

// Exponent vectors over `vars` generators with total degree ≤ max, graded.
fn product_terms(vars: usize, max: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; vars]];
    let mut scratch = vec![0u32; vars];
    for total in 1..=max {
        let mut level = Vec::new();
        compositions(total, 0, &mut scratch, &mut level);
        out.extend(level.into_iter().map(|m| m.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Just, Strategy};

    fn deg(v: &[u32]) -> MultiDegree {
        MultiDegree(v.to_vec())
    }

    #[test]
    fn small_enumerations() {
        let b = enumerate_multidegrees(1, 2).unwrap();
        assert_eq!(b.degrees(), &[deg(&[1]), deg(&[2])]);
        let b = enumerate_multidegrees(2, 1).unwrap();
        assert_eq!(b.degrees(), &[deg(&[1, 0]), deg(&[0, 1])]);
        let b = enumerate_multidegrees(2, 2).unwrap();
        assert_eq!(
            b.degrees(),
            &[deg(&[1, 0]), deg(&[0, 1]), deg(&[2, 0]), deg(&[1, 1]), deg(&[0, 2])]
        );
    }

    // Brute force: every vector in {0..n_max}^d with 1 ≤ |α| ≤ n_max.
    fn brute_count(d: usize, n_max: usize) -> usize {
        let mut count = 0;
        let mut idx = vec![0usize; d];
        loop {
            let s: usize = idx.iter().sum();
            if (1..=n_max).contains(&s) {
                count += 1;
            }
            let mut i = 0;
            loop {
                if i == d {
                    return count;
                }
                idx[i] += 1;
                if idx[i] <= n_max {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn count_matches_binomial_and_brute_force() {
        for d in 1..=6 {
            for n_max in 1..=8 {
                let b = enumerate_multidegrees(d, n_max).unwrap();
                let expected = binomial(n_max + d, d).unwrap() - 1;
                assert_eq!(b.len(), expected, "d={d} n_max={n_max}");
                assert_eq!(b.len(), brute_count(d, n_max));
                let mut sorted = b.degrees().to_vec();
                sorted.sort();
                sorted.dedup();
                assert_eq!(sorted.len(), b.len());
                assert!(b.degrees().iter().all(|a| (1..=n_max as u32).contains(&a.order())));
                assert!(b.degrees().windows(2).all(|w| w[0].order() <= w[1].order()));
            }
        }
        assert_eq!(enumerate_multidegrees(4, 5).unwrap().len(), 125);
    }

    #[test]
    fn count_overflow_is_reported() {
        assert!(matches!(
            latent_dimension(200, 200),
            Err(Error::CountOverflow { .. })
        ));
        assert!(enumerate_multidegrees(0, 3).is_err());
    }

    #[test]
    fn monomial_feature_examples() {
        let b = enumerate_multidegrees(2, 2).unwrap();
        assert_eq!(monomial_features(&[2.0, 3.0], &b).unwrap(), vec![2.0, 3.0, 4.0, 6.0, 9.0]);
        assert!(monomial_features(&[0.0, 0.0], &b).unwrap().iter().all(|&v| v == 0.0));
        assert!(monomial_features(&[1.0, 1.0], &b).unwrap().iter().all(|&v| v == 1.0));
        assert!(monomial_features(&[1.0], &b).is_err());
    }

    #[test]
    fn features_vanish_with_a_zeroed_coordinate() {
        let b = enumerate_multidegrees(3, 3).unwrap();
        let f = monomial_features(&[0.4, 0.0, 0.7], &b).unwrap();
        for (v, a) in f.iter().zip(b.degrees()) {
            if a.0[1] > 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v > 0.0);
            }
        }
    }

    #[test]
    fn power_sum_examples() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(power_sum(&x, &deg(&[2])).unwrap(), 14.0);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(power_sum(&x, &deg(&[1, 1])).unwrap(), 14.0);
        assert!(power_sum(&x, &deg(&[1])).is_err());
    }

    #[test]
    fn power_sum_vector_entries_match_power_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = enumerate_multidegrees(3, 4).unwrap();
        let x = Matrix::from_fn(5, 3, |_, _| rng.random::<f64>());
        let v = power_sum_vector(&x, &b).unwrap();
        for (entry, a) in v.iter().zip(b.degrees()) {
            assert_eq!(*entry, power_sum(&x, a).unwrap());
        }
        let one = Matrix::from_rows(&[[0.3, 0.9, 0.1]]).unwrap();
        assert_eq!(
            power_sum_vector(&one, &b).unwrap(),
            monomial_features(one.row(0), &b).unwrap()
        );
        assert!(power_sum_vector(&Matrix::zeros(4, 3), &b)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn newton_identity_is_recovered() {
        let target = |x: &Matrix| x.get(0, 0) * x.get(1, 0);
        let fit = generation_oracle(&target, 1, 2, 4, 200, 11).unwrap();
        assert!(fit.residual <= 1e-9, "residual {}", fit.residual);
        let (p1, p2) = (deg(&[1]), deg(&[2]));
        assert!((fit.coefficient(&[(&p1, 2)]).unwrap() - 0.5).abs() < 1e-8);
        assert!((fit.coefficient(&[(&p2, 1)]).unwrap() + 0.5).abs() < 1e-8);
        assert!(fit.coefficient(&[]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn non_invariant_target_is_rejected() {
        let target = |x: &Matrix| x.get(0, 0);
        match generation_oracle(&target, 1, 3, 2, 100, 5) {
            Err(Error::InvarianceViolation { permutation, residual }) => {
                assert_eq!(permutation.len(), 3);
                assert!(residual > 1e-9);
            }
            other => panic!("expected invariance violation, got {other:?}"),
        }
    }

    #[test]
    fn underdetermined_fit_is_refused() {
        let target = |x: &Matrix| x.get(0, 0) + x.get(1, 0);
        assert!(generation_oracle(&target, 2, 3, 6, 100, 1).is_err());
    }

    proptest! {
        #[test]
        fn basis_size_matches_binomial_count(d in 1usize..6, n in 1usize..7) {
            let basis = enumerate_multidegrees(d, n).unwrap();
            prop_assert_eq!(basis.len(), binomial(n + d, d).unwrap() - 1);
            prop_assert!(basis.degrees().iter().all(|a| (1..=n as u32).contains(&a.order())));
        }

        #[test]
        fn power_sums_ignore_token_order(
            (d, data, order) in (1usize..4, 1usize..6).prop_flat_map(|(d, n)| (
                Just(d),
                prop::collection::vec(0.0..1.0f64, n * d),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            ))
        ) {
            let n = order.len();
            let x = Matrix::new(n, d, data).unwrap();
            let moved = Matrix::from_fn(n, d, |i, j| x.get(order[i], j));
            let basis = enumerate_multidegrees(d, n).unwrap();
            let a = power_sum_vector(&x, &basis).unwrap();
            let b = power_sum_vector(&moved, &basis).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
