//! Fixed-weight Transformers that write `Σ = Σᵢ φ(xᵢ)` into dedicated
//! output columns.
//!
//! Tokens are first lifted to `[1, xᵢ, φ(xᵢ), 0_{d'}]` (model dim
//! `m = 1 + d + 2d'`). One block then turns this into `[1, xᵢ, φ(xᵢ), Σ]`:
//!
//! * `W_Q = W_K` have `e₁` as their only nonzero column, so every logit equals
//!   `1/√m` and the softmax is uniform.
//! * `W_V` maps the `φ` columns onto the `Σ` columns with scale `n` (softmax),
//!   `k` (Linformer with `E = 1/n`, `F = 1/k`), or `n` (Performer).
//! * `FC` is linear, zero except for a diagonal on the `Σ` columns: `1`, or
//!   `1/(λn)` for Performer where the un-normalized kernel contributes `λn`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    transformer_forward, AttentionHead, AttentionKind, AttentionLayer, HeadVariant,
    TransformerBlock, TransformerNetwork,
};
use crate::error::{shape_err, Error, Result};
use crate::mlp::Mlp;
use crate::multisym::{monomial_feature_rows, DegreeBasis};
use crate::tensor::Matrix;

/// Token-wise latent map `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhiMap {
    /// Exact monomials over a degree basis, not trainable.
    Monomial { basis: DegreeBasis },
    Mlp { mlp: Mlp },
}

impl PhiMap {
    pub fn input_width(&self) -> usize {
        match self {
            Self::Monomial { basis } => basis.d(),
            Self::Mlp { mlp } => mlp.spec.input_width(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Self::Monomial { basis } => basis.len(),
            Self::Mlp { mlp } => mlp.spec.output_width(),
        }
    }

    /// `φ` applied to every row.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Self::Monomial { basis } => monomial_feature_rows(x, basis),
            Self::Mlp { mlp } => mlp.forward(x),
        }
    }
}

/// Scale carried by the Linformer value projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinformerValueScale {
    /// `k·I`, which makes the block output exactly `Σ`.
    #[default]
    K,
    /// `n·I` as in the softmax construction; yields `(n/k)·Σ`.
    N,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumExtractionConfig {
    pub variant: AttentionKind,
    pub n: usize,
    /// Projection rows (Linformer) or random features (Performer).
    pub k: Option<usize>,
    /// Seed for the Performer feature vectors.
    pub seed: u64,
    pub linformer_value_scale: LinformerValueScale,
}

impl SumExtractionConfig {
    pub fn new(variant: AttentionKind, n: usize) -> Self {
        Self {
            variant,
            n,
            k: None,
            seed: 0,
            linformer_value_scale: LinformerValueScale::K,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_linformer_scale(mut self, s: LinformerValueScale) -> Self {
        self.linformer_value_scale = s;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumExtraction {
    pub config: SumExtractionConfig,
    pub d: usize,
    pub d_latent: usize,
    pub phi: PhiMap,
    pub network: TransformerNetwork,
    /// Constant Performer Gram value `⟨a(e₁W_Q), a(e₁W_K)⟩`.
    pub lambda: Option<f64>,
}

impl SumExtraction {
    /// `1 + d + 2d'`.
    pub fn model_dim(&self) -> usize {
        1 + self.d + 2 * self.d_latent
    }

    /// Lifts raw tokens to `[1, xᵢ, φ(xᵢ), 0_{d'}]`.
    pub fn lift(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d {
            return Err(shape_err(
                "SumExtraction::lift",
                format!("{} columns for d = {}", x.cols(), self.d),
            ));
        }
        let phi = self.phi.apply_rows(x)?;
        let m = self.model_dim();
        let mut out = Matrix::zeros(x.rows(), m);
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            row[0] = 1.0;
            row[1..1 + self.d].copy_from_slice(x.row(i));
            row[1 + self.d..1 + self.d + self.d_latent].copy_from_slice(phi.row(i));
        }
        Ok(out)
    }

    /// Lift followed by the network: rows `[1, xᵢ, φ(xᵢ), Σ]`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.config.n {
            return Err(shape_err(
                "SumExtraction::forward",
                format!("{} tokens for a construction built for n = {}", x.rows(), self.config.n),
            ));
        }
        transformer_forward(&self.network, &self.lift(x)?)
    }

    /// The last `d'` output columns.
    pub fn sums(&self, x: &Matrix) -> Result<Matrix> {
        let m = self.model_dim();
        self.forward(x)?.columns(m - self.d_latent, m)
    }

    /// Attention matrix of the single head on the lifted input.
    pub fn attention_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.network.blocks[0].attention.heads[0].attention_matrix(&self.lift(x)?)
    }

    pub fn head(&self) -> &AttentionHead {
        &self.network.blocks[0].attention.heads[0]
    }
}

/// Builds the one-block sum-extraction network for `n` tokens of width `d`.
pub fn build_sum_extraction(d: usize, phi: PhiMap, config: SumExtractionConfig) -> Result<SumExtraction> {
    let n = config.n;
    if n == 0 || d == 0 {
        return Err(Error::Contract(format!("need n ≥ 1 and d ≥ 1, got n={n}, d={d}")));
    }
    if phi.input_width() != d {
        return Err(shape_err(
            "build_sum_extraction",
            format!("φ takes {} inputs for d = {d}", phi.input_width()),
        ));
    }
    let dl = phi.output_width();
    let m = 1 + d + 2 * dl;
    let phi_cols = 1 + d;
    let sigma_cols = 1 + d + dl;

    let mut w_qk = Matrix::zeros(m, m);
    w_qk.set(0, 0, 1.0);

    let value = |scale: f64| {
        let mut w = Matrix::zeros(m, m);
        for j in 0..dl {
            w.set(phi_cols + j, sigma_cols + j, scale);
        }
        w
    };

    let need_k = || -> Result<usize> {
        let k = config
            .k
            .ok_or_else(|| Error::Contract(format!("{} construction needs k", config.variant)))?;
        if k == 0 || k >= n {
            return Err(Error::Contract(format!("need 1 ≤ k < n, got k={k}, n={n}")));
        }
        Ok(k)
    };

    let (head, fc_scale, lambda) = match config.variant {
        AttentionKind::Standard => (
            AttentionHead::new(w_qk.clone(), w_qk, value(n as f64), HeadVariant::Standard)?,
            1.0,
            None,
        ),
        AttentionKind::Linformer => {
            let k = need_k()?;
            let scale = match config.linformer_value_scale {
                LinformerValueScale::K => k as f64,
                LinformerValueScale::N => n as f64,
            };
            let e = Matrix::filled(k, n, 1.0 / n as f64);
            let f = Matrix::filled(k, n, 1.0 / k as f64);
            (
                AttentionHead::new(w_qk.clone(), w_qk, value(scale), HeadVariant::Linformer { e, f })?,
                1.0,
                None,
            )
        }
        AttentionKind::Performer => {
            let k = need_k()?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let omegas = Matrix::from_fn(k, m, |_, _| StandardNormal.sample(&mut rng));
            let lambda = performer_lambda(&omegas);
            if !(1e-300..=1e300).contains(&lambda) {
                return Err(Error::Conditioning { lambda });
            }
            (
                AttentionHead::new(
                    w_qk.clone(),
                    w_qk,
                    value(n as f64),
                    HeadVariant::Performer { omegas },
                )?,
                1.0 / (lambda * n as f64),
                Some(lambda),
            )
        }
    };

    let mut fc_w = Matrix::zeros(m, m);
    for j in sigma_cols..m {
        fc_w.set(j, j, fc_scale);
    }
    let fc = Mlp::affine(fc_w, vec![0.0; m])?;
    let block = TransformerBlock::new(AttentionLayer::single(head), fc, false)?;
    Ok(SumExtraction {
        config,
        d,
        d_latent: dl,
        phi,
        network: TransformerNetwork::new(vec![block])?,
        lambda,
    })
}

/// `(1/k) e^{-1} Σ_j e^{2ω_{j,1}}`: the Gram value of two query/key rows
/// equal to `e₁`.
pub fn performer_lambda(omegas: &Matrix) -> f64 {
    let k = omegas.rows() as f64;
    let total = omegas.row_iter().fold(0.0, |acc, w| acc + (2.0 * w[0]).exp());
    total * (-1.0f64).exp() / k
}
