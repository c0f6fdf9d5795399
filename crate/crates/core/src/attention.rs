//! Softmax, Linformer and Performer attention heads, multi-head layers,
//! Transformer blocks and networks.
//!
//! A block computes `X + FC(X + Att(X))` with `FC` applied token-wise. Heads
//! are square in the model dimension `m`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mlp::Mlp;
use crate::tensor::{matmul, matmul_transb, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Standard,
    Linformer,
    Performer,
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Linformer => "linformer",
            Self::Performer => "performer",
        })
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "linformer" => Ok(Self::Linformer),
            "performer" => Ok(Self::Performer),
            other => Err(Error::Contract(format!("unknown attention variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum HeadVariant {
    Standard,
    /// `E, F ∈ ℝ^{k×n}` project keys and values to `k` rows.
    Linformer { e: Matrix, f: Matrix },
    /// Row `j` of `omegas` is the feature vector `ω_j ∈ ℝ^m`.
    Performer { omegas: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    #[serde(flatten)]
    pub variant: HeadVariant,
}

impl AttentionHead {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, variant: HeadVariant) -> Result<Self> {
        let m = w_q.rows();
        for (name, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            if w.shape() != (m, m) {
                return Err(shape_err(
                    "AttentionHead::new",
                    format!("{name} is {:?}, expected {m}x{m}", w.shape()),
                ));
            }
        }
        match &variant {
            HeadVariant::Standard => {}
            HeadVariant::Linformer { e, f } => {
                if e.shape() != f.shape() {
                    return Err(shape_err(
                        "AttentionHead::new",
                        format!("E is {:?} but F is {:?}", e.shape(), f.shape()),
                    ));
                }
                if e.rows() >= e.cols() {
                    return Err(Error::Contract(format!(
                        "Linformer needs k < n, got k={} n={}",
                        e.rows(),
                        e.cols()
                    )));
                }
            }
            HeadVariant::Performer { omegas } => {
                if omegas.cols() != m {
                    return Err(shape_err(
                        "AttentionHead::new",
                        format!("feature vectors of length {} for m = {m}", omegas.cols()),
                    ));
                }
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            variant,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn kind(&self) -> AttentionKind {
        match self.variant {
            HeadVariant::Standard => AttentionKind::Standard,
            HeadVariant::Linformer { .. } => AttentionKind::Linformer,
            HeadVariant::Performer { .. } => AttentionKind::Performer,
        }
    }

    /// Number of projected rows or random features; `None` for softmax heads.
    pub fn k(&self) -> Option<usize> {
        match &self.variant {
            HeadVariant::Standard => None,
            HeadVariant::Linformer { e, .. } => Some(e.rows()),
            HeadVariant::Performer { omegas } => Some(omegas.rows()),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_counted(x, &mut 0)
    }

    /// Forward pass that adds the multiply-accumulates it performs to `macs`.
    pub fn forward_counted(&self, x: &Matrix, macs: &mut u64) -> Result<Matrix> {
        let m = self.model_dim();
        if x.cols() != m {
            return Err(shape_err(
                "attention head",
                format!("input has {} columns, head expects {m}", x.cols()),
            ));
        }
        match &self.variant {
            HeadVariant::Standard => {
                let a = self.softmax_attention(x, macs)?;
                let v = mm(x, &self.w_v, macs)?;
                mm(&a, &v, macs)
            }
            HeadVariant::Linformer { f, .. } => {
                let a = self.softmax_attention(x, macs)?;
                let fx = mm(f, x, macs)?;
                let v = mm(&fx, &self.w_v, macs)?;
                mm(&a, &v, macs)
            }
            HeadVariant::Performer { omegas } => {
                let q = mm(x, &self.w_q, macs)?;
                let k = mm(x, &self.w_k, macs)?;
                let v = mm(x, &self.w_v, macs)?;
                let fq = feature_rows(&q, omegas, macs);
                let fk = feature_rows(&k, omegas, macs);
                // k×m summary first, then n×m output; never n×n.
                let kv = mm_transa(&fk, &v, macs)?;
                mm(&fq, &kv, macs)
            }
        }
    }

    // Row-stochastic attention matrix: n×n (standard) or n×k (Linformer).
    fn softmax_attention(&self, x: &Matrix, macs: &mut u64) -> Result<Matrix> {
        let m = self.model_dim();
        let q = mm(x, &self.w_q, macs)?;
        let keys = match &self.variant {
            HeadVariant::Standard => mm(x, &self.w_k, macs)?,
            HeadVariant::Linformer { e, .. } => {
                if e.cols() != x.rows() {
                    return Err(shape_err(
                        "linformer head",
                        format!("E has {} columns for {} tokens", e.cols(), x.rows()),
                    ));
                }
                if e.rows() >= x.rows() {
                    return Err(Error::Contract(format!(
                        "Linformer needs k < n, got k={} n={}",
                        e.rows(),
                        x.rows()
                    )));
                }
                let ex = mm(e, x, macs)?;
                mm(&ex, &self.w_k, macs)?
            }
            HeadVariant::Performer { .. } => return Err(Error::UnsupportedInspection),
        };
        *macs += (q.rows() * keys.rows() * m) as u64;
        let mut logits = matmul_transb(&q, &keys)?.scale(1.0 / (m as f64).sqrt());
        for row in logits.data_mut().chunks_exact_mut(keys.rows()) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    /// The softmax attention matrix; Performer heads have none.
    pub fn attention_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.model_dim() {
            return Err(shape_err(
                "attention_matrix",
                format!("input has {} columns, head expects {}", x.cols(), self.model_dim()),
            ));
        }
        self.softmax_attention(x, &mut 0)
    }
}

fn mm(a: &Matrix, b: &Matrix, macs: &mut u64) -> Result<Matrix> {
    *macs += (a.rows() * a.cols() * b.cols()) as u64;
    matmul(a, b)
}

fn mm_transa(a: &Matrix, b: &Matrix, macs: &mut u64) -> Result<Matrix> {
    *macs += (a.rows() * a.cols() * b.cols()) as u64;
    crate::tensor::matmul_transa(a, b)
}

fn feature_rows(x: &Matrix, omegas: &Matrix, macs: &mut u64) -> Matrix {
    *macs += (x.rows() * (omegas.rows() + 1) * x.cols()) as u64;
    let mut data = Vec::with_capacity(x.rows() * omegas.rows());
    for row in x.row_iter() {
        data.extend(performer_features(row, omegas));
    }
    Matrix::new(x.rows(), omegas.rows(), data).expect("non-empty feature matrix")
}

/// `a(x) = k^{-1/2} exp(−‖x‖²/2) [exp(ω₁ᵀx), …, exp(ω_kᵀx)]`.
pub fn performer_features(x: &[f64], omegas: &Matrix) -> Vec<f64> {
    let half_norm = 0.5 * x.iter().fold(0.0, |acc, v| acc + v * v);
    let scale = 1.0 / (omegas.rows() as f64).sqrt();
    omegas
        .row_iter()
        .map(|w| scale * (crate::tensor::dot(w, x) - half_norm).exp())
        .collect()
}

/// Exact multiply-accumulate count of one head forward pass on `n` tokens of
/// width `m`, matching what [`AttentionHead::forward_counted`] records.
pub fn mac_count(kind: AttentionKind, n: u64, m: u64, k: u64) -> u64 {
    match kind {
        // Q, K, V projections; QKᵀ; A·V
        AttentionKind::Standard => 3 * n * m * m + 2 * n * n * m,
        // Q; E·X and (EX)W_K; F·X and (FX)W_V; Q(EXW_K)ᵀ; Ā·V
        AttentionKind::Linformer => n * m * m + 2 * (k * n * m + k * m * m) + 2 * n * k * m,
        // Q, K, V; two feature maps; a(K)ᵀV; a(Q)(a(K)ᵀV)
        AttentionKind::Performer => 3 * n * m * m + 2 * n * (k + 1) * m + 2 * n * k * m,
    }
}

/// `[head₁(X), …, head_h(X)] · W_O`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub heads: Vec<AttentionHead>,
    pub w_o: Matrix,
}

impl AttentionLayer {
    pub fn new(heads: Vec<AttentionHead>, w_o: Matrix) -> Result<Self> {
        let Some(m) = heads.first().map(AttentionHead::model_dim) else {
            return Err(Error::Contract("an attention layer needs a head".into()));
        };
        if heads.iter().any(|h| h.model_dim() != m) {
            return Err(shape_err("AttentionLayer::new", "heads disagree on model dim"));
        }
        if w_o.shape() != (heads.len() * m, m) {
            return Err(shape_err(
                "AttentionLayer::new",
                format!("W_O is {:?}, expected {}x{m}", w_o.shape(), heads.len() * m),
            ));
        }
        Ok(Self { heads, w_o })
    }

    /// One head with `W_O = I`.
    pub fn single(head: AttentionHead) -> Self {
        let m = head.model_dim();
        Self {
            heads: vec![head],
            w_o: Matrix::identity(m),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_o.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut outputs = self.heads.iter().map(|h| h.forward(x));
        let mut cat = outputs.next().expect("at least one head")?;
        for o in outputs {
            cat = cat.hstack(&o?)?;
        }
        matmul(&cat, &self.w_o)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attention: AttentionLayer,
    pub fc: Mlp,
    /// When set the block computes `X + FC(X)`.
    pub zero_attention: bool,
}

impl TransformerBlock {
    pub fn new(attention: AttentionLayer, fc: Mlp, zero_attention: bool) -> Result<Self> {
        let m = attention.model_dim();
        if fc.spec.input_width() != m || fc.spec.output_width() != m {
            return Err(shape_err(
                "TransformerBlock::new",
                format!("FC widths {:?} for model dim {m}", fc.spec.widths()),
            ));
        }
        Ok(Self {
            attention,
            fc,
            zero_attention,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.attention.model_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let inner = if self.zero_attention {
            if x.cols() != self.model_dim() {
                return Err(shape_err(
                    "TransformerBlock::forward",
                    format!("{} columns for model dim {}", x.cols(), self.model_dim()),
                ));
            }
            x.clone()
        } else {
            x.add(&self.attention.forward(x)?)?
        };
        x.add(&self.fc.forward(&inner)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerNetwork {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerNetwork {
    pub fn new(blocks: Vec<TransformerBlock>) -> Result<Self> {
        if let Some(first) = blocks.first() {
            if blocks.iter().any(|b| b.model_dim() != first.model_dim()) {
                return Err(shape_err("TransformerNetwork::new", "blocks disagree on model dim"));
            }
        }
        Ok(Self { blocks })
    }
}

/// Applies the blocks in order.
pub fn transformer_forward(net: &TransformerNetwork, x: &Matrix) -> Result<Matrix> {
    net.blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariance::{permute, Permutation};
    use crate::mlp::MlpSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn standard(m: usize, rng: &mut ChaCha8Rng) -> AttentionHead {
        AttentionHead::new(random(m, m, rng), random(m, m, rng), random(m, m, rng), HeadVariant::Standard)
            .unwrap()
    }

    #[test]
    fn zero_value_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(5, 3, &mut rng);
        let z = Matrix::zeros(3, 3);
        let variants = [
            HeadVariant::Standard,
            HeadVariant::Linformer {
                e: random(2, 5, &mut rng),
                f: random(2, 5, &mut rng),
            },
            HeadVariant::Performer {
                omegas: random(2, 3, &mut rng),
            },
        ];
        for v in variants {
            let head = AttentionHead::new(random(3, 3, &mut rng), random(3, 3, &mut rng), z.clone(), v).unwrap();
            assert_eq!(head.forward(&x).unwrap(), Matrix::zeros(5, 3));
        }
    }

    #[test]
    fn single_token_softmax_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = standard(4, &mut rng);
        let x = random(1, 4, &mut rng);
        assert_eq!(head.attention_matrix(&x).unwrap().data(), &[1.0]);
        assert_eq!(head.forward(&x).unwrap(), matmul(&x, &head.w_v).unwrap());
    }

    #[test]
    fn linformer_uniform_projection_averages_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let x = random(n, 3, &mut rng);
        let avg = Matrix::filled(1, n, 1.0 / n as f64);
        let head = AttentionHead::new(
            Matrix::zeros(3, 3),
            Matrix::zeros(3, 3),
            Matrix::identity(3),
            HeadVariant::Linformer {
                e: avg.clone(),
                f: avg,
            },
        )
        .unwrap();
        let out = head.forward(&x).unwrap();
        let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n as f64).collect();
        for row in out.row_iter() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linformer_requires_k_below_n() {
        let e = Matrix::zeros(3, 3);
        let r = AttentionHead::new(
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
            HeadVariant::Linformer { e: e.clone(), f: e },
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn performer_feature_examples() {
        let zero = Matrix::zeros(1, 2);
        assert_eq!(performer_features(&[0.0, 0.0], &zero), vec![1.0]);
        let four = Matrix::from_fn(4, 2, |i, j| (i + j) as f64 * 0.3);
        assert_eq!(performer_features(&[0.0, 0.0], &four), vec![0.5; 4]);
        let e1 = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let v = performer_features(&[1.0, 0.0], &e1)[0];
        assert!((v - 0.5f64.exp()).abs() < 1e-15);
        assert!((v - 1.64872).abs() < 1e-5);
    }

    #[test]
    fn performer_single_token_is_scaled_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 3;
        let omegas = random(2, m, &mut rng);
        let head = AttentionHead::new(
            random(m, m, &mut rng),
            random(m, m, &mut rng),
            random(m, m, &mut rng),
            HeadVariant::Performer { omegas: omegas.clone() },
        )
        .unwrap();
        let x = random(1, m, &mut rng);
        let q = matmul(&x, &head.w_q).unwrap();
        let k = matmul(&x, &head.w_k).unwrap();
        let lambda = crate::tensor::dot(
            &performer_features(q.row(0), &omegas),
            &performer_features(k.row(0), &omegas),
        );
        let expected = matmul(&x, &head.w_v).unwrap().scale(lambda);
        assert!(head.forward(&x).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
        assert!(matches!(head.attention_matrix(&x), Err(Error::UnsupportedInspection)));
    }

    #[test]
    fn performer_right_association_matches_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (6, 3);
        let omegas = random(4, m, &mut rng);
        let head = AttentionHead::new(
            random(m, m, &mut rng),
            random(m, m, &mut rng),
            random(m, m, &mut rng),
            HeadVariant::Performer { omegas: omegas.clone() },
        )
        .unwrap();
        let x = random(n, m, &mut rng);
        let feats = |w: &Matrix| {
            let p = matmul(&x, w).unwrap();
            let rows: Vec<Vec<f64>> = p.row_iter().map(|r| performer_features(r, &omegas)).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let gram = matmul_transb(&feats(&head.w_q), &feats(&head.w_k)).unwrap();
        let left = matmul(&gram, &matmul(&x, &head.w_v).unwrap()).unwrap();
        assert!(head.forward(&x).unwrap().max_abs_diff(&left).unwrap() < 1e-10);
    }

    #[test]
    fn heads_commute_with_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m) = (5, 4);
        let constant_rows = Matrix::filled(2, n, 0.3);
        let heads = [
            standard(m, &mut rng),
            AttentionHead::new(
                random(m, m, &mut rng),
                random(m, m, &mut rng),
                random(m, m, &mut rng),
                HeadVariant::Linformer {
                    e: constant_rows.clone(),
                    f: constant_rows.scale(2.0),
                },
            )
            .unwrap(),
            AttentionHead::new(
                random(m, m, &mut rng),
                random(m, m, &mut rng),
                random(m, m, &mut rng),
                HeadVariant::Performer {
                    omegas: random(3, m, &mut rng),
                },
            )
            .unwrap(),
        ];
        for head in &heads {
            for _ in 0..20 {
                let x = random(n, m, &mut rng);
                let p = Permutation::random(n, &mut rng);
                let lhs = head.forward(&permute(&x, &p).unwrap()).unwrap();
                let rhs = permute(&head.forward(&x).unwrap(), &p).unwrap();
                assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10, "{:?}", head.kind());
            }
        }
    }

    #[test]
    fn counted_macs_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, m, k) in &[(8usize, 3usize, 2usize), (17, 5, 4), (32, 2, 3)] {
            let x = random(n, m, &mut rng);
            let w = || Matrix::identity(m);
            let heads = [
                AttentionHead::new(w(), w(), w(), HeadVariant::Standard).unwrap(),
                AttentionHead::new(
                    w(),
                    w(),
                    w(),
                    HeadVariant::Linformer {
                        e: random(k, n, &mut rng),
                        f: random(k, n, &mut rng),
                    },
                )
                .unwrap(),
                AttentionHead::new(
                    w(),
                    w(),
                    w(),
                    HeadVariant::Performer {
                        omegas: random(k, m, &mut rng),
                    },
                )
                .unwrap(),
            ];
            for head in &heads {
                let mut macs = 0;
                head.forward_counted(&x, &mut macs).unwrap();
                assert_eq!(macs, mac_count(head.kind(), n as u64, m as u64, k as u64));
            }
        }
    }

    #[test]
    fn residual_only_network_is_identity() {
        let m = 3;
        let head = AttentionHead::new(
            Matrix::zeros(m, m),
            Matrix::zeros(m, m),
            Matrix::zeros(m, m),
            HeadVariant::Standard,
        )
        .unwrap();
        let block = TransformerBlock::new(
            AttentionLayer::single(head),
            Mlp::zeros(MlpSpec::new(vec![m, 4, m]).unwrap()),
            false,
        )
        .unwrap();
        let net = TransformerNetwork::new(vec![block.clone(), block]).unwrap();
        let x = Matrix::from_fn(4, m, |i, j| (i as f64) * 0.5 - j as f64);
        assert_eq!(transformer_forward(&net, &x).unwrap(), x);
    }

    #[test]
    fn zero_attention_block_adds_fc_bias() {
        let m = 2;
        let head = AttentionHead::new(
            Matrix::identity(m),
            Matrix::identity(m),
            Matrix::identity(m),
            HeadVariant::Standard,
        )
        .unwrap();
        let fc = Mlp::affine(Matrix::zeros(m, m), vec![0.25, -1.0]).unwrap();
        let block = TransformerBlock::new(AttentionLayer::single(head), fc, true).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let out = block.forward(&x).unwrap();
        assert_eq!(out, x.add_row(&[0.25, -1.0]).unwrap());
    }

    #[test]
    fn multi_head_concatenates_before_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h1, h2) = (standard(3, &mut rng), standard(3, &mut rng));
        let w_o = random(6, 3, &mut rng);
        let layer = AttentionLayer::new(vec![h1.clone(), h2.clone()], w_o.clone()).unwrap();
        let x = random(4, 3, &mut rng);
        let cat = h1.forward(&x).unwrap().hstack(&h2.forward(&x).unwrap()).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), matmul(&cat, &w_o).unwrap());
        assert!(AttentionLayer::new(vec![h1], Matrix::zeros(3, 2)).is_err());
    }
}
