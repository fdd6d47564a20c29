//! Dependency-scaled multi-head self-attention and its vanilla baseline.
//!
//! Per head: S = QK^T/sqrt(d_k); S~ = S (.) D^s when a scale matrix is
//! given; the union of pad and wink masks is then applied as additive
//! negative infinity (after the multiplication, so the sentinel is never
//! scaled); weights = row-softmax(S~); Z = weights V; the head outputs are
//! concatenated in head order and projected by W_O. One D^s is shared by
//! all heads.
//!
//! Note that max(D^s) = 1/sqrt(2 pi sigma^2) < 1 at sigma = 1, so the
//! scaling also shrinks every score (a temperature effect) in addition to
//! reweighting; scores are used exactly as produced, never renormalized.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scaling::{AttentionMask, ScaledMatrix};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} has no allowed attention position")]
    FullyMaskedRow { row: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Projection weights of one multi-head attention layer.
pub struct AttentionParams {
    pub n_heads: usize,
    pub d_model: usize,
    /// Per-head query/key/value projections, each d_model x d_k.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// Output projection, (n_heads * d_k) x d_model.
    pub w_o: Tensor,
}

impl AttentionParams {
    /// Fan-scaled uniform initialization. Draw order is fixed (heads in
    /// order; W_Q, then W_K, then W_V, row-major; W_O last) so a seeded
    /// generator reproduces the same weights.
    pub fn init<R: Rng>(d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self, AttentionError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(AttentionError::DimensionMismatch(format!(
                "d_model {} not divisible by {} heads",
                d_model, n_heads
            )));
        }
        let d_k = d_model / n_heads;
        let mut uniform = |rows: usize, cols: usize| -> Result<Tensor, AttentionError> {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Ok(Tensor::param(&[rows, cols], data)?)
        };
        let mut w_q = Vec::with_capacity(n_heads);
        let mut w_k = Vec::with_capacity(n_heads);
        let mut w_v = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            w_q.push(uniform(d_model, d_k)?);
            w_k.push(uniform(d_model, d_k)?);
            w_v.push(uniform(d_model, d_k)?);
        }
        let w_o = uniform(n_heads * d_k, d_model)?;
        Ok(AttentionParams {
            n_heads,
            d_model,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Build from explicit weight tensors (tests and checkpoint loading).
    pub fn from_weights(
        d_model: usize,
        w_q: Vec<Tensor>,
        w_k: Vec<Tensor>,
        w_v: Vec<Tensor>,
        w_o: Tensor,
    ) -> Result<Self, AttentionError> {
        let n_heads = w_q.len();
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(AttentionError::DimensionMismatch(format!(
                "d_model {} not divisible by {} heads",
                d_model, n_heads
            )));
        }
        let d_k = d_model / n_heads;
        if w_k.len() != n_heads || w_v.len() != n_heads {
            return Err(AttentionError::DimensionMismatch(
                "per-head weight lists differ in length".to_string(),
            ));
        }
        for w in w_q.iter().chain(&w_k).chain(&w_v) {
            if w.shape() != [d_model, d_k] {
                return Err(AttentionError::DimensionMismatch(format!(
                    "head projection shape {:?}, expected [{}, {}]",
                    w.shape(),
                    d_model,
                    d_k
                )));
            }
        }
        if w_o.shape() != [n_heads * d_k, d_model] {
            return Err(AttentionError::DimensionMismatch(format!(
                "W_O shape {:?}, expected [{}, {}]",
                w_o.shape(),
                n_heads * d_k,
                d_model
            )));
        }
        Ok(AttentionParams {
            n_heads,
            d_model,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// All trainable tensors in a fixed order (optimizer / checkpoint order).
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for h in 0..self.n_heads {
            out.push(self.w_q[h].clone());
            out.push(self.w_k[h].clone());
            out.push(self.w_v[h].clone());
        }
        out.push(self.w_o.clone());
        out
    }
}

/// Intermediate values of one head, recorded at full precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadTrace {
    /// Alignment scores QK^T/sqrt(d_k).
    pub scores: Vec<Vec<f64>>,
    /// Scores after elementwise multiplication by D^s (equal to `scores`
    /// when no scale matrix was applied).
    pub scaled: Vec<Vec<f64>>,
    /// Softmax rows; masked positions are exactly 0.
    pub weights: Vec<Vec<f64>>,
    /// Per-head output rows, I x d_k.
    pub z: Vec<Vec<f64>>,
}

/// Full record of one attention layer application.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub heads: Vec<HeadTrace>,
    /// Final projected output, I x d_model.
    pub output: Vec<Vec<f64>>,
}

fn combined_masked_flags(
    n: usize,
    pad_mask: Option<&AttentionMask>,
    wink: Option<&AttentionMask>,
) -> Result<Option<Vec<bool>>, AttentionError> {
    for m in [pad_mask, wink].into_iter().flatten() {
        if m.n() != n {
            return Err(AttentionError::DimensionMismatch(format!(
                "mask is {}x{} but sentence length is {}",
                m.n(),
                m.n(),
                n
            )));
        }
    }
    let masked: Vec<bool> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            let pad_ok = pad_mask.map_or(true, |m| m.allows(i, j));
            let wink_ok = wink.map_or(true, |m| m.allows(i, j));
            !(pad_ok && wink_ok)
        })
        .collect();
    if masked.iter().all(|&m| !m) {
        return Ok(None);
    }
    for i in 0..n {
        if masked[i * n..(i + 1) * n].iter().all(|&m| m) {
            return Err(AttentionError::FullyMaskedRow { row: i });
        }
    }
    Ok(Some(masked))
}

/// Dependency-scaled multi-head self-attention over hidden states `h`
/// (I x d_model). `ds` is the dependency-scale matrix shared by all heads;
/// pass `None` for the vanilla baseline. Masks combine by union and masked
/// weights come out exactly 0. Gradients flow into `h` and the projection
/// weights; `ds` is a constant.
pub fn deps_attention(
    h: &Tensor,
    ds: Option<&ScaledMatrix>,
    params: &AttentionParams,
    pad_mask: Option<&AttentionMask>,
    wink: Option<&AttentionMask>,
) -> Result<(Tensor, AttentionTrace), AttentionError> {
    if h.shape().len() != 2 || h.shape()[1] != params.d_model {
        return Err(AttentionError::DimensionMismatch(format!(
            "input shape {:?}, expected [I, {}]",
            h.shape(),
            params.d_model
        )));
    }
    let n = h.shape()[0];
    if let Some(ds) = ds {
        if ds.n() != n {
            return Err(AttentionError::DimensionMismatch(format!(
                "scale matrix is {}x{} but sentence length is {}",
                ds.n(),
                ds.n(),
                n
            )));
        }
    }
    let masked = combined_masked_flags(n, pad_mask, wink)?;
    let ds_tensor = match ds {
        Some(ds) => Some(Tensor::from_vec(&[n, n], ds.values().to_vec())?),
        None => None,
    };
    let inv_sqrt_dk = 1.0 / (params.d_k() as f64).sqrt();

    let mut zs = Vec::with_capacity(params.n_heads);
    let mut head_traces = Vec::with_capacity(params.n_heads);
    for head in 0..params.n_heads {
        let q = h.matmul(&params.w_q[head])?;
        let k = h.matmul(&params.w_k[head])?;
        let v = h.matmul(&params.w_v[head])?;
        let scores = q.matmul(&k.transpose()?)?.scalar_mul(inv_sqrt_dk);
        let scaled = match &ds_tensor {
            Some(ds) => scores.mul(ds)?,
            None => scores.clone(),
        };
        let pre_softmax = match &masked {
            Some(flags) => scaled.masked_fill(flags, f64::NEG_INFINITY)?,
            None => scaled.clone(),
        };
        let weights = pre_softmax.row_softmax()?;
        let z = weights.matmul(&v)?;
        head_traces.push(HeadTrace {
            scores: scores.to_rows(),
            scaled: scaled.to_rows(),
            weights: weights.to_rows(),
            z: z.to_rows(),
        });
        zs.push(z);
    }
    let concat = Tensor::concat_cols(&zs)?;
    let output = concat.matmul(&params.w_o)?;
    let trace = AttentionTrace {
        heads: head_traces,
        output: output.to_rows(),
    };
    Ok((output, trace))
}

/// Vanilla self-attention: `deps_attention` without a scale matrix or wink
/// mask.
pub fn baseline_attention(
    h: &Tensor,
    params: &AttentionParams,
    pad_mask: Option<&AttentionMask>,
) -> Result<(Tensor, AttentionTrace), AttentionError> {
    deps_attention(h, None, params, pad_mask, None)
}

/// Mean Shannon entropy (nats) of weight rows; zero entries contribute 0.
pub fn mean_row_entropy(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|row| -> f64 {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum()
        })
        .sum();
    total / rows.len() as f64
}

/// Per-head mean row entropy (nats) of the attention weights in a trace.
pub fn attention_entropy(trace: &AttentionTrace) -> Vec<f64> {
    trace
        .heads
        .iter()
        .map(|h| mean_row_entropy(&h.weights))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deptree::{tree_distance_matrix, DepTree, Token};
    use crate::scaling::{scale_matrix, wink_mask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_token_tree() -> DepTree {
        DepTree::new(vec![
            Token {
                index: 1,
                form: "a".to_string(),
                head: 0,
            },
            Token {
                index: 2,
                form: "b".to_string(),
                head: 1,
            },
        ])
        .unwrap()
    }

    fn identity_params(d_model: usize) -> AttentionParams {
        let eye = |n: usize| {
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                data[i * n + i] = 1.0;
            }
            Tensor::param(&[n, n], data).unwrap()
        };
        AttentionParams::from_weights(
            d_model,
            vec![eye(d_model)],
            vec![eye(d_model)],
            vec![eye(d_model)],
            eye(d_model),
        )
        .unwrap()
    }

    fn random_params(d_model: usize, n_heads: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::init(d_model, n_heads, &mut rng).unwrap()
    }

    fn random_input(n: usize, d_model: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, d_model], data).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn worked_two_token_example() {
        // single head, d_k = 1, weights chosen so the first score row is
        // [0.2, 0.4]; adjacent tokens give the scale row
        // [gauss(0,1), gauss(1,1)]
        let h1 = 0.2f64.sqrt();
        let h2 = 0.4 / h1;
        let h = Tensor::from_vec(&[2, 1], vec![h1, h2]).unwrap();
        let params = identity_params(1);
        let ds = scale_matrix(&tree_distance_matrix(&two_token_tree()), 1.0).unwrap();
        let (_, trace) = deps_attention(&h, Some(&ds), &params, None, None).unwrap();

        let s = &trace.heads[0].scores[0];
        assert!((s[0] - 0.2).abs() < 1e-15);
        assert!((s[1] - 0.4).abs() < 1e-15);
        let st = &trace.heads[0].scaled[0];
        assert!((st[0] - 0.079788456080286536).abs() < 1e-15);
        assert!((st[1] - 0.096788289807657340).abs() < 1e-15);
        let w = &trace.heads[0].weights[0];
        assert!((w[0] - 0.495750143916362891).abs() < 1e-12);
        assert!((w[1] - 0.504249856083637109).abs() < 1e-12);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let h = Tensor::from_vec(&[1, 2], vec![0.3, -0.8]).unwrap();
        let params = random_params(2, 1, 7);
        let tree = DepTree::new(vec![Token {
            index: 1,
            form: "x".to_string(),
            head: 0,
        }])
        .unwrap();
        let ds = scale_matrix(&tree_distance_matrix(&tree), 1.0).unwrap();
        let (_, trace) = deps_attention(&h, Some(&ds), &params, None, None).unwrap();
        assert_eq!(trace.heads[0].weights, vec![vec![1.0]]);
    }

    #[test]
    fn all_ones_scale_equals_baseline_bitwise() {
        for seed in 0..10 {
            let n = 3 + (seed as usize % 5);
            let params = random_params(8, 2, 100 + seed);
            let h = random_input(n, 8, 200 + seed);
            let ones = ScaledMatrix::ones(n);
            let (deps_out, deps_trace) =
                deps_attention(&h, Some(&ones), &params, None, None).unwrap();
            let (base_out, base_trace) = baseline_attention(&h, &params, None).unwrap();
            assert_eq!(bits(&deps_out), bits(&base_out));
            for (a, b) in deps_trace.heads.iter().zip(&base_trace.heads) {
                assert_eq!(a.weights, b.weights);
            }
        }
    }

    #[test]
    fn zero_projections_give_uniform_weights() {
        let d = 4;
        let zero = |r: usize, c: usize| Tensor::param(&[r, c], vec![0.0; r * c]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wv = AttentionParams::init(d, 1, &mut rng).unwrap().w_v[0].clone();
        let params =
            AttentionParams::from_weights(d, vec![zero(d, d)], vec![zero(d, d)], vec![wv], {
                let mut r2 = ChaCha8Rng::seed_from_u64(4);
                AttentionParams::init(d, 1, &mut r2).unwrap().w_o
            })
            .unwrap();
        let h = random_input(5, d, 11);
        let (_, trace) = baseline_attention(&h, &params, None).unwrap();
        for row in &trace.heads[0].weights {
            for &w in row {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_is_permutation_equivariant() {
        let d = 6;
        let params = random_params(d, 2, 42);
        let h = random_input(4, d, 43);
        let (out, _) = baseline_attention(&h, &params, None).unwrap();
        // reverse the rows
        let perm: Vec<usize> = (0..4).rev().collect();
        let src = h.data().clone();
        let mut permuted = vec![0.0; src.len()];
        for (i, &p) in perm.iter().enumerate() {
            permuted[i * d..(i + 1) * d].copy_from_slice(&src[p * d..(p + 1) * d]);
        }
        let hp = Tensor::from_vec(&[4, d], permuted).unwrap();
        let (out_p, _) = baseline_attention(&hp, &params, None).unwrap();
        let o = out.data().clone();
        let op = out_p.data().clone();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((op[i * d + j] - o[p * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_score_rows_follow_scale_ordering() {
        // with W_Q = 0 every score row is constant 0; multiplying by D^s
        // keeps it constant, so weights are uniform. Use a constant
        // positive row instead: Q from a constant input via nonzero W_Q.
        let d = 2;
        let ones_w = Tensor::param(&[d, d], vec![0.5; d * d]).unwrap();
        let params = AttentionParams::from_weights(
            d,
            vec![ones_w.clone()],
            vec![ones_w.clone()],
            vec![ones_w.clone()],
            Tensor::param(&[d, d], vec![0.1; d * d]).unwrap(),
        )
        .unwrap();
        // chain 1-2-3-4: distances from token 1 are 0,1,2,3
        let tokens: Vec<Token> = (1..=4)
            .map(|i| Token {
                index: i,
                form: format!("t{i}"),
                head: i - 1,
            })
            .collect();
        let tree = DepTree::new(tokens).unwrap();
        let ds = scale_matrix(&tree_distance_matrix(&tree), 1.0).unwrap();
        // all-ones hidden rows: every score row is constant and positive
        let h = Tensor::from_vec(&[4, d], vec![1.0; 4 * d]).unwrap();
        let (_, trace) = deps_attention(&h, Some(&ds), &params, None, None).unwrap();
        let w = &trace.heads[0].weights[0];
        assert!(w[0] > w[1] && w[1] > w[2] && w[2] > w[3]);
    }

    #[test]
    fn masked_positions_get_zero_weight_and_rows_normalize() {
        let d = 4;
        let params = random_params(d, 2, 9);
        let tokens: Vec<Token> = (1..=5)
            .map(|i| Token {
                index: i,
                form: format!("t{i}"),
                head: if i == 1 { 0 } else { i - 1 },
            })
            .collect();
        let tree = DepTree::new(tokens).unwrap();
        let dist = tree_distance_matrix(&tree);
        let ds = scale_matrix(&dist, 1.0).unwrap();
        let wink = wink_mask(&dist, 1);
        let h = random_input(5, d, 10);
        let (_, trace) = deps_attention(&h, Some(&ds), &params, None, Some(&wink)).unwrap();
        for head in &trace.heads {
            for (i, row) in head.weights.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for (j, &w) in row.iter().enumerate() {
                    if !wink.allows(i, j) {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let d = 2;
        let params = random_params(d, 1, 1);
        let h = random_input(3, d, 2);
        // pad allows only column 0; wink allows only the diagonal: row 1
        // and 2 lose every position under the union
        let pad = AttentionMask::from_rows(vec![
            vec![true, false, false],
            vec![true, false, false],
            vec![true, false, false],
        ])
        .unwrap();
        let mut diag = vec![vec![false; 3]; 3];
        for (i, row) in diag.iter_mut().enumerate() {
            row[i] = true;
        }
        let wink = AttentionMask::from_rows(diag).unwrap();
        let err = deps_attention(&h, None, &params, Some(&pad), Some(&wink)).unwrap_err();
        match err {
            AttentionError::FullyMaskedRow { row } => assert_eq!(row, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let params = random_params(4, 2, 5);
        let h = random_input(3, 6, 6);
        assert!(matches!(
            deps_attention(&h, None, &params, None, None),
            Err(AttentionError::DimensionMismatch(_))
        ));
        let h = random_input(3, 4, 6);
        let ds = ScaledMatrix::ones(4);
        assert!(matches!(
            deps_attention(&h, Some(&ds), &params, None, None),
            Err(AttentionError::DimensionMismatch(_))
        ));
        assert!(AttentionParams::init(6, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gradients_flow_to_weights_but_not_ds() {
        let d = 4;
        let params = random_params(d, 2, 20);
        let h = Tensor::param(
            &[3, d],
            random_input(3, d, 21).data().clone(),
        )
        .unwrap();
        let tokens: Vec<Token> = (1..=3)
            .map(|i| Token {
                index: i,
                form: format!("t{i}"),
                head: if i == 1 { 0 } else { i - 1 },
            })
            .collect();
        let dist = tree_distance_matrix(&DepTree::new(tokens).unwrap());
        let ds = scale_matrix(&dist, 1.0).unwrap();
        let mut tensors = params.tensors();
        tensors.push(h.clone());
        let rel = crate::tensor::finite_difference_check(
            || {
                let (out, _) = deps_attention(&h, Some(&ds), &params, None, None)
                    .map_err(|_| TensorError::ShapeMismatch("attention".to_string()))?;
                Ok(out.mul(&out)?.sum())
            },
            &tensors,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn entropy_of_uniform_and_onehot_rows() {
        let uniform = vec![vec![0.2; 5]; 5];
        assert!((mean_row_entropy(&uniform) - 5.0f64.ln()).abs() < 1e-12);
        let onehot = vec![vec![1.0, 0.0, 0.0]; 3];
        assert_eq!(mean_row_entropy(&onehot), 0.0);
        let trace = AttentionTrace {
            heads: vec![
                HeadTrace {
                    scores: vec![],
                    scaled: vec![],
                    weights: uniform,
                    z: vec![],
                },
                HeadTrace {
                    scores: vec![],
                    scaled: vec![],
                    weights: onehot,
                    z: vec![],
                },
            ],
            output: vec![],
        };
        let per_head = attention_entropy(&trace);
        assert!((per_head[0] - 5.0f64.ln()).abs() < 1e-12);
        assert_eq!(per_head[1], 0.0);
    }
}
