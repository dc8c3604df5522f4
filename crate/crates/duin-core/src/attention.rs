//! Multi-head scaled dot-product attention.
//!
//! All projections are bias-free. That keeps zero rows zero through the
//! value path, which the relevance-modulated attention relies on: scaling a
//! row to zero must erase its contribution exactly.

use rand::Rng;

use crate::tensor::{ops, Tensor, TensorError};

struct Head {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
}

pub struct MultiHeadAttention {
    heads: Vec<Head>,
    wo: Tensor,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MultiHeadAttention, TensorError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(TensorError::Unsupported {
                op: "attention",
                msg: format!("d_model {d_model} is not divisible into {n_heads} heads"),
            });
        }
        let d_head = d_model / n_heads;
        let bound = 1.0 / (d_model as f32).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::param(data, &[rows, cols]).expect("nonzero dims")
        };
        let heads = (0..n_heads)
            .map(|_| Head {
                wq: mat(d_model, d_head),
                wk: mat(d_model, d_head),
                wv: mat(d_model, d_head),
            })
            .collect();
        let wo = mat(d_model, d_model);
        Ok(MultiHeadAttention { heads, wo, d_model })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Attend `query` [q, d] over `keys_values` [t, d] restricted to positions
    /// where `mask` is true. Scores are scaled by 1/sqrt(d_model). A fully
    /// masked sequence short-circuits to a zero output.
    pub fn attend(
        &self,
        query: &Tensor,
        keys_values: &Tensor,
        mask: &[bool],
    ) -> Result<Tensor, TensorError> {
        let (q, dq) = query.dims2("attention")?;
        let (t, dk) = keys_values.dims2("attention")?;
        if dq != self.d_model || dk != self.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: query.shape(),
                rhs: keys_values.shape(),
            });
        }
        if mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![t],
                rhs: vec![mask.len()],
            });
        }
        if mask.iter().all(|&m| !m) {
            return Ok(Tensor::zeros(&[q, self.d_model]));
        }
        let scale = 1.0 / (self.d_model as f32).sqrt();
        let mut contexts = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let qh = ops::matmul(query, &head.wq)?;
            let kh = ops::matmul(keys_values, &head.wk)?;
            let vh = ops::matmul(keys_values, &head.wv)?;
            let scores = ops::scale(&ops::matmul_nt(&qh, &kh)?, scale)?;
            let attn = ops::masked_softmax_rows(&scores, mask)?;
            contexts.push(ops::matmul(&attn, &vh)?);
        }
        ops::matmul(&ops::concat(&contexts, 1)?, &self.wo)
    }

    /// Self-attention: every position queries the whole (masked) sequence.
    pub fn self_attend(&self, x: &Tensor, mask: &[bool]) -> Result<Tensor, TensorError> {
        self.attend(x, x, mask)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{h}.wq"), head.wq.clone()));
            out.push((format!("{prefix}.head{h}.wk"), head.wk.clone()));
            out.push((format!("{prefix}.head{h}.wv"), head.wv.clone()));
        }
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }
}
