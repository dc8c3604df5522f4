//! Latent intent: refine the behavior sequence with self-attention, score
//! each behavior's relevance to a reference item from the co-occurrence
//! graph, and attend with relevance-scaled keys and values.

use rand::Rng;

use crate::attention::MultiHeadAttention;
use crate::graph::{CoocGraph, ItemNode, RelevanceHead};
use crate::tensor::{ops, Tensor, TensorError};

/// Attend a single query over behaviors whose rows are first scaled by
/// their relevance score: keys and values both see the scaled rows, so a
/// score of 0 erases a behavior exactly and a score of 1 leaves plain
/// attention untouched.
pub fn modulated_attention(
    attn: &MultiHeadAttention,
    query: &Tensor,
    behaviors: &Tensor,
    mask: &[bool],
    pi: &Tensor,
) -> Result<Tensor, TensorError> {
    let scaled = ops::scale_rows(behaviors, pi)?;
    attn.attend(query, &scaled, mask)
}

pub struct LatentIntentModule {
    refine: MultiHeadAttention,
    relevance: RelevanceHead,
    /// One cross-attention queried by trigger and target alike, so equal
    /// reference items produce equal latent representations.
    cross: MultiHeadAttention,
}

impl LatentIntentModule {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        relevance_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<LatentIntentModule, TensorError> {
        Ok(LatentIntentModule {
            refine: MultiHeadAttention::new(d_model, n_heads, rng)?,
            relevance: RelevanceHead::new(relevance_dim, rng),
            cross: MultiHeadAttention::new(d_model, n_heads, rng)?,
        })
    }

    /// One self-attention block over the behavior sequence; fully padded
    /// input short-circuits to zeros.
    pub fn refine_behaviors(
        &self,
        behaviors: &Tensor,
        mask: &[bool],
    ) -> Result<Tensor, TensorError> {
        self.refine.self_attend(behaviors, mask)
    }

    /// Relevance of each behavior to `reference`, in (0,1) for real
    /// positions and exactly 0 for padded ones.
    pub fn score_behaviors(
        &self,
        graph: &CoocGraph,
        behaviors: &[ItemNode],
        reference: ItemNode,
        mask: &[bool],
    ) -> Result<Tensor, TensorError> {
        if behaviors.len() != mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "score_behaviors",
                lhs: vec![behaviors.len()],
                rhs: vec![mask.len()],
            });
        }
        let triples: Vec<_> = behaviors
            .iter()
            .map(|&node| graph.relation(node, reference))
            .collect();
        let pi = self.relevance.score(&triples)?;
        let keep = Tensor::new(
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            &[mask.len()],
        )?;
        ops::mul(&pi, &keep)
    }

    /// Both relevance-modulated views of the behavior sequence, sharing one
    /// refined representation. Empty behavior sequences yield zero vectors.
    #[allow(clippy::too_many_arguments)]
    pub fn latent_intents(
        &self,
        graph: &CoocGraph,
        behaviors: &[ItemNode],
        mask: &[bool],
        behaviors_embedded: &Tensor,
        trigger: ItemNode,
        trigger_embedded: &Tensor,
        target: ItemNode,
        target_embedded: &Tensor,
    ) -> Result<(Tensor, Tensor), TensorError> {
        let d = self.refine.d_model();
        if mask.iter().all(|&m| !m) {
            return Ok((Tensor::zeros(&[1, d]), Tensor::zeros(&[1, d])));
        }
        let refined = self.refine_behaviors(behaviors_embedded, mask)?;
        let pi_tr = self.score_behaviors(graph, behaviors, trigger, mask)?;
        let pi_ta = self.score_behaviors(graph, behaviors, target, mask)?;
        let h_tr = modulated_attention(&self.cross, trigger_embedded, &refined, mask, &pi_tr)?;
        let h_ta = modulated_attention(&self.cross, target_embedded, &refined, mask, &pi_ta)?;
        Ok((h_tr, h_ta))
    }

    /// Target-side view alone, for variants that must not condition on the
    /// trigger. Matches the target half of [`latent_intents`] exactly.
    ///
    /// [`latent_intents`]: LatentIntentModule::latent_intents
    pub fn latent_intent_target_only(
        &self,
        graph: &CoocGraph,
        behaviors: &[ItemNode],
        mask: &[bool],
        behaviors_embedded: &Tensor,
        target: ItemNode,
        target_embedded: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let d = self.refine.d_model();
        if mask.iter().all(|&m| !m) {
            return Ok(Tensor::zeros(&[1, d]));
        }
        let refined = self.refine_behaviors(behaviors_embedded, mask)?;
        let pi_ta = self.score_behaviors(graph, behaviors, target, mask)?;
        modulated_attention(&self.cross, target_embedded, &refined, mask, &pi_ta)
    }

    pub fn d_model(&self) -> usize {
        self.refine.d_model()
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.refine.params(&format!("{prefix}.refine"), out);
        self.relevance.params(&format!("{prefix}.relevance"), out);
        self.cross.params(&format!("{prefix}.cross"), out);
    }
}
