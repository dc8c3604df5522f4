//! The assembled network: embedding tables, the explicit and latent intent
//! modules, the uncertainty gate, and the prediction head, with every
//! ablation switch. One forward pass scores a batch of interned samples
//! against a co-occurrence graph.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TrainConfig;
use crate::embedding::{EmbeddingTable, PAD_ID};
use crate::explicit_intent::{
    self, ExplicitSequence, ExplicitEncoder, InteractionHead,
};
use crate::graph::{CoocGraph, ItemNode};
use crate::intent_uncertainty::{self, IntentUncertainty};
use crate::latent_intent::LatentIntentModule;
use crate::mlp::{Linear, Mlp};
use crate::tensor::{ops, Tensor, TensorError};

/// Embedding rows for the hour-of-day context feature (24 hours + pad/oov).
pub const HOUR_ROWS: usize = 26;
/// Embedding rows for the position-in-session feature (16 buckets + pad/oov).
pub const POSITION_ROWS: usize = 18;
/// Width of the interaction feature slot in the head input.
pub const INTERACTION_DIM: usize = 72;

/// Embedding row for an hour-of-day value in [0, 24).
pub fn hour_row(hour: u32) -> u32 {
    2 + (hour % 24)
}

/// Embedding row for a position-in-session index, clamped to the last bucket.
pub fn position_row(position: u32) -> u32 {
    2 + position.min(15)
}

/// Vocabulary sizes the embedding tables are built for, including the
/// reserved padding and out-of-vocabulary rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSizes {
    pub items: usize,
    pub attrs: usize,
    pub users: usize,
}

/// One fully interned sample. Behaviors run oldest to newest and are all
/// strictly earlier than the sample; the hour and position fields are
/// embedding rows (see [`hour_row`] / [`position_row`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user: u32,
    pub hour: u32,
    pub position: u32,
    pub behaviors: Vec<ItemNode>,
    pub trigger: ItemNode,
    pub target: ItemNode,
    pub label: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Stochastic inputs for one step, drawn up front so a forward pass is a
/// deterministic function of (parameters, samples, draws). Finite-difference
/// checks replay the same draws; purpose-split rng streams stay aligned
/// across variants that skip one of the two kinds.
#[derive(Debug, Clone, Default)]
pub struct StepDraws {
    /// Masked explicit-sequence views, one per sample; empty when the
    /// contrastive loss is inactive.
    pub views: Vec<ExplicitSequence>,
    /// Gate noise, d_z draws per sample; empty when the gate is
    /// deterministic for this configuration and phase.
    pub eps: Vec<Vec<f32>>,
}

impl StepDraws {
    /// No randomness: mean-gate inference and no contrastive views.
    pub fn none() -> StepDraws {
        StepDraws::default()
    }

    pub fn draw(
        cfg: &TrainConfig,
        samples: &[Sample],
        rng_aug: &mut impl Rng,
        rng_noise: &mut impl Rng,
    ) -> StepDraws {
        let views = if cfg.ssl_active() {
            samples
                .iter()
                .map(|s| {
                    let seq = explicit_intent::extract(&s.behaviors, s.trigger, cfg.l_max);
                    explicit_intent::augment(&seq, cfg.gamma as f64, rng_aug)
                })
                .collect()
        } else {
            Vec::new()
        };
        let eps = if gate_is_sampled(cfg) {
            let d_z = cfg.d_model();
            samples
                .iter()
                .map(|_| (0..d_z).map(|_| StandardNormal.sample(rng_noise)).collect())
                .collect()
        } else {
            Vec::new()
        };
        StepDraws { views, eps }
    }
}

/// Whether this configuration draws gate noise during training.
pub fn gate_is_sampled(cfg: &TrainConfig) -> bool {
    let a = &cfg.ablation;
    !(a.no_liem || a.no_iumm || a.sii || a.trigger_agnostic)
}

pub struct ForwardOutput {
    /// Pre-sigmoid scores, shape [B, 1].
    pub logits: Tensor,
    /// Interaction probabilities, sigmoid of the logits.
    pub probs: Vec<f32>,
    /// Contrastive anchor/positive encodings, [B, 2d] each, when active.
    pub ssl_views: Option<(Tensor, Tensor)>,
}

pub struct DuinModel {
    pub cfg: TrainConfig,
    item_table: EmbeddingTable,
    attr_table: EmbeddingTable,
    user_table: EmbeddingTable,
    hour_table: EmbeddingTable,
    position_table: EmbeddingTable,
    explicit_encoder: ExplicitEncoder,
    interaction: InteractionHead,
    latent: LatentIntentModule,
    uncertainty: IntentUncertainty,
    /// Deterministic scalar gate for the static-intensity variant.
    sii_head: Linear,
    head: Mlp,
}

impl DuinModel {
    /// Builds every module regardless of ablation flags so checkpoints stay
    /// shape-compatible across variants; flags only steer the forward pass.
    /// The prediction head's final layer starts at zero, so a fresh model
    /// scores 0.5 everywhere.
    pub fn new(
        cfg: &TrainConfig,
        vocab: VocabSizes,
        rng: &mut impl Rng,
    ) -> Result<DuinModel, TensorError> {
        let d = cfg.d;
        let d_model = cfg.d_model();
        let head_in = 5 * d_model + d + INTERACTION_DIM;
        let head = Mlp::new(&[head_in, 200, 80, 1], rng);
        head.zero_final_layer();
        let model = DuinModel {
            cfg: cfg.clone(),
            item_table: EmbeddingTable::new(vocab.items, d, rng),
            attr_table: EmbeddingTable::new(vocab.attrs, d, rng),
            user_table: EmbeddingTable::new(vocab.users, d, rng),
            hour_table: EmbeddingTable::new(HOUR_ROWS, d, rng),
            position_table: EmbeddingTable::new(POSITION_ROWS, d, rng),
            explicit_encoder: ExplicitEncoder::new(d_model, cfg.n_heads, 1 + cfg.l_max, rng)?,
            interaction: InteractionHead::new(d_model, rng),
            latent: LatentIntentModule::new(d_model, cfg.n_heads, d, rng)?,
            uncertainty: IntentUncertainty::new(5 * d, d_model, rng),
            sii_head: Linear::new(5 * d, 1, true, rng),
            head,
        };
        Ok(model)
    }

    pub fn vocab_sizes(&self) -> VocabSizes {
        VocabSizes {
            items: self.item_table.vocab_size(),
            attrs: self.attr_table.vocab_size(),
            users: self.user_table.vocab_size(),
        }
    }

    /// All trainable tensors in a stable, named order. The order is the
    /// checkpoint layout and the optimizer slot order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("embed.item".to_string(), self.item_table.weights().clone()));
        out.push(("embed.attr".to_string(), self.attr_table.weights().clone()));
        out.push(("embed.user".to_string(), self.user_table.weights().clone()));
        out.push(("embed.hour".to_string(), self.hour_table.weights().clone()));
        out.push((
            "embed.position".to_string(),
            self.position_table.weights().clone(),
        ));
        self.explicit_encoder.params("eiem.encoder", &mut out);
        self.interaction.params("eiem.interaction", &mut out);
        self.latent.params("liem", &mut out);
        self.uncertainty.params("iumm", &mut out);
        self.sii_head.params("sii", &mut out);
        self.head.params("head", &mut out);
        out
    }

    /// Item representation: item-id and attribute-id embeddings side by side.
    fn embed_node(&self, node: ItemNode) -> Result<Tensor, TensorError> {
        let item = self.item_table.lookup(&[node.0])?;
        let attr = self.attr_table.lookup(&[node.1])?;
        ops::concat(&[item, attr], 1)
    }

    fn embed_nodes(&self, nodes: &[ItemNode]) -> Result<Tensor, TensorError> {
        let items: Vec<u32> = nodes.iter().map(|n| n.0).collect();
        let attrs: Vec<u32> = nodes.iter().map(|n| n.1).collect();
        let item = self.item_table.lookup(&items)?;
        let attr = self.attr_table.lookup(&attrs)?;
        ops::concat(&[item, attr], 1)
    }

    /// Newest `t_max` behaviors, right-padded, with their presence mask;
    /// layout matches the embedded sequence row for row.
    fn padded_behaviors(&self, behaviors: &[ItemNode]) -> (Vec<ItemNode>, Vec<bool>) {
        let t = self.cfg.t_max;
        let start = behaviors.len().saturating_sub(t);
        let kept = &behaviors[start..];
        let mut nodes = vec![(PAD_ID, PAD_ID); t];
        nodes[..kept.len()].copy_from_slice(kept);
        let mask = (0..t).map(|i| i < kept.len()).collect();
        (nodes, mask)
    }

    fn encode_explicit(&self, seq: &ExplicitSequence) -> Result<Tensor, TensorError> {
        let embedded = self.embed_nodes(seq.nodes())?;
        // Masked-out positions in augmented views keep their slot (zero
        // embedding), so the presence mask covers the whole sequence.
        self.explicit_encoder.encode(&embedded, &vec![true; seq.len()])
    }

    pub fn forward_batch(
        &self,
        graph: &CoocGraph,
        samples: &[Sample],
        draws: &StepDraws,
        phase: Phase,
    ) -> Result<ForwardOutput, TensorError> {
        if samples.is_empty() {
            return Err(TensorError::Unsupported {
                op: "forward_batch",
                msg: "empty batch".to_string(),
            });
        }
        let a = self.cfg.ablation;
        let d = self.cfg.d;
        let d_model = self.cfg.d_model();
        let ssl_on = phase == Phase::Train && self.cfg.ssl_active();
        if ssl_on && draws.views.len() != samples.len() {
            return Err(TensorError::Unsupported {
                op: "forward_batch",
                msg: format!(
                    "{} contrastive views for {} samples",
                    draws.views.len(),
                    samples.len()
                ),
            });
        }

        let mut rows = Vec::with_capacity(samples.len());
        let mut anchors = Vec::with_capacity(samples.len());
        let mut positives = Vec::with_capacity(samples.len());
        for (idx, s) in samples.iter().enumerate() {
            let e_ta = self.embed_node(s.target)?;
            let e_hour = self.hour_table.lookup(&[s.hour])?;
            let e_pos = self.position_table.lookup(&[s.position])?;
            let e_user = self.user_table.lookup(&[s.user])?;
            let e_context = ops::concat(&[e_hour, e_pos], 1)?;

            let eiem_on = !(a.no_eiem || a.trigger_agnostic);
            let (h_ei, h_i) = if eiem_on {
                let seq = explicit_intent::extract(&s.behaviors, s.trigger, self.cfg.l_max);
                let h_ei = self.encode_explicit(&seq)?;
                if ssl_on {
                    anchors.push(h_ei.clone());
                    positives.push(self.encode_explicit(&draws.views[idx])?);
                }
                let h_i = self.interaction.forward(&h_ei, &e_ta)?;
                (h_ei, h_i)
            } else {
                (
                    Tensor::zeros(&[1, d_model]),
                    Tensor::zeros(&[1, INTERACTION_DIM]),
                )
            };

            let h_li = if a.no_liem {
                Tensor::zeros(&[1, 2 * d_model])
            } else {
                let (nodes, mask) = self.padded_behaviors(&s.behaviors);
                let bemb = self.embed_nodes(&nodes)?;
                if a.trigger_agnostic {
                    let h_ta = self.latent.latent_intent_target_only(
                        graph, &nodes, &mask, &bemb, s.target, &e_ta,
                    )?;
                    ops::concat(&[Tensor::zeros(&[1, d_model]), h_ta], 1)?
                } else {
                    let e_tr = self.embed_node(s.trigger)?;
                    let (h_tr, h_ta) = self.latent.latent_intents(
                        graph, &nodes, &mask, &bemb, s.trigger, &e_tr, s.target, &e_ta,
                    )?;
                    let x_u = ops::concat(&[e_tr, e_context.clone(), e_user.clone()], 1)?;
                    let z_raw = if a.no_iumm {
                        // Fixed midpoint gate: sigmoid(0) halves both sides.
                        Tensor::zeros(&[1, d_model])
                    } else if a.sii {
                        let scalar = self.sii_head.forward(&x_u)?;
                        ops::matmul(&scalar, &Tensor::full(&[1, d_model], 1.0))?
                    } else {
                        let dist = self.uncertainty.intensity(&x_u)?;
                        let sampled = match phase {
                            Phase::Train => true,
                            Phase::Infer => self.cfg.sample_at_infer,
                        };
                        if sampled {
                            let eps =
                                Tensor::new(draws.eps[idx].clone(), &[1, d_model])?;
                            intent_uncertainty::sample_with_noise(&dist, &eps)?
                        } else {
                            dist.mu.clone()
                        }
                    };
                    intent_uncertainty::gate(&z_raw, &h_tr, &h_ta, self.cfg.gate_squash)?
                }
            };

            let row = ops::concat(&[h_ei, h_i, h_li, e_context, e_user, e_ta], 1)?;
            debug_assert_eq!(row.shape(), vec![1, 5 * d_model + d + INTERACTION_DIM]);
            rows.push(row);
        }

        let stacked = ops::concat(&rows, 0)?;
        let logits = self.head.forward(&stacked)?;
        let probs = logits.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let ssl_views = if ssl_on {
            Some((ops::concat(&anchors, 0)?, ops::concat(&positives, 0)?))
        } else {
            None
        };
        Ok(ForwardOutput {
            logits,
            probs,
            ssl_views,
        })
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy from pre-sigmoid logits [B, 1]:
/// mean(softplus(logit) - y * logit), which equals
/// -mean(y ln p + (1-y) ln(1-p)) without ever forming p.
pub fn bce_loss(logits: &Tensor, labels: &[f32]) -> Result<Tensor, TensorError> {
    let (b, one) = logits.dims2("bce_loss")?;
    if one != 1 || b != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_loss",
            lhs: logits.shape(),
            rhs: vec![labels.len(), 1],
        });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Unsupported {
            op: "bce_loss",
            msg: "labels must be 0 or 1".to_string(),
        });
    }
    let y = Tensor::new(labels.to_vec(), &[b, 1])?;
    let margin = ops::sub(&ops::softplus(logits)?, &ops::mul(&y, logits)?)?;
    ops::mean(&margin)
}

/// Joint objective: l_ctr + alpha * l_ssl.
pub fn final_loss(l_ctr: &Tensor, l_ssl: &Tensor, alpha: f32) -> Result<Tensor, TensorError> {
    ops::add(l_ctr, &ops::scale(l_ssl, alpha)?)
}

pub struct LossBreakdown {
    pub l_ctr: Tensor,
    /// None when the contrastive term is inactive for this step.
    pub l_ssl: Option<Tensor>,
    pub l_final: Tensor,
    pub probs: Vec<f32>,
}

/// One training-step objective over a batch, ready for `backward`.
pub fn training_loss(
    model: &DuinModel,
    graph: &CoocGraph,
    samples: &[Sample],
    draws: &StepDraws,
) -> Result<LossBreakdown, TensorError> {
    let labels: Vec<f32> = samples.iter().map(|s| s.label).collect();
    let out = model.forward_batch(graph, samples, draws, Phase::Train)?;
    let l_ctr = bce_loss(&out.logits, &labels)?;
    match out.ssl_views {
        Some((anchors, positives)) => {
            let l_ssl = explicit_intent::ssl_loss(
                &anchors,
                &positives,
                model.cfg.tau,
                model.cfg.ssl_negatives,
            )?;
            let l_final = final_loss(&l_ctr, &l_ssl, model.cfg.alpha)?;
            Ok(LossBreakdown {
                l_ctr,
                l_ssl: Some(l_ssl),
                l_final,
                probs: out.probs,
            })
        }
        None => Ok(LossBreakdown {
            l_final: l_ctr.clone(),
            l_ctr,
            l_ssl: None,
            probs: out.probs,
        }),
    }
}
