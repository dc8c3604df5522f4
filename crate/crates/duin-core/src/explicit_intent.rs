//! Explicit intent: the trigger plus past behaviors sharing its attribute,
//! encoded with self-attention and trained contrastively against a masked
//! augmentation of itself.

use rand::Rng;

use crate::attention::MultiHeadAttention;
use crate::embedding::PAD_ID;
use crate::graph::ItemNode;
use crate::mlp::Mlp;
use crate::tensor::{ops, tape_active, tape_record, Tensor, TensorError};

/// Attribute-matching subsequence. Position 0 is always the trigger; the
/// rest are matching behaviors, newest first, at most `l_max` of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplicitSequence {
    nodes: Vec<ItemNode>,
}

impl ExplicitSequence {
    pub fn trigger(&self) -> ItemNode {
        self.nodes[0]
    }

    pub fn nodes(&self) -> &[ItemNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the trigger is always present
    }
}

/// Keep behaviors whose attribute equals the trigger's, newest first,
/// truncated to `l_max`, prefixed by the trigger itself.
pub fn extract(behaviors: &[ItemNode], trigger: ItemNode, l_max: usize) -> ExplicitSequence {
    let mut nodes = Vec::with_capacity(1 + l_max);
    nodes.push(trigger);
    nodes.extend(
        behaviors
            .iter()
            .rev()
            .filter(|&&(_, attr)| attr == trigger.1)
            .take(l_max),
    );
    ExplicitSequence { nodes }
}

/// Masked view: each non-trigger position is independently replaced by the
/// padding id with probability `gamma`. The trigger is never masked.
pub fn augment(s: &ExplicitSequence, gamma: f64, rng: &mut impl Rng) -> ExplicitSequence {
    let nodes = s
        .nodes
        .iter()
        .enumerate()
        .map(|(pos, &node)| {
            if pos > 0 && rng.random_bool(gamma) {
                (PAD_ID, PAD_ID)
            } else {
                node
            }
        })
        .collect();
    ExplicitSequence { nodes }
}

/// Self-attention encoder with learned positional embeddings and masked
/// mean pooling.
pub struct ExplicitEncoder {
    attn: MultiHeadAttention,
    positions: Tensor,
}

impl ExplicitEncoder {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<ExplicitEncoder, TensorError> {
        let attn = MultiHeadAttention::new(d_model, n_heads, rng)?;
        let bound = 1.0 / (d_model as f32).sqrt();
        let data: Vec<f32> = (0..max_len * d_model)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(ExplicitEncoder {
            attn,
            positions: Tensor::param(data, &[max_len, d_model])?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.positions.shape()[0]
    }

    /// Encode an embedded sequence [len, d] into one vector [1, d]: add
    /// positional embeddings, one attention block, mean over real positions.
    pub fn encode(&self, embedded: &Tensor, mask: &[bool]) -> Result<Tensor, TensorError> {
        let (len, _) = embedded.dims2("explicit_encode")?;
        if len > self.max_len() || mask.len() != len {
            return Err(TensorError::ShapeMismatch {
                op: "explicit_encode",
                lhs: vec![len],
                rhs: vec![self.max_len(), mask.len()],
            });
        }
        let idx: Vec<usize> = (0..len).collect();
        let pos = ops::gather_rows(&self.positions, &idx)?;
        let h = self.attn.self_attend(&ops::add(embedded, &pos)?, mask)?;
        let real = mask.iter().filter(|&&m| m).count();
        let w: Vec<f32> = mask
            .iter()
            .map(|&m| if m { 1.0 / real.max(1) as f32 } else { 0.0 })
            .collect();
        let pool = Tensor::new(w, &[1, len])?;
        ops::matmul(&pool, &h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.params(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.positions"), self.positions.clone()));
    }
}

/// Which in-batch views count as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSet {
    /// The other samples' 2(B-1) views.
    OtherViews,
    /// The other samples' views plus the anchor's own view (2B-1).
    WithSelf,
}

impl NegativeSet {
    pub fn count(&self, batch: usize) -> usize {
        match self {
            NegativeSet::OtherViews => 2 * batch - 2,
            NegativeSet::WithSelf => 2 * batch - 1,
        }
    }
}

/// Contrastive loss over B (anchor, positive) pairs: cosine similarities at
/// temperature `tau`, each anchor pulled toward its positive against the
/// chosen negative set. Batch mean. Requires B >= 2 so negatives exist.
pub fn ssl_loss(
    anchors: &Tensor,
    positives: &Tensor,
    tau: f32,
    negatives: NegativeSet,
) -> Result<Tensor, TensorError> {
    let (b, d) = anchors.dims2("ssl_loss")?;
    if positives.shape() != [b, d] {
        return Err(TensorError::ShapeMismatch {
            op: "ssl_loss",
            lhs: anchors.shape(),
            rhs: positives.shape(),
        });
    }
    if b < 2 {
        return Err(TensorError::Unsupported {
            op: "ssl_loss",
            msg: "batch of fewer than 2 pairs has no negatives".to_string(),
        });
    }
    if !(tau > 0.0) {
        return Err(TensorError::Unsupported {
            op: "ssl_loss",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let views = ops::concat(&[anchors.clone(), positives.clone()], 0)?;
    let normed = ops::l2_normalize_rows(&views)?;
    let logits = ops::scale(&ops::matmul_nt(&normed, &normed)?, 1.0 / tau)?;
    nce_reduce(&logits, b, negatives)
}

/// Mean over anchors i of logsumexp(logits[i, D_i]) - logits[i, B+i], where
/// D_i is the positive plus the negative set. Row i of the [2B, 2B] logits
/// matrix holds anchor i's similarities; column B+i is its positive view.
fn nce_reduce(logits: &Tensor, b: usize, negatives: NegativeSet) -> Result<Tensor, TensorError> {
    let n = 2 * b;
    if logits.shape() != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "nce_reduce",
            lhs: logits.shape(),
            rhs: vec![n, n],
        });
    }
    let denom_cols = move |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| match negatives {
                // everything except the anchor itself (= positive + others)
                NegativeSet::OtherViews => j != i,
                NegativeSet::WithSelf => true,
            })
            .collect()
    };
    let loss_val = {
        let li = logits.inner.borrow();
        let mut total = 0.0f64;
        for i in 0..b {
            let row = &li.data[i * n..(i + 1) * n];
            let cols = denom_cols(i);
            let max = cols
                .iter()
                .map(|&j| row[j])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for &j in &cols {
                sum += (row[j] as f64 - max).exp();
            }
            total += max + sum.ln() - row[b + i] as f64;
        }
        (total / b as f64) as f32
    };
    let rg = logits.requires_grad();
    let out = Tensor::from_op(vec![loss_val], vec![1], rg);
    if rg && tape_active() {
        let (l2, o2) = (logits.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let contrib = {
                let li = l2.inner.borrow();
                let mut contrib = vec![0.0f32; n * n];
                let gv = g[0] as f64 / b as f64;
                for i in 0..b {
                    let row = &li.data[i * n..(i + 1) * n];
                    let cols = denom_cols(i);
                    let max = cols
                        .iter()
                        .map(|&j| row[j])
                        .fold(f32::NEG_INFINITY, f32::max) as f64;
                    let mut sum = 0.0f64;
                    for &j in &cols {
                        sum += (row[j] as f64 - max).exp();
                    }
                    for &j in &cols {
                        let p = (row[j] as f64 - max).exp() / sum;
                        contrib[i * n + j] += (gv * p) as f32;
                    }
                    contrib[i * n + b + i] -= gv as f32;
                }
                contrib
            };
            l2.accumulate_grad(&contrib);
        });
    }
    Ok(out)
}

/// Feature interaction between the explicit intent vector and the target
/// embedding: MLP over (h, e, h*e, h-e).
pub struct InteractionHead {
    mlp: Mlp,
}

impl InteractionHead {
    /// Hidden width 144, output width 72.
    pub fn new(d_model: usize, rng: &mut impl Rng) -> InteractionHead {
        InteractionHead {
            mlp: Mlp::new(&[4 * d_model, 144, 72], rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward(&self, h_ei: &Tensor, e_ta: &Tensor) -> Result<Tensor, TensorError> {
        let prod = ops::mul(h_ei, e_ta)?;
        let diff = ops::sub(h_ei, e_ta)?;
        let joint = ops::concat(&[h_ei.clone(), e_ta.clone(), prod, diff], 1)?;
        self.mlp.forward(&joint)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mlp.params(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::prelude::*;

    #[test]
    fn extract_matches_filter_rules() {
        let trigger = (50, 2);
        // oldest to newest; attrs 1 and 2
        let behaviors = vec![(10, 1), (11, 2), (12, 1), (13, 2), (14, 2)];
        let s = extract(&behaviors, trigger, 10);
        assert_eq!(s.nodes(), &[(50, 2), (14, 2), (13, 2), (11, 2)]);

        let none = extract(&[(10, 1)], (50, 2), 10);
        assert_eq!(none.nodes(), &[(50, 2)]);

        let many: Vec<ItemNode> = (0..20).map(|i| (i, 7)).collect();
        let s = extract(&many, (99, 7), 10);
        assert_eq!(s.len(), 11);
        // newest first after the trigger
        assert_eq!(s.nodes()[1], (19, 7));
        assert_eq!(s.nodes()[10], (10, 7));
    }

    #[test]
    fn augment_edges_and_mask_rate() {
        let s = extract(&(0..10).map(|i| (i, 3)).collect::<Vec<_>>(), (99, 3), 10);
        let mut rng = StdRng::seed_from_u64(8);
        assert_eq!(augment(&s, 0.0, &mut rng), s);
        let all = augment(&s, 1.0, &mut rng);
        assert_eq!(all.nodes()[0], (99, 3));
        assert!(all.nodes()[1..].iter().all(|&n| n == (PAD_ID, PAD_ID)));

        let mut masked = 0u64;
        let trials = 10_000;
        for _ in 0..trials {
            let a = augment(&s, 0.5, &mut rng);
            masked += a.nodes()[1..].iter().filter(|&&n| n == (PAD_ID, PAD_ID)).count() as u64;
        }
        let rate = masked as f64 / (trials * 10) as f64;
        assert!((rate - 0.5).abs() < 0.02, "empirical mask rate {rate}");
    }

    fn encoder_with_input(seed: u64, len: usize) -> (ExplicitEncoder, Tensor) {
        let mut rng = StdRng::seed_from_u64(seed);
        let enc = ExplicitEncoder::new(8, 2, 11, &mut rng).unwrap();
        let x = Tensor::new(
            (0..len * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[len, 8],
        )
        .unwrap();
        (enc, x)
    }

    #[test]
    fn encode_is_deterministic_and_pooled() {
        let (enc, x) = encoder_with_input(21, 5);
        let mask = [true, true, true, false, false];
        let a = enc.encode(&x, &mask).unwrap();
        let b = enc.encode(&x, &mask).unwrap();
        assert_eq!(a.shape(), vec![1, 8]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encode_ignores_padded_positions() {
        let (enc, x) = encoder_with_input(22, 5);
        let mask = [true, true, true, false, false];
        let base = enc.encode(&x, &mask).unwrap().data();
        let mut altered = x.data();
        for v in &mut altered[3 * 8..] {
            *v = 123.0;
        }
        let x2 = Tensor::new(altered, &[5, 8]).unwrap();
        let same = enc.encode(&x2, &mask).unwrap().data();
        for (a, b) in base.iter().zip(&same) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encode_is_position_sensitive() {
        let (enc, x) = encoder_with_input(23, 4);
        let mask = [true; 4];
        let base = enc.encode(&x, &mask).unwrap().data();
        let mut swapped = x.data();
        for j in 0..8 {
            swapped.swap(8 + j, 16 + j); // permute two non-trigger rows
        }
        let x2 = Tensor::new(swapped, &[4, 8]).unwrap();
        let perm = enc.encode(&x2, &mask).unwrap().data();
        assert_ne!(base, perm);
    }

    fn unit_rows(rows: &[[f32; 4]]) -> Tensor {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::new(flat, &[rows.len(), 4]).unwrap()
    }

    #[test]
    fn ssl_all_identical_views_hits_closed_form() {
        for (negatives, b) in [
            (NegativeSet::OtherViews, 4),
            (NegativeSet::WithSelf, 4),
            (NegativeSet::OtherViews, 2),
        ] {
            let rows = vec![[0.5, -0.5, 0.25, 1.0]; b];
            let anchors = unit_rows(&rows);
            let positives = unit_rows(&rows);
            let loss = ssl_loss(&anchors, &positives, 0.1, negatives).unwrap().value() as f64;
            let expect = (1.0 + negatives.count(b) as f64).ln();
            assert!(
                (loss - expect).abs() < 1e-5,
                "{negatives:?} B={b}: {loss} vs {expect}"
            );
        }
    }

    #[test]
    fn ssl_perfectly_separated_pair_is_near_zero() {
        // B=2: anchor0 == positive0 = v, sample 1's views are both -v, so
        // cos(anchor, positive) = 1 and both negatives sit at cos = -1.
        let v = [0.6, -0.8, 0.0, 0.0];
        let nv = [-0.6, 0.8, 0.0, 0.0];
        let anchors = unit_rows(&[v, nv]);
        let positives = unit_rows(&[v, nv]);
        let loss = ssl_loss(&anchors, &positives, 0.1, NegativeSet::OtherViews)
            .unwrap()
            .value() as f64;
        let expect = (2.0 * (-20.0f64).exp()).ln_1p();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn ssl_is_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(30);
        let data: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let anchors = Tensor::new(data[..12].to_vec(), &[3, 4]).unwrap();
        let positives = Tensor::new(data[12..].to_vec(), &[3, 4]).unwrap();
        let base = ssl_loss(&anchors, &positives, 0.1, NegativeSet::OtherViews).unwrap().value();
        let scaled_a = Tensor::new(data[..12].iter().map(|v| v * 3.0).collect(), &[3, 4]).unwrap();
        let scaled_p = Tensor::new(data[12..].iter().map(|v| v * 3.0).collect(), &[3, 4]).unwrap();
        let scaled = ssl_loss(&scaled_a, &scaled_p, 0.1, NegativeSet::OtherViews).unwrap().value();
        assert!((base - scaled).abs() < 1e-5);
    }

    #[test]
    fn ssl_rejects_degenerate_batch_and_temperature() {
        let one = unit_rows(&[[1.0, 0.0, 0.0, 0.0]]);
        assert!(ssl_loss(&one, &one, 0.1, NegativeSet::OtherViews).is_err());
        let two = unit_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        assert!(ssl_loss(&two, &two, 0.0, NegativeSet::OtherViews).is_err());
    }

    #[test]
    fn ssl_decreases_as_anchor_aligns_with_positive() {
        // rotate anchor 0 toward its positive while negatives stay put
        let mut losses = Vec::new();
        for align in [0.2f32, 0.6, 0.95] {
            let ortho = (1.0 - align * align).sqrt();
            let anchors = unit_rows(&[[align, ortho, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
            let positives = unit_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.9, 0.1]]);
            losses.push(
                ssl_loss(&anchors, &positives, 0.5, NegativeSet::OtherViews)
                    .unwrap()
                    .value(),
            );
        }
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn ssl_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(31);
        let a_data: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p_data: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let anchors = Tensor::param(a_data.clone(), &[3, 4]).unwrap();
        let positives = Tensor::new(p_data, &[3, 4]).unwrap();
        let analytic = {
            let tape = Tape::new();
            let loss = ssl_loss(&anchors, &positives, 0.2, NegativeSet::OtherViews).unwrap();
            tape.backward(&loss).unwrap();
            anchors.grad().unwrap()
        };
        anchors.zero_grad();
        let h = 1e-3f32;
        for k in 0..12 {
            let mut pert = a_data.clone();
            pert[k] += h;
            anchors.set_data(&pert).unwrap();
            let up = ssl_loss(&anchors, &positives, 0.2, NegativeSet::OtherViews).unwrap().value() as f64;
            pert[k] -= 2.0 * h;
            anchors.set_data(&pert).unwrap();
            let down = ssl_loss(&anchors, &positives, 0.2, NegativeSet::OtherViews).unwrap().value() as f64;
            anchors.set_data(&a_data).unwrap();
            let fd = (up - down) / (2.0 * h as f64);
            let an = analytic[k] as f64;
            let denom = an.abs().max(fd.abs()).max(0.05);
            assert!(((an - fd) / denom).abs() < 1e-2, "elem {k}: {an} vs {fd}");
        }
    }

    #[test]
    fn interaction_head_shapes_and_algebra() {
        let mut rng = StdRng::seed_from_u64(32);
        let head = InteractionHead::new(8, &mut rng);
        assert_eq!(head.out_dim(), 72);
        let zero = Tensor::zeros(&[1, 8]);
        let bias_path = head.mlp.forward(&Tensor::zeros(&[1, 32])).unwrap();
        let out = head.forward(&zero, &zero).unwrap();
        assert_eq!(out.shape(), vec![1, 72]);
        assert_eq!(out.data(), bias_path.data());

        // identical inputs zero the difference slot
        let h: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = Tensor::new(h.clone(), &[1, 8]).unwrap();
        let prod = Tensor::new(h.iter().map(|v| v * v).collect(), &[1, 8]).unwrap();
        let joint = ops::concat(
            &[e.clone(), e.clone(), prod, Tensor::zeros(&[1, 8])],
            1,
        )
        .unwrap();
        let expect = head.mlp.forward(&joint).unwrap();
        let got = head.forward(&e, &e).unwrap();
        assert_eq!(got.data(), expect.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn extract_only_keeps_matching_attributes(
            behaviors in prop::collection::vec((0u32..50, 0u32..5), 0..30),
            trigger_item in 0u32..50,
            trigger_attr in 0u32..5,
            l_max in 1usize..12
        ) {
            let s = extract(&behaviors, (trigger_item, trigger_attr), l_max);
            prop_assert_eq!(s.trigger(), (trigger_item, trigger_attr));
            prop_assert!(s.len() <= 1 + l_max);
            for &(_, attr) in &s.nodes()[1..] {
                prop_assert_eq!(attr, trigger_attr);
            }
        }

        #[test]
        fn ssl_loss_is_nonnegative(
            seed in 0u64..500, b in 2usize..6
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = Tensor::new((0..b * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[b, 4]).unwrap();
            let p = Tensor::new((0..b * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[b, 4]).unwrap();
            for negatives in [NegativeSet::OtherViews, NegativeSet::WithSelf] {
                let loss = ssl_loss(&a, &p, 0.1, negatives).unwrap().value();
                prop_assert!(loss >= 0.0, "{}", loss);
            }
        }
    }
}
