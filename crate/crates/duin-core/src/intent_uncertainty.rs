//! Intent intensity as a diagonal Gaussian over personalized features, with
//! reparameterized sampling at train time and the mean at inference. The
//! squashed sample gates the trigger-side vs target-side latent intents.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mlp::Mlp;
use crate::tensor::{ops, Tensor, TensorError};

/// Per-sample Gaussian: mean and strictly positive diagonal variance,
/// both [1, d_z].
pub struct IntentDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Infer,
}

/// How the unbounded sample becomes the (z, 1-z) mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateSquash {
    #[default]
    Sigmoid,
    Clamp,
}

/// Two independent networks produce mu and (pre-softplus) sigma. Hidden
/// widths 144 and 72.
pub struct IntentUncertainty {
    mu_head: Mlp,
    sigma_head: Mlp,
}

impl IntentUncertainty {
    pub fn new(in_dim: usize, d_z: usize, rng: &mut impl Rng) -> IntentUncertainty {
        IntentUncertainty {
            mu_head: Mlp::new(&[in_dim, 144, 72, d_z], rng),
            sigma_head: Mlp::new(&[in_dim, 144, 72, d_z], rng),
        }
    }

    pub fn d_z(&self) -> usize {
        self.mu_head.out_dim()
    }

    pub fn intensity(&self, x_u: &Tensor) -> Result<IntentDistribution, TensorError> {
        Ok(IntentDistribution {
            mu: self.mu_head.forward(x_u)?,
            sigma: ops::softplus(&self.sigma_head.forward(x_u)?)?,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mu_head.params(&format!("{prefix}.mu"), out);
        self.sigma_head.params(&format!("{prefix}.sigma"), out);
    }
}

/// Reparameterized draw: mu + sqrt(sigma) * eps with eps ~ N(0, I), keeping
/// gradients flowing into both heads. Infer mode returns mu and never
/// touches the rng.
pub fn sample_intensity(
    d: &IntentDistribution,
    rng: &mut impl Rng,
    mode: SampleMode,
) -> Result<Tensor, TensorError> {
    match mode {
        SampleMode::Infer => Ok(d.mu.clone()),
        SampleMode::Train => {
            let eps: Vec<f32> = (0..d.mu.numel())
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let eps = Tensor::new(eps, &d.mu.shape())?;
            sample_with_noise(d, &eps)
        }
    }
}

/// Deterministic core of the train-mode draw, with the noise supplied.
pub fn sample_with_noise(d: &IntentDistribution, eps: &Tensor) -> Result<Tensor, TensorError> {
    ops::add(&d.mu, &ops::mul(&ops::sqrt(&d.sigma)?, eps)?)
}

/// H = (z * h_tr ; (1-z) * h_ta) with z the squashed sample, shape [1, 2d].
pub fn gate(
    z_raw: &Tensor,
    h_tr: &Tensor,
    h_ta: &Tensor,
    squash: GateSquash,
) -> Result<Tensor, TensorError> {
    if z_raw.shape() != h_tr.shape() || h_tr.shape() != h_ta.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gate",
            lhs: z_raw.shape(),
            rhs: h_tr.shape(),
        });
    }
    let z = match squash {
        GateSquash::Sigmoid => ops::sigmoid(z_raw)?,
        GateSquash::Clamp => ops::clamp01(z_raw)?,
    };
    let anti = ops::sub(&Tensor::full(&z.shape(), 1.0), &z)?;
    ops::concat(&[ops::mul(&z, h_tr)?, ops::mul(&anti, h_ta)?], 1)
}
