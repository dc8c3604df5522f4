//! Training loop with deterministic, purpose-separated randomness streams:
//! one for weight init, one for batch order, one for sequence augmentation,
//! one for gate noise. Any stream being unused (ablations, alpha = 0) does
//! not shift the others, so variant runs stay comparable draw for draw.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::data::Vocabs;
use crate::graph::CoocGraph;
use crate::metrics::{auc, MetricsError};
use crate::model::{training_loss, DuinModel, Phase, Sample, StepDraws};
use crate::optim::{zero_grads, Adam};
use crate::tensor::{Tape, TensorError};

const SHUFFLE_TAG: u64 = 0x9e37_79b9_7f4a_7c15;
const AUG_TAG: u64 = 0x5dee_ce66_dead_beef;
const NOISE_TAG: u64 = 0xb529_7a4d_3f84_d5b5;

pub const CHECKPOINT_SUBDIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
const SCORE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch} (step {step})")]
    NonFinite { epoch: usize, batch: usize, step: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("trainer io: {0}")]
    Io(#[from] std::io::Error),
}

pub struct TrainOutcome {
    /// Final-step weights; the best-validation weights live in the
    /// checkpoint directory.
    pub model: DuinModel,
    pub adam: Adam,
    pub best_val_auc: Option<f64>,
    pub steps: u64,
    pub final_loss: f64,
    /// Cross-entropy component of the last step, without the contrastive term.
    pub final_ctr_loss: f64,
}

/// Scores samples in inference mode. Chunking is a memory bound only; row
/// outputs are independent of batch composition.
pub fn score(
    model: &DuinModel,
    graph: &CoocGraph,
    samples: &[Sample],
) -> Result<Vec<f64>, TensorError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_CHUNK) {
        let fwd = model.forward_batch(graph, chunk, &StepDraws::none(), Phase::Infer)?;
        out.extend(fwd.probs.iter().map(|&p| p as f64));
    }
    Ok(out)
}

pub fn validation_auc(
    model: &DuinModel,
    graph: &CoocGraph,
    samples: &[Sample],
) -> Result<f64, TrainError> {
    let scores = score(model, graph, samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1.0).collect();
    Ok(auc(&scores, &labels)?)
}

/// Trains a fresh model. With `out_dir` set, writes `metrics.csv` and keeps
/// the best-validation checkpoint under `checkpoint/`; without a validation
/// set the final weights are checkpointed instead.
pub fn train(
    cfg: &TrainConfig,
    vocabs: &Vocabs,
    graph: &CoocGraph,
    train_samples: &[Sample],
    val_samples: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::Invalid("no training samples".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_TAG);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUG_TAG);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_TAG);

    let model = DuinModel::new(cfg, vocabs.sizes(), &mut init_rng)?;
    let mut adam = Adam::new(cfg.lr);
    let params = model.params();

    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(METRICS_FILE))?);
            writeln!(w, "epoch,step,l_ctr,l_ssl,l_final,val_auc")?;
            Some(w)
        }
        None => None,
    };

    let mut best_val: Option<f64> = None;
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    let mut final_ctr = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.ssl_active() && chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_samples[i].clone()).collect();
            let tape = Tape::new();
            let draws = StepDraws::draw(cfg, &batch, &mut aug_rng, &mut noise_rng);
            let loss = training_loss(&model, graph, &batch, &draws)?;
            let l_final = loss.l_final.value() as f64;
            if !l_final.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    step,
                });
            }
            tape.backward(&loss.l_final)?;
            adam.step(&params);
            zero_grads(&params);
            step += 1;
            final_loss = l_final;
            final_ctr = loss.l_ctr.value() as f64;
            if let Some(w) = metrics.as_mut() {
                let l_ssl = loss
                    .l_ssl
                    .as_ref()
                    .map(|t| format!("{:.6}", t.value()))
                    .unwrap_or_default();
                writeln!(
                    w,
                    "{epoch},{step},{:.6},{l_ssl},{l_final:.6},",
                    loss.l_ctr.value()
                )?;
            }
        }

        if val_samples.is_empty() {
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join(CHECKPOINT_SUBDIR), cfg, &model, &adam, vocabs, graph)?;
            }
            continue;
        }
        let val = validation_auc(&model, graph, val_samples)?;
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{epoch},{step},,,,{val:.6}")?;
        }
        if best_val.is_none_or(|b| val > b) {
            best_val = Some(val);
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join(CHECKPOINT_SUBDIR), cfg, &model, &adam, vocabs, graph)?;
            }
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(TrainOutcome {
        model,
        adam,
        best_val_auc: best_val,
        steps: step,
        final_loss,
        final_ctr_loss: final_ctr,
    })
}
