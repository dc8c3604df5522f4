//! Self-contained checkpoint directories: a text manifest, one little-endian
//! f32 blob holding parameters and optimizer moments, the token tables, and
//! the co-occurrence graph. A checkpoint alone is enough to score new data.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, TrainConfig};
use crate::data::{DataError, Vocabs};
use crate::graph::{CoocGraph, GraphError};
use crate::model::DuinModel;
use crate::optim::{Adam, MomentSlot};
use crate::tensor::TensorError;

const MAGIC: &str = "duin-checkpoint v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const GRAPH_DIR: &str = "graph";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checkpoint does not match this build: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything needed to resume training or evaluate: the exact config,
/// a model with restored weights, optimizer state, vocabularies, graph.
pub struct LoadedCheckpoint {
    pub cfg: TrainConfig,
    pub model: DuinModel,
    pub adam: Adam,
    pub vocabs: Vocabs,
    pub graph: CoocGraph,
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>, CheckpointError> {
    s.split('x')
        .map(|p| {
            p.parse()
                .map_err(|_| CheckpointError::Manifest(format!("bad shape `{s}`")))
        })
        .collect()
}

pub fn save_checkpoint(
    dir: &Path,
    cfg: &TrainConfig,
    model: &DuinModel,
    adam: &Adam,
    vocabs: &Vocabs,
    graph: &CoocGraph,
) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let params = model.params();
    let (adam_t, slots) = adam.export_state();

    let mut blob: Vec<f32> = Vec::new();
    let mut manifest = String::new();
    writeln!(manifest, "{MAGIC}").unwrap();
    writeln!(manifest, "seed {}", cfg.seed).unwrap();
    writeln!(manifest, "config_hash {:016x}", cfg.config_hash()).unwrap();
    writeln!(manifest, "adam_t {adam_t}").unwrap();
    let config_lines = cfg.to_lines();
    writeln!(manifest, "config {}", config_lines.lines().count()).unwrap();
    manifest.push_str(&config_lines);

    writeln!(manifest, "tensors {}", params.len()).unwrap();
    for (name, p) in &params {
        let data = p.data();
        writeln!(
            manifest,
            "{name} {} {} {}",
            shape_str(&p.shape()),
            blob.len(),
            data.len()
        )
        .unwrap();
        blob.extend_from_slice(&data);
    }

    writeln!(manifest, "moments {}", params.len()).unwrap();
    for (idx, (name, _)) in params.iter().enumerate() {
        match slots.get(idx).and_then(Option::as_ref) {
            Some(slot) => {
                writeln!(manifest, "{name} {} {}", blob.len(), slot.m.len()).unwrap();
                blob.extend_from_slice(&slot.m);
                blob.extend_from_slice(&slot.v);
            }
            None => writeln!(manifest, "{name} - 0").unwrap(),
        }
    }

    let bytes: Vec<u8> = blob.iter().flat_map(|f| f.to_le_bytes()).collect();
    std::fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    vocabs.save(dir)?;
    graph.save(&dir.join(GRAPH_DIR))?;
    Ok(())
}

struct ManifestCursor<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> ManifestCursor<'a> {
    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        self.lineno += 1;
        self.lines
            .next()
            .ok_or_else(|| CheckpointError::Manifest("unexpected end of manifest".into()))
    }

    fn expect_kv(&mut self, key: &str) -> Result<&'a str, CheckpointError> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| {
                CheckpointError::Manifest(format!("expected `{key} ...`, found `{line}`"))
            })
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut cur = ManifestCursor {
        lines: manifest.lines(),
        lineno: 0,
    };
    if cur.next()? != MAGIC {
        return Err(CheckpointError::Manifest(format!(
            "missing `{MAGIC}` header"
        )));
    }
    let bad = |what: &str, lineno: usize| {
        CheckpointError::Manifest(format!("line {lineno}: bad {what}"))
    };
    let _seed: u64 = cur
        .expect_kv("seed")?
        .parse()
        .map_err(|_| bad("seed", cur.lineno))?;
    let stored_hash = u64::from_str_radix(cur.expect_kv("config_hash")?, 16)
        .map_err(|_| bad("config_hash", cur.lineno))?;
    let adam_t: u64 = cur
        .expect_kv("adam_t")?
        .parse()
        .map_err(|_| bad("adam_t", cur.lineno))?;
    let n_config: usize = cur
        .expect_kv("config")?
        .parse()
        .map_err(|_| bad("config count", cur.lineno))?;
    let mut config_text = String::new();
    for _ in 0..n_config {
        config_text.push_str(cur.next()?);
        config_text.push('\n');
    }
    let cfg = TrainConfig::from_lines(&config_text)?;
    if cfg.config_hash() != stored_hash {
        return Err(CheckpointError::Mismatch(format!(
            "config hash {:016x} != stored {:016x}",
            cfg.config_hash(),
            stored_hash
        )));
    }

    let bytes = std::fs::read(dir.join(WEIGHTS_FILE))?;
    if bytes.len() % 4 != 0 {
        return Err(CheckpointError::Manifest("weights not a multiple of 4 bytes".into()));
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let read_range = |offset: usize, len: usize| -> Result<&[f32], CheckpointError> {
        blob.get(offset..offset + len)
            .ok_or_else(|| CheckpointError::Manifest("blob range out of bounds".into()))
    };

    let n_tensors: usize = cur
        .expect_kv("tensors")?
        .parse()
        .map_err(|_| bad("tensor count", cur.lineno))?;
    let mut stored: Vec<(String, Vec<usize>, usize, usize)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let line = cur.next()?;
        let mut f = line.split(' ');
        let parse = |s: Option<&str>, what| {
            s.ok_or_else(|| bad(what, cur.lineno))
                .map(|v| v.to_string())
        };
        let name = parse(f.next(), "tensor name")?;
        let shape = parse_shape(&parse(f.next(), "tensor shape")?)?;
        let offset: usize = parse(f.next(), "tensor offset")?
            .parse()
            .map_err(|_| bad("tensor offset", cur.lineno))?;
        let len: usize = parse(f.next(), "tensor length")?
            .parse()
            .map_err(|_| bad("tensor length", cur.lineno))?;
        stored.push((name, shape, offset, len));
    }

    let vocabs = Vocabs::load(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = DuinModel::new(&cfg, vocabs.sizes(), &mut rng)?;
    let params = model.params();
    if params.len() != stored.len() {
        return Err(CheckpointError::Mismatch(format!(
            "parameter count {} != stored {}",
            params.len(),
            stored.len()
        )));
    }
    for ((name, p), (s_name, s_shape, offset, len)) in params.iter().zip(&stored) {
        if name != s_name || &p.shape() != s_shape {
            return Err(CheckpointError::Mismatch(format!(
                "parameter `{name}` {:?} vs stored `{s_name}` {s_shape:?}",
                p.shape()
            )));
        }
        p.set_data(read_range(*offset, *len)?)?;
    }

    let n_moments: usize = cur
        .expect_kv("moments")?
        .parse()
        .map_err(|_| bad("moment count", cur.lineno))?;
    if n_moments != params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "moment count {n_moments} != parameter count {}",
            params.len()
        )));
    }
    let mut slots: Vec<Option<MomentSlot>> = Vec::with_capacity(n_moments);
    for (name, _) in &params {
        let line = cur.next()?;
        let mut f = line.split(' ');
        let s_name = f.next().unwrap_or_default();
        if s_name != name {
            return Err(CheckpointError::Mismatch(format!(
                "moment `{s_name}` out of order, expected `{name}`"
            )));
        }
        let offset_str = f.next().ok_or_else(|| bad("moment offset", cur.lineno))?;
        if offset_str == "-" {
            slots.push(None);
            continue;
        }
        let offset: usize = offset_str.parse().map_err(|_| bad("moment offset", cur.lineno))?;
        let len: usize = f
            .next()
            .ok_or_else(|| bad("moment length", cur.lineno))?
            .parse()
            .map_err(|_| bad("moment length", cur.lineno))?;
        slots.push(Some(MomentSlot {
            m: read_range(offset, len)?.to_vec(),
            v: read_range(offset + len, len)?.to_vec(),
        }));
    }
    let mut adam = Adam::new(cfg.lr);
    adam.restore_state(adam_t, slots);

    let graph = CoocGraph::load(&dir.join(GRAPH_DIR))?;
    Ok(LoadedCheckpoint {
        cfg,
        model,
        adam,
        vocabs,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawSample;
    use crate::graph::ItemNode;
    use crate::model::{Phase, Sample, StepDraws};
    use crate::optim::zero_grads;
    use rand::Rng;

    fn fixture() -> (TrainConfig, Vocabs, CoocGraph, Vec<Sample>) {
        let mut cfg = TrainConfig::default();
        cfg.d = 4;
        cfg.n_heads = 2;
        cfg.t_max = 6;
        cfg.l_max = 4;
        cfg.batch_size = 4;
        let raw: Vec<RawSample> = (0..6)
            .map(|i| RawSample {
                user: format!("u{}", i % 3),
                ts: 1_000 + i,
                hour: (i % 24) as u32,
                position: (i % 4) as u32,
                behaviors: vec![
                    (format!("i{}", i % 5), format!("a{}", i % 2)),
                    (format!("i{}", (i + 2) % 5), format!("a{}", (i + 1) % 2)),
                ],
                trigger: (format!("i{}", (i + 1) % 5), format!("a{}", i % 2)),
                trigger_ts: 990 + i,
                target: (format!("i{}", (i + 3) % 5), format!("a{}", (i + 1) % 2)),
                label: (i % 2) as u8,
            })
            .collect();
        let vocabs = Vocabs::build(&raw);
        let samples = crate::data::intern_samples(&vocabs, &raw);
        let seqs: Vec<Vec<ItemNode>> = vec![
            samples.iter().map(|s| s.trigger).collect(),
            samples.iter().map(|s| s.target).collect(),
        ];
        let graph = CoocGraph::build(&seqs, 2).unwrap();
        (cfg, vocabs, graph, samples)
    }

    fn train_steps(
        cfg: &TrainConfig,
        model: &DuinModel,
        adam: &mut Adam,
        graph: &CoocGraph,
        samples: &[Sample],
        steps: usize,
        seed: u64,
    ) {
        let mut rng_aug = ChaCha8Rng::seed_from_u64(seed);
        let mut rng_noise = ChaCha8Rng::seed_from_u64(seed + 1);
        let params = model.params();
        for _ in 0..steps {
            let tape = crate::tensor::Tape::new();
            let draws = StepDraws::draw(cfg, samples, &mut rng_aug, &mut rng_noise);
            let loss = crate::model::training_loss(model, graph, samples, &draws).unwrap();
            tape.backward(&loss.l_final).unwrap();
            adam.step(&params);
            zero_grads(&params);
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let (cfg, vocabs, graph, samples) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DuinModel::new(&cfg, vocabs.sizes(), &mut rng).unwrap();
        let mut adam = Adam::new(cfg.lr);
        train_steps(&cfg, &model, &mut adam, &graph, &samples, 3, 99);

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model, &adam, &vocabs, &graph).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();

        let before = model.params();
        let after = loaded.model.params();
        assert_eq!(before.len(), after.len());
        for ((name_a, a), (name_b, b)) in before.iter().zip(&after) {
            assert_eq!(name_a, name_b);
            let (da, db) = (a.data(), b.data());
            assert_eq!(
                da.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                db.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                "parameter {name_a} not bit-identical"
            );
        }
        let (t_a, slots_a) = adam.export_state();
        let (t_b, slots_b) = loaded.adam.export_state();
        assert_eq!(t_a, t_b);
        assert_eq!(slots_a, slots_b);

        let probs_a = model
            .forward_batch(&graph, &samples, &StepDraws::none(), Phase::Infer)
            .unwrap()
            .probs;
        let probs_b = loaded
            .model
            .forward_batch(&loaded.graph, &samples, &StepDraws::none(), Phase::Infer)
            .unwrap()
            .probs;
        assert_eq!(
            probs_a.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            probs_b.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn resumed_training_matches_uninterrupted_training_bitwise() {
        let (cfg, vocabs, graph, samples) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let straight = DuinModel::new(&cfg, vocabs.sizes(), &mut rng).unwrap();
        let mut adam_straight = Adam::new(cfg.lr);
        train_steps(&cfg, &straight, &mut adam_straight, &graph, &samples, 4, 5);

        // Same schedule, but pause after two steps and resume from disk.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let paused = DuinModel::new(&cfg, vocabs.sizes(), &mut rng).unwrap();
        let mut adam_paused = Adam::new(cfg.lr);
        let mut rng_aug = ChaCha8Rng::seed_from_u64(5);
        let mut rng_noise = ChaCha8Rng::seed_from_u64(6);
        let params = paused.params();
        for _ in 0..2 {
            let tape = crate::tensor::Tape::new();
            let draws = StepDraws::draw(&cfg, &samples, &mut rng_aug, &mut rng_noise);
            let loss = crate::model::training_loss(&paused, &graph, &samples, &draws).unwrap();
            tape.backward(&loss.l_final).unwrap();
            adam_paused.step(&params);
            zero_grads(&params);
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &paused, &adam_paused, &vocabs, &graph).unwrap();
        let mut resumed = load_checkpoint(dir.path()).unwrap();
        let params = resumed.model.params();
        for _ in 0..2 {
            let tape = crate::tensor::Tape::new();
            let draws = StepDraws::draw(&cfg, &samples, &mut rng_aug, &mut rng_noise);
            let loss =
                crate::model::training_loss(&resumed.model, &resumed.graph, &samples, &draws)
                    .unwrap();
            tape.backward(&loss.l_final).unwrap();
            resumed.adam.step(&params);
            zero_grads(&params);
        }

        for ((name, a), (_, b)) in straight.params().iter().zip(&resumed.model.params()) {
            assert_eq!(
                a.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                "divergence in {name} after resume"
            );
        }
    }

    #[test]
    fn untouched_moments_survive_as_absent() {
        let (cfg, vocabs, graph, _) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DuinModel::new(&cfg, vocabs.sizes(), &mut rng).unwrap();
        let adam = Adam::new(cfg.lr);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model, &adam, &vocabs, &graph).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        let (t, slots) = loaded.adam.export_state();
        assert_eq!(t, 0);
        assert!(slots.iter().all(Option::is_none));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let (cfg, vocabs, graph, _) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DuinModel::new(&cfg, vocabs.sizes(), &mut rng).unwrap();
        let adam = Adam::new(cfg.lr);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model, &adam, &vocabs, &graph).unwrap();

        let manifest_path = dir.path().join(MANIFEST_FILE);
        let tampered = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("config_hash", "config_hash f");
        std::fs::write(&manifest_path, tampered).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn weights_round_trip_odd_values() {
        // Subnormals, negative zero, and extremes survive the byte cycle.
        let (cfg, vocabs, graph, _) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DuinModel::new(&cfg, vocabs.sizes(), &mut rng).unwrap();
        let params = model.params();
        let (_, first) = &params[0];
        let mut data = first.data();
        let odd = [-0.0f32, 1.0e-41, f32::MIN_POSITIVE, 3.4e38, -7.0];
        let take = odd.len().min(data.len());
        data[..take].copy_from_slice(&odd[..take]);
        first.set_data(&data).unwrap();
        let mut noise = ChaCha8Rng::seed_from_u64(3);
        for (_, p) in params.iter().skip(1) {
            let d: Vec<f32> = p.data().iter().map(|x| x + noise.random::<f32>() * 1e-3).collect();
            p.set_data(&d).unwrap();
        }

        let adam = Adam::new(cfg.lr);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model, &adam, &vocabs, &graph).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        for ((name, a), (_, b)) in model.params().iter().zip(&loaded.model.params()) {
            assert_eq!(
                a.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                "{name}"
            );
        }
    }
}
