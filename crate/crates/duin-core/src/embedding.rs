//! Embedding tables and string-to-id vocabularies.
//!
//! Id 0 is the padding slot and id 1 the unknown-token slot in every
//! vocabulary. The padding row of a table is zero-initialized and excluded
//! from gradient scatter, so it stays exactly zero through training.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{tape_active, tape_record, Tensor, TensorError};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed vocab row {row:?}")]
    Malformed {
        path: String,
        line: usize,
        row: String,
    },
    #[error("{path}: ids are not contiguous from 0 (saw {id} at position {pos})")]
    NonContiguous { path: String, id: u32, pos: usize },
}

/// Bidirectional token <-> id map. Ids are dense, assigned in insertion
/// order after the two reserved slots.
#[derive(Debug, Clone)]
pub struct FeatureVocab {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl FeatureVocab {
    pub fn new() -> FeatureVocab {
        let mut v = FeatureVocab {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        v.intern(PAD_TOKEN);
        v.intern(UNK_TOKEN);
        v
    }

    /// Insert a token if absent; returns its id either way.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Lookup without insertion; unseen tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let io_err = |source| VocabError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        for (id, token) in self.tokens.iter().enumerate() {
            writeln!(w, "{token}\t{id}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<FeatureVocab, VocabError> {
        let io_err = |source| VocabError::Io {
            path: path.display().to_string(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut v = FeatureVocab {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.is_empty() {
                continue;
            }
            let (token, id_str) = line.rsplit_once('\t').ok_or_else(|| VocabError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                row: line.clone(),
            })?;
            let id: u32 = id_str.parse().map_err(|_| VocabError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                row: line.clone(),
            })?;
            if id as usize != v.tokens.len() {
                return Err(VocabError::NonContiguous {
                    path: path.display().to_string(),
                    id,
                    pos: v.tokens.len(),
                });
            }
            v.index.insert(token.to_string(), id);
            v.tokens.push(token.to_string());
        }
        Ok(v)
    }
}

impl Default for FeatureVocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Trainable embedding table of shape [vocab, dim].
pub struct EmbeddingTable {
    weights: Tensor,
}

impl EmbeddingTable {
    /// Rows drawn from U(-1/sqrt(dim), 1/sqrt(dim)); the padding row stays
    /// zero.
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut data = vec![0.0f32; vocab * dim];
        for row in 1..vocab {
            for v in &mut data[row * dim..(row + 1) * dim] {
                *v = rng.random_range(-bound..bound);
            }
        }
        EmbeddingTable {
            weights: Tensor::param(data, &[vocab, dim]).expect("vocab and dim are nonzero"),
        }
    }

    pub fn from_weights(weights: Tensor) -> Result<EmbeddingTable, TensorError> {
        weights.dims2("embedding_from_weights")?;
        Ok(EmbeddingTable { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Embed a list of ids as [len, dim]. Backward scatter-adds into the
    /// selected rows, skipping the padding id so its row never moves.
    pub fn lookup(&self, ids: &[u32]) -> Result<Tensor, TensorError> {
        let (v, d) = self.weights.dims2("embedding_lookup")?;
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id as usize,
                    limit: v,
                });
            }
        }
        let data = {
            let wi = self.weights.inner.borrow();
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                let row = id as usize;
                out.extend_from_slice(&wi.data[row * d..(row + 1) * d]);
            }
            out
        };
        let rg = self.weights.requires_grad();
        let out = Tensor::from_op(data, vec![ids.len(), d], rg);
        if rg && tape_active() {
            let (w2, o2) = (self.weights.clone(), out.clone());
            let ids2 = ids.to_vec();
            tape_record(move || {
                let Some(g) = o2.take_grad_for_backprop() else {
                    return;
                };
                let mut contrib = vec![0.0f32; w2.numel()];
                for (r, &id) in ids2.iter().enumerate() {
                    if id == PAD_ID {
                        continue;
                    }
                    let row = id as usize;
                    for j in 0..d {
                        contrib[row * d + j] += g[r * d + j];
                    }
                }
                w2.accumulate_grad(&contrib);
            });
        }
        Ok(out)
    }

    /// Embed a behavior sequence at fixed length: keep the newest `pad_to`
    /// elements (input is ordered oldest to newest), right-pad with the
    /// padding id. Returns the embedded block and the validity mask.
    pub fn embed_sequence(
        &self,
        ids: &[u32],
        pad_to: usize,
    ) -> Result<(Tensor, Vec<bool>), TensorError> {
        let start = ids.len().saturating_sub(pad_to);
        let kept = &ids[start..];
        let mut padded = vec![PAD_ID; pad_to];
        padded[..kept.len()].copy_from_slice(kept);
        let mask: Vec<bool> = (0..pad_to).map(|i| i < kept.len()).collect();
        Ok((self.lookup(&padded)?, mask))
    }
}
