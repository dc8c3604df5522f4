//! Directed co-occurrence graph over user behavior sequences.
//!
//! Built by linking each interaction to its `window` subsequent interactions
//! within the same user's sequence, in three views: item->item (transition),
//! attribute->attribute (complementary), attribute->item (popularity).
//! Counts feed the relevance head after log2 bucketing.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::mlp::Mlp;
use crate::tensor::{ops, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("window must be >= 1")]
    ZeroWindow,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed graph row {row:?}")]
    Malformed {
        path: String,
        line: usize,
        row: String,
    },
}

/// An interaction node: the item and its attribute, as vocab ids.
pub type ItemNode = (u32, u32);

/// Ordered-pair counts for (behavior item, reference item): transition
/// item->item, complementary attr->attr, popularity attr->item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RelationTriple {
    pub r_t: u64,
    pub r_c: u64,
    pub r_p: u64,
}

pub const RELATION_BUCKETS: usize = 32;

/// floor(log2(1+c)) clamped to [0, 31]. Monotone and total, including at
/// u64::MAX where 1+c saturates (the clamp absorbs the difference).
pub fn bucketize(c: u64) -> u32 {
    let b = c.saturating_add(1).ilog2();
    b.min(RELATION_BUCKETS as u32 - 1)
}

#[derive(Debug, Default)]
pub struct CoocGraph {
    window: usize,
    item_item: HashMap<(u32, u32), u64>,
    attr_attr: HashMap<(u32, u32), u64>,
    attr_item: HashMap<(u32, u32), u64>,
}

impl CoocGraph {
    /// Count ordered in-window pairs over time-ordered `(item, attribute)`
    /// sequences: position p links to positions p+1 ..= p+window.
    pub fn build(sequences: &[Vec<ItemNode>], window: usize) -> Result<CoocGraph, GraphError> {
        if window == 0 {
            return Err(GraphError::ZeroWindow);
        }
        let mut g = CoocGraph {
            window,
            ..CoocGraph::default()
        };
        for seq in sequences {
            for p in 0..seq.len() {
                let (src_item, src_attr) = seq[p];
                for q in p + 1..seq.len().min(p + 1 + window) {
                    let (dst_item, dst_attr) = seq[q];
                    *g.item_item.entry((src_item, dst_item)).or_insert(0) += 1;
                    *g.attr_attr.entry((src_attr, dst_attr)).or_insert(0) += 1;
                    *g.attr_item.entry((src_attr, dst_item)).or_insert(0) += 1;
                }
            }
        }
        Ok(g)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Counts for the ordered pair (i, j): how often i led to j within the
    /// window. Unseen pairs are all-zero.
    pub fn relation(&self, i: ItemNode, j: ItemNode) -> RelationTriple {
        RelationTriple {
            r_t: self.item_item.get(&(i.0, j.0)).copied().unwrap_or(0),
            r_c: self.attr_attr.get(&(i.1, j.1)).copied().unwrap_or(0),
            r_p: self.attr_item.get(&(i.1, j.0)).copied().unwrap_or(0),
        }
    }

    /// Add another graph's counts into this one. Building from the union of
    /// two sequence sets equals building each and merging.
    pub fn merge(&mut self, other: &CoocGraph) {
        for (view, other_view) in [
            (&mut self.item_item, &other.item_item),
            (&mut self.attr_attr, &other.attr_attr),
            (&mut self.attr_item, &other.attr_item),
        ] {
            for (&k, &c) in other_view {
                *view.entry(k).or_insert(0) += c;
            }
        }
    }

    /// Total transition count = number of ordered in-window pairs observed.
    pub fn total_transition_mass(&self) -> u64 {
        self.item_item.values().sum()
    }

    pub fn num_edges(&self) -> (usize, usize, usize) {
        (
            self.item_item.len(),
            self.attr_attr.len(),
            self.attr_item.len(),
        )
    }

    /// Persist as three sorted `src<TAB>dst<TAB>count` files plus a meta file
    /// carrying the window. Node ids refer to the vocab the graph was built
    /// over.
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        fs::create_dir_all(dir).map_err(|source| GraphError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (name, view) in [
            ("transition.tsv", &self.item_item),
            ("complementary.tsv", &self.attr_attr),
            ("popularity.tsv", &self.attr_item),
        ] {
            let path = dir.join(name);
            let io_err = |source| GraphError::Io {
                path: path.display().to_string(),
                source,
            };
            let mut rows: Vec<(&(u32, u32), &u64)> = view.iter().collect();
            rows.sort_by_key(|(&k, _)| k);
            let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
            for (&(src, dst), &count) in rows {
                writeln!(w, "{src}\t{dst}\t{count}").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        let meta = dir.join("meta.tsv");
        fs::write(&meta, format!("window\t{}\n", self.window)).map_err(|source| GraphError::Io {
            path: meta.display().to_string(),
            source,
        })
    }

    pub fn load(dir: &Path) -> Result<CoocGraph, GraphError> {
        let meta_path = dir.join("meta.tsv");
        let meta = fs::read_to_string(&meta_path).map_err(|source| GraphError::Io {
            path: meta_path.display().to_string(),
            source,
        })?;
        let window = meta
            .lines()
            .find_map(|l| l.strip_prefix("window\t"))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| GraphError::Malformed {
                path: meta_path.display().to_string(),
                line: 1,
                row: meta.lines().next().unwrap_or("").to_string(),
            })?;
        let mut g = CoocGraph {
            window,
            ..CoocGraph::default()
        };
        for (name, view) in [
            ("transition.tsv", &mut g.item_item),
            ("complementary.tsv", &mut g.attr_attr),
            ("popularity.tsv", &mut g.attr_item),
        ] {
            let path = dir.join(name);
            let io_err = |source| GraphError::Io {
                path: path.display().to_string(),
                source,
            };
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.is_empty() {
                    continue;
                }
                let mut fields = line.split('\t');
                let parsed: Option<((u32, u32), u64)> = (|| {
                    let src = fields.next()?.parse().ok()?;
                    let dst = fields.next()?.parse().ok()?;
                    let count = fields.next()?.parse().ok()?;
                    fields.next().is_none().then_some(((src, dst), count))
                })();
                let ((src, dst), count) = parsed.ok_or_else(|| GraphError::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    row: line.clone(),
                })?;
                view.insert((src, dst), count);
            }
        }
        Ok(g)
    }
}

/// Relevance head: embeds the three bucketized relation counts and fuses
/// them through a sigmoid MLP into a score in (0,1) per pair.
pub struct RelevanceHead {
    rt_embed: Tensor,
    rc_embed: Tensor,
    rp_embed: Tensor,
    mlp: Mlp,
}

impl RelevanceHead {
    /// `embed_dim` per relation view; hidden layer width 72.
    pub fn new(embed_dim: usize, rng: &mut impl Rng) -> RelevanceHead {
        let bound = 1.0 / (embed_dim as f32).sqrt();
        let mut table = || {
            let data: Vec<f32> = (0..RELATION_BUCKETS * embed_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::param(data, &[RELATION_BUCKETS, embed_dim]).expect("nonzero dims")
        };
        let (rt_embed, rc_embed, rp_embed) = (table(), table(), table());
        let mlp = Mlp::new(&[3 * embed_dim, 72, 1], rng);
        RelevanceHead {
            rt_embed,
            rc_embed,
            rp_embed,
            mlp,
        }
    }

    /// Scores for a batch of relation triples, shape [len]. Every bucket id
    /// (including 0 = unseen) selects a trainable embedding row.
    pub fn score(&self, triples: &[RelationTriple]) -> Result<Tensor, TensorError> {
        let ids = |f: fn(&RelationTriple) -> u64| -> Vec<usize> {
            triples.iter().map(|t| bucketize(f(t)) as usize).collect()
        };
        let et = ops::gather_rows(&self.rt_embed, &ids(|t| t.r_t))?;
        let ep = ops::gather_rows(&self.rp_embed, &ids(|t| t.r_p))?;
        let ec = ops::gather_rows(&self.rc_embed, &ids(|t| t.r_c))?;
        let fused = self.mlp.forward(&ops::concat(&[et, ep, ec], 1)?)?;
        ops::reshape(&ops::sigmoid(&fused)?, &[triples.len()])
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.rt_embed"), self.rt_embed.clone()));
        out.push((format!("{prefix}.rc_embed"), self.rc_embed.clone()));
        out.push((format!("{prefix}.rp_embed"), self.rp_embed.clone()));
        self.mlp.params(&format!("{prefix}.mlp"), out);
    }
}
