//! Data pipeline: behavior-log ingestion, trigger derivation, sample
//! assembly with leakage-safe history, chronological splitting, and the
//! text formats tying the CLI stages together.
//!
//! Event logs are TSV with a fixed header
//! `user_id  item_id  attribute_id  timestamp  event_type`; timestamps are
//! unix seconds. Assembled samples are TSV as well (see [`write_samples`]),
//! so every stage can be inspected and diffed with ordinary tools.

pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::{NegativeMode, PositiveEvent, TrainConfig};
use crate::embedding::{FeatureVocab, VocabError};
use crate::graph::ItemNode;
use crate::model::{self, Sample};

pub const EVENTS_HEADER: &str = "user_id\titem_id\tattribute_id\ttimestamp\tevent_type";
pub const SAMPLES_HEADER: &str = "user_id\ttimestamp\thour\tposition\tbehaviors\t\
trigger_item\ttrigger_attr\ttrigger_ts\ttarget_item\ttarget_attr\tlabel";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("data io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header in {path}: expected `{expected}`, found `{found}`")]
    Header {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("too few samples to split: {n} (need at least 10)")]
    TooFewSamples { n: usize },
    #[error("token `{token}` contains a reserved character (tab, `:`, `|`) or is empty")]
    BadToken { token: String },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("vocab: {0}")]
    Vocab(#[from] VocabError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventType {
    Impression,
    Click,
    Purchase,
}

impl EventType {
    pub fn parse(s: &str) -> Option<EventType> {
        match s {
            "impression" => Some(EventType::Impression),
            "click" => Some(EventType::Click),
            "purchase" => Some(EventType::Purchase),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::Impression => "impression",
            EventType::Click => "click",
            EventType::Purchase => "purchase",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEvent {
    pub user: String,
    pub item: String,
    pub attr: String,
    pub ts: i64,
    pub event: EventType,
}

/// Events parsed from a log, with the count of malformed rows skipped.
#[derive(Debug)]
pub struct ReadReport {
    pub events: Vec<BehaviorEvent>,
    pub skipped: usize,
}

/// Reads an event log, skipping and counting malformed rows rather than
/// failing on them. A wrong header is a hard error: the file is not an
/// event log at all.
pub fn read_events(path: &Path) -> Result<ReadReport, DataError> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != EVENTS_HEADER {
        return Err(DataError::Header {
            path: display,
            expected: EVENTS_HEADER,
            found: header.to_string(),
        });
    }
    let mut events = Vec::new();
    let mut skipped = 0usize;
    for raw in lines {
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let parsed = (|| {
            let [user, item, attr, ts, event] = fields.as_slice() else {
                return None;
            };
            if user.is_empty() || item.is_empty() || attr.is_empty() {
                return None;
            }
            let ts: i64 = ts.parse().ok().filter(|&t| t > 0)?;
            let event = EventType::parse(event)?;
            Some(BehaviorEvent {
                user: user.to_string(),
                item: item.to_string(),
                attr: attr.to_string(),
                ts,
                event,
            })
        })();
        match parsed {
            Some(e) => events.push(e),
            None => skipped += 1,
        }
    }
    Ok(ReadReport { events, skipped })
}

pub fn write_events(path: &Path, events: &[BehaviorEvent]) -> Result<(), DataError> {
    let mut out = String::with_capacity(events.len() * 32);
    out.push_str(EVENTS_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.user,
            e.item,
            e.attr,
            e.ts,
            e.event.as_str()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One assembled sample at the token level, as stored in the samples TSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub user: String,
    /// Sample (exposure) timestamp.
    pub ts: i64,
    /// Hour of day, 0..24.
    pub hour: u32,
    /// Index within the same-trigger recommendation block.
    pub position: u32,
    /// (item, attr) pairs, oldest to newest, all strictly before `ts`.
    pub behaviors: Vec<(String, String)>,
    pub trigger: (String, String),
    pub trigger_ts: i64,
    pub target: (String, String),
    pub label: u8,
}

impl RawSample {
    /// Whether the target shares the trigger's attribute (segment key).
    pub fn same_attr(&self) -> bool {
        self.trigger.1 == self.target.1
    }
}

#[derive(Debug)]
pub struct AssembleOutput {
    pub samples: Vec<RawSample>,
    /// Candidates dropped because no click fell inside the trigger window.
    pub dropped_no_trigger: usize,
}

fn hour_of_day(ts: i64) -> u32 {
    (((ts % 86_400) + 86_400) % 86_400 / 3_600) as u32
}

/// Index of the trigger for `events[candidate]`: the latest click at or
/// before the candidate's timestamp, strictly inside the lookback window,
/// and at an earlier file position. Events must be time-ordered.
pub fn derive_trigger<B: std::borrow::Borrow<BehaviorEvent>>(
    events: &[B],
    candidate: usize,
    window_secs: i64,
) -> Option<usize> {
    let t = events[candidate].borrow().ts;
    for j in (0..candidate).rev() {
        let e = events[j].borrow();
        if e.ts <= t - window_secs {
            break;
        }
        if e.ts <= t && e.event == EventType::Click {
            return Some(j);
        }
    }
    None
}

fn is_positive(event: EventType, rule: PositiveEvent) -> bool {
    match rule {
        PositiveEvent::Click => matches!(event, EventType::Click | EventType::Purchase),
        PositiveEvent::Purchase => event == EventType::Purchase,
    }
}

fn is_engagement(event: EventType) -> bool {
    matches!(event, EventType::Click | EventType::Purchase)
}

/// Builds samples per user from time-ordered events.
///
/// Positives are click/purchase events per `cfg.positive_event` on a
/// recommended item, i.e. ones whose (user, item, time) also carries an
/// impression; organic engagement stays behavior history only. Negatives
/// are impressions without such a click, or random items per positive in
/// random-negative mode (where logs may lack impressions entirely, so the
/// impression gate is waived). Every candidate needs a trigger click inside
/// the window or it is dropped. The position feature is the exposure rank
/// within the trigger's block; a click inherits its impression's rank.
/// Behavior history is engagement strictly before the sample time,
/// excluding the trigger occurrence itself, capped to the newest `t_max`
/// events.
pub fn assemble_samples(
    events: &[BehaviorEvent],
    cfg: &TrainConfig,
) -> Result<AssembleOutput, DataError> {
    for e in events {
        for token in [&e.user, &e.item, &e.attr] {
            check_token(token)?;
        }
    }
    let window_secs = (cfg.trigger_window_hours * 3600.0).round() as i64;

    // Per-user index lists in file order; sort stably by timestamp so ties
    // keep their log order. BTreeMap fixes the user iteration order.
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        by_user.entry(&e.user).or_default().push(i);
    }

    let clicked: HashSet<(&str, &str, i64)> = events
        .iter()
        .filter(|e| is_engagement(e.event))
        .map(|e| (e.user.as_str(), e.item.as_str(), e.ts))
        .collect();
    let impressed: HashSet<(&str, &str, i64)> = events
        .iter()
        .filter(|e| e.event == EventType::Impression)
        .map(|e| (e.user.as_str(), e.item.as_str(), e.ts))
        .collect();

    // Item universe for random negatives: first-seen attribute wins.
    let mut item_attr: BTreeMap<&str, &str> = BTreeMap::new();
    for e in events {
        item_attr.entry(&e.item).or_insert(&e.attr);
    }
    let universe: Vec<(&str, &str)> = item_attr.iter().map(|(i, a)| (*i, *a)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for (_, order) in by_user {
        let mut order = order;
        order.sort_by_key(|&i| events[i].ts);
        let user_events: Vec<&BehaviorEvent> = order.iter().map(|&i| &events[i]).collect();

        let mut block_trigger: Option<usize> = None;
        let mut block_position = 0u32;
        let mut exposure_rank: HashMap<(&str, i64), u32> = HashMap::new();
        for k in 0..user_events.len() {
            let e = user_events[k];
            let candidate = match (cfg.negative_mode, e.event) {
                (NegativeMode::Impressions, ev) if is_positive(ev, cfg.positive_event) => {
                    if impressed.contains(&(e.user.as_str(), e.item.as_str(), e.ts)) {
                        Some(1u8)
                    } else {
                        None
                    }
                }
                (NegativeMode::Random, ev) if is_positive(ev, cfg.positive_event) => Some(1),
                (NegativeMode::Impressions, EventType::Impression) => {
                    if clicked.contains(&(e.user.as_str(), e.item.as_str(), e.ts)) {
                        None
                    } else {
                        Some(0)
                    }
                }
                _ => None,
            };
            let is_exposure = e.event == EventType::Impression;
            if candidate.is_none() && !is_exposure {
                continue;
            }
            let Some(tr_idx) = derive_trigger(&user_events, k, window_secs) else {
                if candidate.is_some() {
                    dropped += 1;
                }
                continue;
            };
            if block_trigger != Some(tr_idx) {
                block_trigger = Some(tr_idx);
                block_position = 0;
                exposure_rank.clear();
            }
            // Every impression leases the next rank, clicked or not; the
            // click on it reuses that rank so file order of the click row
            // cannot encode the label.
            let position = if is_exposure {
                let rank = block_position;
                block_position = block_position.saturating_add(1);
                exposure_rank.insert((e.item.as_str(), e.ts), rank);
                rank
            } else {
                match exposure_rank.get(&(e.item.as_str(), e.ts)) {
                    Some(&rank) => rank,
                    None => {
                        let rank = block_position;
                        block_position = block_position.saturating_add(1);
                        rank
                    }
                }
            };
            let Some(label) = candidate else { continue };
            let trigger = &user_events[tr_idx];

            let mut behaviors: Vec<(String, String)> = Vec::new();
            for (j, b) in user_events.iter().enumerate() {
                if b.ts >= e.ts {
                    break;
                }
                if j != tr_idx && is_engagement(b.event) {
                    behaviors.push((b.item.clone(), b.attr.clone()));
                }
            }
            let keep_from = behaviors.len().saturating_sub(cfg.t_max);
            let behaviors = behaviors.split_off(keep_from);

            let sample = RawSample {
                user: e.user.clone(),
                ts: e.ts,
                hour: hour_of_day(e.ts),
                position,
                behaviors,
                trigger: (trigger.item.clone(), trigger.attr.clone()),
                trigger_ts: trigger.ts,
                target: (e.item.clone(), e.attr.clone()),
                label,
            };

            if cfg.negative_mode == NegativeMode::Random && label == 1 {
                for _ in 0..cfg.random_neg_per_pos {
                    let (item, attr) = loop {
                        let pick = universe[rng.random_range(0..universe.len())];
                        if pick.0 != e.item {
                            break pick;
                        }
                        if universe.len() < 2 {
                            break pick;
                        }
                    };
                    let mut neg = sample.clone();
                    neg.target = (item.to_string(), attr.to_string());
                    neg.label = 0;
                    neg.position = block_position;
                    block_position = block_position.saturating_add(1);
                    samples.push(neg);
                }
            }
            samples.push(sample);
        }
    }
    Ok(AssembleOutput {
        samples,
        dropped_no_trigger: dropped,
    })
}

/// Chronological 80/10/10 split. Ties are broken by user then target item,
/// so the cut is stable across runs and platforms.
pub fn split(
    mut samples: Vec<RawSample>,
) -> Result<(Vec<RawSample>, Vec<RawSample>, Vec<RawSample>), DataError> {
    let n = samples.len();
    if n < 10 {
        return Err(DataError::TooFewSamples { n });
    }
    samples.sort_by(|a, b| {
        (a.ts, &a.user, &a.target.0).cmp(&(b.ts, &b.user, &b.target.0))
    });
    let cut_a = n * 80 / 100;
    let cut_b = n * 90 / 100;
    let test = samples.split_off(cut_b);
    let val = samples.split_off(cut_a);
    Ok((samples, val, test))
}

fn check_token(token: &str) -> Result<(), DataError> {
    if token.is_empty() || token.contains(['\t', ':', '|']) || token == "-" {
        return Err(DataError::BadToken {
            token: token.to_string(),
        });
    }
    Ok(())
}

pub fn write_samples(path: &Path, samples: &[RawSample]) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{SAMPLES_HEADER}")?;
    for s in samples {
        for token in [&s.user, &s.trigger.0, &s.trigger.1, &s.target.0, &s.target.1] {
            check_token(token)?;
        }
        let behaviors = if s.behaviors.is_empty() {
            "-".to_string()
        } else {
            s.behaviors
                .iter()
                .map(|(i, a)| {
                    check_token(i)?;
                    check_token(a)?;
                    Ok(format!("{i}:{a}"))
                })
                .collect::<Result<Vec<_>, DataError>>()?
                .join("|")
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.user,
            s.ts,
            s.hour,
            s.position,
            behaviors,
            s.trigger.0,
            s.trigger.1,
            s.trigger_ts,
            s.target.0,
            s.target.1,
            s.label
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<RawSample>, DataError> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().unwrap_or((0, ""));
    if header != SAMPLES_HEADER {
        return Err(DataError::Header {
            path: display,
            expected: SAMPLES_HEADER,
            found: header.to_string(),
        });
    }
    let mut samples = Vec::new();
    for (idx, raw) in lines {
        if raw.is_empty() {
            continue;
        }
        let sample = parse_sample_fields(raw, &|msg| DataError::Malformed {
            path: display.clone(),
            line: idx + 1,
            msg,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Parses one headerless samples-TSV row, as written by [`write_samples`].
pub fn parse_sample_row(line: &str) -> Result<RawSample, DataError> {
    parse_sample_fields(line, &|msg| DataError::Invalid(format!("sample row: {msg}")))
}

fn parse_sample_fields(
    raw: &str,
    malformed: &dyn Fn(String) -> DataError,
) -> Result<RawSample, DataError> {
    let f: Vec<&str> = raw.split('\t').collect();
    if f.len() != 11 {
        return Err(malformed(format!("expected 11 fields, found {}", f.len())));
    }
    let behaviors = if f[4] == "-" {
        Vec::new()
    } else {
        f[4].split('|')
            .map(|pair| {
                pair.split_once(':')
                    .map(|(i, a)| (i.to_string(), a.to_string()))
                    .ok_or_else(|| malformed(format!("bad behavior pair `{pair}`")))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(RawSample {
        user: f[0].to_string(),
        ts: f[1].parse().map_err(|_| malformed("bad timestamp".into()))?,
        hour: f[2].parse().map_err(|_| malformed("bad hour".into()))?,
        position: f[3].parse().map_err(|_| malformed("bad position".into()))?,
        behaviors,
        trigger: (f[5].to_string(), f[6].to_string()),
        trigger_ts: f[7]
            .parse()
            .map_err(|_| malformed("bad trigger timestamp".into()))?,
        target: (f[8].to_string(), f[9].to_string()),
        label: match f[10] {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(format!("bad label `{other}`"))),
        },
    })
}

/// The three token tables a trained model depends on.
pub struct Vocabs {
    pub item: FeatureVocab,
    pub attr: FeatureVocab,
    pub user: FeatureVocab,
}

impl Vocabs {
    /// Interns every token reachable from the training samples; evaluation
    /// maps unseen tokens to the shared out-of-vocabulary row.
    pub fn build(train: &[RawSample]) -> Vocabs {
        let mut v = Vocabs {
            item: FeatureVocab::new(),
            attr: FeatureVocab::new(),
            user: FeatureVocab::new(),
        };
        for s in train {
            v.user.intern(&s.user);
            for (item, attr) in s
                .behaviors
                .iter()
                .chain([&s.trigger, &s.target])
            {
                v.item.intern(item);
                v.attr.intern(attr);
            }
        }
        v
    }

    pub fn sizes(&self) -> model::VocabSizes {
        model::VocabSizes {
            items: self.item.len(),
            attrs: self.attr.len(),
            users: self.user.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        self.item.save(&dir.join("vocab_item.tsv"))?;
        self.attr.save(&dir.join("vocab_attr.tsv"))?;
        self.user.save(&dir.join("vocab_user.tsv"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Vocabs, DataError> {
        Ok(Vocabs {
            item: FeatureVocab::load(&dir.join("vocab_item.tsv"))?,
            attr: FeatureVocab::load(&dir.join("vocab_attr.tsv"))?,
            user: FeatureVocab::load(&dir.join("vocab_user.tsv"))?,
        })
    }

    fn node(&self, item: &str, attr: &str) -> ItemNode {
        (self.item.id(item), self.attr.id(attr))
    }
}

/// Maps token-level samples onto embedding rows.
pub fn intern_samples(vocabs: &Vocabs, raw: &[RawSample]) -> Vec<Sample> {
    raw.iter()
        .map(|s| Sample {
            user: vocabs.user.id(&s.user),
            hour: model::hour_row(s.hour),
            position: model::position_row(s.position),
            behaviors: s
                .behaviors
                .iter()
                .map(|(i, a)| vocabs.node(i, a))
                .collect(),
            trigger: vocabs.node(&s.trigger.0, &s.trigger.1),
            target: vocabs.node(&s.target.0, &s.target.1),
            label: s.label as f32,
        })
        .collect()
}

/// Per-user organic engagement chains before `end_ts_exclusive`, interned
/// for graph construction. Built from the training period only, and from
/// browsing alone: engagement that pairs with an impression at the same
/// (user, item, time) is a recommendation outcome, i.e. exactly what
/// training predicts, so counting it would bake each training label into
/// its own graph features (a one-count edge on an otherwise unseen pair).
pub fn behavior_sequences(
    events: &[BehaviorEvent],
    vocabs: &Vocabs,
    end_ts_exclusive: i64,
) -> Vec<Vec<ItemNode>> {
    let impressed: HashSet<(&str, &str, i64)> = events
        .iter()
        .filter(|e| e.event == EventType::Impression)
        .map(|e| (e.user.as_str(), e.item.as_str(), e.ts))
        .collect();
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if e.ts < end_ts_exclusive
            && is_engagement(e.event)
            && !impressed.contains(&(e.user.as_str(), e.item.as_str(), e.ts))
        {
            by_user.entry(&e.user).or_default().push(i);
        }
    }
    by_user
        .into_values()
        .map(|mut order| {
            order.sort_by_key(|&i| events[i].ts);
            order
                .into_iter()
                .map(|i| vocabs.node(&events[i].item, &events[i].attr))
                .collect()
        })
        .filter(|seq: &Vec<ItemNode>| !seq.is_empty())
        .collect()
}

/// Split boundary metadata written by `prepare` and read by `build-graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMeta {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Earliest validation timestamp; graph input must stay strictly below.
    pub val_start_ts: i64,
}

impl SplitMeta {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(
            path,
            format!(
                "key\tvalue\nn_train\t{}\nn_val\t{}\nn_test\t{}\nval_start_ts\t{}\n",
                self.n_train, self.n_val, self.n_test, self.val_start_ts
            ),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitMeta, DataError> {
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for line in text.lines().skip(1) {
            if let Some((k, v)) = line.split_once('\t') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<i64, DataError> {
            map.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| DataError::Invalid(format!("split meta missing `{k}`")))
        };
        Ok(SplitMeta {
            n_train: get("n_train")? as usize,
            n_val: get("n_val")? as usize,
            n_test: get("n_test")? as usize,
            val_start_ts: get("val_start_ts")?,
        })
    }
}
