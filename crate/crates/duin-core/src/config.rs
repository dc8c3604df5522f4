//! Run configuration: hyperparameters, ablation switches, and the
//! `key = value` file format shared by the CLI and the bench harness.
//!
//! Every run writes its resolved configuration next to its outputs so results
//! can be reproduced from the artifacts alone. `to_lines` is the canonical
//! serialization; `config_hash` fingerprints it for checkpoint manifests.

use std::fmt;
use std::path::Path;

use crate::explicit_intent::NegativeSet;
use crate::intent_uncertainty::GateSquash;

/// Which event type marks a positive sample.
///
/// `Click` also counts purchases as positives (a purchase implies the click
/// level of engagement); `Purchase` restricts positives to purchases only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveEvent {
    Click,
    Purchase,
}

/// How negative samples are constructed during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    /// Impression events without a click on the same (user, item, time).
    Impressions,
    /// Uniformly drawn items per positive; for synthetic experiments.
    Random,
}

/// Module switches for ablation variants. All false = full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Drop the explicit-intent encoder and its interaction features.
    pub no_eiem: bool,
    /// Zero the latent-intent slot (graph views unused).
    pub no_liem: bool,
    /// Replace the sampled intensity gate by a fixed 0.5 / 0.5 mix.
    pub no_iumm: bool,
    /// Train without the contrastive auxiliary loss.
    pub no_ssl: bool,
    /// Static intent intensity: a learned deterministic scalar gate.
    pub sii: bool,
    /// Remove all trigger conditioning (strongest ablation).
    pub trigger_agnostic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the contrastive loss in the joint objective.
    pub alpha: f32,
    /// Contrastive temperature.
    pub tau: f32,
    /// Augmentation mask probability.
    pub gamma: f32,
    /// Behavior sequence cap (newest events kept).
    pub t_max: usize,
    /// Explicit-sequence cap, excluding the trigger slot.
    pub l_max: usize,
    /// Per-field embedding width; item representations are 2d wide.
    pub d: usize,
    pub n_heads: usize,
    /// Co-occurrence adjacency span, in sequence positions.
    pub graph_window: usize,
    /// Trigger lookback window, in hours.
    pub trigger_window_hours: f64,
    pub positive_event: PositiveEvent,
    pub negative_mode: NegativeMode,
    /// Random negatives drawn per positive when `negative_mode = random`.
    pub random_neg_per_pos: usize,
    /// Name of the attribute the event log's attribute column carries
    /// (e.g. category or brand); recorded for provenance, not computed on.
    pub explicit_attr: String,
    pub gate_squash: GateSquash,
    pub ssl_negatives: NegativeSet,
    /// Sample the intensity gate at inference instead of using the mean.
    pub sample_at_infer: bool,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.001,
            batch_size: 256,
            epochs: 1,
            seed: 17,
            alpha: 1.0,
            tau: 0.1,
            gamma: 0.5,
            t_max: 20,
            l_max: 10,
            d: 72,
            n_heads: 8,
            graph_window: 4,
            trigger_window_hours: 4.0,
            positive_event: PositiveEvent::Click,
            negative_mode: NegativeMode::Impressions,
            random_neg_per_pos: 1,
            explicit_attr: "category".to_string(),
            gate_squash: GateSquash::Sigmoid,
            ssl_negatives: NegativeSet::OtherViews,
            sample_at_infer: false,
            ablation: AblationFlags::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`; valid keys: {}", VALID_KEYS.join(", "))]
    UnknownKey { key: String },
    #[error("bad value `{value}` for `{key}`: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("malformed config line {line}: `{text}` (expected `key = value`)")]
    MalformedLine { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

/// Every key accepted in config files and `--set` overrides.
pub const VALID_KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "alpha",
    "tau",
    "gamma",
    "t_max",
    "l_max",
    "d",
    "n_heads",
    "graph_window",
    "trigger_window_hours",
    "positive_event",
    "negative_mode",
    "random_neg_per_pos",
    "explicit_attr",
    "gate_squash",
    "ssl_negatives",
    "sample_at_infer",
    "no_eiem",
    "no_liem",
    "no_iumm",
    "no_ssl",
    "sii",
    "trigger_agnostic",
];

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected: "true|false",
        }),
    }
}

macro_rules! parse_num {
    ($key:expr, $v:expr, $ty:ty, $expected:expr) => {
        $v.parse::<$ty>().map_err(|_| ConfigError::BadValue {
            key: $key.to_string(),
            value: $v.to_string(),
            expected: $expected,
        })
    };
}

impl TrainConfig {
    /// Applies one `key = value` assignment. Unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "lr" => self.lr = parse_num!(key, v, f32, "a positive real")?,
            "batch_size" => self.batch_size = parse_num!(key, v, usize, "a positive integer")?,
            "epochs" => self.epochs = parse_num!(key, v, usize, "a positive integer")?,
            "seed" => self.seed = parse_num!(key, v, u64, "an unsigned integer")?,
            "alpha" => self.alpha = parse_num!(key, v, f32, "a real >= 0")?,
            "tau" => self.tau = parse_num!(key, v, f32, "a positive real")?,
            "gamma" => self.gamma = parse_num!(key, v, f32, "a real in [0,1]")?,
            "t_max" => self.t_max = parse_num!(key, v, usize, "a positive integer")?,
            "l_max" => self.l_max = parse_num!(key, v, usize, "a positive integer")?,
            "d" => self.d = parse_num!(key, v, usize, "a positive integer")?,
            "n_heads" => self.n_heads = parse_num!(key, v, usize, "a positive integer")?,
            "graph_window" => {
                self.graph_window = parse_num!(key, v, usize, "a positive integer")?
            }
            "trigger_window_hours" => {
                self.trigger_window_hours = parse_num!(key, v, f64, "a positive real")?
            }
            "positive_event" => {
                self.positive_event = match v {
                    "click" => PositiveEvent::Click,
                    "purchase" => PositiveEvent::Purchase,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "click|purchase",
                        })
                    }
                }
            }
            "negative_mode" => {
                self.negative_mode = match v {
                    "impressions" => NegativeMode::Impressions,
                    "random" => NegativeMode::Random,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "impressions|random",
                        })
                    }
                }
            }
            "random_neg_per_pos" => {
                self.random_neg_per_pos = parse_num!(key, v, usize, "a positive integer")?
            }
            "explicit_attr" => self.explicit_attr = v.to_string(),
            "gate_squash" => {
                self.gate_squash = match v {
                    "sigmoid" => GateSquash::Sigmoid,
                    "clamp" => GateSquash::Clamp,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "sigmoid|clamp",
                        })
                    }
                }
            }
            "ssl_negatives" => {
                self.ssl_negatives = match v {
                    "other_views" => NegativeSet::OtherViews,
                    "with_self" => NegativeSet::WithSelf,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "other_views|with_self",
                        })
                    }
                }
            }
            "sample_at_infer" => self.sample_at_infer = parse_bool(key, v)?,
            "no_eiem" => self.ablation.no_eiem = parse_bool(key, v)?,
            "no_liem" => self.ablation.no_liem = parse_bool(key, v)?,
            "no_iumm" => self.ablation.no_iumm = parse_bool(key, v)?,
            "no_ssl" => self.ablation.no_ssl = parse_bool(key, v)?,
            "sii" => self.ablation.sii = parse_bool(key, v)?,
            "trigger_agnostic" => self.ablation.trigger_agnostic = parse_bool(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blanks are skipped.
    pub fn apply_lines(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_lines(&text)
    }

    /// Canonical serialization: one `key = value` per line, key order fixed.
    /// Round-trips through `apply_lines` and feeds `config_hash`.
    pub fn to_lines(&self) -> String {
        let b = |x: bool| if x { "true" } else { "false" };
        let mut s = String::new();
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("alpha = {}\n", self.alpha));
        s.push_str(&format!("tau = {}\n", self.tau));
        s.push_str(&format!("gamma = {}\n", self.gamma));
        s.push_str(&format!("t_max = {}\n", self.t_max));
        s.push_str(&format!("l_max = {}\n", self.l_max));
        s.push_str(&format!("d = {}\n", self.d));
        s.push_str(&format!("n_heads = {}\n", self.n_heads));
        s.push_str(&format!("graph_window = {}\n", self.graph_window));
        s.push_str(&format!(
            "trigger_window_hours = {}\n",
            self.trigger_window_hours
        ));
        s.push_str(&format!(
            "positive_event = {}\n",
            match self.positive_event {
                PositiveEvent::Click => "click",
                PositiveEvent::Purchase => "purchase",
            }
        ));
        s.push_str(&format!(
            "negative_mode = {}\n",
            match self.negative_mode {
                NegativeMode::Impressions => "impressions",
                NegativeMode::Random => "random",
            }
        ));
        s.push_str(&format!("random_neg_per_pos = {}\n", self.random_neg_per_pos));
        s.push_str(&format!("explicit_attr = {}\n", self.explicit_attr));
        s.push_str(&format!(
            "gate_squash = {}\n",
            match self.gate_squash {
                GateSquash::Sigmoid => "sigmoid",
                GateSquash::Clamp => "clamp",
            }
        ));
        s.push_str(&format!(
            "ssl_negatives = {}\n",
            match self.ssl_negatives {
                NegativeSet::OtherViews => "other_views",
                NegativeSet::WithSelf => "with_self",
            }
        ));
        s.push_str(&format!("sample_at_infer = {}\n", b(self.sample_at_infer)));
        s.push_str(&format!("no_eiem = {}\n", b(self.ablation.no_eiem)));
        s.push_str(&format!("no_liem = {}\n", b(self.ablation.no_liem)));
        s.push_str(&format!("no_iumm = {}\n", b(self.ablation.no_iumm)));
        s.push_str(&format!("no_ssl = {}\n", b(self.ablation.no_ssl)));
        s.push_str(&format!("sii = {}\n", b(self.ablation.sii)));
        s.push_str(&format!(
            "trigger_agnostic = {}\n",
            b(self.ablation.trigger_agnostic)
        ));
        s
    }

    pub fn from_lines(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut c = TrainConfig::default();
        c.apply_lines(text)?;
        c.validate()?;
        Ok(c)
    }

    /// FNV-1a over the canonical serialization.
    pub fn config_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.to_lines().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Item representations concatenate item and attribute embeddings.
    pub fn d_model(&self) -> usize {
        2 * self.d
    }

    /// True when the contrastive term participates in the objective.
    pub fn ssl_active(&self) -> bool {
        !self.ablation.no_ssl && !self.ablation.no_eiem && !self.ablation.trigger_agnostic
            && self.alpha > 0.0
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.ssl_active() && self.batch_size < 2 {
            return bad("batch_size must be >= 2 while the contrastive loss is active".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0,1], got {}", self.gamma));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("t_max", self.t_max),
            ("l_max", self.l_max),
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("graph_window", self.graph_window),
            ("random_neg_per_pos", self.random_neg_per_pos),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.d_model() % self.n_heads != 0 {
            return bad(format!(
                "n_heads ({}) must divide the item width 2d ({})",
                self.n_heads,
                self.d_model()
            ));
        }
        if !(self.trigger_window_hours > 0.0) {
            return bad(format!(
                "trigger_window_hours must be > 0, got {}",
                self.trigger_window_hours
            ));
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_lines())
    }
}
