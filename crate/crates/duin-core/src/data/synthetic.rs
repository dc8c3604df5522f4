//! Synthetic behavior-log generator with known ground-truth intent.
//!
//! Items within one attribute sit on a ring; neighboring ring positions are
//! "similar" goods. Each session follows one script: a browse that chains
//! along rings with occasional trending peeks and complementary drift,
//! sometimes an "echo" of one or two clicks next to the upcoming trigger,
//! and a uniformly random trigger click. Half the sessions stop there;
//! the rest open a recommendation block of six impressions at one
//! timestamp with a click on exactly one of them. The
//! clicked slot is chosen by a per-session intent keyed to the trigger:
//! similar (a ring neighbor of the trigger), trending (popularity pool),
//! or complementary (the trigger attribute's paired attribute). Negatives
//! fail all three criteria, and some share the trigger's attribute while
//! sitting far around the ring, so attribute matching alone cannot rank
//! them below the positive. Because the trigger is uniform over items,
//! history narrows the live neighborhood only when the echo happened, and
//! the browse traffic itself carries the population statistics (ring runs,
//! attribute-complement drift, trending popularity) that the co-occurrence
//! graph summarizes. A sidecar file records the drawn intent per session.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{write_events, BehaviorEvent, DataError, EventType};

pub const INTENTS_HEADER: &str = "session_id\tintent";

const BASE_TS: i64 = 1_700_000_000;
const SESSION_SPACING: i64 = 120;
const HISTORY_STEP: i64 = 60;
const REC_DELAY: i64 = 10;
const NEGATIVES_PER_SESSION: usize = 5;
/// Chance a browse click is a trending-pool peek instead of a preference.
const TREND_PEEK: f64 = 0.15;
/// Chance a browse click drifts to the complement of the previous attribute.
const COMP_DRIFT: f64 = 0.25;
/// Chance a browse click steps along the ring from the previous item.
const RING_RUN: f64 = 0.45;
/// Chance the user browses beside the trigger right before clicking it.
const ECHO_RATE: f64 = 0.8;
/// Similar positives sit within this ring distance of the trigger.
const RING_RADIUS: u32 = 2;
/// Hard negatives share the trigger's attribute at or beyond this distance.
const HARD_MIN_DIST: u32 = 8;
/// Chance a negative slot is a hard same-attribute negative.
const HARD_NEG: f64 = 0.25;
/// Chance a session opens the recommendation surface at all. Browse-only
/// sessions still feed the co-occurrence counts and later histories, so
/// the graph sees much more traffic than the label stream.
const REC_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intent {
    Similar,
    Trending,
    Complementary,
}

impl Intent {
    pub fn as_str(&self) -> &'static str {
        match self {
            Intent::Similar => "similar",
            Intent::Trending => "trending",
            Intent::Complementary => "complementary",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    pub n_sessions: usize,
    /// Population probabilities of (similar, trending, complementary).
    pub mixture: [f64; 3],
    /// Chance that any scripted item pick is replaced by a uniform one.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            n_users: 600,
            n_items: 900,
            n_attributes: 30,
            n_sessions: 8000,
            mixture: [0.469, 0.308, 0.223],
            noise_rate: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::Invalid(msg));
        if self.n_users < 8 || self.n_users % 2 != 0 {
            return fail(format!(
                "n_users must be even and >= 8 for the two user types, got {}",
                self.n_users
            ));
        }
        if self.n_attributes < 4 || self.n_attributes % 2 != 0 {
            return fail(format!(
                "n_attributes must be even and >= 4, got {}",
                self.n_attributes
            ));
        }
        if self.n_items < 20 || self.n_items % self.n_attributes != 0 {
            return fail(format!(
                "n_items must be >= 20 and divisible by n_attributes, got {}",
                self.n_items
            ));
        }
        if self.n_sessions == 0 {
            return fail("n_sessions must be positive".into());
        }
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return fail(format!(
                "mixture must be non-negative and sum to 1, got {:?}",
                self.mixture
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate must be in [0, 1), got {}", self.noise_rate));
        }
        Ok(())
    }

    fn items_per_attr(&self) -> u32 {
        (self.n_items / self.n_attributes) as u32
    }

    fn complement(&self, attr: u32) -> u32 {
        (attr + self.n_attributes as u32 / 2) % self.n_attributes as u32
    }

    /// Position of an item on its attribute's ring.
    fn ring_index(&self, item: u32) -> u32 {
        item / self.n_attributes as u32
    }

    /// Cyclic ring distance; only meaningful for items of one attribute.
    fn ring_distance(&self, i: u32, j: u32) -> u32 {
        let per = self.items_per_attr();
        let d = self.ring_index(i).abs_diff(self.ring_index(j)) % per;
        d.min(per - d)
    }

    /// The item `delta` ring steps away within the same attribute.
    fn ring_step(&self, item: u32, delta: i64) -> u32 {
        let per = self.items_per_attr() as i64;
        let idx = (self.ring_index(item) as i64 + delta).rem_euclid(per) as u32;
        item % self.n_attributes as u32 + self.n_attributes as u32 * idx
    }

    /// The complement attribute's item at the same ring position: the
    /// "matching accessory" of `item`.
    fn comp_project(&self, item: u32) -> u32 {
        let a = self.n_attributes as u32;
        self.complement(item % a) + a * self.ring_index(item)
    }

    /// Per-type mixtures tilt around the population mixture and average
    /// back to it exactly, since the two user types are equally likely.
    fn type_mixtures(&self) -> ([f64; 3], [f64; 3]) {
        let [s, t, c] = self.mixture;
        let tilt = 0.5 * s.min(1.0 - s).min(t).min(c);
        let focused = [s + tilt, t - tilt / 2.0, c - tilt / 2.0];
        let explorer = [s - tilt, t + tilt / 2.0, c + tilt / 2.0];
        (focused, explorer)
    }
}

#[derive(Debug)]
pub struct Generated {
    pub events: Vec<BehaviorEvent>,
    pub intents: Vec<(u64, Intent)>,
}

fn draw_intent(mixture: &[f64; 3], rng: &mut ChaCha8Rng) -> Intent {
    let roll: f64 = rng.random();
    if roll < mixture[0] {
        Intent::Similar
    } else if roll < mixture[0] + mixture[1] {
        Intent::Trending
    } else {
        Intent::Complementary
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Generated, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.n_attributes as u32;
    let per_attr = spec.items_per_attr();

    let mut popularity: Vec<u32> = (0..spec.n_items as u32).collect();
    popularity.shuffle(&mut rng);
    let pool_size = (spec.n_items / 20).max(1);
    let trending_pool: Vec<u32> = popularity[..pool_size].to_vec();
    let trending_set: HashSet<u32> = trending_pool.iter().copied().collect();

    // Focused users browse two attributes, explorers four. Type alternates
    // with user index, so each type covers half the population.
    let (focused_mix, explorer_mix) = spec.type_mixtures();
    let prefs: Vec<Vec<u32>> = (0..spec.n_users)
        .map(|u| {
            let want = if u % 2 == 0 { 2 } else { 4 };
            let mut chosen = Vec::with_capacity(want);
            while chosen.len() < want {
                let pick = rng.random_range(0..a);
                if !chosen.contains(&pick) {
                    chosen.push(pick);
                }
            }
            chosen
        })
        .collect();

    let attr_of = |item: u32| item % a;
    let mut events = Vec::new();
    let mut intents = Vec::with_capacity(spec.n_sessions);

    // A user's sessions must not overlap in time: history reaches back up
    // to seven steps, so keep at least four session slots between repeats.
    let mut last_session = vec![i64::MIN / 2; spec.n_users];
    for session in 0..spec.n_sessions as u64 {
        let t0 = BASE_TS + session as i64 * SESSION_SPACING;
        let user = loop {
            let pick = rng.random_range(0..spec.n_users);
            if session as i64 - last_session[pick] >= 4 {
                break pick;
            }
        };
        last_session[user] = session as i64;
        let mixture = if user % 2 == 0 { &focused_mix } else { &explorer_mix };
        let intent = draw_intent(mixture, &mut rng);
        let user_tok = format!("u{user}");

        let preferred_item = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(spec.noise_rate) {
                rng.random_range(0..spec.n_items as u32)
            } else {
                let attr = prefs[user][rng.random_range(0..prefs[user].len())];
                attr + a * rng.random_range(0..per_attr)
            }
        };

        // The trigger is uniform over the catalog, independent of the
        // user's preferences; the positive is keyed to it. Both are drawn
        // before the browse so the echo below can avoid the positive item.
        let trigger_item = rng.random_range(0..spec.n_items as u32);
        let trigger_attr = attr_of(trigger_item);
        let comp_attr = spec.complement(trigger_attr);

        let scripted = match intent {
            Intent::Similar => {
                let mag = rng.random_range(1..=RING_RADIUS as i64);
                let side = if rng.random_bool(0.5) { 1 } else { -1 };
                spec.ring_step(trigger_item, side * mag)
            }
            Intent::Trending => trending_pool[rng.random_range(0..trending_pool.len())],
            // The matching accessory, give or take one ring step. Pinning
            // the complement at item rather than attribute level keeps it
            // out of reach of label memorization at this sample count.
            Intent::Complementary => {
                spec.ring_step(spec.comp_project(trigger_item), rng.random_range(-1..=1))
            }
        };
        let positive = if rng.random_bool(spec.noise_rate) {
            rng.random_range(0..spec.n_items as u32)
        } else {
            scripted
        };

        // Browse: preference draws broken up by trending peeks, drift to
        // the complement of the previous attribute, and runs along the
        // previous item's ring. These habits are what give the
        // co-occurrence counts their structure.
        let n_hist = rng.random_range(2..=5usize);
        let mut browse: Vec<u32> = Vec::with_capacity(n_hist + 2);
        for _ in 0..n_hist {
            let roll: f64 = rng.random();
            let item = if roll < TREND_PEEK {
                trending_pool[rng.random_range(0..trending_pool.len())]
            } else if let Some(&prev) =
                browse.last().filter(|_| roll < TREND_PEEK + COMP_DRIFT)
            {
                spec.ring_step(spec.comp_project(prev), rng.random_range(-1..=1))
            } else if let Some(&prev) = browse
                .last()
                .filter(|_| roll < TREND_PEEK + COMP_DRIFT + RING_RUN)
            {
                let mag = rng.random_range(1..=RING_RADIUS as i64);
                let side = if rng.random_bool(0.5) { 1 } else { -1 };
                spec.ring_step(prev, side * mag)
            } else {
                preferred_item(&mut rng)
            };
            browse.push(item);
        }
        // Echo: most sessions wander right next to the trigger before
        // clicking the trigger itself. History then hints at the live
        // neighborhood; sessions without the echo leave the hint to the
        // trigger alone. The echo never equals the upcoming positive, so
        // "target already in history" cannot shortcut the label.
        if rng.random_bool(ECHO_RATE) {
            for _ in 0..rng.random_range(1..=2usize) {
                let item = loop {
                    let side = if rng.random_bool(0.5) { 1 } else { -1 };
                    let pick = spec.ring_step(trigger_item, side);
                    if pick != positive || per_attr <= 2 {
                        break pick;
                    }
                };
                browse.push(item);
            }
        }
        let depth = browse.len();
        for (i, &item) in browse.iter().enumerate() {
            events.push(click(&user_tok, item, attr_of(item), t0 - HISTORY_STEP * (depth - i) as i64));
        }
        events.push(click(&user_tok, trigger_item, trigger_attr, t0));

        if !rng.random_bool(REC_RATE) {
            // Browse-only session: no impressions, no labels.
            intents.push((session, intent));
            continue;
        }
        let t_rec = t0 + REC_DELAY;
        let mut block = vec![(positive, true)];
        for _ in 0..NEGATIVES_PER_SESSION {
            // Hard negatives share the trigger's attribute or its
            // complement but sit far around the ring, so attribute
            // matching alone cannot demote them; they need rings large
            // enough to hold a far side.
            let hard = rng.random_bool(HARD_NEG) && per_attr >= 2 * HARD_MIN_DIST;
            let anchor = if rng.random_bool(0.5) {
                trigger_item
            } else {
                spec.comp_project(trigger_item)
            };
            let mut tries = 0;
            let item = loop {
                let pick = if hard {
                    anchor % a + a * rng.random_range(0..per_attr)
                } else {
                    rng.random_range(0..spec.n_items as u32)
                };
                let pa = attr_of(pick);
                let ok = pick != positive
                    && !trending_set.contains(&pick)
                    && if hard {
                        spec.ring_distance(pick, anchor) >= HARD_MIN_DIST
                    } else {
                        pa != trigger_attr && pa != comp_attr
                    };
                if ok {
                    break pick;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(DataError::Invalid(
                        "could not draw a negative; widen the item space".into(),
                    ));
                }
            };
            block.push((item, false));
        }
        // Exposure order must not encode the label: rank in the block feeds
        // the position feature downstream.
        block.shuffle(&mut rng);
        // One impression per slot, then the click on the chosen slot. The
        // click comes after every impression so no impression can mistake
        // the block's own click for its trigger.
        for &(item, _) in &block {
            events.push(BehaviorEvent {
                user: user_tok.clone(),
                item: format!("i{item}"),
                attr: format!("a{}", attr_of(item)),
                ts: t_rec,
                event: EventType::Impression,
            });
        }
        let clicked = block
            .iter()
            .find(|&&(_, is_positive)| is_positive)
            .expect("block holds the positive")
            .0;
        events.push(click(&user_tok, clicked, attr_of(clicked), t_rec));
        intents.push((session, intent));
    }
    Ok(Generated { events, intents })
}

fn click(user: &str, item: u32, attr: u32, ts: i64) -> BehaviorEvent {
    BehaviorEvent {
        user: user.to_string(),
        item: format!("i{item}"),
        attr: format!("a{attr}"),
        ts,
        event: EventType::Click,
    }
}

pub fn write_intents(path: &Path, intents: &[(u64, Intent)]) -> Result<(), DataError> {
    let mut out = String::with_capacity(intents.len() * 16);
    out.push_str(INTENTS_HEADER);
    out.push('\n');
    for (session, intent) in intents {
        out.push_str(&format!("{session}\t{}\n", intent.as_str()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generates `events.tsv` and `intents.tsv` under `dir`.
pub fn generate_to_dir(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, PathBuf), DataError> {
    let generated = generate(spec)?;
    std::fs::create_dir_all(dir)?;
    let events_path = dir.join("events.tsv");
    let intents_path = dir.join("intents.tsv");
    write_events(&events_path, &generated.events)?;
    write_intents(&intents_path, &generated.intents)?;
    Ok((events_path, intents_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::data::{assemble_samples, read_events};
    use crate::metrics::auc;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_users: 40,
            n_items: 80,
            n_attributes: 4,
            n_sessions: 400,
            mixture: [0.469, 0.308, 0.223],
            noise_rate: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_broken_specs() {
        for broken in [
            SyntheticSpec { n_users: 3, ..small_spec() },
            SyntheticSpec { n_attributes: 5, ..small_spec() },
            SyntheticSpec { n_items: 81, ..small_spec() },
            SyntheticSpec { mixture: [0.5, 0.5, 0.5], ..small_spec() },
            SyntheticSpec { noise_rate: 1.0, ..small_spec() },
        ] {
            assert!(broken.validate().is_err(), "accepted {broken:?}");
        }
        small_spec().validate().unwrap();
    }

    #[test]
    fn generation_is_byte_identical_under_one_seed() {
        let spec = small_spec();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_to_dir(&spec, dir_a.path()).unwrap();
        generate_to_dir(&spec, dir_b.path()).unwrap();
        for name in ["events.tsv", "intents.tsv"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        let other = SyntheticSpec { seed: 12, ..spec };
        let dir_c = tempfile::tempdir().unwrap();
        generate_to_dir(&other, dir_c.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("events.tsv")).unwrap();
        let c = std::fs::read(dir_c.path().join("events.tsv")).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn generated_files_parse_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let (events_path, intents_path) = generate_to_dir(&small_spec(), dir.path()).unwrap();
        let report = read_events(&events_path).unwrap();
        assert_eq!(report.skipped, 0);
        assert!(!report.events.is_empty());
        let intents = std::fs::read_to_string(&intents_path).unwrap();
        assert_eq!(intents.lines().next().unwrap(), INTENTS_HEADER);
        assert_eq!(intents.lines().count(), 1 + 400);
    }

    #[test]
    fn intent_frequencies_match_the_mixture() {
        let spec = SyntheticSpec {
            n_sessions: 10_000,
            ..small_spec()
        };
        let generated = generate(&spec).unwrap();
        let n = generated.intents.len() as f64;
        let mut counts = [0usize; 3];
        for (_, intent) in &generated.intents {
            counts[match intent {
                Intent::Similar => 0,
                Intent::Trending => 1,
                Intent::Complementary => 2,
            }] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            let freq = count as f64 / n;
            assert!(
                (freq - spec.mixture[i]).abs() <= 0.015,
                "intent {i}: frequency {freq:.4} vs configured {:.4}",
                spec.mixture[i]
            );
        }
    }

    #[test]
    fn negatives_fail_every_positive_criterion() {
        let spec = small_spec();
        let generated = generate(&spec).unwrap();
        let a = spec.n_attributes as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut popularity: Vec<u32> = (0..spec.n_items as u32).collect();
        popularity.shuffle(&mut rng);
        let pool: HashSet<u32> = popularity[..(spec.n_items / 20).max(1)]
            .iter()
            .copied()
            .collect();

        let cfg = TrainConfig::default();
        let out = assemble_samples(&generated.events, &cfg).unwrap();
        let mut checked = 0;
        for s in &out.samples {
            // The click row trails its block, so every candidate keys to
            // the session trigger, which strictly precedes the block.
            assert!(s.trigger_ts < s.ts, "candidate keyed to a same-time click");
            if s.label != 0 {
                continue;
            }
            let item: u32 = s.target.0[1..].parse().unwrap();
            assert!(!pool.contains(&item), "negative is trending");
            let trigger_item: u32 = s.trigger.0[1..].parse().unwrap();
            let trigger_attr: u32 = s.trigger.1[1..].parse().unwrap();
            if item % a == trigger_attr {
                // Hard negative: same attribute, but far around the ring.
                assert!(
                    spec.ring_distance(item, trigger_item) >= HARD_MIN_DIST,
                    "negative is a ring neighbor of the trigger"
                );
            } else if item % a == (trigger_attr + a / 2) % a {
                // Hard negative on the complement side: far from the
                // trigger's matching accessory.
                assert!(
                    spec.ring_distance(item, spec.comp_project(trigger_item)) >= HARD_MIN_DIST,
                    "negative is an accessory neighbor of the trigger"
                );
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn attribute_match_alone_beats_chance_on_assembled_samples() {
        let spec = small_spec();
        let generated = generate(&spec).unwrap();
        let out = assemble_samples(&generated.events, &TrainConfig::default()).unwrap();
        let scores: Vec<f64> = out
            .samples
            .iter()
            .map(|s| if s.same_attr() { 1.0 } else { 0.0 })
            .collect();
        let labels: Vec<bool> = out.samples.iter().map(|s| s.label == 1).collect();
        let indicator_auc = auc(&scores, &labels).unwrap();
        assert!(
            indicator_auc > 0.55,
            "attribute-match indicator scored {indicator_auc:.4}"
        );
    }

    #[test]
    fn exposure_order_does_not_encode_the_label() {
        let out = assemble_samples(
            &generate(&small_spec()).unwrap().events,
            &TrainConfig::default(),
        )
        .unwrap();
        // Recommendation-block positives must not sit at a fixed position.
        let rec_positive_positions: HashSet<u32> = out
            .samples
            .iter()
            .filter(|s| s.label == 1 && s.ts - s.trigger_ts == REC_DELAY)
            .map(|s| s.position)
            .collect();
        assert!(
            rec_positive_positions.len() > 2,
            "positives always land at positions {rec_positive_positions:?}"
        );
    }
}
