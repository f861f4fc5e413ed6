//! Schedules, their fixed-length continuous encoding and the activity vocabulary.
//!
//! A [`RawSchedule`] is a person-day of contiguous timed episodes in integer
//! minutes. The models work on [`EncodedSchedule`]: a start token, one token
//! per episode with its duration as a fraction of the day, then end tokens up
//! to the fixed sequence length.

mod dataset;
pub mod io;
mod labels;
mod preprocess;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{batch_normalize, label_weights, split_dataset, Dataset, Sample, Split};
pub use labels::{LabelSchema, LabelVar, LabelVector};
pub use preprocess::preprocess;

/// Minutes in the modelled day.
pub const DAY_MINUTES: u32 = 1440;
/// Default fixed sequence length, start token and end padding included.
pub const DEFAULT_SEQ_LEN: usize = 16;

/// Start-of-sequence token index.
pub const SOS: usize = 0;
/// End-of-sequence token index.
pub const EOS: usize = 1;

const SOS_NAME: &str = "<sos>";
const EOS_NAME: &str = "<eos>";

/// Activity types of the default vocabulary.
pub const DEFAULT_ACTIVITIES: [&str; 8] = [
    "home",
    "work",
    "education",
    "medical",
    "escort",
    "other",
    "visit",
    "shop",
];

/// Activity names that may not repeat back to back in a feasible schedule.
pub const NO_REPEAT_ACTIVITIES: [&str; 3] = ["home", "work", "education"];

pub const HOME: &str = "home";

/// Token vocabulary: `<sos>` at 0, `<eos>` at 1, activities in alphabetical order after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityVocab {
    names: Vec<String>,
}

impl Default for ActivityVocab {
    fn default() -> Self {
        Self::new(DEFAULT_ACTIVITIES).expect("default activities are valid")
    }
}

impl ActivityVocab {
    pub fn new<I, S>(activities: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut acts: Vec<String> = activities.into_iter().map(Into::into).collect();
        acts.sort();
        let before = acts.len();
        acts.dedup();
        if acts.len() != before {
            return Err(Error::InvalidConfig("duplicate activity names".into()));
        }
        if acts.is_empty() {
            return Err(Error::Empty("activity vocabulary".into()));
        }
        if acts.iter().any(|a| a == SOS_NAME || a == EOS_NAME || a.trim().is_empty()) {
            return Err(Error::InvalidConfig("reserved or blank activity name".into()));
        }
        let mut names = vec![SOS_NAME.to_string(), EOS_NAME.to_string()];
        names.extend(acts);
        Ok(Self { names })
    }

    /// Total number of tokens, specials included.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn activity_token(&self, name: &str) -> Result<usize> {
        match self.token(name) {
            Some(t) if !is_special(t) => Ok(t),
            _ => Err(Error::UnknownActivity(name.to_string())),
        }
    }

    pub fn name(&self, token: usize) -> Result<&str> {
        self.names
            .get(token)
            .map(String::as_str)
            .ok_or(Error::UnknownToken(token))
    }

    /// Tokens of the (non-special) activity types, in index order.
    pub fn activity_tokens(&self) -> std::ops::Range<usize> {
        2..self.names.len()
    }

    pub fn activity_names(&self) -> impl Iterator<Item = &str> {
        self.names[2..].iter().map(String::as_str)
    }

    /// Plain-text manifest, one token per line in index order.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for n in &self.names {
            out.push_str(n);
            out.push('\n');
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() < 3 || lines[0] != SOS_NAME || lines[1] != EOS_NAME {
            return Err(Error::MalformedEncoding(
                "vocabulary manifest must start with <sos>, <eos> and list at least one activity"
                    .into(),
            ));
        }
        let vocab = Self::new(lines[2..].iter().copied())?;
        if vocab.names.iter().zip(&lines).any(|(a, b)| a != b) {
            return Err(Error::MalformedEncoding(
                "vocabulary manifest activities are not in index order".into(),
            ));
        }
        Ok(vocab)
    }
}

pub fn is_special(token: usize) -> bool {
    token == SOS || token == EOS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub act: String,
    pub start: u32,
    pub end: u32,
}

impl Episode {
    pub fn new(act: impl Into<String>, start: u32, end: u32) -> Self {
        Self {
            act: act.into(),
            start,
            end,
        }
    }

    pub fn duration(&self) -> u32 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSchedule {
    pub pid: String,
    pub episodes: Vec<Episode>,
}

impl RawSchedule {
    pub fn new(pid: impl Into<String>, episodes: Vec<Episode>) -> Self {
        Self {
            pid: pid.into(),
            episodes,
        }
    }

    /// Builds a schedule from `(activity, start, end)` triples.
    pub fn from_triples(pid: impl Into<String>, triples: &[(&str, u32, u32)]) -> Self {
        Self::new(
            pid,
            triples.iter().map(|&(a, s, e)| Episode::new(a, s, e)).collect(),
        )
    }

    /// Checks contiguity, full-day coverage and positive durations.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSchedule {
            pid: self.pid.clone(),
            reason,
        };
        let first = self.episodes.first().ok_or_else(|| bad("no episodes".into()))?;
        if first.start != 0 {
            return Err(bad(format!("first episode starts at {}", first.start)));
        }
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.end <= ep.start {
                return Err(bad(format!("episode {i} has non-positive duration")));
            }
            if let Some(next) = self.episodes.get(i + 1) {
                if next.start != ep.end {
                    return Err(bad(format!("episode {i} ends at {} but next starts at {}", ep.end, next.start)));
                }
            }
        }
        let last = self.episodes.last().expect("non-empty");
        if last.end != DAY_MINUTES {
            return Err(bad(format!("last episode ends at {}", last.end)));
        }
        Ok(())
    }

    pub fn is_home_based(&self) -> bool {
        matches!(
            (self.episodes.first(), self.episodes.last()),
            (Some(f), Some(l)) if f.act == HOME && l.act == HOME
        )
    }
}

/// Fixed-length token/duration sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSchedule {
    pub acts: Vec<usize>,
    pub durs: Vec<f64>,
}

impl EncodedSchedule {
    pub fn seq_len(&self) -> usize {
        self.acts.len()
    }

    /// Index of the first end token.
    pub fn first_eos(&self) -> Option<usize> {
        self.acts.iter().position(|&t| t == EOS)
    }

    /// `(token, duration)` of each activity episode, in order.
    pub fn activities(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.acts
            .iter()
            .zip(&self.durs)
            .skip(1)
            .take_while(|(&t, _)| t != EOS)
            .map(|(&t, &d)| (t, d))
    }

    pub fn activity_tokens(&self) -> Vec<usize> {
        self.activities().map(|(t, _)| t).collect()
    }

    /// Number of activity episodes.
    pub fn n_activities(&self) -> usize {
        self.activities().count()
    }

    /// Checks the start token, end-token suffix, zero special durations and unit total.
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::MalformedEncoding(m.to_string()));
        if self.acts.len() != self.durs.len() {
            return bad("token and duration arrays differ in length");
        }
        if self.acts.len() < 3 {
            return bad("sequence too short");
        }
        if self.acts[0] != SOS || self.durs[0] != 0.0 {
            return bad("sequence must open with a zero-duration start token");
        }
        let Some(eos) = self.first_eos() else {
            return bad("no end token");
        };
        if eos == 1 {
            return bad("end token before any activity");
        }
        let mut total = 0.0;
        for (i, (&t, &d)) in self.acts.iter().zip(&self.durs).enumerate().skip(1) {
            if t >= vocab_len {
                return Err(Error::UnknownToken(t));
            }
            if !(0.0..=1.0).contains(&d) {
                return bad("duration outside [0, 1]");
            }
            if i < eos {
                if is_special(t) {
                    return bad("special token inside the activity sequence");
                }
                total += d;
            } else if t != EOS || d != 0.0 {
                return bad("non-padding after the first end token");
            }
        }
        if (total - 1.0).abs() > 1e-6 {
            return bad("activity durations do not sum to one day");
        }
        Ok(())
    }
}

impl fmt::Display for EncodedSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .activities()
            .map(|(t, d)| format!("{t}:{:.0}", d * DAY_MINUTES as f64))
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

pub fn encode_schedule(
    raw: &RawSchedule,
    vocab: &ActivityVocab,
    seq_len: usize,
) -> Result<EncodedSchedule> {
    raw.validate()?;
    let capacity = seq_len.saturating_sub(2);
    if raw.episodes.len() > capacity {
        return Err(Error::TooManyEpisodes {
            episodes: raw.episodes.len(),
            capacity,
        });
    }
    let mut acts = vec![EOS; seq_len];
    let mut durs = vec![0.0; seq_len];
    acts[0] = SOS;
    for (i, ep) in raw.episodes.iter().enumerate() {
        acts[i + 1] = vocab.activity_token(&ep.act)?;
        durs[i + 1] = f64::from(ep.duration()) / f64::from(DAY_MINUTES);
    }
    Ok(EncodedSchedule { acts, durs })
}

/// Inverse of [`encode_schedule`]. Episode boundaries are the cumulative
/// durations rounded to the minute, with every episode kept at least one
/// minute long and the last one ending at midnight.
pub fn decode_schedule(
    enc: &EncodedSchedule,
    vocab: &ActivityVocab,
    pid: impl Into<String>,
) -> Result<RawSchedule> {
    if enc.acts.first() != Some(&SOS) {
        return Err(Error::MalformedEncoding("missing start token".into()));
    }
    if enc.acts.len() != enc.durs.len() {
        return Err(Error::MalformedEncoding("token and duration arrays differ in length".into()));
    }
    let eos = enc.first_eos().unwrap_or(enc.acts.len());
    if eos <= 1 {
        return Err(Error::MalformedEncoding("end token before any activity".into()));
    }
    if enc.acts[eos..].iter().any(|&t| t != EOS) {
        return Err(Error::MalformedEncoding("non-padding after the first end token".into()));
    }
    let body = &enc.acts[1..eos];
    if body.iter().any(|&t| is_special(t)) {
        return Err(Error::MalformedEncoding("special token inside the activity sequence".into()));
    }
    let n = body.len() as u32;
    let mut episodes = Vec::with_capacity(body.len());
    let mut cum = 0.0;
    let mut start = 0u32;
    for (i, &tok) in body.iter().enumerate() {
        let remaining = n - 1 - i as u32;
        let end = if remaining == 0 {
            DAY_MINUTES
        } else {
            cum += enc.durs[i + 1];
            let rounded = (cum * f64::from(DAY_MINUTES)).round().max(0.0) as u32;
            rounded.max(start + 1).min(DAY_MINUTES - remaining)
        };
        episodes.push(Episode::new(vocab.name(tok)?, start, end));
        start = end;
    }
    Ok(RawSchedule::new(pid, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_episode() -> RawSchedule {
        RawSchedule::from_triples("p1", &[("home", 0, 480), ("work", 480, 1020), ("home", 1020, 1440)])
    }

    #[test]
    fn default_vocab_layout() {
        let v = ActivityVocab::default();
        assert_eq!(v.len(), 10);
        assert_eq!(v.name(SOS).unwrap(), "<sos>");
        assert_eq!(v.name(EOS).unwrap(), "<eos>");
        let acts: Vec<&str> = v.activity_names().collect();
        assert_eq!(
            acts,
            ["education", "escort", "home", "medical", "other", "shop", "visit", "work"]
        );
        let back = ActivityVocab::from_manifest(&v.to_manifest()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn manifest_rejects_reordered_tokens() {
        let text = "<sos>\n<eos>\nwork\nhome\n";
        assert!(ActivityVocab::from_manifest(text).is_err());
    }

    #[test]
    fn encodes_three_episode_day() {
        let v = ActivityVocab::default();
        let enc = encode_schedule(&three_episode(), &v, 16).unwrap();
        let home = v.token("home").unwrap();
        let work = v.token("work").unwrap();
        let mut acts = vec![SOS, home, work, home];
        acts.extend([EOS; 12]);
        assert_eq!(enc.acts, acts);
        let mut durs = vec![0.0, 1.0 / 3.0, 0.375, 7.0 / 24.0];
        durs.extend([0.0; 12]);
        for (a, b) in enc.durs.iter().zip(&durs) {
            assert!((a - b).abs() < 1e-12);
        }
        enc.validate(v.len()).unwrap();
    }

    #[test]
    fn encodes_whole_day_at_home() {
        let v = ActivityVocab::default();
        let raw = RawSchedule::from_triples("p", &[("home", 0, 1440)]);
        let enc = encode_schedule(&raw, &v, 16).unwrap();
        assert_eq!(enc.acts[..2], [SOS, v.token("home").unwrap()]);
        assert!(enc.acts[2..].iter().all(|&t| t == EOS));
        assert_eq!(enc.durs[1], 1.0);
        assert!(enc.durs[2..].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn rejects_too_many_episodes() {
        let v = ActivityVocab::default();
        let eps: Vec<Episode> = (0..15)
            .map(|i| Episode::new(if i % 2 == 0 { "home" } else { "shop" }, i * 96, (i + 1) * 96))
            .collect();
        let raw = RawSchedule::new("p", eps);
        assert!(matches!(
            encode_schedule(&raw, &v, 16),
            Err(Error::TooManyEpisodes { episodes: 15, capacity: 14 })
        ));
    }

    #[test]
    fn rejects_unknown_activity() {
        let v = ActivityVocab::default();
        let raw = RawSchedule::from_triples("p", &[("gym", 0, 1440)]);
        assert!(matches!(encode_schedule(&raw, &v, 16), Err(Error::UnknownActivity(_))));
    }

    #[test]
    fn decode_round_trips_three_episodes() {
        let v = ActivityVocab::default();
        let raw = three_episode();
        let enc = encode_schedule(&raw, &v, 16).unwrap();
        assert_eq!(decode_schedule(&enc, &v, "p1").unwrap(), raw);
    }

    #[test]
    fn decodes_half_day_split() {
        let v = ActivityVocab::default();
        let home = v.token("home").unwrap();
        let work = v.token("work").unwrap();
        let mut acts = vec![SOS, home, work];
        acts.extend([EOS; 13]);
        let mut durs = vec![0.0, 0.5, 0.5];
        durs.extend([0.0; 13]);
        let raw = decode_schedule(&EncodedSchedule { acts, durs }, &v, "x").unwrap();
        assert_eq!(raw, RawSchedule::from_triples("x", &[("home", 0, 720), ("work", 720, 1440)]));
    }

    #[test]
    fn decode_rejects_empty_schedule() {
        let v = ActivityVocab::default();
        let mut acts = vec![SOS];
        acts.extend([EOS; 15]);
        let enc = EncodedSchedule { acts, durs: vec![0.0; 16] };
        assert!(matches!(decode_schedule(&enc, &v, "x"), Err(Error::MalformedEncoding(_))));
    }

    #[test]
    fn validate_catches_broken_invariants() {
        let v = ActivityVocab::default();
        let good = encode_schedule(&three_episode(), &v, 16).unwrap();
        let mut e = good.clone();
        e.durs[1] += 0.01;
        assert!(e.validate(v.len()).is_err());
        let mut e = good.clone();
        e.acts[6] = 3;
        assert!(e.validate(v.len()).is_err());
        let mut e = good;
        e.acts[0] = 3;
        assert!(e.validate(v.len()).is_err());
    }

    fn contiguous_schedule() -> impl Strategy<Value = RawSchedule> {
        (1usize..=14)
            .prop_flat_map(|n| {
                (
                    proptest::collection::btree_set(1u32..DAY_MINUTES, n - 1),
                    proptest::collection::vec(2usize..10, n),
                )
            })
            .prop_map(|(cuts, acts)| {
                let mut bounds = vec![0];
                bounds.extend(cuts);
                bounds.push(DAY_MINUTES);
                let names = DEFAULT_ACTIVITIES;
                let eps = bounds
                    .windows(2)
                    .zip(acts)
                    .map(|(w, a)| Episode::new(names[a % names.len()], w[0], w[1]))
                    .collect();
                RawSchedule::new("p", eps)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn encode_then_decode_is_identity(raw in contiguous_schedule()) {
            let v = ActivityVocab::default();
            let enc = encode_schedule(&raw, &v, 16).unwrap();
            prop_assert!(enc.validate(v.len()).is_ok());
            prop_assert_eq!(decode_schedule(&enc, &v, "p").unwrap(), raw);
        }

        #[test]
        fn decode_then_encode_within_a_minute(
            weights in proptest::collection::vec(0.05f64..1.0, 1..=14),
            toks in proptest::collection::vec(2usize..10, 14),
        ) {
            let v = ActivityVocab::default();
            let total: f64 = weights.iter().sum();
            let mut acts = vec![EOS; 16];
            let mut durs = vec![0.0; 16];
            acts[0] = SOS;
            for (i, w) in weights.iter().enumerate() {
                acts[i + 1] = toks[i];
                durs[i + 1] = w / total;
            }
            let enc = EncodedSchedule { acts, durs };
            let raw = decode_schedule(&enc, &v, "p").unwrap();
            prop_assert!(raw.validate().is_ok());
            let back = encode_schedule(&raw, &v, 16).unwrap();
            prop_assert_eq!(&back.acts, &enc.acts);
            for (a, b) in back.durs.iter().zip(&enc.durs) {
                prop_assert!((a - b).abs() <= 1.0 / 1440.0 + 1e-12);
            }
        }
    }
}
