//! Synthetic populations with a known label-conditional structure.
//!
//! Labels are drawn independently from their marginals. Each label
//! combination induces a distribution over day patterns through
//! multiplicative rules, and every non-final episode of a pattern draws a
//! truncated-normal duration (fractional days) whose mean may be shifted per
//! label category. The final home episode fills the rest of the day.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::schedule::{
    io::read_text, ActivityVocab, Episode, LabelSchema, LabelVar, LabelVector, RawSchedule, DAY_MINUTES,
    DEFAULT_ACTIVITIES, HOME, NO_REPEAT_ACTIVITIES,
};

pub const MAX_PATTERN_EPISODES: usize = 6;
const MIN_FRACTION: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMarginal {
    pub name: String,
    pub categories: Vec<String>,
    pub probs: Vec<f64>,
}

/// Normal distribution truncated to `[lo, hi]`, in fractional days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncNormal {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncNormal {
    fn shifted(self, by: f64) -> Self {
        Self {
            mean: self.mean + by,
            ..self
        }
    }

    fn std_bounds(&self) -> (f64, f64) {
        ((self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd)
    }

    pub fn expectation(&self) -> f64 {
        if self.sd == 0.0 {
            return self.mean.clamp(self.lo, self.hi);
        }
        let n = Normal::standard();
        let (a, b) = self.std_bounds();
        let z = n.cdf(b) - n.cdf(a);
        self.mean + self.sd * (n.pdf(a) - n.pdf(b)) / z
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.sd == 0.0 {
            return self.mean.clamp(self.lo, self.hi);
        }
        let n = Normal::standard();
        let (a, b) = self.std_bounds();
        let (ca, cb) = (n.cdf(a), n.cdf(b));
        let u = ca + (cb - ca) * rng.random::<f64>();
        (self.mean + self.sd * n.inverse_cdf(u)).clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pattern {
    pub name: String,
    pub acts: Vec<String>,
    /// One per episode except the last, which fills the day.
    pub durations: Vec<TruncNormal>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Multiplies pattern weights for samples whose `variable` is `category`.
/// Patterns not listed are multiplied by `others`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub variable: String,
    pub category: String,
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub others: f64,
}

/// Shifts the mean duration of every `activity` episode for samples whose
/// `variable` is `category`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationEffect {
    pub variable: String,
    pub category: String,
    pub activity: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub labels: Vec<LabelMarginal>,
    pub patterns: Vec<Pattern>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub duration_effects: Vec<DurationEffect>,
}

impl GeneratorSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?).map_err(|e| match e {
            Error::InvalidSpec(m) => Error::InvalidSpec(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn schema(&self) -> LabelSchema {
        LabelSchema {
            vars: self
                .labels
                .iter()
                .map(|l| LabelVar::new(l.name.clone(), l.categories.iter().cloned()))
                .collect(),
        }
    }

    /// The default activities plus any others the patterns use.
    pub fn vocab(&self) -> ActivityVocab {
        let mut acts: Vec<String> = DEFAULT_ACTIVITIES.iter().map(|s| s.to_string()).collect();
        for p in &self.patterns {
            for a in &p.acts {
                if !acts.contains(a) {
                    acts.push(a.clone());
                }
            }
        }
        ActivityVocab::new(acts).expect("non-empty vocabulary")
    }

    fn var(&self, name: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown label variable `{name}`")))
    }

    fn cat(&self, var: usize, name: &str) -> Result<usize> {
        self.labels[var]
            .categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown category `{name}` of `{}`", self.labels[var].name)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.labels.is_empty() || self.patterns.is_empty() {
            return bad("a spec needs labels and patterns".into());
        }
        LabelSchema::new(self.schema().vars).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        for l in &self.labels {
            if l.probs.len() != l.categories.len() {
                return bad(format!("`{}` has {} probabilities for {} categories", l.name, l.probs.len(), l.categories.len()));
            }
            if l.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (l.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("probabilities of `{}` must lie in [0, 1] and sum to 1", l.name));
            }
        }
        for p in &self.patterns {
            let n = p.acts.len();
            if n == 0 || n > MAX_PATTERN_EPISODES {
                return bad(format!("pattern `{}` must have 1 to {MAX_PATTERN_EPISODES} episodes", p.name));
            }
            if p.acts[0] != HOME || p.acts[n - 1] != HOME {
                return bad(format!("pattern `{}` must start and end at home", p.name));
            }
            if p.acts.windows(2).any(|w| w[0] == w[1] && NO_REPEAT_ACTIVITIES.contains(&w[0].as_str())) {
                return bad(format!("pattern `{}` repeats a home, work or education episode", p.name));
            }
            if p.durations.len() != n - 1 {
                return bad(format!("pattern `{}` needs {} durations", p.name, n - 1));
            }
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return bad(format!("pattern `{}` has a bad weight", p.name));
            }
            if self.patterns.iter().filter(|q| q.name == p.name).count() > 1 {
                return bad(format!("pattern name `{}` is repeated", p.name));
            }
        }
        for r in &self.rules {
            let v = self.var(&r.variable)?;
            self.cat(v, &r.category)?;
            for (name, &w) in &r.weights {
                if !self.patterns.iter().any(|p| &p.name == name) {
                    return bad(format!("rule names unknown pattern `{name}`"));
                }
                if !(w >= 0.0 && w.is_finite()) {
                    return bad(format!("rule weight for `{name}` must be non-negative"));
                }
            }
            if !(r.others >= 0.0 && r.others.is_finite()) {
                return bad("rule `others` weight must be non-negative".into());
            }
        }
        for e in &self.duration_effects {
            let v = self.var(&e.variable)?;
            self.cat(v, &e.category)?;
        }
        for combo in self.combinations() {
            let probs = self.pattern_probs(&combo);
            if probs.iter().sum::<f64>() <= 0.0 {
                return bad(format!("no pattern is possible for labels {:?}", combo.0));
            }
            for (p, &pp) in self.patterns.iter().zip(&probs) {
                if pp == 0.0 {
                    continue;
                }
                let d = self.durations_for(p, &combo)?;
                if d.iter().any(|t| t.lo < MIN_FRACTION || t.hi < t.lo || t.sd < 0.0 || !t.mean.is_finite()) {
                    return bad(format!("pattern `{}` has duration bounds outside [{MIN_FRACTION}, 1)", p.name));
                }
                if d.iter().map(|t| t.hi).sum::<f64>() > 1.0 - MIN_FRACTION {
                    return bad(format!("upper duration bounds of `{}` leave no room for the final episode", p.name));
                }
            }
        }
        Ok(())
    }

    /// Every label combination, in lexicographic order.
    pub fn combinations(&self) -> Vec<LabelVector> {
        let mut out = vec![LabelVector(Vec::new())];
        for l in &self.labels {
            out = out
                .into_iter()
                .flat_map(|v| {
                    (0..l.categories.len()).map(move |c| {
                        let mut x = v.0.clone();
                        x.push(c);
                        LabelVector(x)
                    })
                })
                .collect();
        }
        out
    }

    pub fn combination_prob(&self, labels: &LabelVector) -> f64 {
        self.labels.iter().zip(&labels.0).map(|(l, &c)| l.probs[c]).product()
    }

    fn rule_applies(&self, var: &str, cat: &str, labels: &LabelVector) -> bool {
        self.labels
            .iter()
            .zip(&labels.0)
            .any(|(l, &c)| l.name == var && l.categories[c] == cat)
    }

    /// Normalized pattern probabilities for a label combination (all zero if impossible).
    pub fn pattern_probs(&self, labels: &LabelVector) -> Vec<f64> {
        let mut w: Vec<f64> = self.patterns.iter().map(|p| p.weight).collect();
        for r in &self.rules {
            if self.rule_applies(&r.variable, &r.category, labels) {
                for (p, wp) in self.patterns.iter().zip(w.iter_mut()) {
                    *wp *= r.weights.get(&p.name).copied().unwrap_or(r.others);
                }
            }
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        w
    }

    fn durations_for(&self, p: &Pattern, labels: &LabelVector) -> Result<Vec<TruncNormal>> {
        Ok(p.acts
            .iter()
            .zip(&p.durations)
            .map(|(a, d)| {
                let shift: f64 = self
                    .duration_effects
                    .iter()
                    .filter(|e| &e.activity == a && self.rule_applies(&e.variable, &e.category, labels))
                    .map(|e| e.shift)
                    .sum();
                d.shifted(shift)
            })
            .collect())
    }

    fn draw_labels(&self, rng: &mut impl Rng) -> LabelVector {
        LabelVector(self.labels.iter().map(|l| draw_index(&l.probs, rng)).collect())
    }

    fn draw_one(&self, pid: String, rng: &mut impl Rng) -> Result<(RawSchedule, LabelVector)> {
        let labels = self.draw_labels(rng);
        let pattern = &self.patterns[draw_index(&self.pattern_probs(&labels), rng)];
        let durs: Vec<f64> = self.durations_for(pattern, &labels)?.iter().map(|d| d.sample(rng)).collect();
        let mut cum = 0.0;
        let mut start = 0;
        let mut episodes = Vec::with_capacity(pattern.acts.len());
        for (i, act) in pattern.acts.iter().enumerate() {
            let end = if i + 1 == pattern.acts.len() {
                DAY_MINUTES
            } else {
                cum += durs[i];
                (cum * f64::from(DAY_MINUTES)).round() as u32
            };
            episodes.push(Episode::new(act.clone(), start, end));
            start = end;
        }
        Ok((RawSchedule::new(pid, episodes), labels))
    }
}

fn draw_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `n` independent draws. Sample `i` uses its own stream of the spec seed, so
/// the population does not depend on the number of threads.
pub fn generate_population(spec: &GeneratorSpec, n: usize) -> Result<Vec<(RawSchedule, LabelVector)>> {
    if n == 0 {
        return Err(Error::InvalidSpec("population size must be >= 1".into()));
    }
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            spec.draw_one(format!("{i}"), &mut rng)
        })
        .collect()
}

/// Expected schedule features, conditional on one label category or on nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationRow {
    /// Label variable, or `all` for the unconditioned row.
    pub variable: String,
    pub category: String,
    /// Probability of the conditioning event.
    pub share: f64,
    /// Expected number of episodes per schedule.
    pub length: f64,
    /// Expected episode count per activity.
    pub participation: BTreeMap<String, f64>,
    /// Expected total time per activity, fractional days.
    pub duration: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    length: f64,
    participation: BTreeMap<String, f64>,
    duration: BTreeMap<String, f64>,
}

impl Moments {
    fn add_scaled(&mut self, other: &Moments, w: f64) {
        self.length += w * other.length;
        for (k, v) in &other.participation {
            *self.participation.entry(k.clone()).or_default() += w * v;
        }
        for (k, v) in &other.duration {
            *self.duration.entry(k.clone()).or_default() += w * v;
        }
    }
}

fn combo_moments(spec: &GeneratorSpec, labels: &LabelVector, activities: &[String]) -> Result<Moments> {
    let mut m = Moments {
        participation: activities.iter().map(|a| (a.clone(), 0.0)).collect(),
        duration: activities.iter().map(|a| (a.clone(), 0.0)).collect(),
        ..Moments::default()
    };
    for (p, &pp) in spec.patterns.iter().zip(&spec.pattern_probs(labels)) {
        if pp == 0.0 {
            continue;
        }
        let durs = spec.durations_for(p, labels)?;
        m.length += pp * p.acts.len() as f64;
        let mut used = 0.0;
        for (i, a) in p.acts.iter().enumerate() {
            *m.participation.get_mut(a).expect("vocabulary activity") += pp;
            let d = if i + 1 == p.acts.len() {
                1.0 - used
            } else {
                let e = durs[i].expectation();
                used += e;
                e
            };
            *m.duration.get_mut(a).expect("vocabulary activity") += pp * d;
        }
    }
    Ok(m)
}

/// Closed-form expectations for every label category plus the unconditioned row.
pub fn analytic_expectations(spec: &GeneratorSpec) -> Result<Vec<ExpectationRow>> {
    spec.validate()?;
    let activities: Vec<String> = spec.vocab().activity_names().map(str::to_string).collect();
    let combos = spec.combinations();
    let per_combo: Vec<(f64, Moments)> = combos
        .iter()
        .map(|c| Ok((spec.combination_prob(c), combo_moments(spec, c, &activities)?)))
        .collect::<Result<_>>()?;
    let row = |variable: &str, category: &str, filter: &dyn Fn(&LabelVector) -> bool| {
        let mut acc = Moments::default();
        let mut share = 0.0;
        for (c, (p, m)) in combos.iter().zip(&per_combo) {
            if filter(c) {
                share += p;
                acc.add_scaled(m, *p);
            }
        }
        let norm = if share > 0.0 { 1.0 / share } else { 0.0 };
        let scale = |x: BTreeMap<String, f64>| x.into_iter().map(|(k, v)| (k, v * norm)).collect();
        ExpectationRow {
            variable: variable.to_string(),
            category: category.to_string(),
            share,
            length: acc.length * norm,
            participation: scale(acc.participation),
            duration: scale(acc.duration),
        }
    };
    let mut rows = vec![row("all", "all", &|_| true)];
    for (v, l) in spec.labels.iter().enumerate() {
        for (c, name) in l.categories.iter().enumerate() {
            rows.push(row(&l.name, name, &|x: &LabelVector| x.0[v] == c));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::preprocess;

    fn tn(mean: f64, sd: f64, lo: f64, hi: f64) -> TruncNormal {
        TruncNormal { mean, sd, lo, hi }
    }

    fn spec(p_work_employed: f64, p_work_unemployed: f64) -> GeneratorSpec {
        let rule = |cat: &str, p: f64| Rule {
            variable: "status".into(),
            category: cat.into(),
            weights: [("work_day".to_string(), p), ("home_day".to_string(), 1.0 - p)].into(),
            others: 0.0,
        };
        GeneratorSpec {
            seed: 9,
            labels: vec![
                LabelMarginal {
                    name: "status".into(),
                    categories: vec!["employed".into(), "unemployed".into()],
                    probs: vec![0.5, 0.5],
                },
                LabelMarginal {
                    name: "sex".into(),
                    categories: vec!["f".into(), "m".into()],
                    probs: vec![0.4, 0.6],
                },
            ],
            patterns: vec![
                Pattern {
                    name: "work_day".into(),
                    acts: vec!["home".into(), "work".into(), "home".into()],
                    durations: vec![tn(0.33, 0.03, 0.2, 0.45), tn(0.38, 0.05, 0.2, 0.5)],
                    weight: 1.0,
                },
                Pattern {
                    name: "home_day".into(),
                    acts: vec!["home".into(), "shop".into(), "home".into()],
                    durations: vec![tn(0.45, 0.05, 0.3, 0.6), tn(0.05, 0.02, 0.01, 0.2)],
                    weight: 1.0,
                },
            ],
            rules: vec![rule("employed", p_work_employed), rule("unemployed", p_work_unemployed)],
            duration_effects: vec![DurationEffect {
                variable: "sex".into(),
                category: "f".into(),
                activity: "work".into(),
                shift: -0.04,
            }],
        }
    }

    fn work_rate(pop: &[(RawSchedule, LabelVector)], status: usize) -> (f64, usize) {
        let cls: Vec<_> = pop.iter().filter(|(_, l)| l.0[0] == status).collect();
        let w = cls.iter().filter(|(s, _)| s.episodes.iter().any(|e| e.act == "work")).count();
        (w as f64 / cls.len() as f64, cls.len())
    }

    #[test]
    fn degenerate_rules_are_exact() {
        let s = spec(1.0, 0.0);
        let pop = generate_population(&s, 1000).unwrap();
        assert_eq!(work_rate(&pop, 0).0, 1.0);
        assert_eq!(work_rate(&pop, 1).0, 0.0);
        let rows = analytic_expectations(&s).unwrap();
        let get = |c: &str| rows.iter().find(|r| r.category == c).unwrap().participation["work"];
        assert_eq!(get("employed"), 1.0);
        assert_eq!(get("unemployed"), 0.0);
    }

    #[test]
    fn mixture_rate_concentrates() {
        let s = spec(0.8, 0.1);
        let pop = generate_population(&s, 10_000).unwrap();
        let (r, _) = work_rate(&pop, 0);
        assert!((r - 0.8).abs() < 0.02, "{r}");
        let rows = analytic_expectations(&s).unwrap();
        let emp = rows.iter().find(|r| r.category == "employed").unwrap();
        assert!((emp.participation["work"] - 0.8).abs() < 1e-12);
        assert!((emp.participation["home"] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_population_is_an_error() {
        assert!(generate_population(&spec(1.0, 0.0), 0).is_err());
    }

    #[test]
    fn truncated_normal_mean_matches_monte_carlo() {
        let d = tn(0.3, 0.1, 0.25, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let mc = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mc - d.expectation()).abs() < 1e-3, "{mc} vs {}", d.expectation());
        assert!(d.expectation() > 0.3);
    }

    #[test]
    fn schedules_pass_preprocessing_unchanged() {
        let pop = generate_population(&spec(0.7, 0.2), 2000).unwrap();
        for (s, _) in &pop {
            s.validate().unwrap();
            assert_eq!(&preprocess(s).unwrap(), s);
        }
    }

    #[test]
    fn large_draw_converges_to_expectations() {
        let s = spec(0.7, 0.2);
        let pop = generate_population(&s, 100_000).unwrap();
        let rows = analytic_expectations(&s).unwrap();
        for row in rows.iter().filter(|r| r.variable != "all") {
            let v = s.var(&row.variable).unwrap();
            let c = s.cat(v, &row.category).unwrap();
            let cls: Vec<&RawSchedule> = pop.iter().filter(|(_, l)| l.0[v] == c).map(|(s, _)| s).collect();
            let n = cls.len() as f64;
            for act in ["work", "shop", "home"] {
                let xs: Vec<f64> = cls
                    .iter()
                    .map(|s| {
                        s.episodes.iter().filter(|e| e.act == act).map(|e| e.duration()).sum::<u32>() as f64
                            / f64::from(DAY_MINUTES)
                    })
                    .collect();
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                // minute rounding adds up to half a minute of bias
                let tol = 3.0 * (var / n).sqrt() + 0.5 / 1440.0;
                let expect = row.duration[act];
                assert!((mean - expect).abs() < tol, "{} {} {act}: {mean} vs {expect}", row.variable, row.category);
            }
        }
    }

    #[test]
    fn generation_ignores_thread_count() {
        let s = spec(0.6, 0.3);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate_population(&s, 500).unwrap());
        let b = four.install(|| generate_population(&s, 500).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(1.0, 0.0);
        s.labels[0].probs = vec![0.6, 0.6];
        assert!(s.validate().is_err());
        let mut s = spec(1.0, 0.0);
        s.patterns[0].acts[0] = "work".into();
        assert!(s.validate().is_err());
        let mut s = spec(1.0, 0.0);
        s.patterns[0].durations[0].hi = 0.9;
        assert!(s.validate().is_err());
        let mut s = spec(1.0, 0.0);
        s.rules[0].weights.insert("nope".into(), 1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s = spec(0.8, 0.1);
        let text = toml::to_string(&s).unwrap();
        assert_eq!(GeneratorSpec::from_toml(&text).unwrap(), s);
        assert!(GeneratorSpec::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
    }
}
