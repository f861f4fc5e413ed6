//! Evaluation of synthetic schedules against real ones: joint density
//! estimation by label category, feasibility, creativity and conditional
//! expected values.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::io::csv_writer;
use crate::schedule::{ActivityVocab, EncodedSchedule, LabelSchema, LabelVector, HOME, NO_REPEAT_ACTIVITIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Real,
    Synthetic,
}

/// Schedules with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub schedules: Vec<EncodedSchedule>,
    pub labels: Vec<LabelVector>,
    pub role: Role,
}

impl SampleSet {
    pub fn new(schedules: Vec<EncodedSchedule>, labels: Vec<LabelVector>, role: Role) -> Result<Self> {
        if schedules.is_empty() {
            return Err(Error::Empty("sample set".into()));
        }
        if schedules.len() != labels.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} schedules but {} label vectors",
                schedules.len(),
                labels.len()
            )));
        }
        Ok(Self { schedules, labels, role })
    }

    pub fn len(&self) -> usize {
        self.schedules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedules.is_empty()
    }
}

/// Exact earth-mover distance between two empirical distributions on the line.
pub fn emd_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("emd sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut x = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        // advance past every point at x
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    Participations,
    Transitions,
    Timing,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Participations, Domain::Transitions, Domain::Timing];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Participations => "participations",
            Domain::Transitions => "transitions",
            Domain::Timing => "timing",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Domain::Participations => "Participations",
            Domain::Transitions => "Transitions",
            Domain::Timing => "Timing",
        }
    }
}

/// Per-schedule summary used by every feature family.
#[derive(Debug, Clone)]
struct Profile {
    counts: Vec<u32>,
    length: u32,
    transitions: BTreeMap<(usize, usize), u32>,
    /// `(token, occurrence) -> (start, duration)`.
    timing: Vec<((usize, u32), f64, f64)>,
}

fn profile(s: &EncodedSchedule, vocab_len: usize) -> Profile {
    let acts: Vec<(usize, f64)> = s.activities().collect();
    let mut counts = vec![0u32; vocab_len];
    let mut transitions = BTreeMap::new();
    let mut timing = Vec::with_capacity(acts.len());
    let mut start = 0.0;
    for (k, &(t, d)) in acts.iter().enumerate() {
        timing.push(((t, counts[t]), start, d));
        counts[t] += 1;
        start += d;
        if k + 1 < acts.len() {
            *transitions.entry((t, acts[k + 1].0)).or_default() += 1;
        }
    }
    Profile {
        counts,
        length: acts.len() as u32,
        transitions,
        timing,
    }
}

fn names(vocab: &ActivityVocab, t: usize) -> &str {
    vocab.name(t).unwrap_or("?")
}

/// Per-schedule occurrence count of every activity, plus `length` (number of episodes).
pub fn participation_features(set: &SampleSet, vocab: &ActivityVocab) -> BTreeMap<String, Vec<f64>> {
    let profiles: Vec<Profile> = set.schedules.iter().map(|s| profile(s, vocab.len())).collect();
    let mut out = BTreeMap::new();
    for t in vocab.activity_tokens() {
        out.insert(names(vocab, t).to_string(), profiles.iter().map(|p| f64::from(p.counts[t])).collect());
    }
    out.insert("length".to_string(), profiles.iter().map(|p| f64::from(p.length)).collect());
    out
}

/// Per-schedule count of every observed ordered pair of adjacent activities (`a>b`).
pub fn transition_features(set: &SampleSet, vocab: &ActivityVocab) -> BTreeMap<String, Vec<f64>> {
    let profiles: Vec<Profile> = set.schedules.iter().map(|s| profile(s, vocab.len())).collect();
    let keys: BTreeSet<(usize, usize)> = profiles.iter().flat_map(|p| p.transitions.keys().copied()).collect();
    keys.into_iter()
        .map(|k| {
            let name = format!("{}>{}", names(vocab, k.0), names(vocab, k.1));
            let v = profiles.iter().map(|p| f64::from(p.transitions.get(&k).copied().unwrap_or(0))).collect();
            (name, v)
        })
        .collect()
}

/// Start times and durations, in fractional days, of every activity
/// occurrence (`work0` is the first work episode of a schedule).
pub fn timing_features(set: &SampleSet, vocab: &ActivityVocab) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
    let mut out: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &set.schedules {
        for ((t, k), start, d) in profile(s, vocab.len()).timing {
            let e = out.entry(format!("{}{k}", names(vocab, t))).or_default();
            e.0.push(start);
            e.1.push(d);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub domain: Domain,
    pub feature: String,
    pub label: String,
    pub category: String,
    pub real_mean: f64,
    pub synth_mean: f64,
    pub emd: f64,
    pub n_real: usize,
    pub n_synth: usize,
}

/// Domain distance `D_c` of one label category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub label: String,
    pub category: String,
    pub domain: Domain,
    pub distance: f64,
    pub n_real: usize,
    pub n_synth: usize,
    /// One side had no samples in this category and the full set stood in for it.
    pub fallback: bool,
}

/// Domain distance `D_l` of one label variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub domain: Domain,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub non_home_based: f64,
    pub consecutive: f64,
    pub invalid: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Creativity {
    pub homogeneity: f64,
    pub conservatism: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub features: Vec<FeatureRow>,
    pub categories: Vec<CategoryRow>,
    pub labels: Vec<LabelRow>,
    /// Unconditioned distance per domain.
    pub combined: BTreeMap<Domain, f64>,
    /// `D_joint` per domain: the mean of the label distances.
    pub joint: BTreeMap<Domain, f64>,
    pub feasibility: Feasibility,
    pub creativity: Option<Creativity>,
}

impl MetricReport {
    pub fn joint(&self, d: Domain) -> f64 {
        self.joint[&d]
    }

    pub fn category(&self, label: &str, category: &str, d: Domain) -> Option<&CategoryRow> {
        self.categories
            .iter()
            .find(|r| r.label == label && r.category == category && r.domain == d)
    }

    pub fn label(&self, label: &str, d: Domain) -> Option<&LabelRow> {
        self.labels.iter().find(|r| r.label == label && r.domain == d)
    }

    pub fn write_features_csv(&self, path: &Path, hash: Option<&str>) -> Result<()> {
        let mut w = csv_writer(path, hash)?;
        let e = |err| Error::csv(path, err);
        w.write_record([
            "domain", "feature", "label", "category", "real_mean", "synth_mean", "emd", "n_real", "n_synth",
        ])
        .map_err(e)?;
        for r in &self.features {
            w.write_record([
                r.domain.as_str().to_string(),
                r.feature.clone(),
                r.label.clone(),
                r.category.clone(),
                fmt(r.real_mean),
                fmt(r.synth_mean),
                fmt(r.emd),
                r.n_real.to_string(),
                r.n_synth.to_string(),
            ])
            .map_err(e)?;
        }
        w.flush().map_err(|err| Error::io(path, err))
    }

    /// Category, label and domain distances in one long table.
    pub fn write_rollup_csv(&self, path: &Path, hash: Option<&str>) -> Result<()> {
        let mut w = csv_writer(path, hash)?;
        let e = |err| Error::csv(path, err);
        w.write_record(["level", "domain", "label", "category", "distance", "n_real", "n_synth", "fallback"])
            .map_err(e)?;
        for r in &self.categories {
            w.write_record([
                "category",
                r.domain.as_str(),
                &r.label,
                &r.category,
                &fmt(r.distance),
                &r.n_real.to_string(),
                &r.n_synth.to_string(),
                if r.fallback { "1" } else { "0" },
            ])
            .map_err(e)?;
        }
        for r in &self.labels {
            w.write_record(["label", r.domain.as_str(), &r.label, "", &fmt(r.distance), "", "", ""])
                .map_err(e)?;
        }
        for (d, v) in &self.combined {
            w.write_record(["combined", d.as_str(), "", "", &fmt(*v), "", "", ""]).map_err(e)?;
        }
        for (d, v) in &self.joint {
            w.write_record(["joint", d.as_str(), "", "", &fmt(*v), "", "", ""]).map_err(e)?;
        }
        w.flush().map_err(|err| Error::io(path, err))
    }

    /// Headline rows: domain distances, feasibility and creativity.
    pub fn summary(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = Domain::ALL.iter().map(|d| (d.title().to_string(), self.joint[d])).collect();
        rows.push(("Not Home-based".into(), self.feasibility.non_home_based));
        rows.push(("Consecutive".into(), self.feasibility.consecutive));
        rows.push(("Invalid (Combined)".into(), self.feasibility.invalid));
        if let Some(c) = self.creativity {
            rows.push(("Homogeneity".into(), c.homogeneity));
            rows.push(("Conservatism".into(), c.conservatism));
        }
        rows
    }

    pub fn write_summary_csv(&self, path: &Path, hash: Option<&str>) -> Result<()> {
        let mut w = csv_writer(path, hash)?;
        let e = |err| Error::csv(path, err);
        w.write_record(["metric", "value"]).map_err(e)?;
        for (k, v) in self.summary() {
            w.write_record([k, fmt(v)]).map_err(e)?;
        }
        w.flush().map_err(|err| Error::io(path, err))
    }
}

/// Shortest text that round-trips the value.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct Side<'a> {
    profiles: &'a [Profile],
    idx: Vec<usize>,
}

impl Side<'_> {
    fn values(&self, f: impl Fn(&Profile) -> f64) -> Vec<f64> {
        self.idx.iter().map(|&i| f(&self.profiles[i])).collect()
    }

    fn timing(&self) -> BTreeMap<(usize, u32), (Vec<f64>, Vec<f64>)> {
        let mut out: BTreeMap<(usize, u32), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for &i in &self.idx {
            for &(key, s, d) in &self.profiles[i].timing {
                let e = out.entry(key).or_default();
                e.0.push(s);
                e.1.push(d);
            }
        }
        out
    }
}

fn compare(real: &Side, synth: &Side, vocab: &ActivityVocab, label: &str, category: &str) -> (Vec<FeatureRow>, BTreeMap<Domain, f64>) {
    let mut rows = Vec::new();
    let row = |domain, feature: String, a: &[f64], b: &[f64]| FeatureRow {
        domain,
        feature,
        label: label.to_string(),
        category: category.to_string(),
        real_mean: mean(a),
        synth_mean: mean(b),
        emd: emd_1d(a, b).expect("non-empty sides"),
        n_real: a.len(),
        n_synth: b.len(),
    };

    let mut part = Vec::new();
    for t in vocab.activity_tokens() {
        let a = real.values(|p| f64::from(p.counts[t]));
        let b = synth.values(|p| f64::from(p.counts[t]));
        part.push(row(Domain::Participations, names(vocab, t).to_string(), &a, &b));
    }
    let a = real.values(|p| f64::from(p.length));
    let b = synth.values(|p| f64::from(p.length));
    part.push(row(Domain::Participations, "length".into(), &a, &b));

    let keys: BTreeSet<(usize, usize)> = real
        .idx
        .iter()
        .map(|&i| &real.profiles[i])
        .chain(synth.idx.iter().map(|&i| &synth.profiles[i]))
        .flat_map(|p| p.transitions.keys().copied())
        .collect();
    let mut trans = Vec::new();
    for k in keys {
        let get = |p: &Profile| f64::from(p.transitions.get(&k).copied().unwrap_or(0));
        let (a, b) = (real.values(get), synth.values(get));
        trans.push(row(
            Domain::Transitions,
            format!("{}>{}", names(vocab, k.0), names(vocab, k.1)),
            &a,
            &b,
        ));
    }

    let rt = real.timing();
    let st = synth.timing();
    let mut timing = Vec::new();
    let mut weights = Vec::new();
    for (key, (rs, rd)) in &rt {
        let Some((ss, sd)) = st.get(key) else { continue };
        let name = format!("{}{}", names(vocab, key.0), key.1);
        timing.push(row(Domain::Timing, format!("{name}.start"), rs, ss));
        timing.push(row(Domain::Timing, format!("{name}.duration"), rd, sd));
        weights.extend([rs.len() as f64; 2]);
    }

    let unweighted = |r: &[FeatureRow]| mean(&r.iter().map(|x| x.emd).collect::<Vec<_>>());
    let wsum: f64 = weights.iter().sum();
    let timing_d = if wsum > 0.0 {
        timing.iter().zip(&weights).map(|(r, w)| r.emd * w).sum::<f64>() / wsum
    } else {
        0.0
    };
    let domains = BTreeMap::from([
        (Domain::Participations, unweighted(&part)),
        (Domain::Transitions, unweighted(&trans)),
        (Domain::Timing, timing_d),
    ]);
    rows.extend(part);
    rows.extend(trans);
    rows.extend(timing);
    (rows, domains)
}

/// Joint density report of `synth` against `real`, with feasibility of the
/// synthetic set. Creativity needs the training set and is attached separately.
pub fn joint_density_report(real: &SampleSet, synth: &SampleSet, schema: &LabelSchema, vocab: &ActivityVocab) -> Result<MetricReport> {
    for l in real.labels.iter().chain(&synth.labels) {
        schema.validate(l)?;
    }
    for s in real.schedules.iter().chain(&synth.schedules) {
        if let Some(&t) = s.acts.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::UnknownToken(t));
        }
    }
    let rp: Vec<Profile> = real.schedules.iter().map(|s| profile(s, vocab.len())).collect();
    let sp: Vec<Profile> = synth.schedules.iter().map(|s| profile(s, vocab.len())).collect();
    let all = |n: usize| (0..n).collect::<Vec<_>>();

    let (mut features, combined) = compare(
        &Side { profiles: &rp, idx: all(rp.len()) },
        &Side { profiles: &sp, idx: all(sp.len()) },
        vocab,
        "all",
        "all",
    );

    let cells: Vec<(usize, usize)> = schema
        .vars
        .iter()
        .enumerate()
        .flat_map(|(v, var)| (0..var.categories.len()).map(move |c| (v, c)))
        .collect();
    let per_cell: Vec<Option<(Vec<FeatureRow>, Vec<CategoryRow>)>> = cells
        .par_iter()
        .map(|&(v, c)| {
            let pick = |set: &SampleSet| -> Vec<usize> { (0..set.len()).filter(|&i| set.labels[i].0[v] == c).collect() };
            let (ri, si) = (pick(real), pick(synth));
            if ri.is_empty() && si.is_empty() {
                return None;
            }
            let (nr, ns) = (ri.len(), si.len());
            let fallback = ri.is_empty() || si.is_empty();
            let ri = if ri.is_empty() { all(rp.len()) } else { ri };
            let si = if si.is_empty() { all(sp.len()) } else { si };
            let (label, category) = (&schema.vars[v].name, &schema.vars[v].categories[c]);
            let (rows, d) = compare(&Side { profiles: &rp, idx: ri }, &Side { profiles: &sp, idx: si }, vocab, label, category);
            let cats = Domain::ALL
                .iter()
                .map(|&dom| CategoryRow {
                    label: label.clone(),
                    category: category.clone(),
                    domain: dom,
                    distance: d[&dom],
                    n_real: nr,
                    n_synth: ns,
                    fallback,
                })
                .collect();
            Some((rows, cats))
        })
        .collect();
    let mut categories = Vec::new();
    for (rows, cats) in per_cell.into_iter().flatten() {
        features.extend(rows);
        categories.extend(cats);
    }

    let n_eval = real.len() as f64;
    let mut labels = Vec::new();
    for var in &schema.vars {
        for dom in Domain::ALL {
            let distance = categories
                .iter()
                .filter(|r| r.label == var.name && r.domain == dom)
                .map(|r| r.n_real as f64 / n_eval * r.distance)
                .sum();
            labels.push(LabelRow {
                label: var.name.clone(),
                domain: dom,
                distance,
            });
        }
    }
    let joint = Domain::ALL
        .iter()
        .map(|&dom| {
            let ds: Vec<f64> = labels.iter().filter(|r| r.domain == dom).map(|r| r.distance).collect();
            (dom, if ds.is_empty() { combined[&dom] } else { mean(&ds) })
        })
        .collect();
    Ok(MetricReport {
        features,
        categories,
        labels,
        combined,
        joint,
        feasibility: feasibility_report(synth, vocab),
        creativity: None,
    })
}

/// Share of schedules that do not start and end at home, that repeat a home,
/// work or education episode back to back, or either.
pub fn feasibility_report(set: &SampleSet, vocab: &ActivityVocab) -> Feasibility {
    let home = vocab.token(HOME);
    let no_repeat: Vec<usize> = NO_REPEAT_ACTIVITIES.iter().filter_map(|a| vocab.token(a)).collect();
    let n = set.len().max(1) as f64;
    let (mut nhb, mut cons, mut inv) = (0usize, 0usize, 0usize);
    for s in &set.schedules {
        let acts = s.activity_tokens();
        let a = acts.is_empty() || acts.first().copied() != home || acts.last().copied() != home;
        let b = acts.windows(2).any(|w| w[0] == w[1] && no_repeat.contains(&w[0]));
        nhb += usize::from(a);
        cons += usize::from(b);
        inv += usize::from(a || b);
    }
    Feasibility {
        non_home_based: nhb as f64 / n,
        consecutive: cons as f64 / n,
        invalid: inv as f64 / n,
    }
}

/// Duration bins per day used to canonicalise schedules (10 minutes).
pub const CREATIVITY_BINS: f64 = 144.0;

fn canonical(s: &EncodedSchedule) -> Vec<(usize, i64)> {
    s.activities().map(|(t, d)| (t, (d * CREATIVITY_BINS).round() as i64)).collect()
}

/// Homogeneity is the share of synthetic schedules that are repeats;
/// conservatism is the share found in the training set.
pub fn creativity_report(synth: &[EncodedSchedule], train: &[EncodedSchedule]) -> Result<Creativity> {
    if synth.is_empty() || train.is_empty() {
        return Err(Error::Empty("creativity sample".into()));
    }
    let keys: Vec<Vec<(usize, i64)>> = synth.iter().map(canonical).collect();
    let unique: HashSet<&Vec<(usize, i64)>> = keys.iter().collect();
    let seen: HashSet<Vec<(usize, i64)>> = train.iter().map(canonical).collect();
    let n = synth.len() as f64;
    Ok(Creativity {
        homogeneity: 1.0 - unique.len() as f64 / n,
        conservatism: keys.iter().filter(|k| seen.contains(*k)).count() as f64 / n,
    })
}

/// Conditional means of a named feature for one label category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationRow {
    pub label: String,
    pub category: String,
    pub feature: String,
    pub real: Option<f64>,
    pub synth: Option<f64>,
    pub n_real: usize,
    pub n_synth: usize,
}

/// Feature names understood by [`expectation_report`] for a vocabulary:
/// `trips`, `length`, `freq.<act>` and `dur.<act>`.
pub fn expectation_features(vocab: &ActivityVocab) -> Vec<String> {
    let mut f = vec!["trips".to_string(), "length".to_string()];
    for a in vocab.activity_names() {
        f.push(format!("freq.{a}"));
    }
    for a in vocab.activity_names() {
        f.push(format!("dur.{a}"));
    }
    f
}

/// Value of a named feature for one schedule.
pub fn feature_value(s: &EncodedSchedule, vocab: &ActivityVocab, feature: &str) -> Result<f64> {
    let acts: Vec<(usize, f64)> = s.activities().collect();
    let token = |name: &str| vocab.activity_token(name);
    Ok(match feature {
        "trips" => acts.len().saturating_sub(1) as f64,
        "length" => acts.len() as f64,
        f if f.starts_with("freq.") => {
            let t = token(&f[5..])?;
            acts.iter().filter(|(a, _)| *a == t).count() as f64
        }
        f if f.starts_with("dur.") => {
            let t = token(&f[4..])?;
            acts.iter().filter(|(a, _)| *a == t).map(|(_, d)| d).sum()
        }
        other => return Err(Error::InvalidConfig(format!("unknown expectation feature `{other}`"))),
    })
}

/// Per-category conditional means of each feature, real and synthetic side by
/// side, plus the unconditioned `all` rows. Empty categories give `None`.
pub fn expectation_report(
    real: &SampleSet,
    synth: &SampleSet,
    features: &[String],
    schema: &LabelSchema,
    vocab: &ActivityVocab,
) -> Result<Vec<ExpectationRow>> {
    let table = |set: &SampleSet| -> Result<Vec<Vec<f64>>> {
        set.schedules
            .iter()
            .map(|s| features.iter().map(|f| feature_value(s, vocab, f)).collect())
            .collect()
    };
    let (rt, st) = (table(real)?, table(synth)?);
    let mut rows = Vec::new();
    let mut emit = |label: &str, category: &str, keep: &dyn Fn(&LabelVector) -> bool| {
        let ri: Vec<usize> = (0..real.len()).filter(|&i| keep(&real.labels[i])).collect();
        let si: Vec<usize> = (0..synth.len()).filter(|&i| keep(&synth.labels[i])).collect();
        for (k, f) in features.iter().enumerate() {
            let m = |t: &[Vec<f64>], idx: &[usize]| {
                (!idx.is_empty()).then(|| idx.iter().map(|&i| t[i][k]).sum::<f64>() / idx.len() as f64)
            };
            rows.push(ExpectationRow {
                label: label.to_string(),
                category: category.to_string(),
                feature: f.clone(),
                real: m(&rt, &ri),
                synth: m(&st, &si),
                n_real: ri.len(),
                n_synth: si.len(),
            });
        }
    };
    emit("all", "all", &|_| true);
    for (v, var) in schema.vars.iter().enumerate() {
        for (c, cat) in var.categories.iter().enumerate() {
            emit(&var.name, cat, &|l: &LabelVector| l.0[v] == c);
        }
    }
    Ok(rows)
}

pub fn write_expectations_csv(rows: &[ExpectationRow], path: &Path, hash: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    let e = |err| Error::csv(path, err);
    w.write_record(["label", "category", "feature", "real", "synth", "n_real", "n_synth"])
        .map_err(e)?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.category.clone(),
            r.feature.clone(),
            opt(r.real),
            opt(r.synth),
            r.n_real.to_string(),
            r.n_synth.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{encode_schedule, LabelVar, RawSchedule};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> ActivityVocab {
        ActivityVocab::new(crate::schedule::DEFAULT_ACTIVITIES).unwrap()
    }

    fn enc(triples: &[(&str, u32, u32)]) -> EncodedSchedule {
        encode_schedule(&RawSchedule::from_triples("x", triples), &vocab(), 16).unwrap()
    }

    /// Exact transport cost by trying every matching (equal sizes only).
    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &mut Vec<f64>, k: usize, acc: f64, best: &mut f64) {
            if k == a.len() {
                *best = best.min(acc);
                return;
            }
            for i in k..b.len() {
                b.swap(k, i);
                go(a, b, k + 1, acc + (a[k] - b[k]).abs(), best);
                b.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        go(a, &mut b.to_vec(), 0, 0.0, &mut best);
        best / a.len() as f64
    }

    #[test]
    fn emd_examples() {
        assert_eq!(emd_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(emd_1d(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(emd_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0]).unwrap(), 0.0);
        assert!(emd_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn emd_matches_brute_force_on_equal_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let n = rng.random_range(1..=6);
            let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8)) * 0.5).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
            assert!((emd_1d(&a, &b).unwrap() - brute_force(&a, &b)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn emd_is_a_metric(
            a in proptest::collection::vec(-5.0f64..5.0, 1..8),
            b in proptest::collection::vec(-5.0f64..5.0, 1..8),
            c in proptest::collection::vec(-5.0f64..5.0, 1..8),
        ) {
            let ab = emd_1d(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - emd_1d(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= emd_1d(&a, &c).unwrap() + emd_1d(&c, &b).unwrap() + 1e-12);
            prop_assert_eq!(emd_1d(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn feature_examples() {
        let v = vocab();
        let hwh = enc(&[("home", 0, 480), ("work", 480, 1000), ("home", 1000, 1440)]);
        let h = enc(&[("home", 0, 1440)]);
        let set = SampleSet::new(vec![hwh.clone(), h.clone()], vec![LabelVector(vec![]); 2], Role::Real).unwrap();
        let p = participation_features(&set, &v);
        assert_eq!(p["home"], vec![2.0, 1.0]);
        assert_eq!(p["work"], vec![1.0, 0.0]);
        assert_eq!(p["shop"], vec![0.0, 0.0]);
        assert_eq!(p["length"], vec![3.0, 1.0]);
        let t = transition_features(&set, &v);
        assert_eq!(t.len(), 2);
        assert_eq!(t["home>work"], vec![1.0, 0.0]);
        assert_eq!(t["work>home"], vec![1.0, 0.0]);
        let single = SampleSet::new(vec![h], vec![LabelVector(vec![])], Role::Real).unwrap();
        assert!(transition_features(&single, &v).is_empty());

        let hw = EncodedSchedule {
            acts: vec![0, v.token("home").unwrap(), v.token("work").unwrap(), 1],
            durs: vec![0.0, 0.5, 0.5, 0.0],
        };
        let set = SampleSet::new(vec![hw], vec![LabelVector(vec![])], Role::Real).unwrap();
        let tm = timing_features(&set, &v);
        assert_eq!(tm["work0"], (vec![0.5], vec![0.5]));
        assert_eq!(tm["home0"], (vec![0.0], vec![0.5]));
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, role: Role) -> SampleSet {
        let acts = ["work", "shop", "education", "other", "visit"];
        let mut s = Vec::new();
        let mut l = Vec::new();
        for _ in 0..n {
            let k = rng.random_range(0..4);
            let mut t = vec![("home", 0u32, 0u32)];
            let mut at = rng.random_range(300..500);
            t[0].2 = at;
            for _ in 0..k {
                let len = rng.random_range(30..200);
                t.push((acts[rng.random_range(0..acts.len())], at, at + len));
                at += len;
            }
            t.push(("home", at, 1440));
            s.push(enc(&t));
            l.push(LabelVector(vec![rng.random_range(0..2), rng.random_range(0..3)]));
        }
        SampleSet::new(s, l, role).unwrap()
    }

    fn schema() -> LabelSchema {
        LabelSchema::new(vec![LabelVar::new("g", ["a", "b"]), LabelVar::new("w", ["x", "y", "z"])]).unwrap()
    }

    #[test]
    fn self_report_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let set = random_set(&mut rng, 40, Role::Real);
            let r = joint_density_report(&set, &set, &schema(), &vocab()).unwrap();
            assert!(r.features.iter().all(|f| f.emd == 0.0));
            assert!(r.categories.iter().all(|c| c.distance == 0.0));
            assert!(r.labels.iter().all(|c| c.distance == 0.0));
            assert!(r.joint.values().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rollups_follow_their_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = random_set(&mut rng, 60, Role::Real);
        let synth = random_set(&mut rng, 50, Role::Synthetic);
        let s = schema();
        let r = joint_density_report(&real, &synth, &s, &vocab()).unwrap();
        for dom in Domain::ALL {
            let mut ls = Vec::new();
            for var in &s.vars {
                let expect: f64 = var
                    .categories
                    .iter()
                    .map(|c| {
                        let row = r.category(&var.name, c, dom).unwrap();
                        row.n_real as f64 / 60.0 * row.distance
                    })
                    .sum();
                let got = r.label(&var.name, dom).unwrap().distance;
                assert!((got - expect).abs() < 1e-15);
                ls.push(got);
            }
            assert!((r.joint(dom) - ls.iter().sum::<f64>() / ls.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn single_category_label_equals_combined() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut real = random_set(&mut rng, 30, Role::Real);
        let mut synth = random_set(&mut rng, 30, Role::Synthetic);
        for l in real.labels.iter_mut().chain(synth.labels.iter_mut()) {
            *l = LabelVector(vec![0]);
        }
        let s = LabelSchema::new(vec![LabelVar::new("only", ["one"])]).unwrap();
        let r = joint_density_report(&real, &synth, &s, &vocab()).unwrap();
        for dom in Domain::ALL {
            assert_eq!(r.category("only", "one", dom).unwrap().distance, r.combined[&dom]);
            assert_eq!(r.label("only", dom).unwrap().distance, r.combined[&dom]);
        }
    }

    #[test]
    fn hand_computed_two_category_toy() {
        let v = vocab();
        let hwh = |a, b| enc(&[("home", 0, a), ("work", a, b), ("home", b, 1440)]);
        let h = enc(&[("home", 0, 1440)]);
        let l = |c| LabelVector(vec![c]);
        // real: category 0 = two work days at 480-1020 and 540-1020, category 1 = two home days
        let real = SampleSet::new(
            vec![hwh(480, 1020), hwh(540, 1020), h.clone(), h.clone()],
            vec![l(0), l(0), l(1), l(1)],
            Role::Real,
        )
        .unwrap();
        // synth: category 0 = one work day at 480-1020 and one home day, category 1 = two home days
        let synth = SampleSet::new(vec![hwh(480, 1020), h.clone(), h.clone(), h], vec![l(0), l(0), l(1), l(1)], Role::Synthetic)
            .unwrap();
        let s = LabelSchema::new(vec![LabelVar::new("c", ["p", "q"])]).unwrap();
        let r = joint_density_report(&real, &synth, &s, &v).unwrap();

        // participations in category p: home counts {2,2} vs {2,1} -> 0.5; work {1,1} vs {1,0} -> 0.5;
        // length {3,3} vs {3,1} -> 1.0; six other activities 0. Mean over 9 features.
        let p = r.category("c", "p", Domain::Participations).unwrap().distance;
        assert!((p - 2.0 / 9.0).abs() < 1e-15);
        // transitions: home>work and work>home each {1,1} vs {1,0} -> 0.5
        assert!((r.category("c", "p", Domain::Transitions).unwrap().distance - 0.5).abs() < 1e-15);
        // timing, weighted by real occurrences: home0 start 0 vs 0 -> 0 (w 2),
        // home0 duration {480,540} vs {480,1440} -> 450/1440 (w 2), work0 start {480,540} vs {480} -> 30/1440 (w 2),
        // work0 duration {540,480} vs {540} -> 30/1440 (w 2), home1 start {1020,1020} vs {1020} -> 0 (w 2),
        // home1 duration {420,420} vs {420} -> 0 (w 2)
        let t = r.category("c", "p", Domain::Timing).unwrap().distance;
        assert!((t - (450.0 + 30.0 + 30.0) / 1440.0 / 6.0).abs() < 1e-12);
        for dom in Domain::ALL {
            assert_eq!(r.category("c", "q", dom).unwrap().distance, 0.0);
            let dl = 0.5 * r.category("c", "p", dom).unwrap().distance;
            assert!((r.label("c", dom).unwrap().distance - dl).abs() < 1e-15);
            assert_eq!(r.joint(dom), r.label("c", dom).unwrap().distance);
        }
    }

    #[test]
    fn missing_real_category_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut real = random_set(&mut rng, 20, Role::Real);
        let synth = random_set(&mut rng, 20, Role::Synthetic);
        for l in real.labels.iter_mut() {
            l.0[0] = 0;
        }
        let r = joint_density_report(&real, &synth, &schema(), &vocab()).unwrap();
        let row = r.category("g", "b", Domain::Timing).unwrap();
        assert!(row.fallback);
        assert_eq!(row.n_real, 0);
        assert_eq!(r.label("g", Domain::Participations).unwrap().distance, r.category("g", "a", Domain::Participations).unwrap().distance);
    }

    #[test]
    fn feasibility_examples() {
        let v = vocab();
        let ok = enc(&[("home", 0, 500), ("work", 500, 1000), ("home", 1000, 1440)]);
        let nhb = enc(&[("work", 0, 500), ("home", 500, 1440)]);
        let cons = enc(&[("home", 0, 400), ("work", 400, 600), ("work", 600, 1000), ("home", 1000, 1440)]);
        let one = |s: EncodedSchedule| feasibility_report(&SampleSet::new(vec![s], vec![LabelVector(vec![])], Role::Synthetic).unwrap(), &v);
        assert_eq!(one(ok.clone()), Feasibility::default());
        assert_eq!(one(nhb).non_home_based, 1.0);
        let c = one(cons.clone());
        assert_eq!((c.consecutive, c.invalid, c.non_home_based), (1.0, 1.0, 0.0));
        let both = SampleSet::new(vec![ok, cons], vec![LabelVector(vec![]); 2], Role::Synthetic).unwrap();
        assert_eq!(feasibility_report(&both, &v).invalid, 0.5);
    }

    #[test]
    fn creativity_examples() {
        let a = enc(&[("home", 0, 500), ("work", 500, 1000), ("home", 1000, 1440)]);
        let b = enc(&[("home", 0, 1440)]);
        let c = enc(&[("home", 0, 600), ("shop", 600, 700), ("home", 700, 1440)]);
        let four = vec![a.clone(); 4];
        assert_eq!(creativity_report(&four, &[b.clone()]).unwrap().homogeneity, 0.75);
        let distinct = vec![a.clone(), b.clone(), c.clone()];
        let r = creativity_report(&distinct, &distinct).unwrap();
        assert_eq!((r.homogeneity, r.conservatism), (0.0, 1.0));
        let mut rev = distinct.clone();
        rev.reverse();
        assert_eq!(creativity_report(&rev, &[a]).unwrap(), creativity_report(&distinct, &[rev[2].clone()]).unwrap());
        // a 4-minute shift stays within the same 10-minute bin
        let near = enc(&[("home", 0, 604), ("shop", 604, 700), ("home", 700, 1440)]);
        assert_eq!(creativity_report(&[near], &[c]).unwrap().conservatism, 1.0);
    }

    #[test]
    fn expectation_rows_obey_total_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let real = random_set(&mut rng, 50, Role::Real);
        let synth = random_set(&mut rng, 40, Role::Synthetic);
        let v = vocab();
        let f = expectation_features(&v);
        let rows = expectation_report(&real, &synth, &f, &schema(), &v).unwrap();
        for feat in &f {
            let all = rows.iter().find(|r| r.label == "all" && &r.feature == feat).unwrap();
            let cats: Vec<_> = rows.iter().filter(|r| r.label == "w" && &r.feature == feat).collect();
            let weighted: f64 = cats.iter().map(|r| r.real.unwrap_or(0.0) * r.n_real as f64).sum::<f64>() / 50.0;
            assert!((weighted - all.real.unwrap()).abs() < 1e-12);
        }
        let mut one = real.clone();
        for l in one.labels.iter_mut() {
            l.0[1] = 0;
        }
        let rows = expectation_report(&one, &synth, &f, &schema(), &v).unwrap();
        let empty = rows.iter().find(|r| r.label == "w" && r.category == "z").unwrap();
        assert_eq!((empty.real, empty.n_real), (None, 0));
    }

    #[test]
    fn reports_ignore_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = random_set(&mut rng, 30, Role::Synthetic);
        let mut rev = set.clone();
        rev.schedules.reverse();
        rev.labels.reverse();
        assert_eq!(feasibility_report(&set, &vocab()), feasibility_report(&rev, &vocab()));
        assert_eq!(
            creativity_report(&set.schedules, &set.schedules[..5]).unwrap(),
            creativity_report(&rev.schedules, &set.schedules[..5]).unwrap()
        );
    }
}
