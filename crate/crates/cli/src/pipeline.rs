//! Data preparation, training, generation and evaluation steps shared by the
//! commands.

use std::collections::BTreeSet;
use std::path::Path;

use actsched::eval::{
    creativity_report, expectation_features, fmt, expectation_report, joint_density_report, write_expectations_csv,
    ExpectationRow, MetricReport, Role, SampleSet,
};
use actsched::scenario::{add_source_label, reweight_labels, subsample, subset_labels, LabelDistribution};
use actsched::schedule::io::{
    csv_writer, join_by_pid, read_hash, read_labels, read_schedules, read_text, write_labels, write_schedules,
};
use actsched::schedule::{preprocess, split_dataset, Sample, Split, DEFAULT_ACTIVITIES};
use actsched::trainer::{evaluate_losses, train, Trained};
use actsched::{
    decode_schedule, encode_schedule, ActivityVocab, Dataset, EncodedSchedule, Error, LabelSchema, LabelVector, Model,
    RawSchedule, Result,
};

use crate::config::RunConfig;

/// Stream offsets so that one run seed drives independent random streams.
const INIT_STREAM: u64 = 0x1;
const GENERATE_STREAM: u64 = 0x2;
const SCENARIO_STREAM: u64 = 0x3;

pub fn init_seed(seed: u64) -> u64 {
    seed ^ (INIT_STREAM << 56)
}

pub fn generate_seed(seed: u64) -> u64 {
    seed ^ (GENERATE_STREAM << 56)
}

fn scenario_seed(seed: u64) -> u64 {
    seed ^ (SCENARIO_STREAM << 56)
}

/// Default activities followed by any others seen, sorted.
pub fn infer_vocab<'a>(schedules: impl IntoIterator<Item = &'a RawSchedule>) -> Result<ActivityVocab> {
    let mut extra = BTreeSet::new();
    for s in schedules {
        for e in &s.episodes {
            if !DEFAULT_ACTIVITIES.contains(&e.act.as_str()) {
                extra.insert(e.act.clone());
            }
        }
    }
    ActivityVocab::new(DEFAULT_ACTIVITIES.iter().map(|s| s.to_string()).chain(extra))
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub vocab: ActivityVocab,
    pub schema: LabelSchema,
}

impl Prepared {
    pub fn split_set(&self, split: Split, role: Role) -> Result<SampleSet> {
        let samples: Vec<&Sample> = self.dataset.split(split).collect();
        SampleSet::new(
            samples.iter().map(|s| s.schedule.clone()).collect(),
            samples.iter().map(|s| s.labels.clone()).collect(),
            role,
        )
    }

    pub fn split_schedules(&self, split: Split) -> Vec<EncodedSchedule> {
        self.dataset.split(split).map(|s| s.schedule.clone()).collect()
    }
}

fn read_joined(schedules: &Path, labels: &Path, schema: Option<&LabelSchema>) -> Result<(LabelSchema, Vec<(RawSchedule, LabelVector)>)> {
    let raw = read_schedules(schedules)?;
    let (schema, labels) = read_labels(labels, schema)?;
    Ok((schema, join_by_pid(raw, labels)?))
}

/// Reads, tags, subsamples, projects, cleans, encodes and splits the data.
/// Days that are not home-based are dropped.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let mcfg = cfg.model_config()?;
    let sc = &cfg.scenario;
    let (mut schema, mut rows) = read_joined(&cfg.paths.schedules, &cfg.paths.labels, None)?;

    if sc.source_tag.is_some() || !sc.extra_sources.is_empty() {
        let mut tags = vec![sc.source_tag.clone().unwrap_or_else(|| "primary".into())];
        let mut sources = vec![0; rows.len()];
        for (k, src) in sc.extra_sources.iter().enumerate() {
            let (_, more) = read_joined(&src.schedules, &src.labels, Some(&schema))?;
            sources.extend(std::iter::repeat_n(k + 1, more.len()));
            rows.extend(more);
            tags.push(src.tag.clone());
        }
        let labels: Vec<LabelVector> = rows.iter().map(|(_, l)| l.clone()).collect();
        let (tagged, labels) = add_source_label(&schema, &labels, &sc.source_label, &tags, &sources)?;
        schema = tagged;
        for (row, l) in rows.iter_mut().zip(labels) {
            row.1 = l;
        }
    }

    if sc.sample_frac < 1.0 {
        let keep = subsample(rows.len(), sc.sample_frac, scenario_seed(cfg.seed))?;
        let mut slots: Vec<Option<_>> = rows.into_iter().map(Some).collect();
        rows = keep.into_iter().filter_map(|i| slots[i].take()).collect();
    }

    if let Some(names) = &sc.labels {
        let labels: Vec<LabelVector> = rows.iter().map(|(_, l)| l.clone()).collect();
        let (sub, labels) = subset_labels(&schema, &labels, names)?;
        schema = sub;
        for (row, l) in rows.iter_mut().zip(labels) {
            row.1 = l;
        }
    }

    let mut cleaned = Vec::with_capacity(rows.len());
    let mut kept = Vec::with_capacity(rows.len());
    for (s, l) in rows {
        match preprocess(&s) {
            Ok(c) => {
                cleaned.push(c);
                kept.push(l);
            }
            Err(Error::NonHomeBased(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let vocab = match &cfg.paths.vocab {
        Some(p) => ActivityVocab::from_manifest(&read_text(p)?)?,
        None => infer_vocab(&cleaned)?,
    };
    let samples = cleaned
        .iter()
        .zip(kept)
        .map(|(s, labels)| {
            Ok(Sample {
                pid: s.pid.clone(),
                schedule: encode_schedule(s, &vocab, mcfg.seq_len)?,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        dataset: split_dataset(samples, cfg.seed)?,
        vocab,
        schema,
    })
}

pub fn train_model(cfg: &RunConfig, data: &Prepared) -> Result<Trained> {
    let model = Model::new(
        cfg.model.kind,
        cfg.model_config()?,
        data.vocab.clone(),
        data.schema.clone(),
        init_seed(cfg.seed),
    )?;
    train(model, &data.dataset, &cfg.train_config())
}

/// Labels conditioning generation: the evaluation split, optionally reweighted
/// to the configured label distribution, each repeated `samples_per_label` times.
pub fn generation_labels(cfg: &RunConfig, data: &Prepared) -> Result<Vec<LabelVector>> {
    let pool: Vec<LabelVector> = data.dataset.split(cfg.eval.split).map(|s| s.labels.clone()).collect();
    let pool = match &cfg.scenario.label_dist {
        Some(p) => {
            let dist = LabelDistribution::read(p, &data.schema)?;
            reweight_labels(&pool, &data.schema, &dist, pool.len(), scenario_seed(cfg.seed))?
        }
        None => pool,
    };
    let k = cfg.eval.samples_per_label.max(1);
    Ok(pool.iter().flat_map(|l| std::iter::repeat_n(l.clone(), k)).collect())
}

/// One generated schedule per label row.
pub fn generate(model: &Model, labels: &[LabelVector], seed: u64) -> Result<Vec<EncodedSchedule>> {
    Ok(model
        .sample(labels, labels.len(), seed)?
        .into_iter()
        .map(|g| g.schedule)
        .collect())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub expectations: Vec<ExpectationRow>,
}

/// Density, feasibility, creativity (when training schedules are given) and
/// conditional expectations of `synth` against `real`.
pub fn evaluate(
    real: &SampleSet,
    synth: &SampleSet,
    train: Option<&[EncodedSchedule]>,
    schema: &LabelSchema,
    vocab: &ActivityVocab,
) -> Result<Evaluation> {
    let mut report = joint_density_report(real, synth, schema, vocab)?;
    if let Some(t) = train {
        report.creativity = Some(creativity_report(&synth.schedules, t)?);
    }
    let expectations = expectation_report(real, synth, &expectation_features(vocab), schema, vocab)?;
    Ok(Evaluation { report, expectations })
}

pub fn write_evaluation(eval: &Evaluation, dir: &Path, hash: Option<&str>) -> Result<()> {
    eval.report.write_features_csv(&dir.join("features.csv"), hash)?;
    eval.report.write_rollup_csv(&dir.join("rollup.csv"), hash)?;
    eval.report.write_summary_csv(&dir.join("summary.csv"), hash)?;
    write_expectations_csv(&eval.expectations, &dir.join("expectations.csv"), hash)
}

/// Writes `schedules.csv` and `labels.csv` under `dir`.
pub fn write_samples(
    dir: &Path,
    pids: &[String],
    schedules: &[EncodedSchedule],
    labels: &[LabelVector],
    vocab: &ActivityVocab,
    schema: &LabelSchema,
    hash: Option<&str>,
) -> Result<()> {
    if schedules.len() != labels.len() || pids.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} pids, {} schedules and {} label rows",
            pids.len(),
            schedules.len(),
            labels.len()
        )));
    }
    let raw = schedules
        .iter()
        .zip(pids)
        .map(|(s, p)| decode_schedule(s, vocab, p.clone()))
        .collect::<Result<Vec<_>>>()?;
    write_schedules(&dir.join("schedules.csv"), &raw, hash)?;
    let rows: Vec<(String, LabelVector)> = pids.iter().cloned().zip(labels.iter().cloned()).collect();
    write_labels(&dir.join("labels.csv"), schema, &rows, hash)
}

pub fn numbered_pids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Schedules and labels from a `schedules.csv` / `labels.csv` pair, as
/// written: no cleaning, so infeasible generated days stay visible.
pub struct SampleDir {
    pub schema: LabelSchema,
    pub schedules: Vec<RawSchedule>,
    pub labels: Vec<LabelVector>,
    pub hash: Option<String>,
}

impl SampleDir {
    pub fn read(dir: &Path, schema: Option<&LabelSchema>) -> Result<Self> {
        let path = dir.join("schedules.csv");
        let hash = read_hash(&path)?;
        let (schema, rows) = read_joined(&path, &dir.join("labels.csv"), schema)?;
        let (schedules, labels) = rows.into_iter().unzip();
        Ok(Self {
            schema,
            schedules,
            labels,
            hash,
        })
    }

    pub fn max_episodes(&self) -> usize {
        self.schedules.iter().map(|s| s.episodes.len()).max().unwrap_or(1)
    }

    pub fn encode(&self, vocab: &ActivityVocab, seq_len: usize, role: Role) -> Result<SampleSet> {
        let enc = self
            .schedules
            .iter()
            .map(|s| encode_schedule(s, vocab, seq_len))
            .collect::<Result<Vec<_>>>()?;
        SampleSet::new(enc, self.labels.clone(), role)
    }
}

pub fn write_losses(trained: &Trained, data: &Prepared, path: &Path, hash: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    let e = |err| Error::csv(path, err);
    w.write_record(["split", "activity_nll", "duration_mse", "kld", "samples"]).map_err(e)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        let l = evaluate_losses(&trained.model, &data.dataset, split)?;
        w.write_record([
            split.as_str().to_string(),
            fmt(l.activity_nll),
            fmt(l.duration_mse),
            fmt(l.kld),
            l.samples.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}
