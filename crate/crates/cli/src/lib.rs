//! The `actsched` command line tool: synthetic populations, training,
//! generation, evaluation, mutual information studies and run reports.

pub mod config;
pub mod pipeline;
pub mod report;

use std::path::{Path, PathBuf};

use actsched::eval::{fmt, Role, SampleSet};
use actsched::mine::{entanglement_study, write_mi_csv};
use actsched::scenario::{reweight_labels, LabelDistribution};
use actsched::schedule::io::{csv_writer, read_labels, write_labels, write_schedules, write_text};
use actsched::schedule::Split;
use actsched::synthpop::{analytic_expectations, generate_population, GeneratorSpec};
use actsched::{ActivityVocab, Error, LabelSchema, LabelVector, Model, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::RunConfig;
use pipeline::{Prepared, SampleDir};

/// Checkpoint metadata key holding the run config hash.
pub const RUN_HASH_KEY: &str = "run_hash";

#[derive(Debug, Parser)]
#[command(name = "actsched", version, about = "Conditional generation and evaluation of activity schedules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic population from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prepare the data, train a model and write its checkpoint.
    Train(RunArgs),
    /// Generate schedules from a checkpoint for a set of target labels.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labels CSV whose rows condition generation.
        #[arg(long)]
        target: PathBuf,
        /// `variable,category,prob` marginals the targets are resampled to.
        #[arg(long)]
        label_dist: Option<PathBuf>,
        /// Number of schedules; defaults to the number of target rows.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare synthetic schedules with real ones.
    Evaluate {
        /// Directory with the real `schedules.csv` and `labels.csv`.
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// Training samples, for conservatism.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Label schema manifest; inferred from the real labels when absent.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Checkpoint that produced `synth`; its config hash must match.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mutual information between schedules, labels and model embeddings,
    /// over every prepared sample.
    Mi {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Mean and variance of matching CSV reports from several runs.
    Report {
        #[arg(long, num_args = 2.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, generate and evaluate for consecutive seeds, then report.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
}

/// Config file plus flag overrides.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sample_frac: Option<f64>,
    /// Comma separated label variables to keep.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long)]
    pub label_dist: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        if let Some(f) = self.sample_frac {
            cfg.scenario.sample_frac = f;
        }
        if let Some(l) = &self.labels {
            cfg.scenario.labels = Some(l.clone());
        }
        if let Some(d) = &self.label_dist {
            cfg.scenario.label_dist = Some(d.clone());
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, n, seed, out } => synth(&spec, n, seed, &out),
        Command::Train(args) => train(&args.resolve()?).map(|_| ()),
        Command::Generate {
            checkpoint,
            target,
            label_dist,
            n,
            seed,
            out,
        } => generate(&checkpoint, &target, label_dist.as_deref(), n, seed, &out),
        Command::Evaluate {
            real,
            synth,
            train,
            schema,
            checkpoint,
            out,
        } => evaluate(&real, &synth, train.as_deref(), schema.as_deref(), checkpoint.as_deref(), &out),
        Command::Mi { run, checkpoints, runs } => mi(&run.resolve()?, &checkpoints, runs),
        Command::Report { inputs, out } => report::merge_files(&inputs, &out),
        Command::Run { run, runs } => run_seeds(&run.resolve()?, runs),
    }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn synth(spec_path: &Path, n: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = actsched::schedule::io::read_text(spec_path)?;
    let mut spec = GeneratorSpec::from_toml(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let hash = sha_hex(&[text.as_bytes(), &(n as u64).to_le_bytes(), &spec.seed.to_le_bytes()]);
    let h = Some(hash.as_str());
    let schema = spec.schema();
    let pop = generate_population(&spec, n)?;
    let (schedules, labels): (Vec<_>, Vec<_>) = pop.into_iter().unzip();
    write_schedules(&out.join("schedules.csv"), &schedules, h)?;
    let rows: Vec<(String, LabelVector)> = schedules.iter().map(|s| s.pid.clone()).zip(labels).collect();
    write_labels(&out.join("labels.csv"), &schema, &rows, h)?;
    write_text(&out.join("vocab.txt"), &spec.vocab().to_manifest())?;
    write_text(&out.join("schema.txt"), &schema.to_manifest())?;

    let path = out.join("oracle.csv");
    let mut w = csv_writer(&path, h)?;
    let e = |err| Error::csv(&path, err);
    w.write_record(["variable", "category", "share", "feature", "value"]).map_err(e)?;
    for row in analytic_expectations(&spec)? {
        let mut put = |feature: String, v: f64| {
            w.write_record([row.variable.as_str(), row.category.as_str(), &fmt(row.share), &feature, &fmt(v)])
        };
        put("length".into(), row.length).map_err(e)?;
        for (a, v) in &row.participation {
            put(format!("freq.{a}"), *v).map_err(e)?;
        }
        for (a, v) in &row.duration {
            put(format!("dur.{a}"), *v).map_err(e)?;
        }
    }
    w.flush().map_err(|err| Error::io(&path, err))
}

/// Everything a training run leaves behind, for in-process callers.
pub struct TrainOutput {
    pub model: Model,
    pub data: Prepared,
    pub hash: String,
}

/// Trains per the config and writes the checkpoint, history, losses,
/// manifests and the evaluation and training splits under `paths.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    let out = &cfg.paths.out;
    let hash = cfg.hash()?;
    let h = Some(hash.as_str());
    let data = pipeline::prepare(cfg)?;
    let trained = pipeline::train_model(cfg, &data)?;
    trained.model.save(&out.join("model.ckpt"), &[(RUN_HASH_KEY.to_string(), hash.clone())])?;
    trained.history.write_csv(&out.join("history.csv"), h)?;
    pipeline::write_losses(&trained, &data, &out.join("losses.csv"), h)?;
    let resolved = serde_json::json!({ "run": cfg, "model": cfg.model_config()?, "hash": hash });
    write_text(
        &out.join("config.json"),
        &serde_json::to_string_pretty(&resolved).map_err(|e| Error::InvalidConfig(e.to_string()))?,
    )?;
    write_text(&out.join("vocab.txt"), &data.vocab.to_manifest())?;
    write_text(&out.join("schema.txt"), &data.schema.to_manifest())?;
    for (split, dir) in [(cfg.eval.split, "real"), (Split::Train, "train")] {
        let samples: Vec<_> = data.dataset.split(split).collect();
        pipeline::write_samples(
            &out.join(dir),
            &samples.iter().map(|s| s.pid.clone()).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.schedule.clone()).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.labels.clone()).collect::<Vec<_>>(),
            &data.vocab,
            &data.schema,
            h,
        )?;
    }
    Ok(TrainOutput {
        model: trained.model,
        data,
        hash,
    })
}

fn checkpoint_hash(meta: &[(String, String)]) -> Option<String> {
    meta.iter().find(|(k, _)| k == RUN_HASH_KEY).map(|(_, v)| v.clone())
}

/// Resamples or repeats `targets` to `n` rows.
pub fn target_labels(
    targets: &[LabelVector],
    schema: &LabelSchema,
    label_dist: Option<&LabelDistribution>,
    n: Option<usize>,
    seed: u64,
) -> Result<Vec<LabelVector>> {
    if targets.is_empty() {
        return Err(Error::Empty("target labels".into()));
    }
    let n = n.unwrap_or(targets.len());
    match label_dist {
        Some(d) => reweight_labels(targets, schema, d, n, seed),
        None => Ok((0..n).map(|i| targets[i % targets.len()].clone()).collect()),
    }
}

pub fn generate(
    checkpoint: &Path,
    target: &Path,
    label_dist: Option<&Path>,
    n: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (model, meta) = Model::load(checkpoint)?;
    let hash = checkpoint_hash(&meta);
    let (_, rows) = read_labels(target, Some(model.schema()))?;
    let targets: Vec<LabelVector> = rows.into_iter().map(|(_, l)| l).collect();
    let dist = label_dist.map(|p| LabelDistribution::read(p, model.schema())).transpose()?;
    let labels = target_labels(&targets, model.schema(), dist.as_ref(), n, seed)?;
    let schedules = pipeline::generate(&model, &labels, pipeline::generate_seed(seed))?;
    pipeline::write_samples(
        out,
        &pipeline::numbered_pids("g", labels.len()),
        &schedules,
        &labels,
        model.vocab(),
        model.schema(),
        hash.as_deref(),
    )
}

pub fn evaluate(
    real: &Path,
    synth: &Path,
    train: Option<&Path>,
    schema: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let schema = schema
        .map(|p| LabelSchema::from_manifest(&actsched::schedule::io::read_text(p)?))
        .transpose()?;
    let real = SampleDir::read(real, schema.as_ref())?;
    let synth = SampleDir::read(synth, Some(&real.schema))?;
    let train = train.map(|p| SampleDir::read(p, Some(&real.schema))).transpose()?;

    let vocab = match checkpoint {
        Some(p) => {
            let (model, meta) = Model::load(p)?;
            let expected = checkpoint_hash(&meta).unwrap_or_default();
            for dir in [Some(&synth), Some(&real), train.as_ref()].into_iter().flatten() {
                if let Some(found) = &dir.hash {
                    if *found != expected {
                        return Err(Error::HashMismatch {
                            expected,
                            found: found.clone(),
                        });
                    }
                }
            }
            if synth.hash.is_none() {
                return Err(Error::HashMismatch {
                    expected,
                    found: "none".into(),
                });
            }
            model.vocab().clone()
        }
        None => {
            let all = [Some(&real), Some(&synth), train.as_ref()];
            pipeline::infer_vocab(all.iter().flatten().flat_map(|d| d.schedules.iter()))?
        }
    };
    let dirs = [Some(&real), Some(&synth), train.as_ref()];
    let seq_len = dirs.iter().flatten().map(|d| d.max_episodes()).max().unwrap_or(1) + 2;
    let real_set = real.encode(&vocab, seq_len, Role::Real)?;
    let synth_set = synth.encode(&vocab, seq_len, Role::Synthetic)?;
    let train_set = train.as_ref().map(|t| t.encode(&vocab, seq_len, Role::Real)).transpose()?;
    let eval = pipeline::evaluate(
        &real_set,
        &synth_set,
        train_set.as_ref().map(|t| t.schedules.as_slice()),
        &real.schema,
        &vocab,
    )?;
    pipeline::write_evaluation(&eval, out, synth.hash.as_deref())
}

pub fn mi(cfg: &RunConfig, checkpoints: &[PathBuf], runs: Option<usize>) -> Result<()> {
    let hash = cfg.hash()?;
    let data = pipeline::prepare(cfg)?;
    let models: Vec<Model> = checkpoints
        .iter()
        .map(|p| Model::load(p).map(|(m, _)| m))
        .collect::<Result<_>>()?;
    for m in &models {
        check_compatible(m, &data.vocab, &data.schema)?;
    }
    let mut opts = cfg.mi.study.clone();
    if let Some(r) = runs {
        opts.runs = r;
    }
    let samples = data.dataset.samples();
    let rows = entanglement_study(
        &models.iter().collect::<Vec<_>>(),
        &samples.iter().map(|s| s.schedule.clone()).collect::<Vec<_>>(),
        &samples.iter().map(|s| s.labels.clone()).collect::<Vec<_>>(),
        &data.schema.cardinalities(),
        data.vocab.len(),
        &cfg.mi.mine,
        &opts,
    )?;
    write_mi_csv(&rows, &cfg.paths.out.join("mi.csv"), Some(&hash))
}

fn check_compatible(model: &Model, vocab: &ActivityVocab, schema: &LabelSchema) -> Result<()> {
    if model.vocab() != vocab {
        return Err(Error::SchemaMismatch(format!("{} checkpoint has a different activity vocabulary", model.kind())));
    }
    if model.schema() != schema {
        return Err(Error::SchemaMismatch(format!("{} checkpoint has a different label schema", model.kind())));
    }
    Ok(())
}

pub struct RunOutput {
    pub trained: TrainOutput,
    pub synth: SampleSet,
    pub eval: pipeline::Evaluation,
}

/// Full pipeline for one config: train, generate for the evaluation labels,
/// evaluate against the evaluation split.
pub fn run_once(cfg: &RunConfig) -> Result<RunOutput> {
    let out = &cfg.paths.out;
    let trained = train(cfg)?;
    let h = Some(trained.hash.as_str());
    let data = &trained.data;
    let labels = pipeline::generation_labels(cfg, data)?;
    let schedules = pipeline::generate(&trained.model, &labels, pipeline::generate_seed(cfg.seed))?;
    pipeline::write_samples(
        &out.join("synthetic"),
        &pipeline::numbered_pids("g", labels.len()),
        &schedules,
        &labels,
        &data.vocab,
        &data.schema,
        h,
    )?;
    let synth = SampleSet::new(schedules, labels, Role::Synthetic)?;
    let real = data.split_set(cfg.eval.split, Role::Real)?;
    let eval = pipeline::evaluate(
        &real,
        &synth,
        Some(&data.split_schedules(Split::Train)),
        &data.schema,
        &data.vocab,
    )?;
    pipeline::write_evaluation(&eval, out, h)?;
    Ok(RunOutput { trained, synth, eval })
}

/// `runs` consecutive seeds under `<out>/seed-<s>`, merged into `<out>/summary.csv`.
pub fn run_seeds(cfg: &RunConfig, runs: usize) -> Result<()> {
    if runs == 0 {
        return Err(Error::InvalidConfig("runs must be >= 1".into()));
    }
    let mut summaries = Vec::with_capacity(runs);
    for r in 0..runs as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed + r;
        c.paths.out = cfg.paths.out.join(format!("seed-{}", c.seed));
        run_once(&c)?;
        summaries.push(c.paths.out.join("summary.csv"));
    }
    if runs >= 2 {
        report::merge_files(&summaries, &cfg.paths.out.join("summary.csv"))?;
    }
    Ok(())
}
