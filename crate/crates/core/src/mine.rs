//! Mutual information estimation with the Donsker–Varadhan bound (MINE).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{ContinuousEmbedding, LabelEncoder, Linear, Lstm, LstmState};
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind};
use crate::nn::{Adam, Mat, ParameterStore, Tape, Var};
use crate::schedule::io::csv_writer;
use crate::schedule::{EncodedSchedule, LabelVector};

pub const MIN_PAIRS: usize = 1000;

/// `mean(joint) − log(mean(exp(marginal)))`, with a shifted log-mean-exp.
pub fn dv_bound(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::Empty("score sample".into()));
    }
    let mj = joint.iter().sum::<f64>() / joint.len() as f64;
    let m = marginal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lme = m + (marginal.iter().map(|x| (x - m).exp()).sum::<f64>() / marginal.len() as f64).ln();
    let v = mj - lme;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("dv bound from {} joint and {} marginal scores", joint.len(), marginal.len())))
    }
}

/// One side of a pair set.
#[derive(Debug, Clone, PartialEq)]
pub enum MiData {
    /// Real-valued vectors, one row per item.
    Dense(Mat),
    Labels { values: Vec<LabelVector>, cardinalities: Vec<usize> },
    Schedules { values: Vec<EncodedSchedule>, vocab_len: usize },
}

impl MiData {
    pub fn len(&self) -> usize {
        match self {
            MiData::Dense(m) => m.nrows(),
            MiData::Labels { values, .. } => values.len(),
            MiData::Schedules { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MiData::Dense(_) => "dense",
            MiData::Labels { .. } => "labels",
            MiData::Schedules { .. } => "schedules",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    /// Width of the two hidden layers of the head.
    pub hidden: usize,
    /// Width of the label embedding on a label side.
    pub label_hidden: usize,
    /// Width of the recurrent encoder on a schedule side.
    pub schedule_hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Shuffles of the test split pooled for the marginal term.
    pub test_permutations: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            label_hidden: 32,
            schedule_hidden: 32,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 8,
            test_permutations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Side {
    Dense(usize),
    Labels(LabelEncoder),
    Schedules(ContinuousEmbedding, Lstm),
}

impl Side {
    fn new(store: &mut ParameterStore, name: &str, data: &MiData, cfg: &MineConfig, rng: &mut impl Rng) -> Self {
        match data {
            MiData::Dense(m) => Side::Dense(m.ncols()),
            MiData::Labels { cardinalities, .. } => Side::Labels(LabelEncoder::new(store, name, cardinalities, cfg.label_hidden, rng)),
            MiData::Schedules { vocab_len, .. } => {
                let s = cfg.schedule_hidden;
                Side::Schedules(
                    ContinuousEmbedding::new(store, &format!("{name}.embed"), *vocab_len, s, rng),
                    Lstm::new(store, &format!("{name}.lstm"), s, s, 1, rng),
                )
            }
        }
    }

    fn width(&self) -> usize {
        match self {
            Side::Dense(d) => *d,
            Side::Labels(e) => e.size,
            Side::Schedules(_, l) => l.size,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParameterStore, data: &MiData, idx: &[usize]) -> Var {
        match (self, data) {
            (Side::Dense(_), MiData::Dense(m)) => tape.constant(m.select(ndarray::Axis(0), idx)),
            (Side::Labels(enc), MiData::Labels { values, .. }) => {
                let v: Vec<&LabelVector> = idx.iter().map(|&i| &values[i]).collect();
                enc.forward(tape, store, &v)
            }
            (Side::Schedules(embed, lstm), MiData::Schedules { values, .. }) => {
                let v: Vec<&EncodedSchedule> = idx.iter().map(|&i| &values[i]).collect();
                let mut state = LstmState::zeros(tape, v.len(), 1, lstm.size);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut out = state.h[0];
                for step in 0..v[0].seq_len() {
                    let tokens: Vec<usize> = v.iter().map(|s| s.acts[step]).collect();
                    let durs: Vec<f64> = v.iter().map(|s| s.durs[step]).collect();
                    let d = tape.column(&durs);
                    let x = embed.forward(tape, store, &tokens, d);
                    let (o, next) = lstm.step(tape, store, x, &state, 0.0, &mut rng);
                    out = o;
                    state = next;
                }
                out
            }
            _ => unreachable!("side built from the same data"),
        }
    }
}

/// Critic `T(a, b)`: a side network for each input feeding a two-layer ReLU head.
#[derive(Debug, Clone)]
pub struct StatisticsNet {
    store: ParameterStore,
    a: Side,
    b: Side,
    head: [Linear; 3],
}

impl StatisticsNet {
    pub fn new(a: &MiData, b: &MiData, cfg: &MineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let sa = Side::new(&mut store, "a", a, cfg, &mut rng);
        let sb = Side::new(&mut store, "b", b, cfg, &mut rng);
        let w = sa.width() + sb.width();
        let head = [
            Linear::new(&mut store, "head0", w, cfg.hidden, &mut rng),
            Linear::new(&mut store, "head1", cfg.hidden, cfg.hidden, &mut rng),
            Linear::new(&mut store, "head2", cfg.hidden, 1, &mut rng),
        ];
        Self { store, a: sa, b: sb, head }
    }

    /// `B × 1` scores of the pairs `(a[ia[k]], b[ib[k]])`.
    fn scores_graph(&self, tape: &mut Tape, a: &MiData, b: &MiData, ia: &[usize], ib: &[usize]) -> Var {
        let ea = self.a.forward(tape, &self.store, a, ia);
        let eb = self.b.forward(tape, &self.store, b, ib);
        self.head_graph(tape, ea, eb)
    }

    fn head_graph(&self, tape: &mut Tape, ea: Var, eb: Var) -> Var {
        let x = tape.concat(&[ea, eb]);
        let h = self.head[0].forward(tape, &self.store, x);
        let h = tape.relu(h);
        let h = self.head[1].forward(tape, &self.store, h);
        let h = tape.relu(h);
        self.head[2].forward(tape, &self.store, h)
    }

    pub fn scores(&self, a: &MiData, b: &MiData, ia: &[usize], ib: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ia.len());
        for (ca, cb) in ia.chunks(1024).zip(ib.chunks(1024)) {
            let mut tape = Tape::new();
            let s = self.scores_graph(&mut tape, a, b, ca, cb);
            out.extend(tape.value(s).iter().copied());
        }
        out
    }

    fn dv_on(&self, a: &MiData, b: &MiData, idx: &[usize], perms: usize, rng: &mut impl Rng) -> Result<f64> {
        let joint = self.scores(a, b, idx, idx);
        let mut marginal = Vec::with_capacity(idx.len() * perms);
        for _ in 0..perms.max(1) {
            let mut shuffled = idx.to_vec();
            shuffled.shuffle(rng);
            marginal.extend(self.scores(a, b, idx, &shuffled));
        }
        dv_bound(&joint, &marginal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Test-split estimate clipped at zero.
    pub estimate: f64,
    /// Test-split estimate before clipping.
    pub raw: f64,
    pub best_validation: f64,
    pub epochs: usize,
}

/// Trains a critic on 80% of the pairs with in-batch shuffled negatives, stops
/// early on the 10% validation bound and reports the bound on the last 10%.
pub fn estimate_mi(a: &MiData, b: &MiData, cfg: &MineConfig) -> Result<MiEstimate> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} and {} items cannot be paired", a.len(), b.len())));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::InsufficientData {
            needed: MIN_PAIRS,
            got: a.len(),
        });
    }
    if cfg.batch_size < 2 || cfg.patience == 0 || cfg.max_epochs == 0 {
        return Err(Error::InvalidConfig("mine batch_size >= 2, patience and max_epochs >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (0.8 * a.len() as f64).round() as usize;
    let n_val = (a.len() - n_train) / 2;
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    let mut train = train.to_vec();

    let mut net = StatisticsNet::new(a, b, cfg, rng.random());
    let mut adam = Adam::new(cfg.learning_rate);
    let mut best = f64::NEG_INFINITY;
    let mut best_store = net.store.values_snapshot();
    let mut since = 0;
    let mut epochs = 0;
    let val_seed: u64 = rng.random();
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut perm: Vec<usize> = (0..chunk.len()).collect();
            perm.shuffle(&mut rng);
            let mut tape = Tape::new();
            let ea = net.a.forward(&mut tape, &net.store, a, chunk);
            let eb = net.b.forward(&mut tape, &net.store, b, chunk);
            let eb_shuffled = tape.gather(eb, &perm);
            let tj = net.head_graph(&mut tape, ea, eb);
            let tm = net.head_graph(&mut tape, ea, eb_shuffled);
            let mj = tape.mean(tj);
            let lme = tape.log_mean_exp(tm);
            let neg = tape.sub(lme, mj);
            if !tape.scalar(neg).is_finite() {
                return Err(Error::NonFinite("mine training bound".into()));
            }
            net.store.zero_grads();
            tape.backward(neg, &mut net.store);
            adam.step(&mut net.store)?;
        }
        let v = net.dv_on(a, b, val, 1, &mut ChaCha8Rng::seed_from_u64(val_seed))?;
        if v > best {
            best = v;
            best_store = net.store.values_snapshot();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    net.store.copy_values_from(&best_store)?;
    let raw = net.dv_on(a, b, test, cfg.test_permutations, &mut rng)?;
    Ok(MiEstimate {
        estimate: raw.max(0.0),
        raw,
        best_validation: best,
        epochs,
    })
}

/// Which mutual information a study row measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    /// Schedules and labels.
    #[serde(rename = "I(x;y)")]
    ScheduleLabel,
    /// Embedding and labels.
    #[serde(rename = "I(z;y)")]
    EmbeddingLabel,
    /// Embedding and schedules.
    #[serde(rename = "I(z;x)")]
    EmbeddingSchedule,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::ScheduleLabel => "I(x;y)",
            Quantity::EmbeddingLabel => "I(z;y)",
            Quantity::EmbeddingSchedule => "I(z;x)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRow {
    pub embedding: String,
    pub quantity: Quantity,
    /// Mean clipped estimate over runs.
    pub estimate: f64,
    /// Mean raw estimate over runs.
    pub raw: f64,
    /// Sample variance of the clipped estimate over runs (0 for a single run).
    pub variance: f64,
    pub runs: usize,
}

/// Rows of the study to compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyOptions {
    pub schedule_label: bool,
    pub embedding_label: bool,
    pub embedding_schedule: bool,
    pub random_encoders: bool,
    pub runs: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            schedule_label: true,
            embedding_label: true,
            embedding_schedule: true,
            random_encoders: true,
            runs: 1,
        }
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

fn rows_to_mat(rows: Vec<Vec<f64>>) -> Mat {
    let (n, d) = (rows.len(), rows.first().map_or(0, Vec::len));
    Mat::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular")
}

/// Posterior means of `model` for the given schedules.
pub fn latent_means(model: &Model, schedules: &[EncodedSchedule], labels: &[LabelVector]) -> Result<Mat> {
    let mut rows = Vec::with_capacity(schedules.len());
    for (s, l) in schedules.chunks(1024).zip(labels.chunks(1024)) {
        let sr: Vec<&EncodedSchedule> = s.iter().collect();
        let lr: Vec<&LabelVector> = l.iter().collect();
        rows.extend(model.encode(&sr, &lr)?.into_iter().map(|p| p.mu));
    }
    Ok(rows_to_mat(rows))
}

/// Mutual information between schedules `x`, labels `y` and the embeddings
/// `z` of each encoder-bearing model, against random and randomly
/// initialised baselines.
pub fn entanglement_study(
    models: &[&Model],
    schedules: &[EncodedSchedule],
    labels: &[LabelVector],
    cardinalities: &[usize],
    vocab_len: usize,
    cfg: &MineConfig,
    opts: &StudyOptions,
) -> Result<Vec<MiRow>> {
    let x = MiData::Schedules {
        values: schedules.to_vec(),
        vocab_len,
    };
    let y = MiData::Labels {
        values: labels.to_vec(),
        cardinalities: cardinalities.to_vec(),
    };
    let latent = models.iter().map(|m| m.config().latent).max().unwrap_or(6).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e1_7a11);

    let mut embeddings: Vec<(String, Mat)> = Vec::new();
    let random = Mat::from_shape_simple_fn((schedules.len(), latent), || rng.sample(StandardNormal));
    embeddings.push(("Random".into(), random));
    if opts.random_encoders {
        let mut store = ParameterStore::new();
        let enc = LabelEncoder::new(&mut store, "probe", cardinalities, latent, &mut rng);
        let mut rows = Vec::with_capacity(labels.len());
        for l in labels {
            rows.push(enc.encode(&store, l)?);
        }
        embeddings.push(("Label Encoder".into(), rows_to_mat(rows)));

        let mut store = ParameterStore::new();
        let embed = ContinuousEmbedding::new(&mut store, "probe.embed", vocab_len, 16, &mut rng);
        let lstm = Lstm::new(&mut store, "probe.lstm", 16, 16, 1, &mut rng);
        let head = Linear::new(&mut store, "probe.head", 16, latent, &mut rng);
        let side = Side::Schedules(embed, lstm);
        let mut rows = Vec::with_capacity(schedules.len());
        let idx: Vec<usize> = (0..schedules.len()).collect();
        for chunk in idx.chunks(1024) {
            let mut tape = Tape::new();
            let h = side.forward(&mut tape, &store, &x, chunk);
            let z = head.forward(&mut tape, &store, h);
            rows.extend(tape.value(z).rows().into_iter().map(|r| r.to_vec()));
        }
        embeddings.push(("Schedule Encoder".into(), rows_to_mat(rows)));
    }
    for m in models {
        if m.kind() == ModelKind::ConditionalRnn {
            continue;
        }
        embeddings.push((m.kind().as_str().to_string(), latent_means(m, schedules, labels)?));
    }

    let runs = opts.runs.max(1);
    let run = |a: &MiData, b: &MiData, embedding: &str, q: Quantity| -> Result<MiRow> {
        let mut clipped = Vec::with_capacity(runs);
        let mut raw = Vec::with_capacity(runs);
        for r in 0..runs {
            let c = MineConfig {
                seed: cfg.seed.wrapping_add(r as u64),
                ..cfg.clone()
            };
            let e = estimate_mi(a, b, &c)?;
            clipped.push(e.estimate);
            raw.push(e.raw);
        }
        let (estimate, variance) = mean_var(&clipped);
        Ok(MiRow {
            embedding: embedding.to_string(),
            quantity: q,
            estimate,
            raw: mean_var(&raw).0,
            variance,
            runs,
        })
    };

    let mut rows = Vec::new();
    if opts.schedule_label {
        rows.push(run(&x, &y, "Schedules", Quantity::ScheduleLabel)?);
    }
    for (name, z) in embeddings {
        let z = MiData::Dense(z);
        if opts.embedding_label {
            rows.push(run(&z, &y, &name, Quantity::EmbeddingLabel)?);
        }
        if opts.embedding_schedule {
            rows.push(run(&z, &x, &name, Quantity::EmbeddingSchedule)?);
        }
    }
    Ok(rows)
}

pub fn write_mi_csv(rows: &[MiRow], path: &Path, hash: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    let e = |err| Error::csv(path, err);
    w.write_record(["embedding", "quantity", "estimate", "raw", "variance", "runs"]).map_err(e)?;
    for r in rows {
        w.write_record([
            r.embedding.clone(),
            r.quantity.as_str().to_string(),
            crate::eval::fmt(r.estimate),
            crate::eval::fmt(r.raw),
            crate::eval::fmt(r.variance),
            r.runs.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn dv_examples() {
        assert_eq!(dv_bound(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(dv_bound(&[1.0; 3], &[0.0; 5]).unwrap(), 1.0);
        let e2 = std::f64::consts::E.powi(2);
        let v = dv_bound(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert!((v - (1.0 - ((1.0 + e2) / 2.0).ln())).abs() < 1e-12);
        assert!((v + 0.4338).abs() < 1e-4);
        assert!(dv_bound(&[], &[1.0]).is_err());
        assert!(dv_bound(&[f64::NAN], &[1.0]).is_err());
        // large marginal scores do not overflow
        assert!(dv_bound(&[800.0], &[800.0, 799.0]).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn dv_shift_invariant(
            j in proptest::collection::vec(-10.0f64..10.0, 1..20),
            m in proptest::collection::vec(-10.0f64..10.0, 1..20),
            c in -50.0f64..50.0,
        ) {
            let base = dv_bound(&j, &m).unwrap();
            let js: Vec<f64> = j.iter().map(|x| x + c).collect();
            let ms: Vec<f64> = m.iter().map(|x| x + c).collect();
            prop_assert!((dv_bound(&js, &ms).unwrap() - base).abs() < 1e-9);
        }
    }

    fn quick() -> MineConfig {
        MineConfig {
            hidden: 32,
            batch_size: 128,
            max_epochs: 30,
            learning_rate: 3e-3,
            patience: 5,
            ..MineConfig::default()
        }
    }

    #[test]
    fn rejects_small_or_unpaired_inputs() {
        let a = MiData::Dense(Mat::zeros((10, 1)));
        assert!(matches!(estimate_mi(&a, &a, &quick()), Err(Error::InsufficientData { .. })));
        let b = MiData::Dense(Mat::zeros((1200, 1)));
        assert!(estimate_mi(&a, &b, &quick()).is_err());
    }

    #[test]
    fn constant_inputs_give_zero() {
        let a = MiData::Dense(Mat::zeros((1000, 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = MiData::Dense(Mat::from_shape_simple_fn((1000, 1), || rng.random::<f64>()));
        let e = estimate_mi(&a, &b, &quick()).unwrap();
        assert!(e.estimate < 0.02, "{e:?}");
    }

    #[test]
    fn detects_strong_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let values: Vec<LabelVector> = (0..n).map(|_| LabelVector(vec![rng.random_range(0..4)])).collect();
        let dense = Mat::from_shape_fn((n, 1), |(i, _)| values[i].0[0] as f64);
        let e = estimate_mi(
            &MiData::Dense(dense),
            &MiData::Labels {
                values,
                cardinalities: vec![4],
            },
            &quick(),
        )
        .unwrap();
        assert!(e.estimate > 0.8 * 4f64.ln(), "{e:?}");
    }
}
