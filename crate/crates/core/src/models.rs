//! The three model assemblies (ConditionalRNN, GenerativeRNN, ActVAE), label
//! injection, the combined loss and generation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{
    argmax, ContinuousEmbedding, ContinuousUnembedding, LabelEncoder, LatentBlock, LatentParams, Linear,
    Lstm, LstmState, StepOutput,
};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, Mat, ParameterStore, Tape, Var};
use crate::schedule::{ActivityVocab, EncodedSchedule, LabelSchema, LabelVector, DEFAULT_SEQ_LEN, EOS, SOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ConditionalRNN")]
    ConditionalRnn,
    #[serde(rename = "GenerativeRNN")]
    GenerativeRnn,
    #[serde(rename = "ActVAE")]
    ActVae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::ConditionalRnn, ModelKind::GenerativeRnn, ModelKind::ActVae];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::ConditionalRnn => "ConditionalRNN",
            ModelKind::GenerativeRnn => "GenerativeRNN",
            ModelKind::ActVae => "ActVAE",
        }
    }

    pub fn has_encoder(self) -> bool {
        !matches!(self, ModelKind::ConditionalRnn)
    }

    pub fn uses_labels(self) -> bool {
        !matches!(self, ModelKind::GenerativeRnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind `{s}`")))
    }
}

/// How the encoded label vector enters a model site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    Add,
    Concat,
    None,
}

/// Whether teacher forcing is drawn once per sequence or at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForcingDraw {
    Step,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Stacked recurrent layers `N`.
    pub depth: usize,
    /// Recurrent and embedding width `S`.
    pub hidden: usize,
    /// Label embedding width `H`.
    pub label_hidden: usize,
    pub latent: usize,
    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub teacher_forcing: f64,
    pub forcing_draw: ForcingDraw,
    pub encoder_hidden: Injection,
    pub encoder_unembed: Injection,
    pub decoder_hidden: Injection,
    pub decoder_unembed: Injection,
    pub label_weighting: bool,
    /// Encoded sequence length `L`.
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        let base = Self {
            depth: 4,
            hidden: 256,
            label_hidden: 64,
            latent: 6,
            alpha: 200.0,
            beta: 0.01,
            dropout: 0.0,
            teacher_forcing: 0.5,
            forcing_draw: ForcingDraw::Step,
            encoder_hidden: Injection::Add,
            encoder_unembed: Injection::None,
            decoder_hidden: Injection::Add,
            decoder_unembed: Injection::None,
            label_weighting: true,
            seq_len: DEFAULT_SEQ_LEN,
        };
        match kind {
            ModelKind::ActVae => base,
            ModelKind::ConditionalRnn => Self {
                hidden: 128,
                label_hidden: 32,
                latent: 0,
                beta: 0.0,
                dropout: 0.1,
                encoder_hidden: Injection::None,
                ..base
            },
            ModelKind::GenerativeRnn => Self {
                label_hidden: 0,
                dropout: 0.1,
                encoder_hidden: Injection::None,
                decoder_hidden: Injection::None,
                label_weighting: false,
                ..base
            },
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("{kind}: {m}")));
        if self.depth == 0 || self.hidden < 2 {
            return bad("depth must be >= 1 and hidden size >= 2".into());
        }
        if self.seq_len < 3 {
            return bad("sequence length must be >= 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return bad(format!("teacher forcing {} outside [0, 1]", self.teacher_forcing));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        let injections = [self.encoder_hidden, self.encoder_unembed, self.decoder_hidden, self.decoder_unembed];
        match kind {
            ModelKind::GenerativeRnn => {
                if injections.iter().any(|&i| i != Injection::None) {
                    return bad("an unconditional model cannot inject labels".into());
                }
            }
            ModelKind::ConditionalRnn => {
                if self.encoder_hidden != Injection::None || self.encoder_unembed != Injection::None {
                    return bad("there is no encoder to inject labels into".into());
                }
                if self.decoder_hidden == Injection::None && self.decoder_unembed == Injection::None {
                    return bad("labels must reach the decoder".into());
                }
            }
            ModelKind::ActVae => {}
        }
        let label_path = injections.iter().any(|&i| i != Injection::None);
        if label_path && self.label_hidden == 0 {
            return bad("label injection needs label_hidden >= 1".into());
        }
        if kind.has_encoder() && self.latent == 0 {
            return bad("latent size must be >= 1".into());
        }
        Ok(())
    }

    fn label_path(&self) -> bool {
        [self.encoder_hidden, self.encoder_unembed, self.decoder_hidden, self.decoder_unembed]
            .iter()
            .any(|&i| i != Injection::None)
    }

    /// Hex SHA-256 over the model kind and this configuration.
    pub fn hash(&self, kind: ModelKind) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(kind.as_str().as_bytes());
        h.update(b"\n");
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Loss components of a batch. The duration term carries `α` and the
/// divergence term carries `β`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub activity_nll: f64,
    pub duration_mse: f64,
    pub kld: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.activity_nll.is_finite() && self.duration_mse.is_finite() && self.kld.is_finite() && self.total.is_finite()
    }
}

/// Graph nodes of a batch loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub activity_nll: Var,
    pub duration_mse: Var,
    pub kld: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn read(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            activity_nll: tape.scalar(self.activity_nll),
            duration_mse: tape.scalar(self.duration_mse),
            kld: self.kld.map_or(0.0, |k| tape.scalar(k)),
            total: tape.scalar(self.total),
        }
    }
}

/// Settings of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pass {
    pub dropout: bool,
    pub teacher_forcing: f64,
    /// Draw the latent from the posterior; otherwise use its mean.
    pub sample_latent: bool,
}

impl Pass {
    pub fn training(cfg: &ModelConfig) -> Self {
        Self {
            dropout: true,
            teacher_forcing: cfg.teacher_forcing,
            sample_latent: true,
        }
    }

    /// No dropout and full teacher forcing.
    pub fn evaluation() -> Self {
        Self {
            dropout: false,
            teacher_forcing: 1.0,
            sample_latent: true,
        }
    }
}

/// A batch of aligned schedules, labels and loss weights.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub schedules: &'a [&'a EncodedSchedule],
    pub labels: &'a [&'a LabelVector],
    pub weights: &'a [f64],
}

/// Decoder outputs of a batch: per step, `B × N_a` log-probabilities and `B × 1` durations.
#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    pub log_probs: Vec<Var>,
    pub durations: Vec<Var>,
    pub latent: Option<(Var, Var)>,
}

/// Durations rescaled over the activities before the first end token.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDurations {
    pub durations: Vec<f64>,
    /// Index of the first end token (the sequence length when there is none).
    pub eos: usize,
    /// The pre-end durations summed to (almost) zero and were replaced by a uniform split.
    pub degenerate: bool,
}

pub const DEGENERATE_DURATION_SUM: f64 = 1e-8;

/// Rescales durations at positions `1..k` to sum to one, where `k` is the first
/// step whose most likely token is the end token. Other positions become zero.
pub fn normalize_durations(steps: &[StepOutput]) -> Result<NormalizedDurations> {
    if steps.is_empty() {
        return Err(Error::Empty("decoder steps".into()));
    }
    let eos = steps
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, s)| s.argmax() == EOS)
        .map_or(steps.len(), |(i, _)| i);
    let raw: Vec<f64> = steps.iter().map(|s| s.duration).collect();
    Ok(normalize_before(&raw, eos))
}

fn normalize_before(raw: &[f64], eos: usize) -> NormalizedDurations {
    let mut durations = vec![0.0; raw.len()];
    let span = 1..eos.max(1);
    let total: f64 = raw[span.clone()].iter().sum();
    let n = span.len();
    let degenerate = n > 0 && total <= DEGENERATE_DURATION_SUM;
    for i in span {
        durations[i] = if degenerate { 1.0 / n as f64 } else { raw[i] / total };
    }
    NormalizedDurations {
        durations,
        eos,
        degenerate,
    }
}

/// A generated schedule and whether its durations needed the uniform fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub schedule: EncodedSchedule,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
struct Encoder {
    embed: ContinuousEmbedding,
    init_label: Option<Linear>,
    lstm: Lstm,
    unembed_label: Option<Linear>,
    ff: Linear,
    latent: LatentBlock,
}

#[derive(Debug, Clone)]
enum DecoderInit {
    Zero,
    Latent(Linear),
    Label(Linear),
    Add(Linear, Linear),
    Concat(Linear),
}

#[derive(Debug, Clone)]
struct Decoder {
    init: DecoderInit,
    embed: ContinuousEmbedding,
    lstm: Lstm,
    out_label: Option<Linear>,
    unembed: ContinuousUnembedding,
}

/// A trainable and generable model: configuration, parameters and wiring.
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    cfg: ModelConfig,
    vocab: ActivityVocab,
    schema: LabelSchema,
    store: ParameterStore,
    labels: Option<LabelEncoder>,
    encoder: Option<Encoder>,
    decoder: Decoder,
}

impl Model {
    /// Builds and randomly initialises a model.
    pub fn new(kind: ModelKind, cfg: ModelConfig, vocab: ActivityVocab, schema: LabelSchema, seed: u64) -> Result<Self> {
        cfg.validate(kind)?;
        if kind.uses_labels() && cfg.label_path() && schema.is_empty() {
            return Err(Error::InvalidConfig(format!("{kind} needs at least one label variable")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut store = ParameterStore::new();
        let st = &mut store;
        let (n, s, h, na) = (cfg.depth, cfg.hidden, cfg.label_hidden, vocab.len());
        let flat = LstmState::flat_size(n, s);

        let labels = cfg
            .label_path()
            .then(|| LabelEncoder::new(st, "labels", &schema.cardinalities(), h, r));

        let encoder = kind.has_encoder().then(|| {
            let embed = ContinuousEmbedding::new(st, "enc.embed", na, s, r);
            let init_label = (cfg.encoder_hidden != Injection::None).then(|| Linear::new(st, "enc.init_label", h, flat, r));
            let lstm = Lstm::new(st, "enc.lstm", s, s, n, r);
            let unembed_label =
                (cfg.encoder_unembed == Injection::Add).then(|| Linear::new(st, "enc.unembed_label", h, flat, r));
            let ff_in = flat + if cfg.encoder_unembed == Injection::Concat { h } else { 0 };
            let ff = Linear::new(st, "enc.ff", ff_in, s, r);
            let latent = LatentBlock::new(st, "enc.latent", s, cfg.latent, r);
            Encoder {
                embed,
                init_label,
                lstm,
                unembed_label,
                ff,
                latent,
            }
        });

        let init = match (kind.has_encoder(), cfg.decoder_hidden) {
            (true, Injection::None) => DecoderInit::Latent(Linear::new(st, "dec.init_latent", cfg.latent, flat, r)),
            (true, Injection::Add) => DecoderInit::Add(
                Linear::new(st, "dec.init_latent", cfg.latent, flat, r),
                Linear::new(st, "dec.init_label", h, flat, r),
            ),
            (true, Injection::Concat) => DecoderInit::Concat(Linear::new(st, "dec.init", cfg.latent + h, flat, r)),
            (false, Injection::None) => DecoderInit::Zero,
            (false, _) => DecoderInit::Label(Linear::new(st, "dec.init_label", h, flat, r)),
        };
        let embed = ContinuousEmbedding::new(st, "dec.embed", na, s, r);
        let lstm = Lstm::new(st, "dec.lstm", s, s, n, r);
        let out_label = (cfg.decoder_unembed == Injection::Add).then(|| Linear::new(st, "dec.out_label", h, s, r));
        let un_in = s + if cfg.decoder_unembed == Injection::Concat { h } else { 0 };
        let unembed = ContinuousUnembedding::new(st, "dec.unembed", un_in, na, r);

        Ok(Self {
            kind,
            cfg,
            vocab,
            schema,
            store,
            labels,
            encoder,
            decoder: Decoder {
                init,
                embed,
                lstm,
                out_label,
                unembed,
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &ActivityVocab {
        &self.vocab
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn config_hash(&self) -> String {
        self.cfg.hash(self.kind)
    }

    fn check_batch(&self, schedules: &[&EncodedSchedule], labels: &[&LabelVector]) -> Result<()> {
        for s in schedules {
            if s.seq_len() != self.cfg.seq_len || s.durs.len() != self.cfg.seq_len {
                return Err(Error::Shape(format!(
                    "schedule of length {} for a model with sequence length {}",
                    s.seq_len(),
                    self.cfg.seq_len
                )));
            }
            if let Some(&t) = s.acts.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(Error::UnknownToken(t));
            }
        }
        if let Some(enc) = &self.labels {
            if labels.len() != schedules.len() && !schedules.is_empty() {
                return Err(Error::SchemaMismatch(format!(
                    "{} label vectors for {} schedules",
                    labels.len(),
                    schedules.len()
                )));
            }
            for l in labels {
                enc.check(l)?;
            }
        }
        Ok(())
    }

    fn encode_labels(&self, tape: &mut Tape, labels: &[&LabelVector]) -> Option<Var> {
        self.labels.as_ref().map(|enc| enc.forward(tape, &self.store, labels))
    }

    /// Encoder pass to `(μ, logvar)`, both `B × latent`.
    fn encoder_graph(
        &self,
        tape: &mut Tape,
        schedules: &[&EncodedSchedule],
        label_vec: Option<Var>,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> (Var, Var) {
        let enc = self.encoder.as_ref().expect("model has an encoder");
        let (b, n, s) = (schedules.len(), self.cfg.depth, self.cfg.hidden);
        let mut state = match (&enc.init_label, label_vec) {
            (Some(lin), Some(l)) => {
                let flat = lin.forward(tape, &self.store, l);
                LstmState::from_flat(tape, flat, n, s)
            }
            _ => LstmState::zeros(tape, b, n, s),
        };
        for step in 0..self.cfg.seq_len {
            let tokens: Vec<usize> = schedules.iter().map(|x| x.acts[step]).collect();
            let durs: Vec<f64> = schedules.iter().map(|x| x.durs[step]).collect();
            let d = tape.column(&durs);
            let x = enc.embed.forward(tape, &self.store, &tokens, d);
            state = enc.lstm.step(tape, &self.store, x, &state, dropout, rng).1;
        }
        let mut flat = state.flatten(tape);
        match (self.cfg.encoder_unembed, label_vec) {
            (Injection::Add, Some(l)) => {
                let lin = enc.unembed_label.as_ref().expect("resize layer");
                let r = lin.forward(tape, &self.store, l);
                flat = tape.add(flat, r);
            }
            (Injection::Concat, Some(l)) => flat = tape.concat(&[flat, l]),
            _ => {}
        }
        let hid = enc.ff.forward(tape, &self.store, flat);
        let hid = tape.relu(hid);
        enc.latent.forward(tape, &self.store, hid)
    }

    fn decoder_state(&self, tape: &mut Tape, batch: usize, z: Option<Var>, label_vec: Option<Var>) -> LstmState {
        let (n, s) = (self.cfg.depth, self.cfg.hidden);
        let st = &self.store;
        let flat = match (&self.decoder.init, z, label_vec) {
            (DecoderInit::Zero, _, _) => return LstmState::zeros(tape, batch, n, s),
            (DecoderInit::Latent(lin), Some(z), _) => lin.forward(tape, st, z),
            (DecoderInit::Label(lin), _, Some(l)) => lin.forward(tape, st, l),
            (DecoderInit::Add(lz, ll), Some(z), Some(l)) => {
                let a = lz.forward(tape, st, z);
                let b = ll.forward(tape, st, l);
                tape.add(a, b)
            }
            (DecoderInit::Concat(lin), Some(z), Some(l)) => {
                let zl = tape.concat(&[z, l]);
                lin.forward(tape, st, zl)
            }
            _ => unreachable!("decoder inputs checked by the caller"),
        };
        LstmState::from_flat(tape, flat, n, s)
    }

    fn decoder_step(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        durs: Var,
        state: &LstmState,
        label_vec: Option<Var>,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> (Var, Var, LstmState) {
        let dec = &self.decoder;
        let x = dec.embed.forward(tape, &self.store, tokens, durs);
        let (mut out, next) = dec.lstm.step(tape, &self.store, x, state, dropout, rng);
        match (self.cfg.decoder_unembed, label_vec) {
            (Injection::Add, Some(l)) => {
                let r = dec.out_label.as_ref().expect("resize layer").forward(tape, &self.store, l);
                out = tape.add(out, r);
            }
            (Injection::Concat, Some(l)) => out = tape.concat(&[out, l]),
            _ => {}
        }
        let u = dec.unembed.forward(tape, &self.store, out);
        (u.log_probs, u.duration, next)
    }

    /// Full forward pass over a batch with the decoder fed per `pass`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        schedules: &[&EncodedSchedule],
        labels: &[&LabelVector],
        pass: Pass,
        rng: &mut impl Rng,
    ) -> Result<DecoderOutputs> {
        self.check_batch(schedules, labels)?;
        let b = schedules.len();
        if b == 0 {
            return Err(Error::Empty("batch".into()));
        }
        let dropout = if pass.dropout { self.cfg.dropout } else { 0.0 };
        let label_vec = self.encode_labels(tape, labels);

        let mut latent = None;
        let z = if self.encoder.is_some() {
            let (mu, logvar) = self.encoder_graph(tape, schedules, label_vec, dropout, rng);
            latent = Some((mu, logvar));
            Some(if pass.sample_latent {
                let eps = Array2::from_shape_simple_fn((b, self.cfg.latent), || rng.sample(StandardNormal));
                LatentBlock::sample(tape, mu, logvar, eps)
            } else {
                mu
            })
        } else {
            None
        };

        let mut state = self.decoder_state(tape, b, z, label_vec);
        let seq_forced: Vec<bool> = match self.cfg.forcing_draw {
            ForcingDraw::Sequence => (0..b).map(|_| rng.random::<f64>() < pass.teacher_forcing).collect(),
            ForcingDraw::Step => Vec::new(),
        };
        let mut out = DecoderOutputs {
            log_probs: Vec::with_capacity(self.cfg.seq_len),
            durations: Vec::with_capacity(self.cfg.seq_len),
            latent,
        };
        let mut tokens = vec![SOS; b];
        let mut durs = tape.column(&vec![0.0; b]);
        for step in 0..self.cfg.seq_len {
            if step > 0 {
                let forced: Vec<bool> = match self.cfg.forcing_draw {
                    _ if pass.teacher_forcing >= 1.0 => vec![true; b],
                    ForcingDraw::Sequence => seq_forced.clone(),
                    ForcingDraw::Step => (0..b).map(|_| rng.random::<f64>() < pass.teacher_forcing).collect(),
                };
                let prev_lp = tape.value(out.log_probs[step - 1]);
                let mut teacher = vec![0.0; b];
                let mut keep = vec![0.0; b];
                for i in 0..b {
                    if forced[i] {
                        tokens[i] = schedules[i].acts[step - 1];
                        teacher[i] = schedules[i].durs[step - 1];
                    } else {
                        tokens[i] = argmax(prev_lp.row(i).as_slice().expect("row"));
                        keep[i] = 1.0;
                    }
                }
                let t = tape.column(&teacher);
                durs = if keep.iter().all(|&k| k == 0.0) {
                    t
                } else {
                    let k = tape.column(&keep);
                    let pred = tape.mul(out.durations[step - 1], k);
                    tape.add(t, pred)
                };
            }
            let (lp, d, next) = self.decoder_step(tape, &tokens, durs, &state, label_vec, dropout, rng);
            out.log_probs.push(lp);
            out.durations.push(d);
            state = next;
        }
        Ok(out)
    }

    /// Masked, weighted loss of decoder outputs against their targets.
    pub fn loss_graph(&self, tape: &mut Tape, outputs: &DecoderOutputs, batch: &Batch) -> LossVars {
        self.loss_graph_with(tape, outputs, batch, self.cfg.alpha, self.cfg.beta)
    }

    /// [`Model::loss_graph`] with explicit duration and divergence weights.
    pub fn loss_graph_with(
        &self,
        tape: &mut Tape,
        outputs: &DecoderOutputs,
        batch: &Batch,
        alpha: f64,
        beta: f64,
    ) -> LossVars {
        let b = batch.schedules.len();
        let na = self.vocab.len();
        let bf = b as f64;
        let mut nll_terms = Vec::with_capacity(outputs.log_probs.len());
        let mut mse_terms = Vec::with_capacity(outputs.durations.len());
        let counts: Vec<f64> = batch
            .schedules
            .iter()
            .map(|s| (s.first_eos().unwrap_or(self.cfg.seq_len - 1) + 1) as f64)
            .collect();
        for step in 0..self.cfg.seq_len {
            let mut wn = Mat::zeros((b, na));
            let mut wd = Mat::zeros((b, 1));
            let mut target = vec![0.0; b];
            for (i, s) in batch.schedules.iter().enumerate() {
                if (step as f64) < counts[i] {
                    let w = batch.weights.get(i).copied().unwrap_or(1.0) / (counts[i] * bf);
                    wn[[i, s.acts[step]]] = -w;
                    wd[[i, 0]] = alpha * w;
                    target[i] = s.durs[step];
                }
            }
            nll_terms.push(tape.weighted_sum(outputs.log_probs[step], wn));
            let t = tape.column(&target);
            let diff = tape.sub(outputs.durations[step], t);
            let sq = tape.square(diff);
            mse_terms.push(tape.weighted_sum(sq, wd));
        }
        let activity_nll = sum_vars(tape, &nll_terms);
        let duration_mse = sum_vars(tape, &mse_terms);
        let mut total = tape.add(activity_nll, duration_mse);
        let kld = outputs.latent.map(|(mu, logvar)| {
            let k = LatentBlock::kld(tape, mu, logvar);
            tape.scale(k, beta)
        });
        if let Some(k) = kld {
            total = tape.add(total, k);
        }
        LossVars {
            activity_nll,
            duration_mse,
            kld,
            total,
        }
    }

    /// Builds forward and loss graphs for a batch.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &Batch, pass: Pass, rng: &mut impl Rng) -> Result<LossVars> {
        let outputs = self.forward(tape, batch.schedules, batch.labels, pass, rng)?;
        Ok(self.loss_graph(tape, &outputs, batch))
    }

    /// Loss of a batch without building gradients into the store.
    pub fn evaluate_batch(&self, batch: &Batch, pass: Pass, rng: &mut impl Rng) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.batch_loss(&mut tape, batch, pass, rng)?;
        Ok(vars.read(&tape))
    }

    /// Per-sample decoder outputs as plain values.
    pub fn step_outputs(
        &self,
        schedules: &[&EncodedSchedule],
        labels: &[&LabelVector],
        pass: Pass,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<StepOutput>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, schedules, labels, pass, rng)?;
        Ok((0..schedules.len())
            .map(|i| {
                (0..self.cfg.seq_len)
                    .map(|n| StepOutput {
                        probs: tape.value(out.log_probs[n]).row(i).iter().map(|v| v.exp()).collect(),
                        duration: tape.value(out.durations[n])[[i, 0]],
                    })
                    .collect()
            })
            .collect())
    }

    /// Posterior parameters of each schedule.
    pub fn encode(&self, schedules: &[&EncodedSchedule], labels: &[&LabelVector]) -> Result<Vec<LatentParams>> {
        if self.encoder.is_none() {
            return Err(Error::InvalidConfig(format!("{} has no encoder", self.kind)));
        }
        self.check_batch(schedules, labels)?;
        let mut tape = Tape::new();
        let label_vec = self.encode_labels(&mut tape, labels);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mu, logvar) = self.encoder_graph(&mut tape, schedules, label_vec, 0.0, &mut rng);
        let (mu, logvar) = (tape.value(mu), tape.value(logvar));
        Ok((0..schedules.len())
            .map(|i| LatentParams {
                mu: mu.row(i).to_vec(),
                logvar: logvar.row(i).to_vec(),
            })
            .collect())
    }

    /// Decodes a batch greedily. `z` is required for models with a latent and
    /// `labels` for models with a label path; both are ignored otherwise.
    ///
    /// Position 0 is always the start token, the start token is never emitted
    /// afterwards, the end token cannot directly follow the start token, and a
    /// sequence with no predicted end is closed at the last position.
    pub fn generate(&self, labels: &[&LabelVector], z: Option<&Mat>) -> Result<Vec<Generated>> {
        let b = if self.kind.has_encoder() {
            z.ok_or_else(|| Error::InvalidConfig(format!("{} generation needs latents", self.kind)))?
                .nrows()
        } else {
            labels.len()
        };
        if b == 0 {
            return Ok(Vec::new());
        }
        if let Some(enc) = &self.labels {
            if labels.len() != b {
                return Err(Error::SchemaMismatch(format!("{} label vectors for {b} latents", labels.len())));
            }
            for l in labels {
                enc.check(l)?;
            }
        }
        if let Some(z) = z.filter(|_| self.kind.has_encoder()) {
            if z.ncols() != self.cfg.latent {
                return Err(Error::Shape(format!("latent width {} != {}", z.ncols(), self.cfg.latent)));
            }
        }
        let l = self.cfg.seq_len;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let label_vec = self.encode_labels(&mut tape, labels);
        let zv = z.filter(|_| self.kind.has_encoder()).map(|z| tape.constant(z.clone()));
        let mut state = self.decoder_state(&mut tape, b, zv, label_vec);
        let mut tokens = vec![SOS; b];
        let mut durs = tape.column(&vec![0.0; b]);
        let mut acts = vec![vec![EOS; l]; b];
        let mut raw = vec![vec![0.0; l]; b];
        let mut done = vec![false; b];
        for step in 0..l {
            let (lp, d, next) = self.decoder_step(&mut tape, &tokens, durs, &state, label_vec, 0.0, &mut rng);
            state = next;
            let lp = tape.value(lp);
            for i in 0..b {
                raw[i][step] = tape.value(d)[[i, 0]];
                let tok = if step == 0 {
                    SOS
                } else if done[i] || step == l - 1 {
                    EOS
                } else {
                    let row = lp.row(i);
                    let mut best = None::<usize>;
                    for t in 0..row.len() {
                        let allowed = t != SOS && !(t == EOS && step == 1);
                        if allowed && best.is_none_or(|bt| row[t] > row[bt]) {
                            best = Some(t);
                        }
                    }
                    best.expect("vocabulary has an activity")
                };
                acts[i][step] = tok;
                if step > 0 && tok == EOS {
                    done[i] = true;
                }
                tokens[i] = tok;
            }
            durs = d;
        }
        Ok(acts
            .into_iter()
            .zip(raw)
            .map(|(acts, raw)| {
                let eos = acts.iter().skip(1).position(|&t| t == EOS).map_or(l, |p| p + 1);
                let norm = normalize_before(&raw, eos);
                Generated {
                    schedule: EncodedSchedule {
                        acts,
                        durs: norm.durations,
                    },
                    degenerate: norm.degenerate,
                }
            })
            .collect())
    }

    /// Standard-normal latents, one row per sample.
    pub fn sample_latents(&self, n: usize, rng: &mut impl Rng) -> Mat {
        Array2::from_shape_simple_fn((n, self.cfg.latent), || rng.sample(StandardNormal))
    }

    /// Generates one schedule per label vector (or `n` unconditional ones),
    /// drawing latents from the prior. Work is split into fixed chunks, each
    /// with its own seeded stream, so the result does not depend on the
    /// thread count.
    pub fn sample(&self, labels: &[LabelVector], n: usize, seed: u64) -> Result<Vec<Generated>> {
        const CHUNK: usize = 256;
        let total = if self.kind.uses_labels() { labels.len() } else { n };
        let chunks: Vec<usize> = (0..total.div_ceil(CHUNK)).collect();
        let parts: Result<Vec<Vec<Generated>>> = chunks
            .par_iter()
            .map(|&c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(total);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let lab: Vec<&LabelVector> = if self.labels.is_some() { labels[lo..hi].iter().collect() } else { Vec::new() };
                let z = self.kind.has_encoder().then(|| self.sample_latents(hi - lo, &mut rng));
                if self.kind.has_encoder() {
                    self.generate(&lab, z.as_ref())
                } else {
                    self.generate(&labels[lo..hi].iter().collect::<Vec<_>>(), None)
                }
            })
            .collect();
        Ok(parts?.into_iter().flatten().collect())
    }

    fn meta(&self, extra: &[(String, String)]) -> Vec<(String, String)> {
        let mut meta = vec![
            ("kind".to_string(), self.kind.as_str().to_string()),
            ("model_hash".into(), self.config_hash()),
            ("config".into(), serde_json::to_string(&self.cfg).expect("serializes")),
            ("vocab".into(), serde_json::to_string(&self.vocab).expect("serializes")),
            ("schema".into(), serde_json::to_string(&self.schema).expect("serializes")),
        ];
        meta.extend_from_slice(extra);
        meta
    }

    pub fn to_bytes(&self, extra_meta: &[(String, String)]) -> Vec<u8> {
        crate::nn::checkpoint::encode_checkpoint(&self.meta(extra_meta), &self.store)
    }

    /// Writes parameters tagged with kind, configuration hash, vocabulary and
    /// schema, plus any caller metadata.
    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        save_checkpoint(path, &self.meta(extra_meta), &self.store)
    }

    /// Restores a model; the returned metadata includes caller entries.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        let (meta, store) = load_checkpoint(path)?;
        Self::from_parts(meta, store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Vec<(String, String)>)> {
        let (meta, store) = crate::nn::checkpoint::decode_checkpoint(bytes)?;
        Self::from_parts(meta, store)
    }

    fn from_parts(meta: Vec<(String, String)>, store: ParameterStore) -> Result<(Self, Vec<(String, String)>)> {
        let get = |k: &str| {
            meta.iter()
                .find(|(mk, _)| mk == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` entry")))
        };
        let json = |k: &str| -> Result<serde_json::Value> {
            serde_json::from_str(get(k)?).map_err(|e| Error::Checkpoint(format!("bad `{k}` entry: {e}")))
        };
        let kind: ModelKind = get("kind")?.parse()?;
        let cfg: ModelConfig =
            serde_json::from_value(json("config")?).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let vocab: ActivityVocab =
            serde_json::from_value(json("vocab")?).map_err(|e| Error::Checkpoint(format!("bad vocab: {e}")))?;
        let schema: LabelSchema =
            serde_json::from_value(json("schema")?).map_err(|e| Error::Checkpoint(format!("bad schema: {e}")))?;
        let expected = get("model_hash")?.to_string();
        let found = cfg.hash(kind);
        if expected != found {
            return Err(Error::HashMismatch { expected, found });
        }
        let mut model = Self::new(kind, cfg, vocab, schema, 0)?;
        model.store.copy_values_from(&store)?;
        Ok((model, meta))
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}
