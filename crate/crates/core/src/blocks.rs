//! Building blocks shared by the encoders and decoders: linear maps, the
//! continuous (token plus duration) embedding and un-embedding, the label
//! encoder, stacked LSTM layers and the Gaussian latent block.

use ndarray::s;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, ParamId, ParameterStore, Tape, Var};
use crate::schedule::LabelVector;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), inputs, outputs, inputs, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, outputs, inputs, rng);
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

/// Token embedding of size `S − 1` with the raw duration appended as the last slot.
#[derive(Debug, Clone)]
pub struct ContinuousEmbedding {
    table: ParamId,
    vocab: usize,
    pub size: usize,
}

impl ContinuousEmbedding {
    pub fn new(store: &mut ParameterStore, name: &str, vocab: usize, size: usize, rng: &mut impl Rng) -> Self {
        assert!(size >= 2, "embedding size must leave room for the duration");
        let table = store.add_uniform(format!("{name}.table"), vocab, size - 1, size - 1, rng);
        Self { table, vocab, size }
    }

    /// `tokens.len() × S` embedding; `durs` is a `B × 1` node.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, tokens: &[usize], durs: Var) -> Var {
        let table = tape.param(store, self.table);
        let e = tape.gather(table, tokens);
        tape.concat(&[e, durs])
    }

    pub fn embed_step(&self, store: &ParameterStore, token: usize, duration: f64) -> Result<Vec<f64>> {
        if token >= self.vocab {
            return Err(Error::UnknownToken(token));
        }
        let mut t = Tape::new();
        let d = t.column(&[duration]);
        let out = self.forward(&mut t, store, &[token], d);
        Ok(t.value(out).iter().copied().collect())
    }

    pub fn table(&self) -> ParamId {
        self.table
    }
}

/// Activity probabilities (a simplex over the vocabulary) and a duration in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub duration: f64,
}

impl StepOutput {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct UnembedOut {
    /// `B × N_a` log-probabilities.
    pub log_probs: Var,
    /// `B × 1` durations after the sigmoid.
    pub duration: Var,
}

/// Linear map to `N_a + 1`; softmax over the first `N_a`, sigmoid on the last.
#[derive(Debug, Clone)]
pub struct ContinuousUnembedding {
    lin: Linear,
    vocab: usize,
}

impl ContinuousUnembedding {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, vocab: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin: Linear::new(store, name, inputs, vocab + 1, rng),
            vocab,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, h: Var) -> UnembedOut {
        let y = self.lin.forward(tape, store, h);
        let logits = tape.slice_cols(y, 0, self.vocab);
        let log_probs = tape.log_softmax(logits);
        let d = tape.slice_cols(y, self.vocab, self.vocab + 1);
        let duration = tape.sigmoid(d);
        UnembedOut { log_probs, duration }
    }

    pub fn unembed_step(&self, store: &ParameterStore, hidden: &[f64]) -> StepOutput {
        let mut t = Tape::new();
        let h = t.constant(Mat::from_shape_vec((1, hidden.len()), hidden.to_vec()).expect("row"));
        let out = self.forward(&mut t, store, h);
        StepOutput {
            probs: t.value(out.log_probs).iter().map(|v| v.exp()).collect(),
            duration: t.scalar(out.duration),
        }
    }

    pub fn linear(&self) -> &Linear {
        &self.lin
    }
}

/// Per-variable embeddings of size `H`, summed.
#[derive(Debug, Clone)]
pub struct LabelEncoder {
    tables: Vec<ParamId>,
    cardinalities: Vec<usize>,
    pub size: usize,
}

impl LabelEncoder {
    pub fn new(store: &mut ParameterStore, name: &str, cardinalities: &[usize], size: usize, rng: &mut impl Rng) -> Self {
        let tables = cardinalities
            .iter()
            .enumerate()
            .map(|(i, &k)| store.add_uniform(format!("{name}.var{i}"), k, size, size, rng))
            .collect();
        Self {
            tables,
            cardinalities: cardinalities.to_vec(),
            size,
        }
    }

    pub fn check(&self, labels: &LabelVector) -> Result<()> {
        if labels.len() != self.tables.len() {
            return Err(Error::SchemaMismatch(format!(
                "label vector has {} entries, encoder expects {}",
                labels.len(),
                self.tables.len()
            )));
        }
        for (i, (&c, &k)) in labels.0.iter().zip(&self.cardinalities).enumerate() {
            if c >= k {
                return Err(Error::SchemaMismatch(format!("category {c} out of range for variable {i}")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, labels: &[&LabelVector]) -> Var {
        let mut acc: Option<Var> = None;
        for (i, &table) in self.tables.iter().enumerate() {
            let t = tape.param(store, table);
            let rows: Vec<usize> = labels.iter().map(|l| l.0[i]).collect();
            let e = tape.gather(t, &rows);
            acc = Some(match acc {
                Some(a) => tape.add(a, e),
                None => e,
            });
        }
        acc.unwrap_or_else(|| tape.constant(Mat::zeros((labels.len(), self.size))))
    }

    pub fn encode(&self, store: &ParameterStore, labels: &LabelVector) -> Result<Vec<f64>> {
        self.check(labels)?;
        let mut t = Tape::new();
        let v = self.forward(&mut t, store, &[labels]);
        Ok(t.value(v).iter().copied().collect())
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }
}

/// Per-layer hidden and memory states.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, layers: usize, size: usize) -> Self {
        let z = tape.constant(Mat::zeros((batch, size)));
        Self {
            h: vec![z; layers],
            c: vec![z; layers],
        }
    }

    /// Splits a `B × 2NS` block laid out as `[h_0 c_0 h_1 c_1 ...]`.
    pub fn from_flat(tape: &mut Tape, flat: Var, layers: usize, size: usize) -> Self {
        assert_eq!(tape.value(flat).ncols(), 2 * layers * size, "flat state width");
        let mut h = Vec::with_capacity(layers);
        let mut c = Vec::with_capacity(layers);
        for l in 0..layers {
            let at = 2 * l * size;
            h.push(tape.slice_cols(flat, at, at + size));
            c.push(tape.slice_cols(flat, at + size, at + 2 * size));
        }
        Self { h, c }
    }

    pub fn flatten(&self, tape: &mut Tape) -> Var {
        let parts: Vec<Var> = self.h.iter().zip(&self.c).flat_map(|(&h, &c)| [h, c]).collect();
        tape.concat(&parts)
    }

    /// Flat width `2 · N · S`.
    pub fn flat_size(layers: usize, size: usize) -> usize {
        2 * layers * size
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// `N` stacked LSTM layers of width `S`, gates ordered `[i f g o]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
    pub inputs: usize,
    pub size: usize,
}

impl Lstm {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, size: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let n_in = if l == 0 { inputs } else { size };
                let w_ih = store.add_uniform(format!("{name}.l{l}.w_ih"), n_in, 4 * size, size, rng);
                let w_hh = store.add_uniform(format!("{name}.l{l}.w_hh"), size, 4 * size, size, rng);
                let b = store.add_uniform(format!("{name}.l{l}.b"), 1, 4 * size, size, rng);
                store.value_mut(b).slice_mut(s![.., size..2 * size]).fill(1.0);
                LstmLayer { w_ih, w_hh, b }
            })
            .collect();
        Self { layers, inputs, size }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// One time step through every layer. Dropout (training only) is applied
    /// to the input of each layer above the first.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        state: &LstmState,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> (Var, LstmState) {
        let mut input = x;
        let mut next = LstmState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                input = tape.dropout(input, dropout, rng);
            }
            let w_ih = tape.param(store, layer.w_ih);
            let w_hh = tape.param(store, layer.w_hh);
            let b = tape.param(store, layer.b);
            let gx = tape.affine(input, w_ih, b);
            let gh = tape.matmul(state.h[l], w_hh);
            let gates = tape.add(gx, gh);
            let hc = tape.lstm_cell(gates, state.c[l]);
            let h = tape.slice_cols(hc, 0, self.size);
            let c = tape.slice_cols(hc, self.size, 2 * self.size);
            next.h.push(h);
            next.c.push(c);
            input = h;
        }
        (input, next)
    }
}

/// Posterior mean and log-variance of the latent Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// `z = μ + exp(logvar / 2) ⊙ ε`.
pub fn latent_sample(lp: &LatentParams, eps: &[f64]) -> Vec<f64> {
    lp.mu
        .iter()
        .zip(&lp.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Kullback–Leibler divergence from `N(μ, σ²)` to the standard normal.
pub fn kld(lp: &LatentParams) -> f64 {
    0.5 * lp
        .mu
        .iter()
        .zip(&lp.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Heads from the encoder output to `μ` and log-variance.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    mu: Linear,
    logvar: Linear,
    pub size: usize,
}

impl LatentBlock {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, size: usize, rng: &mut impl Rng) -> Self {
        Self {
            mu: Linear::new(store, &format!("{name}.mu"), inputs, size, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), inputs, size, rng),
            size,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, h: Var) -> (Var, Var) {
        let mu = self.mu.forward(tape, store, h);
        let logvar = self.logvar.forward(tape, store, h);
        (mu, logvar)
    }

    /// Reparameterised sample; `eps` is `B × latent` standard normal noise.
    pub fn sample(tape: &mut Tape, mu: Var, logvar: Var, eps: Mat) -> Var {
        let half = tape.scale(logvar, 0.5);
        let sd = tape.exp(half);
        let e = tape.constant(eps);
        let noise = tape.mul(sd, e);
        tape.add(mu, noise)
    }

    /// Batch-mean KL divergence to the standard normal prior.
    pub fn kld(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
        let batch = tape.value(mu).nrows() as f64;
        let mu2 = tape.square(mu);
        let var = tape.exp(logvar);
        let a = tape.add(mu2, var);
        let b = tape.sub(a, logvar);
        let total = tape.sum(b);
        let dims = tape.value(mu).len() as f64;
        // 0.5 · (Σ(μ² + σ² − logvar) − dims) / B
        let shifted = tape.scale(total, 0.5 / batch);
        let offset = tape.constant(Mat::from_elem((1, 1), -0.5 * dims / batch));
        tape.add(shifted, offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn embedding_shape_and_duration_slot() {
        let mut store = ParameterStore::new();
        let emb = ContinuousEmbedding::new(&mut store, "e", 10, 8, &mut rng());
        for tok in 0..10 {
            let v = emb.embed_step(&store, tok, 0.3).unwrap();
            assert_eq!(v.len(), 8);
            assert_eq!(v[7], 0.3);
        }
        let a = emb.embed_step(&store, 2, 0.25).unwrap();
        let b = emb.embed_step(&store, 3, 0.25).unwrap();
        assert_eq!(a[7], b[7]);
        assert_ne!(a[..7], b[..7]);
        assert!(matches!(emb.embed_step(&store, 10, 0.1), Err(Error::UnknownToken(10))));
    }

    #[test]
    fn zero_unembedding_is_uniform_with_half_duration() {
        let mut store = ParameterStore::new();
        let un = ContinuousUnembedding::new(&mut store, "u", 5, 10, &mut rng());
        store.value_mut(un.linear().weight()).fill(0.0);
        store.value_mut(un.linear().bias()).fill(0.0);
        let out = un.unembed_step(&store, &[0.0; 5]);
        assert!(out.probs.iter().all(|p| (p - 0.1).abs() < 1e-15));
        assert_eq!(out.duration, 0.5);
    }

    #[test]
    fn unembedding_outputs_simplex_and_open_interval() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let un = ContinuousUnembedding::new(&mut store, "u", 6, 10, &mut r);
        for _ in 0..50 {
            let h: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
            let out = un.unembed_step(&store, &h);
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.duration > 0.0 && out.duration < 1.0);
        }
    }

    #[test]
    fn label_encoder_sums_embeddings() {
        let mut store = ParameterStore::new();
        let enc = LabelEncoder::new(&mut store, "l", &[3, 2], 4, &mut rng());
        let out = enc.encode(&store, &LabelVector(vec![2, 1])).unwrap();
        assert_eq!(out.len(), 4);
        let t0 = store.value(enc.tables()[0]).row(2).to_owned();
        let t1 = store.value(enc.tables()[1]).row(1).to_owned();
        for k in 0..4 {
            assert!((out[k] - (t0[k] + t1[k])).abs() < 1e-15);
        }
        assert!(enc.encode(&store, &LabelVector(vec![3, 0])).is_err());
        assert!(enc.encode(&store, &LabelVector(vec![0])).is_err());
    }

    #[test]
    fn label_encoder_is_order_free() {
        let mut store = ParameterStore::new();
        let a = LabelEncoder::new(&mut store, "a", &[3, 2], 4, &mut rng());
        let b = LabelEncoder::new(&mut store, "b", &[2, 3], 4, &mut rng());
        let (a0, a1) = (store.value(a.tables()[0]).clone(), store.value(a.tables()[1]).clone());
        store.value_mut(b.tables()[0]).assign(&a1);
        store.value_mut(b.tables()[1]).assign(&a0);
        let x = a.encode(&store, &LabelVector(vec![1, 0])).unwrap();
        let y = b.encode(&store, &LabelVector(vec![0, 1])).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let mut store = ParameterStore::new();
        let enc = LabelEncoder::new(&mut store, "l", &[3, 2], 4, &mut rng());
        for &t in enc.tables() {
            store.value_mut(t).fill(0.0);
        }
        assert_eq!(enc.encode(&store, &LabelVector(vec![1, 1])).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn latent_sample_edge_cases() {
        let lp = LatentParams { mu: vec![0.3, -1.0], logvar: vec![0.4, 2.0] };
        assert_eq!(latent_sample(&lp, &[0.0, 0.0]), lp.mu);
        let unit = LatentParams { mu: vec![0.0; 2], logvar: vec![0.0; 2] };
        assert_eq!(latent_sample(&unit, &[1.5, -0.5]), vec![1.5, -0.5]);
        let tight = LatentParams { mu: vec![0.7], logvar: vec![-20.0] };
        assert!((latent_sample(&tight, &[3.0])[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn latent_sample_moments() {
        let mut r = rng();
        let lp = LatentParams { mu: vec![0.0; 3], logvar: vec![0.0; 3] };
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| r.sample(StandardNormal)).collect();
            for (k, z) in latent_sample(&lp, &eps).into_iter().enumerate() {
                sum[k] += z;
                sq[k] += z * z;
            }
        }
        for k in 0..3 {
            let m = sum[k] / n as f64;
            let var = sq[k] / n as f64 - m * m;
            assert!(m.abs() < 0.02, "mean {m}");
            assert!((var - 1.0).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn kld_closed_forms() {
        assert_eq!(kld(&LatentParams { mu: vec![0.0; 4], logvar: vec![0.0; 4] }), 0.0);
        assert!((kld(&LatentParams { mu: vec![1.0], logvar: vec![0.0] }) - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        let v = kld(&LatentParams { mu: vec![0.0], logvar: vec![1.0] });
        assert!((v - 0.5 * (e - 2.0)).abs() < 1e-15);
        assert!((v - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn tape_kld_matches_closed_form() {
        let mus = [[0.2, -0.4], [1.0, 0.0]];
        let lvs = [[0.1, -0.3], [0.0, 0.5]];
        let mut t = Tape::new();
        let mu = t.constant(crate::nn::mat(2, 2, mus.concat()));
        let lv = t.constant(crate::nn::mat(2, 2, lvs.concat()));
        let k = LatentBlock::kld(&mut t, mu, lv);
        let expect = (0..2)
            .map(|i| kld(&LatentParams { mu: mus[i].to_vec(), logvar: lvs[i].to_vec() }))
            .sum::<f64>()
            / 2.0;
        assert!((t.scalar(k) - expect).abs() < 1e-14);
    }

    #[test]
    fn lstm_state_flat_layout() {
        assert_eq!(LstmState::flat_size(4, 256), 2048);
        let mut t = Tape::new();
        let flat = t.constant(crate::nn::mat(1, 8, (0..8).map(f64::from).collect()));
        let st = LstmState::from_flat(&mut t, flat, 2, 2);
        assert_eq!(t.value(st.h[1]).iter().copied().collect::<Vec<_>>(), [4.0, 5.0]);
        assert_eq!(t.value(st.c[0]).iter().copied().collect::<Vec<_>>(), [2.0, 3.0]);
        let back = st.flatten(&mut t);
        assert_eq!(t.value(back), t.value(flat));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kld_is_non_negative(mu in proptest::collection::vec(-5.0f64..5.0, 1..8), lv in proptest::collection::vec(-5.0f64..5.0, 8)) {
                let lp = LatentParams { logvar: lv[..mu.len()].to_vec(), mu };
                prop_assert!(kld(&lp) >= 0.0);
            }
        }
    }
}
