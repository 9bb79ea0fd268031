//! Encoder-decoder transformer mapping a feature sequence to caption logits.
//!
//! Post-norm layers (`LN(x + sublayer(x))`), sinusoidal positions, scaled
//! token embeddings and an untied output projection. Dropout is applied to
//! the embedded inputs and to every sublayer output, and only when a
//! [`Dropout`] carries an RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::params::{Mat, ParamId, ParamStore};
use crate::tape::{AttnMask, Tape, Var};
use crate::vocab::{BOS, EOS, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Width of incoming feature rows; a learned projection to `d_model`
    /// is added when it differs.
    pub input_dim: usize,
}

/// Dropout state. Without an RNG it is the identity (evaluation mode).
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask = Mat::from_shape_fn(tape.value(x).dim(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert_uniform(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.insert_zeros(format!("{name}.b"), 1, fan_out),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert_ones(format!("{name}.g"), 1, d),
            bias: store.insert_zeros(format!("{name}.b"), 1, d),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHead {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::init(store, &format!("{name}.q"), d, d, rng),
            k: Linear::init(store, &format!("{name}.k"), d, d, rng),
            v: Linear::init(store, &format!("{name}.v"), d, d, rng),
            o: Linear::init(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    fn forward(&self, tape: &mut Tape, xq: Var, xkv: Var, mask: &AttnMask) -> Var {
        let q = self.q.forward(tape, xq);
        let k = self.k.forward(tape, xkv);
        let v = self.v.forward(tape, xkv);
        let a = tape.attention(q, k, v, self.heads, mask);
        self.o.forward(tape, a)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::init(store, &format!("{name}.inner"), d, ff, rng),
            outer: Linear::init(store, &format!("{name}.outer"), ff, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.inner.forward(tape, x);
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHead,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHead,
    norm1: Norm,
    cross_attn: MultiHead,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

/// One complete encoder-decoder language model ("language decoder").
#[derive(Clone, Debug)]
pub struct CaptionTransformer {
    pub config: DecoderConfig,
    input_proj: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    embed: ParamId,
    out: Linear,
    prefix: String,
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl CaptionTransformer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(structural(format!(
                "d_model {d} is not divisible by {} heads",
                config.heads
            )));
        }
        if config.vocab_size <= EOS {
            return Err(structural("vocabulary must contain the reserved tokens"));
        }
        let input_proj = (config.input_dim != d)
            .then(|| Linear::init(store, &format!("{prefix}.input_proj"), config.input_dim, d, rng));
        let encoder = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.enc{l}");
                EncoderLayer {
                    attn: MultiHead::init(store, &format!("{name}.attn"), d, config.heads, rng),
                    norm1: Norm::init(store, &format!("{name}.norm1"), d),
                    ff: FeedForward::init(store, &format!("{name}.ff"), d, config.ff_dim, rng),
                    norm2: Norm::init(store, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.dec{l}");
                DecoderLayer {
                    self_attn: MultiHead::init(store, &format!("{name}.self_attn"), d, config.heads, rng),
                    norm1: Norm::init(store, &format!("{name}.norm1"), d),
                    cross_attn: MultiHead::init(store, &format!("{name}.cross_attn"), d, config.heads, rng),
                    norm2: Norm::init(store, &format!("{name}.norm2"), d),
                    ff: FeedForward::init(store, &format!("{name}.ff"), d, config.ff_dim, rng),
                    norm3: Norm::init(store, &format!("{name}.norm3"), d),
                }
            })
            .collect();
        let embed = store.insert_uniform(format!("{prefix}.embed"), d, config.vocab_size, rng);
        // Stored d × |V| for the fan-in bound; transposed into a |V| × d table below.
        let table = store.get(embed).t().to_owned();
        *store.get_mut(embed) = table;
        let out = Linear::init(store, &format!("{prefix}.out"), d, config.vocab_size, rng);
        Ok(Self {
            config,
            input_proj,
            encoder,
            decoder,
            embed,
            out,
            prefix: prefix.to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn has_input_projection(&self) -> bool {
        self.input_proj.is_some()
    }

    /// Every parameter owned by this transformer.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let dotted = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(_, name, _)| name.starts_with(&dotted))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Output projection handles (weight, bias).
    pub fn output_projection(&self) -> (ParamId, ParamId) {
        (self.out.w, self.out.b)
    }

    /// Self-attention encoding of a feature sequence; masked steps receive
    /// no attention weight.
    pub fn encode_on(&self, tape: &mut Tape, features: Var, mask: &[bool], drop: &mut Dropout) -> Result<Var> {
        let (t_len, width) = tape.value(features).dim();
        if mask.len() != t_len {
            return Err(structural(format!(
                "mask length {} for {t_len} time steps",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(structural("every time step is masked"));
        }
        if width != self.config.input_dim {
            return Err(structural(format!(
                "feature width {width}, encoder expects {}",
                self.config.input_dim
            )));
        }
        let mut x = match &self.input_proj {
            Some(p) => p.forward(tape, features),
            None => features,
        };
        let pe = tape.constant(sinusoidal_positions(t_len, self.config.d_model));
        x = tape.add(x, pe);
        x = drop.apply(tape, x);
        let attn_mask = AttnMask {
            key_valid: mask.to_vec(),
            causal: false,
        };
        for layer in &self.encoder {
            let a = layer.attn.forward(tape, x, x, &attn_mask);
            let a = drop.apply(tape, a);
            let r = tape.add(x, a);
            x = layer.norm1.forward(tape, r);
            let f = layer.ff.forward(tape, x);
            let f = drop.apply(tape, f);
            let r = tape.add(x, f);
            x = layer.norm2.forward(tape, r);
        }
        Ok(x)
    }

    /// Logits for every position of a teacher-forced input (`[BOS, w1, ..]`).
    /// Row `s` predicts the token following `input_ids[s]` and depends only
    /// on `input_ids[..=s]`.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        memory: Var,
        memory_mask: &[bool],
        input_ids: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if input_ids.is_empty() {
            return Err(structural("decoder input is empty"));
        }
        if let Some(&bad) = input_ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(structural(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if memory_mask.len() != tape.value(memory).nrows() {
            return Err(structural("memory mask length does not match memory"));
        }
        let d = self.config.d_model;
        let table = tape.param(self.embed);
        let e = tape.gather(table, input_ids);
        let e = tape.scale(e, (d as f64).sqrt());
        let pe = tape.constant(sinusoidal_positions(input_ids.len(), d));
        let mut x = tape.add(e, pe);
        x = drop.apply(tape, x);
        let causal = AttnMask::causal(input_ids.len());
        let cross = AttnMask {
            key_valid: memory_mask.to_vec(),
            causal: false,
        };
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, x, x, &causal);
            let a = drop.apply(tape, a);
            let r = tape.add(x, a);
            x = layer.norm1.forward(tape, r);
            let c = layer.cross_attn.forward(tape, x, memory, &cross);
            let c = drop.apply(tape, c);
            let r = tape.add(x, c);
            x = layer.norm2.forward(tape, r);
            let f = layer.ff.forward(tape, x);
            let f = drop.apply(tape, f);
            let r = tape.add(x, f);
            x = layer.norm3.forward(tape, r);
        }
        Ok(self.out.forward(tape, x))
    }
}

/// Evaluation-mode encoder pass.
pub fn encode_sequence(store: &ParamStore, model: &CaptionTransformer, features: &Mat, mask: &[bool]) -> Result<Mat> {
    let mut tape = Tape::new(store);
    let f = tape.constant_ref(features);
    let m = model.encode_on(&mut tape, f, mask, &mut Dropout::eval())?;
    Ok(tape.value(m).clone())
}

/// Evaluation-mode teacher-forced logits (`S × |V|`).
pub fn teacher_forced_logits(
    store: &ParamStore,
    model: &CaptionTransformer,
    memory: &Mat,
    memory_mask: &[bool],
    input_ids: &[usize],
) -> Result<Mat> {
    if input_ids.first() != Some(&BOS) {
        return Err(structural("decoder input must begin with BOS"));
    }
    let mut tape = Tape::new(store);
    let m = tape.constant_ref(memory);
    let logits = model.decode_on(&mut tape, m, memory_mask, input_ids, &mut Dropout::eval())?;
    Ok(tape.value(logits).clone())
}

/// Mean token cross-entropy over non-PAD reference positions.
pub fn language_loss(logits: &Mat, reference_ids: &[usize]) -> Result<f64> {
    if reference_ids.is_empty() {
        return Err(structural("empty reference"));
    }
    if logits.nrows() != reference_ids.len() {
        return Err(structural(format!(
            "{} logit rows for {} reference tokens",
            logits.nrows(),
            reference_ids.len()
        )));
    }
    if let Some(&bad) = reference_ids.iter().find(|&&i| i >= logits.ncols()) {
        return Err(structural(format!("reference id {bad} outside vocabulary")));
    }
    let targets = pad_masked(reference_ids);
    if targets.iter().all(Option::is_none) {
        return Err(structural("reference has only padding"));
    }
    let empty = ParamStore::new();
    let mut tape = Tape::new(&empty);
    let l = tape.constant_ref(logits);
    let loss = tape.cross_entropy(l, &targets);
    Ok(tape.scalar(loss))
}

pub(crate) fn pad_masked(ids: &[usize]) -> Vec<Option<usize>> {
    ids.iter().map(|&i| (i != PAD).then_some(i)).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_len` generated tokens. The
/// returned ids exclude BOS and EOS.
pub fn generate_greedy(
    store: &ParamStore,
    model: &CaptionTransformer,
    memory: &Mat,
    memory_mask: &[bool],
    max_len: usize,
) -> Vec<usize> {
    let mut input = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        let mut tape = Tape::new(store);
        let m = tape.constant_ref(memory);
        let logits = model
            .decode_on(&mut tape, m, memory_mask, &input, &mut Dropout::eval())
            .expect("greedy decoding only feeds in-vocabulary ids");
        let last = tape.value(logits).row(input.len() - 1).to_owned();
        let next = argmax(last.view());
        if next == EOS {
            break;
        }
        out.push(next);
        input.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softmax_rows;
    use rand::SeedableRng;

    fn tiny(vocab: usize, input_dim: usize, seed: u64) -> (ParamStore, CaptionTransformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            ff_dim: 16,
            dropout: 0.3,
            vocab_size: vocab,
            input_dim,
        };
        let m = CaptionTransformer::init(&mut store, "lm", cfg, &mut rng).unwrap();
        (store, m)
    }

    fn features(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encoder_is_deterministic_and_validates() {
        let (store, m) = tiny(11, 8, 1);
        let f = features(4, 8, 2);
        let a = encode_sequence(&store, &m, &f, &[true; 4]).unwrap();
        let b = encode_sequence(&store, &m, &f, &[true; 4]).unwrap();
        assert_eq!(a, b);
        assert!(encode_sequence(&store, &m, &f, &[false; 4]).is_err());
        assert!(encode_sequence(&store, &m, &f, &[true; 3]).is_err());
        assert!(encode_sequence(&store, &m, &features(4, 6, 2), &[true; 4]).is_err());

        let single = encode_sequence(&store, &m, &features(1, 8, 3), &[true]).unwrap();
        assert_eq!(single.dim(), (1, 8));
    }

    #[test]
    fn masked_tail_does_not_leak() {
        let (store, m) = tiny(11, 8, 4);
        let mut f = features(5, 8, 5);
        let mask = [true, true, true, false, false];
        let full = encode_sequence(&store, &m, &f, &mask).unwrap();
        for r in 3..5 {
            f.row_mut(r).fill(1234.5);
        }
        let garbage = encode_sequence(&store, &m, &f, &mask).unwrap();
        let truncated = encode_sequence(&store, &m, &f.slice(ndarray::s![..3, ..]).to_owned(), &[true; 3]).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((full[[r, c]] - garbage[[r, c]]).abs() < 1e-12);
                assert!((full[[r, c]] - truncated[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let (store, m) = tiny(11, 8, 6);
        let memory = encode_sequence(&store, &m, &features(3, 8, 7), &[true; 3]).unwrap();
        let ids = vec![BOS, 5, 7, 4, 9];
        let base = teacher_forced_logits(&store, &m, &memory, &[true; 3], &ids).unwrap();
        assert_eq!(base.dim(), (5, 11));
        for s in 1..ids.len() {
            let mut changed = ids.clone();
            changed[s] = if ids[s] == 10 { 6 } else { 10 };
            let alt = teacher_forced_logits(&store, &m, &memory, &[true; 3], &changed).unwrap();
            for r in 0..s {
                assert_eq!(base.row(r), alt.row(r), "row {r} changed when token {s} changed");
            }
            assert_ne!(base.row(s), alt.row(s));
        }
        let bos_only = teacher_forced_logits(&store, &m, &memory, &[true; 3], &[BOS]).unwrap();
        assert_eq!(bos_only.nrows(), 1);
        assert!(teacher_forced_logits(&store, &m, &memory, &[true; 3], &[BOS, 11]).is_err());
        assert!(teacher_forced_logits(&store, &m, &memory, &[true; 3], &[5, 6]).is_err());
    }

    #[test]
    fn teacher_forcing_matches_stepwise_oracle() {
        let (store, m) = tiny(11, 8, 8);
        let memory = encode_sequence(&store, &m, &features(4, 8, 9), &[true, true, false, true]).unwrap();
        let mask = [true, true, false, true];
        let ids = vec![BOS, 4, 8, 6, 10, 5];
        let all = teacher_forced_logits(&store, &m, &memory, &mask, &ids).unwrap();
        for s in 0..ids.len() {
            let prefix = teacher_forced_logits(&store, &m, &memory, &mask, &ids[..=s]).unwrap();
            for c in 0..11 {
                assert!((prefix[[s, c]] - all[[s, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn language_loss_examples() {
        let uniform = Mat::zeros((3, 4));
        let l = language_loss(&uniform, &[1, 2, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);

        let mut margin_losses = vec![];
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut lg = Mat::zeros((2, 4));
            lg[[0, 2]] = margin;
            lg[[1, 3]] = margin;
            margin_losses.push(language_loss(&lg, &[2, 3]).unwrap());
        }
        assert!(margin_losses.windows(2).all(|w| w[1] < w[0]));
        assert!(margin_losses[3] < 1e-20);

        let lg = ndarray::array![[0.3, -1.0, 2.0], [1.0, 0.0, 0.5]];
        let a = language_loss(&lg.slice(ndarray::s![0..1, ..]).to_owned(), &[1]).unwrap();
        let b = language_loss(&lg.slice(ndarray::s![1..2, ..]).to_owned(), &[2]).unwrap();
        assert!((language_loss(&lg, &[1, 2]).unwrap() - (a + b) / 2.0).abs() < 1e-15);
        // PAD positions are excluded.
        assert!((language_loss(&lg, &[1, PAD]).unwrap() - a).abs() < 1e-15);

        assert!(language_loss(&Mat::zeros((0, 4)), &[]).is_err());
        assert!(language_loss(&Mat::zeros((1, 4)), &[PAD]).is_err());
        assert!(language_loss(&Mat::zeros((2, 4)), &[1]).is_err());
    }

    fn rig_output(store: &mut ParamStore, m: &CaptionTransformer, bias: ndarray::Array1<f64>) {
        let (w, b) = m.output_projection();
        store.get_mut(w).fill(0.0);
        store.get_mut(b).row_mut(0).assign(&bias);
    }

    #[test]
    fn greedy_rigged_eos_gives_empty_caption() {
        let (mut store, m) = tiny(11, 8, 10);
        let mut bias = ndarray::Array1::zeros(11);
        bias[EOS] = 5.0;
        rig_output(&mut store, &m, bias);
        let memory = encode_sequence(&store, &m, &features(2, 8, 1), &[true; 2]).unwrap();
        assert!(generate_greedy(&store, &m, &memory, &[true; 2], 20).is_empty());
    }

    #[test]
    fn greedy_rigged_cycle() {
        // Output projection reads the embedding of the current token through
        // the residual stream: make every layer's sublayers vanish so the
        // final state is LN(emb·√d + PE), then rig the projection.
        let (mut store, m) = tiny(11, 8, 12);
        for (id, name, _) in store.clone().iter() {
            if name.contains(".o.w") || name.contains(".o.b") || name.contains(".outer.") {
                store.get_mut(id).fill(0.0);
            }
        }
        let (a, b) = (5usize, 6usize);
        // One-hot embeddings on distinct channels with a large magnitude so
        // position encodings cannot flip the argmax.
        let embed = store.id("lm.embed").unwrap();
        let table = store.get_mut(embed);
        table.fill(0.0);
        table[[BOS, 0]] = 10.0;
        table[[a, 2]] = 10.0;
        table[[b, 4]] = 10.0;
        let (w, bias) = m.output_projection();
        let proj = store.get_mut(w);
        proj.fill(0.0);
        proj[[0, a]] = 10.0; // after BOS emit a
        proj[[2, b]] = 10.0; // after a emit b
        proj[[4, EOS]] = 10.0; // after b stop
        store.get_mut(bias).fill(0.0);
        let memory = encode_sequence(&store, &m, &features(2, 8, 3), &[true; 2]).unwrap();
        let out = generate_greedy(&store, &m, &memory, &[true; 2], 20);
        assert_eq!(out, vec![a, b]);
        let run2 = generate_greedy(&store, &m, &memory, &[true; 2], 20);
        assert_eq!(out, run2);
    }

    #[test]
    fn greedy_respects_max_len_and_ties() {
        let (mut store, m) = tiny(11, 8, 13);
        rig_output(&mut store, &m, ndarray::Array1::zeros(11));
        let memory = encode_sequence(&store, &m, &features(2, 8, 4), &[true; 2]).unwrap();
        // All logits tie: lowest id (PAD) wins every step.
        assert_eq!(generate_greedy(&store, &m, &memory, &[true; 2], 3), vec![PAD; 3]);
        assert_eq!(argmax(ndarray::array![1.0, 3.0, 3.0].view()), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (store, m) = tiny(11, 8, 14);
        let memory = encode_sequence(&store, &m, &features(3, 8, 5), &[true; 3]).unwrap();
        let lg = teacher_forced_logits(&store, &m, &memory, &[true; 3], &[BOS, 4, 5]).unwrap();
        for row in softmax_rows(&lg).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let (store, m) = tiny(11, 8, 15);
        let f = features(3, 8, 6);
        let eval = encode_sequence(&store, &m, &f, &[true; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&store);
        let fv = tape.constant_ref(&f);
        let out = m
            .encode_on(&mut tape, fv, &[true; 3], &mut Dropout::train(0.3, &mut rng))
            .unwrap();
        assert_ne!(tape.value(out), &eval);
    }

    #[test]
    fn concat_width_gets_projection() {
        let (_, plain) = tiny(11, 8, 16);
        assert!(!plain.has_input_projection());
        let (store, wide) = tiny(11, 16, 16);
        assert!(wide.has_input_projection());
        let w = store.id("lm.input_proj.w").unwrap();
        assert_eq!(store.get(w).dim(), (16, 8));
        let memory = encode_sequence(&store, &wide, &features(3, 16, 1), &[true; 3]).unwrap();
        assert_eq!(memory.dim(), (3, 8));
    }
}
