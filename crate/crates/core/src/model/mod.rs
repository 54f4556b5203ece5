//! Small decoder-only causal transformer with exact hand-written gradients.
//!
//! The input embedding at position `t` is the sum of the token row, the
//! positional row for `t`, the speaker row, and the response-role vector when
//! the token belongs to the conditioning response. Blocks are
//! pre-normalization (attention, then a GELU feed-forward), followed by a
//! final layer norm and an output projection tied to the token table.

mod checkpoint;
mod gradcheck;
pub mod kernels;
mod real;
mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Speaker;
use crate::error::{Error, Result};
use crate::sequencing::EncodedSequence;
use crate::tokenizer::TokenId;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_model, relative_error, GradCheckReport, GRAD_FLOOR};
pub use real::Real;
pub use trace::{quantize, ts_probability, ts_trace, TsTrace};

use kernels::{gelu, gelu_backward, layernorm, layernorm_backward, linear, linear_backward};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; `vocab_size` must be set from the vocabulary.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 128,
            dropout_rate: 0.0,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, c, f, t) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let per_layer = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (f * c + f) + (c * f + c);
        v * c + t * c + 2 * c + c + self.n_layers * per_layer + 2 * c
    }
}

/// A named, shaped slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Gains of normalization layers start at one; everything else is drawn.
    fn init_kind(&self) -> Init {
        if self.name.ends_with(".gain") {
            Init::One
        } else if self.name.ends_with(".bias") {
            Init::Zero
        } else {
            Init::Normal
        }
    }
}

enum Init {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_gain: usize,
    ln1_bias: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
    wte: usize,
    wpe: usize,
    speaker: usize,
    response: usize,
    layers: Vec<LayerOffsets>,
    lnf_gain: usize,
    lnf_bias: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (v, c, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let b = ParamBlock {
                name,
                shape,
                offset,
            };
            offset += b.len();
            let o = b.offset;
            blocks.push(b);
            o
        };
        let wte = add("wte".into(), vec![v, c]);
        let wpe = add("wpe".into(), vec![t, c]);
        let speaker = add("speaker".into(), vec![2, c]);
        let response = add("response_role".into(), vec![1, c]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_gain: add(p("ln1.gain"), vec![c]),
                ln1_bias: add(p("ln1.bias"), vec![c]),
                qkv_w: add(p("attn.qkv.weight"), vec![3 * c, c]),
                qkv_b: add(p("attn.qkv.bias"), vec![3 * c]),
                proj_w: add(p("attn.proj.weight"), vec![c, c]),
                proj_b: add(p("attn.proj.bias"), vec![c]),
                ln2_gain: add(p("ln2.gain"), vec![c]),
                ln2_bias: add(p("ln2.bias"), vec![c]),
                fc_w: add(p("mlp.fc.weight"), vec![f, c]),
                fc_b: add(p("mlp.fc.bias"), vec![f]),
                out_w: add(p("mlp.out.weight"), vec![c, f]),
                out_b: add(p("mlp.out.bias"), vec![c]),
            });
        }
        let lnf_gain = add("lnf.gain".into(), vec![c]);
        let lnf_bias = add("lnf.bias".into(), vec![c]);
        Layout {
            blocks,
            wte,
            wpe,
            speaker,
            response,
            layers,
            lnf_gain,
            lnf_bias,
            total: offset,
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Next-token logits for every position of one sequence, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn probs(&self, t: usize) -> Vec<T> {
        let mut r = self.row(t).to_vec();
        kernels::softmax(&mut r);
        r
    }
}

/// Masked next-token negative log-likelihood over one sequence's logits.
///
/// Returns the mean loss and its gradient with respect to the logits.
pub fn nll_loss<T: Real>(
    logits: &Logits<T>,
    token_ids: &[TokenId],
    loss_mask: &[bool],
) -> Result<(T, Logits<T>)> {
    if token_ids.len() != loss_mask.len() || logits.rows != token_ids.len() {
        return Err(Error::Invalid("logits, tokens and mask differ in length".into()));
    }
    let terms: Vec<usize> = (1..token_ids.len()).filter(|&t| loss_mask[t]).collect();
    if terms.is_empty() {
        return Err(Error::Invalid("loss mask selects no targets".into()));
    }
    let scale = T::from_f64(1.0 / terms.len() as f64);
    let mut grad = Logits {
        rows: logits.rows,
        vocab: logits.vocab,
        data: vec![T::ZERO; logits.data.len()],
    };
    let mut loss = T::ZERO;
    for &t in &terms {
        let target = token_ids[t] as usize;
        let row = logits.row(t - 1);
        loss += kernels::log_sum_exp(row) - row[target];
        let mut p = row.to_vec();
        kernels::softmax(&mut p);
        p[target] -= T::ONE;
        for (g, pv) in grad.data[(t - 1) * logits.vocab..t * logits.vocab].iter_mut().zip(p) {
            *g = pv * scale;
        }
    }
    Ok((loss * scale, grad))
}

struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    att_y: Vec<T>,
    proj_mask: Option<Vec<T>>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
    out_mask: Option<Vec<T>>,
}

/// Activations retained from a forward pass for backpropagation.
pub(crate) struct Cache<T> {
    n: usize,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
}

/// Borrowed model input: one unpadded sequence.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [TokenId],
    pub speakers: &'a [Speaker],
    pub response: &'a [bool],
}

impl<'a> From<&'a EncodedSequence> for SeqInput<'a> {
    fn from(s: &'a EncodedSequence) -> Self {
        SeqInput {
            tokens: &s.token_ids,
            speakers: &s.speaker_ids,
            response: &s.response_flags,
        }
    }
}

fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, rate: f64, len: usize) -> Vec<T> {
    use rand::Rng;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep })
        .collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= *k;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLM<T: Real = f32> {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> TransformerLM<T> {
    /// Seeded initialization: weights and embeddings from N(0, 0.02²),
    /// biases zero, normalization gains one.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut params = vec![T::ZERO; layout.total];
        for b in &layout.blocks {
            let init = b.init_kind();
            for p in &mut params[b.range()] {
                *p = match init {
                    Init::Normal => T::from_f64(normal.sample(&mut rng)),
                    Init::Zero => T::ZERO,
                    Init::One => T::ONE,
                };
            }
        }
        Ok(TransformerLM {
            cfg: cfg.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Converts the element type, e.g. to `f64` for gradient checking.
    pub fn cast<U: Real>(&self) -> TransformerLM<U> {
        TransformerLM {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect(),
        }
    }

    fn check_input(&self, seq: &SeqInput<'_>) -> Result<()> {
        let n = seq.tokens.len();
        if n == 0 {
            return Err(Error::Invalid("empty sequence".into()));
        }
        if seq.speakers.len() != n || seq.response.len() != n {
            return Err(Error::Invalid("per-token inputs differ in length".into()));
        }
        if n > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                sample: "<forward input>".into(),
                len: n,
                max: self.cfg.max_seq_len,
            });
        }
        if let Some(bad) = seq.tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the transformer stack up to the final layer norm.
    pub(crate) fn forward_cache(
        &self,
        seq: &SeqInput<'_>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Cache<T>> {
        self.check_input(seq)?;
        let cfg = &self.cfg;
        let (n, c, f) = (seq.tokens.len(), cfg.d_model, cfg.d_ff);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let p = &self.params;
        let rate = if dropout.is_some() { cfg.dropout_rate } else { 0.0 };
        let mut mask_for = |len: usize| -> Option<Vec<T>> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => Some(dropout_mask(rng, rate, len)),
                _ => None,
            }
        };

        let mut x = vec![T::ZERO; n * c];
        let resp = &p[self.layout.response..self.layout.response + c];
        for t in 0..n {
            let tok = seq.tokens[t] as usize;
            let spk = seq.speakers[t].index();
            let row = &mut x[t * c..(t + 1) * c];
            let we = &p[self.layout.wte + tok * c..self.layout.wte + (tok + 1) * c];
            let pe = &p[self.layout.wpe + t * c..self.layout.wpe + (t + 1) * c];
            let se = &p[self.layout.speaker + spk * c..self.layout.speaker + (spk + 1) * c];
            for i in 0..c {
                row[i] = we[i] + pe[i] + se[i];
            }
            if seq.response[t] {
                for i in 0..c {
                    row[i] += resp[i];
                }
            }
        }
        let emb_mask = mask_for(n * c);
        apply_mask(&mut x, &emb_mask);

        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &self.layout.layers {
            let mut ln1 = vec![T::ZERO; n * c];
            let mut ln1_mean = vec![T::ZERO; n];
            let mut ln1_rstd = vec![T::ZERO; n];
            layernorm(
                &mut ln1,
                &mut ln1_mean,
                &mut ln1_rstd,
                &x,
                &p[lo.ln1_gain..lo.ln1_gain + c],
                &p[lo.ln1_bias..lo.ln1_bias + c],
                n,
                c,
            );
            let mut qkv = vec![T::ZERO; n * 3 * c];
            linear(
                &mut qkv,
                &ln1,
                &p[lo.qkv_w..lo.qkv_w + 3 * c * c],
                &p[lo.qkv_b..lo.qkv_b + 3 * c],
                n,
                c,
                3 * c,
            );

            let mut att = vec![T::ZERO; nh * n * n];
            let mut att_y = vec![T::ZERO; n * c];
            for h in 0..nh {
                for t in 0..n {
                    let q = &qkv[t * 3 * c + h * hd..t * 3 * c + (h + 1) * hd];
                    let row = &mut att[(h * n + t) * n..(h * n + t) * n + t + 1];
                    for (u, s) in row.iter_mut().enumerate() {
                        let k = &qkv[u * 3 * c + c + h * hd..u * 3 * c + c + (h + 1) * hd];
                        *s = kernels::dot(q, k) * scale;
                    }
                    kernels::softmax(row);
                    let y = &mut att_y[t * c + h * hd..t * c + (h + 1) * hd];
                    for (u, &pr) in row.iter().enumerate() {
                        let v = &qkv[u * 3 * c + 2 * c + h * hd..u * 3 * c + 2 * c + (h + 1) * hd];
                        kernels::axpy(pr, v, y);
                    }
                }
            }
            let mut proj = vec![T::ZERO; n * c];
            linear(
                &mut proj,
                &att_y,
                &p[lo.proj_w..lo.proj_w + c * c],
                &p[lo.proj_b..lo.proj_b + c],
                n,
                c,
                c,
            );
            let proj_mask = mask_for(n * c);
            apply_mask(&mut proj, &proj_mask);
            let x_mid: Vec<T> = x.iter().zip(&proj).map(|(a, b)| *a + *b).collect();

            let mut ln2 = vec![T::ZERO; n * c];
            let mut ln2_mean = vec![T::ZERO; n];
            let mut ln2_rstd = vec![T::ZERO; n];
            layernorm(
                &mut ln2,
                &mut ln2_mean,
                &mut ln2_rstd,
                &x_mid,
                &p[lo.ln2_gain..lo.ln2_gain + c],
                &p[lo.ln2_bias..lo.ln2_bias + c],
                n,
                c,
            );
            let mut fc_pre = vec![T::ZERO; n * f];
            linear(
                &mut fc_pre,
                &ln2,
                &p[lo.fc_w..lo.fc_w + f * c],
                &p[lo.fc_b..lo.fc_b + f],
                n,
                c,
                f,
            );
            let mut fc_act = vec![T::ZERO; n * f];
            gelu(&mut fc_act, &fc_pre);
            let mut out = vec![T::ZERO; n * c];
            linear(
                &mut out,
                &fc_act,
                &p[lo.out_w..lo.out_w + c * f],
                &p[lo.out_b..lo.out_b + c],
                n,
                f,
                c,
            );
            let out_mask = mask_for(n * c);
            apply_mask(&mut out, &out_mask);
            let x_next: Vec<T> = x_mid.iter().zip(&out).map(|(a, b)| *a + *b).collect();

            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_next),
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                att_y,
                proj_mask,
                x_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                fc_pre,
                fc_act,
                out_mask,
            });
        }

        let mut lnf = vec![T::ZERO; n * c];
        let mut lnf_mean = vec![T::ZERO; n];
        let mut lnf_rstd = vec![T::ZERO; n];
        layernorm(
            &mut lnf,
            &mut lnf_mean,
            &mut lnf_rstd,
            &x,
            &p[self.layout.lnf_gain..self.layout.lnf_gain + c],
            &p[self.layout.lnf_bias..self.layout.lnf_bias + c],
            n,
            c,
        );
        Ok(Cache {
            n,
            emb_mask,
            layers,
            x_final: x,
            lnf,
            lnf_mean,
            lnf_rstd,
        })
    }

    /// Logits at position `t` from a cached forward pass.
    pub(crate) fn logits_at(&self, cache: &Cache<T>, t: usize) -> Vec<T> {
        let (c, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let h = &cache.lnf[t * c..(t + 1) * c];
        let wte = &self.params[self.layout.wte..self.layout.wte + v * c];
        (0..v).map(|j| kernels::dot(h, &wte[j * c..(j + 1) * c])).collect()
    }

    /// Final-layer hidden states (after the last layer norm), `n * d_model`.
    pub(crate) fn hidden_states(&self, seq: &SeqInput<'_>) -> Result<Vec<T>> {
        Ok(self.forward_cache(seq, None)?.lnf)
    }

    /// Full next-token logits for one sequence.
    pub fn logits(&self, seq: &SeqInput<'_>) -> Result<Logits<T>> {
        let cache = self.forward_cache(seq, None)?;
        let mut data = Vec::with_capacity(cache.n * self.cfg.vocab_size);
        for t in 0..cache.n {
            data.extend(self.logits_at(&cache, t));
        }
        Ok(Logits {
            rows: cache.n,
            vocab: self.cfg.vocab_size,
            data,
        })
    }

    /// Batched forward pass. Sequences are processed at their own length, so
    /// padding never enters attention or the loss and batch members do not
    /// interact. `dropout_seed` enables train mode.
    pub fn forward(
        &self,
        batch: &[EncodedSequence],
        dropout_seed: Option<u64>,
    ) -> Result<Vec<Logits<T>>> {
        batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seq = SeqInput::from(s);
                match dropout_seed {
                    None => self.logits(&seq),
                    Some(seed) => {
                        let mut rng = sequence_rng(seed, i);
                        let cache = self.forward_cache(&seq, Some(&mut rng))?;
                        let mut data = Vec::new();
                        for t in 0..cache.n {
                            data.extend(self.logits_at(&cache, t));
                        }
                        Ok(Logits {
                            rows: cache.n,
                            vocab: self.cfg.vocab_size,
                            data,
                        })
                    }
                }
            })
            .collect()
    }

    /// Summed masked NLL and number of counted terms for one sequence, in
    /// evaluation mode.
    pub fn sequence_loss(&self, seq: &EncodedSequence) -> Result<(f64, usize)> {
        let cache = self.forward_cache(&SeqInput::from(seq), None)?;
        let mut sum = 0.0;
        let mut terms = 0;
        for t in 1..seq.len() {
            if seq.loss_mask[t] {
                let row = self.logits_at(&cache, t - 1);
                let target = seq.token_ids[t] as usize;
                sum += (kernels::log_sum_exp(&row) - row[target]).to_f64();
                terms += 1;
            }
        }
        Ok((sum, terms))
    }

    /// Mean masked NLL over every counted term in `batch` (evaluation mode).
    pub fn batch_loss(&self, batch: &[EncodedSequence]) -> Result<f64> {
        let mut sum = 0.0;
        let mut terms = 0;
        for s in batch {
            let (l, k) = self.sequence_loss(s)?;
            sum += l;
            terms += k;
        }
        if terms == 0 {
            return Err(Error::Invalid("loss mask selects no targets".into()));
        }
        Ok(sum / terms as f64)
    }

    /// Mean masked NLL over the batch and its exact gradient with respect to
    /// every parameter. `dropout_seed` enables train mode.
    pub fn loss_and_grad(
        &self,
        batch: &[&EncodedSequence],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<T>)> {
        let terms: usize = batch.iter().map(|s| s.loss_terms()).sum();
        if terms == 0 {
            return Err(Error::Invalid("loss mask selects no targets".into()));
        }
        let scale = T::from_f64(1.0 / terms as f64);
        let mut grad = vec![T::ZERO; self.params.len()];
        let mut loss = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let mut rng = dropout_seed.map(|seed| sequence_rng(seed, i));
            let cache = self.forward_cache(&SeqInput::from(*s), rng.as_mut())?;
            loss += self.backward_sequence(&cache, s, scale, &mut grad);
        }
        Ok((loss / terms as f64, grad))
    }

    /// Backpropagates one sequence's masked NLL (scaled by `scale`) into
    /// `grad`; returns the unscaled summed loss.
    fn backward_sequence(
        &self,
        cache: &Cache<T>,
        seq: &EncodedSequence,
        scale: T,
        grad: &mut [T],
    ) -> f64 {
        let cfg = &self.cfg;
        let (n, c, f) = (cache.n, cfg.d_model, cfg.d_ff);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let p = &self.params;
        let lay = &self.layout;

        let mut dlnf = vec![T::ZERO; n * c];
        let mut loss = 0.0;
        for t in 1..n {
            if !seq.loss_mask[t] {
                continue;
            }
            let mut row = self.logits_at(cache, t - 1);
            let target = seq.token_ids[t] as usize;
            loss += (kernels::log_sum_exp(&row) - row[target]).to_f64();
            kernels::softmax(&mut row);
            row[target] -= T::ONE;
            let h = &cache.lnf[(t - 1) * c..t * c];
            let dh = &mut dlnf[(t - 1) * c..t * c];
            for (j, g) in row.into_iter().enumerate() {
                let g = g * scale;
                let base = lay.wte + j * c;
                kernels::axpy(g, &p[base..base + c], dh);
                kernels::axpy(g, h, &mut grad[base..base + c]);
            }
        }

        let mut dx = vec![T::ZERO; n * c];
        {
            let (dg, db) = split_two(grad, lay.lnf_gain, c, lay.lnf_bias, c);
            layernorm_backward(
                &mut dx,
                dg,
                db,
                &dlnf,
                &cache.x_final,
                &p[lay.lnf_gain..lay.lnf_gain + c],
                &cache.lnf_mean,
                &cache.lnf_rstd,
                n,
                c,
            );
        }

        let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward branch: x_next = x_mid + drop(out(gelu(fc(ln2(x_mid))))).
            let mut dout = dx.clone();
            apply_mask(&mut dout, &lc.out_mask);
            let mut dact = vec![T::ZERO; n * f];
            {
                let (dw, db) = split_two(grad, lo.out_w, c * f, lo.out_b, c);
                linear_backward(&mut dact, dw, db, &dout, &lc.fc_act, &p[lo.out_w..lo.out_w + c * f], n, f, c);
            }
            let mut dfc = vec![T::ZERO; n * f];
            gelu_backward(&mut dfc, &lc.fc_pre, &dact);
            let mut dln2 = vec![T::ZERO; n * c];
            {
                let (dw, db) = split_two(grad, lo.fc_w, f * c, lo.fc_b, f);
                linear_backward(&mut dln2, dw, db, &dfc, &lc.ln2, &p[lo.fc_w..lo.fc_w + f * c], n, c, f);
            }
            let mut dmid = dx;
            {
                let (dg, db) = split_two(grad, lo.ln2_gain, c, lo.ln2_bias, c);
                layernorm_backward(
                    &mut dmid,
                    dg,
                    db,
                    &dln2,
                    &lc.x_mid,
                    &p[lo.ln2_gain..lo.ln2_gain + c],
                    &lc.ln2_mean,
                    &lc.ln2_rstd,
                    n,
                    c,
                );
            }

            // Attention branch: x_mid = x_in + drop(proj(attn(qkv(ln1(x_in))))).
            let mut dproj = dmid.clone();
            apply_mask(&mut dproj, &lc.proj_mask);
            let mut daty = vec![T::ZERO; n * c];
            {
                let (dw, db) = split_two(grad, lo.proj_w, c * c, lo.proj_b, c);
                linear_backward(&mut daty, dw, db, &dproj, &lc.att_y, &p[lo.proj_w..lo.proj_w + c * c], n, c, c);
            }
            let mut dqkv = vec![T::ZERO; n * 3 * c];
            let qkv = &lc.qkv;
            let mut dp = vec![T::ZERO; n];
            let mut dq = vec![T::ZERO; hd];
            for h in 0..nh {
                for t in 0..n {
                    let probs = &lc.att[(h * n + t) * n..(h * n + t) * n + t + 1];
                    let dy = &daty[t * c + h * hd..t * c + (h + 1) * hd];
                    let mut weighted = T::ZERO;
                    for u in 0..=t {
                        let vo = u * 3 * c + 2 * c + h * hd;
                        dp[u] = kernels::dot(dy, &qkv[vo..vo + hd]);
                        weighted += dp[u] * probs[u];
                        kernels::axpy(probs[u], dy, &mut dqkv[vo..vo + hd]);
                    }
                    let qo = t * 3 * c + h * hd;
                    dq.iter_mut().for_each(|d| *d = T::ZERO);
                    for u in 0..=t {
                        let ds = probs[u] * (dp[u] - weighted) * inv_sqrt;
                        let ko = u * 3 * c + c + h * hd;
                        kernels::axpy(ds, &qkv[ko..ko + hd], &mut dq);
                        kernels::axpy(ds, &qkv[qo..qo + hd], &mut dqkv[ko..ko + hd]);
                    }
                    kernels::axpy(T::ONE, &dq, &mut dqkv[qo..qo + hd]);
                }
            }
            let mut dln1 = vec![T::ZERO; n * c];
            {
                let (dw, db) = split_two(grad, lo.qkv_w, 3 * c * c, lo.qkv_b, 3 * c);
                linear_backward(&mut dln1, dw, db, &dqkv, &lc.ln1, &p[lo.qkv_w..lo.qkv_w + 3 * c * c], n, c, 3 * c);
            }
            let mut din = dmid;
            {
                let (dg, db) = split_two(grad, lo.ln1_gain, c, lo.ln1_bias, c);
                layernorm_backward(
                    &mut din,
                    dg,
                    db,
                    &dln1,
                    &lc.x_in,
                    &p[lo.ln1_gain..lo.ln1_gain + c],
                    &lc.ln1_mean,
                    &lc.ln1_rstd,
                    n,
                    c,
                );
            }
            dx = din;
        }

        apply_mask(&mut dx, &cache.emb_mask);
        // Embedding tables; the token table also collected output-projection
        // gradients above.
        for t in 0..n {
            let d = &dx[t * c..(t + 1) * c];
            let tok = seq.token_ids[t] as usize;
            let spk = seq.speaker_ids[t].index();
            kernels::axpy(T::ONE, d, &mut grad[lay.wte + tok * c..lay.wte + (tok + 1) * c]);
            kernels::axpy(T::ONE, d, &mut grad[lay.wpe + t * c..lay.wpe + (t + 1) * c]);
            kernels::axpy(T::ONE, d, &mut grad[lay.speaker + spk * c..lay.speaker + (spk + 1) * c]);
            if seq.response_flags[t] {
                kernels::axpy(T::ONE, d, &mut grad[lay.response..lay.response + c]);
            }
        }
        loss
    }
}

/// Two disjoint mutable windows of `buf` where `a` precedes `b`.
fn split_two<T>(buf: &mut [T], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + a_len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + a_len], &mut hi[..b_len])
}

/// Dropout stream for batch member `index` under `seed`.
pub(crate) fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}


#[cfg(test)]
mod tests;
