use serde::{Deserialize, Serialize};

use super::{Real, SeqInput, TransformerLM};
use crate::error::{Error, Result};
use crate::sequencing::{encode, EncodedSequence, Sample, Variant};
use crate::tokenizer::{Vocab, TS};

/// Per-word turn-shift probabilities over one current utterance.
///
/// `probs[k]` is P(next token = TS) after CU word `k`, quantized to six
/// decimal places so the trace file format round-trips exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsTrace {
    pub dialog_id: String,
    pub cu_index: usize,
    pub words: Vec<String>,
    pub probs: Vec<f64>,
    pub end_index: usize,
}

impl TsTrace {
    pub fn key(&self) -> (&str, usize) {
        (&self.dialog_id, self.cu_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(Error::Invalid(format!("empty trace for {}#{}", self.dialog_id, self.cu_index)));
        }
        if self.probs.len() != self.words.len() || self.end_index + 1 != self.probs.len() {
            return Err(Error::Invalid(format!(
                "trace {}#{} has {} probabilities, {} words, end index {}",
                self.dialog_id,
                self.cu_index,
                self.probs.len(),
                self.words.len(),
                self.end_index
            )));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid(format!(
                "trace {}#{} has a probability outside [0, 1]",
                self.dialog_id, self.cu_index
            )));
        }
        Ok(())
    }
}

/// Rounds to six decimal places, the resolution of exported traces.
pub fn quantize(p: f64) -> f64 {
    (p * 1e6).round() / 1e6
}

/// P(next = TS) at each of `positions` from one forward pass.
pub fn ts_probability<T: Real>(
    model: &TransformerLM<T>,
    seq: &EncodedSequence,
    positions: &[usize],
) -> Result<Vec<f64>> {
    let cache = model.forward_cache(&SeqInput::from(seq), None)?;
    Ok(positions
        .iter()
        .map(|&t| {
            let mut row = model.logits_at(&cache, t);
            super::kernels::softmax(&mut row);
            quantize(row[TS as usize].to_f64())
        })
        .collect())
}

/// Encodes `sample` for `variant` and reads the turn-shift probability after
/// every CU word.
pub fn ts_trace<T: Real>(
    model: &TransformerLM<T>,
    sample: &Sample,
    variant: Variant,
    vocab: &Vocab,
) -> Result<TsTrace> {
    let seq = encode(sample, variant, vocab, true, model.config().max_seq_len)?;
    let probs = ts_probability(model, &seq, &seq.cu_word_positions)?;
    Ok(TsTrace {
        dialog_id: sample.dialog_id.clone(),
        cu_index: sample.cu_index,
        words: sample.current.words.clone(),
        end_index: probs.len() - 1,
        probs,
    })
}
