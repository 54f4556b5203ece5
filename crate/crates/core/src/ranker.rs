//! Incremental response ranker: after each incoming word, score every
//! candidate response by the turn-shift probability it implies and decide
//! whether to respond, and with which candidate.

use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Turn, TurnTags};
use crate::error::{Error, Result};
use crate::model::{quantize, ts_probability, Real, TransformerLM};
use crate::sequencing::{encode, Sample, Variant};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Wait,
    Respond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDecision {
    pub action: Action,
    pub chosen: Option<usize>,
    /// Per-candidate turn-shift probability (after any log-odds bias).
    pub scores: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankOptions {
    pub threshold: f64,
    /// When set, respond only if the best score also beats the runner-up by
    /// at least this much.
    pub margin: Option<f64>,
    /// Additive log-odds bias per candidate; empty means no bias.
    pub log_bias: Vec<f64>,
}

impl RankOptions {
    pub fn with_threshold(threshold: f64) -> Self {
        RankOptions {
            threshold,
            ..RankOptions::default()
        }
    }
}

/// A model wired for ranking. Baseline models are accepted for comparison;
/// their scores cannot depend on the candidate.
pub struct Ranker<'a, T: Real> {
    pub model: &'a TransformerLM<T>,
    pub variant: Variant,
    pub vocab: &'a Vocab,
}

fn apply_bias(p: f64, bias: f64) -> f64 {
    if bias == 0.0 {
        return p;
    }
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let z = (p / (1.0 - p)).ln() + bias;
    quantize(1.0 / (1.0 + (-z).exp()))
}

/// Speaker of the current utterance: the one not holding the last history
/// turn, or A when there is no history.
pub fn current_speaker(history: &[Turn]) -> Speaker {
    history.last().map_or(Speaker::A, |t| t.speaker.other())
}

impl<T: Real> Ranker<'_, T> {
    /// Turn-shift probability after the last CU word with `candidate` as R.
    pub fn score(&self, history: &[Turn], cu_words: &[String], candidate: &[String]) -> Result<f64> {
        let speaker = current_speaker(history);
        let sample = Sample {
            dialog_id: "ranker".into(),
            cu_index: history.len(),
            history: history.to_vec(),
            current: Turn {
                speaker,
                words: cu_words.to_vec(),
                tags: TurnTags::default(),
            },
            response: Turn {
                speaker: speaker.other(),
                words: candidate.to_vec(),
                tags: TurnTags::default(),
            },
        };
        let seq = encode(&sample, self.variant, self.vocab, true, self.model.config().max_seq_len)?;
        let last = *seq.cu_word_positions.last().expect("non-empty CU");
        Ok(ts_probability(self.model, &seq, &[last])?[0])
    }

    pub fn rank_step(
        &self,
        history: &[Turn],
        cu_words_so_far: &[String],
        candidates: &[Vec<String>],
        opts: &RankOptions,
    ) -> Result<RankDecision> {
        if candidates.is_empty() {
            return Err(Error::Invalid("no candidate responses".into()));
        }
        if cu_words_so_far.is_empty() {
            return Err(Error::Invalid("no words of the current utterance yet".into()));
        }
        if candidates.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("empty candidate response".into()));
        }
        if !opts.log_bias.is_empty() && opts.log_bias.len() != candidates.len() {
            return Err(Error::Invalid(format!(
                "{} biases for {} candidates",
                opts.log_bias.len(),
                candidates.len()
            )));
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            let p = self.score(history, cu_words_so_far, c)?;
            scores.push(apply_bias(p, opts.log_bias.get(i).copied().unwrap_or(0.0)));
        }
        Ok(decide(scores, opts))
    }

    /// One decision per word of `stream`, each on the prefix ending there.
    pub fn rank_session(
        &self,
        history: &[Turn],
        stream: &[String],
        candidates: &[Vec<String>],
        opts: &RankOptions,
    ) -> Result<Vec<RankDecision>> {
        (1..=stream.len())
            .map(|k| self.rank_step(history, &stream[..k], candidates, opts))
            .collect()
    }
}

/// Applies the threshold (and optional margin) rule to candidate scores.
pub fn decide(scores: Vec<f64>, opts: &RankOptions) -> RankDecision {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let clears_margin = opts
        .margin
        .is_none_or(|m| scores[best] - runner_up >= m);
    let respond = scores[best] > opts.threshold && clears_margin;
    RankDecision {
        action: if respond { Action::Respond } else { Action::Wait },
        chosen: respond.then_some(best),
        scores,
        threshold: opts.threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_examples() {
        let d = decide(vec![0.9], &RankOptions::with_threshold(0.5));
        assert_eq!((d.action, d.chosen), (Action::Respond, Some(0)));
        let d = decide(vec![1.0, 0.3], &RankOptions::with_threshold(1.0));
        assert_eq!((d.action, d.chosen), (Action::Wait, None));
        let d = decide(vec![0.2, 0.7, 0.7], &RankOptions::with_threshold(0.5));
        assert_eq!(d.chosen, Some(1));
    }

    #[test]
    fn margin_rule() {
        let opts = RankOptions {
            threshold: 0.5,
            margin: Some(0.2),
            log_bias: vec![],
        };
        assert_eq!(decide(vec![0.8, 0.7], &opts).action, Action::Wait);
        assert_eq!(decide(vec![0.8, 0.5], &opts).action, Action::Respond);
        assert_eq!(decide(vec![0.8], &opts).action, Action::Respond);
    }

    #[test]
    fn bias_is_log_odds() {
        assert_eq!(apply_bias(0.3, 0.0), 0.3);
        assert!((apply_bias(0.5, 3f64.ln()) - 0.75).abs() < 1e-12);
        assert!(apply_bias(0.5, -2.0) < 0.5);
    }

    #[test]
    fn speaker_follows_history() {
        assert_eq!(current_speaker(&[]), Speaker::A);
        assert_eq!(current_speaker(&[Turn::new(Speaker::A, "hi")]), Speaker::B);
    }
}
