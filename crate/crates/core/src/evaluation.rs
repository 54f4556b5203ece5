//! Turn-level metrics: outcomes, threshold search, TL-Acc/NRR/BR/OSR and
//! response perplexity, plus trace and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Scenario, Speaker};
use crate::error::{Error, Result};
use crate::model::{kernels, ts_trace, Real, SeqInput, TransformerLM, TsTrace};
use crate::sequencing::{Sample, Variant};
use crate::tokenizer::{TokenId, Vocab, TS};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    CorrectShift,
    BargeIn,
    NoResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub outcome: Outcome,
    /// First index whose probability is strictly above the threshold.
    pub first_cross_index: Option<usize>,
}

pub fn first_crossing(probs: &[f64], threshold: f64) -> Option<usize> {
    probs.iter().position(|&p| p > threshold)
}

/// True iff the last probability is strictly greater than every earlier one.
pub fn strict_max_at_end(probs: &[f64]) -> bool {
    match probs.split_last() {
        Some((last, rest)) => rest.iter().all(|p| p < last),
        None => false,
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("threshold {threshold} outside (0, 1)")))
    }
}

pub fn classify_turn(trace: &TsTrace, threshold: f64) -> Result<TurnOutcome> {
    check_threshold(threshold)?;
    if trace.probs.is_empty() {
        return Err(Error::Invalid(format!(
            "empty trace for {}#{}",
            trace.dialog_id, trace.cu_index
        )));
    }
    let first = first_crossing(&trace.probs, threshold);
    let outcome = match first {
        None => Outcome::NoResponse,
        Some(i) if i == trace.end_index => Outcome::CorrectShift,
        Some(_) => Outcome::BargeIn,
    };
    Ok(TurnOutcome {
        outcome,
        first_cross_index: first,
    })
}

/// Threshold candidates 0.01, 0.02, ..., 0.99.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..=99).map(|k| k as f64 / 100.0)
}

/// Grid threshold maximizing TL-Acc; ties go to the lowest threshold.
pub fn optimize_threshold(traces: &[TsTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Invalid("no traces to optimize a threshold on".into()));
    }
    let mut best = (0usize, f64::NAN);
    for t in threshold_grid() {
        let mut correct = 0;
        for tr in traces {
            if classify_turn(tr, t)?.outcome == Outcome::CorrectShift {
                correct += 1;
            }
        }
        if best.1.is_nan() || correct > best.0 {
            best = (correct, t);
        }
    }
    Ok(best.1)
}

/// Exact outcome counts; fractions are derived on output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_turns: usize,
    pub correct_shift: usize,
    pub barge_in: usize,
    pub no_response: usize,
    /// Turns whose strict maximum sits at the end index.
    pub max_at_end: usize,
}

impl Counts {
    pub fn add(&mut self, outcome: Outcome, max_at_end: bool) {
        self.n_turns += 1;
        match outcome {
            Outcome::CorrectShift => self.correct_shift += 1,
            Outcome::BargeIn => self.barge_in += 1,
            Outcome::NoResponse => self.no_response += 1,
        }
        self.max_at_end += usize::from(max_at_end);
    }

    pub fn merge(&mut self, other: &Counts) {
        self.n_turns += other.n_turns;
        self.correct_shift += other.correct_shift;
        self.barge_in += other.barge_in;
        self.no_response += other.no_response;
        self.max_at_end += other.max_at_end;
    }

    fn frac(&self, k: usize) -> f64 {
        if self.n_turns == 0 {
            0.0
        } else {
            k as f64 / self.n_turns as f64
        }
    }

    pub fn tl_acc(&self) -> f64 {
        self.frac(self.correct_shift)
    }

    pub fn nrr(&self) -> f64 {
        self.frac(self.no_response)
    }

    pub fn br(&self) -> f64 {
        self.frac(self.barge_in)
    }

    pub fn osr(&self) -> f64 {
        self.frac(self.max_at_end)
    }

    /// The three outcome counts partition the turns.
    pub fn is_partition(&self) -> bool {
        self.correct_shift + self.barge_in + self.no_response == self.n_turns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub counts: Counts,
    pub tl_acc: f64,
    pub nrr: f64,
    pub br: f64,
    pub osr: f64,
}

impl From<Counts> for GroupMetrics {
    fn from(counts: Counts) -> Self {
        GroupMetrics {
            counts,
            tl_acc: counts.tl_acc(),
            nrr: counts.nrr(),
            br: counts.br(),
            osr: counts.osr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpplSummary {
    /// Mean of the per-turn perplexities over the subset.
    pub r_ppl: f64,
    pub n_turns: usize,
    /// Turns whose scoring context was truncated from the left.
    pub truncated_contexts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub variant: Variant,
    pub threshold: f64,
    pub n_turns: usize,
    pub counts: Counts,
    pub tl_acc: f64,
    pub nrr: f64,
    pub br: f64,
    pub osr: f64,
    /// Absent when no counterpart traces were supplied or the subset is empty.
    pub r_ppl: Option<RpplSummary>,
    /// Keyed by scenario label, plus `<label>:early` / `<label>:late` for
    /// turns carrying an early completion index.
    pub breakdown: BTreeMap<String, GroupMetrics>,
}

/// Early/late split key for a tagged current utterance.
fn completion_group(sample: &Sample) -> Option<(Scenario, &'static str)> {
    let tags = sample.tags();
    let scenario = tags.scenario?;
    let early = tags.early_end_index?;
    let kind = if early + 1 == sample.current.words.len() { "early" } else { "late" };
    Some((scenario, kind))
}

/// Outcome metrics over aligned traces and samples, without R-PPL.
pub fn outcome_metrics(
    traces: &[TsTrace],
    samples: &[Sample],
    variant: Variant,
    threshold: f64,
) -> Result<MetricsReport> {
    check_threshold(threshold)?;
    if traces.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    check_aligned(traces, samples)?;
    let mut counts = Counts::default();
    let mut groups: BTreeMap<String, Counts> = BTreeMap::new();
    for (tr, s) in traces.iter().zip(samples) {
        let o = classify_turn(tr, threshold)?.outcome;
        let m = strict_max_at_end(&tr.probs);
        counts.add(o, m);
        if let Some(sc) = s.tags().scenario {
            groups.entry(sc.label().to_owned()).or_default().add(o, m);
        }
        if let Some((sc, kind)) = completion_group(s) {
            groups.entry(format!("{}:{kind}", sc.label())).or_default().add(o, m);
        }
    }
    debug_assert!(counts.is_partition());
    Ok(MetricsReport {
        version: REPORT_VERSION,
        variant,
        threshold,
        n_turns: counts.n_turns,
        counts,
        tl_acc: counts.tl_acc(),
        nrr: counts.nrr(),
        br: counts.br(),
        osr: counts.osr(),
        r_ppl: None,
        breakdown: groups.into_iter().map(|(k, c)| (k, c.into())).collect(),
    })
}

fn check_aligned(traces: &[TsTrace], samples: &[Sample]) -> Result<()> {
    if traces.len() != samples.len() {
        return Err(Error::Invalid(format!(
            "{} traces for {} samples",
            traces.len(),
            samples.len()
        )));
    }
    for (tr, s) in traces.iter().zip(samples) {
        if tr.dialog_id != s.dialog_id || tr.cu_index != s.cu_index {
            return Err(Error::Invalid(format!(
                "trace {}#{} does not match sample {}",
                tr.dialog_id,
                tr.cu_index,
                s.key()
            )));
        }
    }
    Ok(())
}

/// Turn-shift traces for every sample.
pub fn compute_traces<T: Real>(
    model: &TransformerLM<T>,
    samples: &[Sample],
    variant: Variant,
    vocab: &Vocab,
) -> Result<Vec<TsTrace>> {
    samples
        .iter()
        .map(|s| ts_trace(model, s, variant, vocab))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub ppl: f64,
    pub n_tokens: usize,
    /// Context tokens dropped from the left to fit the scorer.
    pub truncated: usize,
}

/// Perplexity of `response` after `context` under a causal scorer.
///
/// Every response token is predicted from the context and the preceding
/// response tokens. Contexts too long for the scorer lose tokens from the
/// left; at least one context token is always kept.
pub fn response_ppl<T: Real>(
    scorer: &TransformerLM<T>,
    context: &[TokenId],
    context_speakers: &[Speaker],
    response: &[TokenId],
    response_speaker: Speaker,
) -> Result<Perplexity> {
    if response.is_empty() {
        return Err(Error::Invalid("empty response".into()));
    }
    if context.is_empty() || context.len() != context_speakers.len() {
        return Err(Error::Invalid("context needs one speaker per token and at least one token".into()));
    }
    let max = scorer.config().max_seq_len;
    if response.len() + 1 > max {
        return Err(Error::Invalid(format!(
            "response of {} tokens does not fit max_seq_len {max}",
            response.len()
        )));
    }
    let keep = context.len().min(max - response.len());
    let drop = context.len() - keep;
    let tokens: Vec<TokenId> = context[drop..].iter().chain(response).copied().collect();
    let speakers: Vec<Speaker> = context_speakers[drop..]
        .iter()
        .copied()
        .chain(std::iter::repeat_n(response_speaker, response.len()))
        .collect();
    let flags = vec![false; tokens.len()];
    let logits = scorer.logits(&SeqInput {
        tokens: &tokens,
        speakers: &speakers,
        response: &flags,
    })?;
    let mut nll = 0.0;
    for (k, &target) in response.iter().enumerate() {
        let row = logits.row(keep + k - 1);
        nll += (kernels::log_sum_exp(row) - row[target as usize]).to_f64();
    }
    let ppl = (nll / response.len() as f64).exp();
    Ok(Perplexity {
        ppl,
        n_tokens: response.len(),
        truncated: drop,
    })
}

/// Baseline-order scoring context: history turns, then CU cut after
/// `cu_len` words, each followed by TS.
pub fn scoring_context(sample: &Sample, cu_len: usize, vocab: &Vocab) -> (Vec<TokenId>, Vec<Speaker>) {
    let mut tokens = Vec::new();
    let mut speakers = Vec::new();
    let cu = &sample.current;
    let turns = sample
        .history
        .iter()
        .map(|t| (t.speaker, &t.words[..]))
        .chain(std::iter::once((cu.speaker, &cu.words[..cu_len])));
    for (spk, words) in turns {
        for id in vocab.encode(words).into_iter().chain(std::iter::once(TS)) {
            tokens.push(id);
            speakers.push(spk);
        }
    }
    (tokens, speakers)
}

/// The other model's traces and threshold, defining the R-PPL subset.
#[derive(Debug, Clone, Copy)]
pub struct Counterpart<'a> {
    pub traces: &'a [TsTrace],
    pub threshold: f64,
}

/// Mean response perplexity over turns where either model misses the shift.
///
/// For the evaluated model the CU is cut at its first crossing (kept whole
/// when it never crosses) before scoring the ground-truth response.
pub fn r_ppl_subset<T: Real>(
    scorer: &TransformerLM<T>,
    samples: &[Sample],
    vocab: &Vocab,
    traces: &[TsTrace],
    threshold: f64,
    counterpart: Counterpart<'_>,
) -> Result<Option<RpplSummary>> {
    check_aligned(traces, samples)?;
    check_aligned(counterpart.traces, samples)?;
    let (mut sum, mut n, mut truncated) = (0.0, 0, 0);
    for ((tr, other), s) in traces.iter().zip(counterpart.traces).zip(samples) {
        let own = classify_turn(tr, threshold)?;
        let theirs = classify_turn(other, counterpart.threshold)?;
        if own.outcome == Outcome::CorrectShift && theirs.outcome == Outcome::CorrectShift {
            continue;
        }
        let cu_len = own.first_cross_index.map_or(s.current.words.len(), |i| i + 1);
        let (ctx, spk) = scoring_context(s, cu_len, vocab);
        let r = vocab.encode(&s.response.words);
        let p = response_ppl(scorer, &ctx, &spk, &r, s.response.speaker)?;
        sum += p.ppl;
        n += 1;
        truncated += usize::from(p.truncated > 0);
    }
    Ok((n > 0).then(|| RpplSummary {
        r_ppl: sum / n as f64,
        n_turns: n,
        truncated_contexts: truncated,
    }))
}

/// Evaluates precomputed traces: outcome metrics plus R-PPL when the
/// counterpart model's traces are given. `scorer` must be a baseline model.
pub fn evaluate_traces<T: Real>(
    traces: &[TsTrace],
    samples: &[Sample],
    variant: Variant,
    threshold: f64,
    vocab: &Vocab,
    scorer: &TransformerLM<T>,
    counterpart: Option<Counterpart<'_>>,
) -> Result<MetricsReport> {
    let mut report = outcome_metrics(traces, samples, variant, threshold)?;
    if let Some(cp) = counterpart {
        report.r_ppl = r_ppl_subset(scorer, samples, vocab, traces, threshold, cp)?;
    }
    Ok(report)
}

/// Computes the model's traces on `samples` and evaluates them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    model: &TransformerLM<T>,
    samples: &[Sample],
    variant: Variant,
    vocab: &Vocab,
    threshold: f64,
    scorer: &TransformerLM<T>,
    counterpart: Option<Counterpart<'_>>,
) -> Result<(MetricsReport, Vec<TsTrace>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let traces = compute_traces(model, samples, variant, vocab)?;
    let report = evaluate_traces(&traces, samples, variant, threshold, vocab, scorer, counterpart)?;
    Ok((report, traces))
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct TraceRecord {
    dialog_id: String,
    cu_index: usize,
    words: Vec<String>,
    probs: Vec<f64>,
    end_index: usize,
}

/// One JSON line per trace, probabilities printed with six decimals.
pub fn trace_to_line(trace: &TsTrace) -> String {
    let mut probs = String::new();
    for (i, p) in trace.probs.iter().enumerate() {
        if i > 0 {
            probs.push(',');
        }
        write!(probs, "{p:.6}").unwrap();
    }
    format!(
        "{{\"dialog_id\":{},\"cu_index\":{},\"words\":{},\"probs\":[{probs}],\"end_index\":{}}}",
        serde_json::to_string(&trace.dialog_id).unwrap(),
        trace.cu_index,
        serde_json::to_string(&trace.words).unwrap(),
        trace.end_index
    )
}

pub fn write_traces(path: &Path, traces: &[TsTrace]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in traces {
        writeln!(out, "{}", trace_to_line(t)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<TsTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: TraceRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let trace = TsTrace {
            dialog_id: r.dialog_id,
            cu_index: r.cu_index,
            words: r.words,
            probs: r.probs,
            end_index: r.end_index,
        };
        trace.validate().map_err(|e| malformed(e.to_string()))?;
        out.push(trace);
    }
    Ok(out)
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: MetricsReport = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if report.version != REPORT_VERSION {
        return Err(Error::Format(format!(
            "report version {}, this build reads {REPORT_VERSION}",
            report.version
        )));
    }
    Ok(report)
}

/// Percentages table with one row per model.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>9} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "model", "threshold", "TL-Acc", "NRR", "BR", "R-PPL", "OSR"
    )
    .unwrap();
    for (name, r) in rows {
        let ppl = r
            .r_ppl
            .as_ref()
            .map_or_else(|| "-".to_owned(), |p| format!("{:.3}", p.r_ppl));
        writeln!(
            out,
            "{:<12} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>7} {:>7.2}",
            name,
            r.threshold,
            100.0 * r.tl_acc,
            100.0 * r.nrr,
            100.0 * r.br,
            ppl,
            100.0 * r.osr
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(probs: &[f64]) -> TsTrace {
        TsTrace {
            dialog_id: "d".into(),
            cu_index: 1,
            words: (0..probs.len()).map(|i| format!("w{i}")).collect(),
            probs: probs.to_vec(),
            end_index: probs.len() - 1,
        }
    }

    #[test]
    fn classify_examples() {
        let c = |p: &[f64]| classify_turn(&tr(p), 0.5).unwrap();
        assert_eq!(c(&[0.1, 0.2, 0.8]).outcome, Outcome::CorrectShift);
        let b = c(&[0.6, 0.1, 0.9]);
        assert_eq!((b.outcome, b.first_cross_index), (Outcome::BargeIn, Some(0)));
        let n = c(&[0.1, 0.2, 0.3]);
        assert_eq!((n.outcome, n.first_cross_index), (Outcome::NoResponse, None));
        // Equality is not a crossing.
        assert_eq!(c(&[0.5, 0.5]).outcome, Outcome::NoResponse);
    }

    #[test]
    fn classify_errors() {
        let mut empty = tr(&[0.1]);
        empty.probs.clear();
        assert!(classify_turn(&empty, 0.5).is_err());
        assert!(classify_turn(&tr(&[0.1]), 0.0).is_err());
        assert!(classify_turn(&tr(&[0.1]), 1.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(optimize_threshold(&[tr(&[0.1, 0.9])]).unwrap(), 0.10);
        assert_eq!(optimize_threshold(&[tr(&[0.9, 0.8])]).unwrap(), 0.01);
        assert!(optimize_threshold(&[]).is_err());
    }

    #[test]
    fn strict_max() {
        assert!(strict_max_at_end(&[0.1, 0.3]));
        assert!(!strict_max_at_end(&[0.3, 0.3]));
        assert!(strict_max_at_end(&[0.3]));
        assert!(!strict_max_at_end(&[]));
    }

    #[test]
    fn counts_fractions() {
        let mut c = Counts::default();
        c.add(Outcome::CorrectShift, true);
        c.add(Outcome::BargeIn, true);
        c.add(Outcome::NoResponse, false);
        assert!(c.is_partition());
        assert_eq!((c.tl_acc(), c.br(), c.nrr()), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
        assert_eq!(c.osr(), 2.0 / 3.0);
    }

    #[test]
    fn trace_line_format() {
        let t = TsTrace {
            dialog_id: "a\"b".into(),
            cu_index: 2,
            words: vec!["hi".into(), "there".into()],
            probs: vec![0.1, 0.9],
            end_index: 1,
        };
        assert_eq!(
            trace_to_line(&t),
            r#"{"dialog_id":"a\"b","cu_index":2,"words":["hi","there"],"probs":[0.100000,0.900000],"end_index":1}"#
        );
    }
}
