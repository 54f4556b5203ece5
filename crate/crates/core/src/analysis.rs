//! Divergence analysis: turns where the baseline barges in while the
//! response-conditioned model ends correctly, ranked by how much more
//! turn-shift probability the baseline assigned at its premature crossing.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, TurnTags};
use crate::error::{Error, Result};
use crate::evaluation::{classify_turn, Outcome};
use crate::model::{Real, SeqInput, TransformerLM, TsTrace};
use crate::sequencing::Sample;
use crate::tokenizer::Vocab;

pub const ANALYSIS_VERSION: u32 = 1;
pub const DEFAULT_SUBSET_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCase {
    pub dialog_id: String,
    pub cu_index: usize,
    pub base_cross_index: usize,
    pub end_index: usize,
    pub p_base: f64,
    pub p_rc: f64,
    /// `p_base - p_rc` at `base_cross_index`.
    pub delta: f64,
    /// CU words after the baseline's crossing, through the end.
    pub tail_words: Vec<String>,
}

fn sort_cases(cases: &mut [DivergenceCase]) {
    cases.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then_with(|| a.dialog_id.cmp(&b.dialog_id))
            .then(a.cu_index.cmp(&b.cu_index))
    });
}

/// Cases where the baseline barges in and the RC model shifts correctly,
/// sorted by delta (descending), then dialog id, then CU index.
pub fn divergence_cases(
    base: &[TsTrace],
    rc: &[TsTrace],
    base_threshold: f64,
    rc_threshold: f64,
) -> Result<Vec<DivergenceCase>> {
    if base.len() != rc.len() {
        return Err(Error::Invalid(format!(
            "trace sets differ in size: {} baseline, {} rc",
            base.len(),
            rc.len()
        )));
    }
    let rc_by_key: HashMap<(&str, usize), &TsTrace> = rc.iter().map(|t| (t.key(), t)).collect();
    let base_keys: std::collections::HashSet<(&str, usize)> = base.iter().map(TsTrace::key).collect();
    if rc_by_key.len() != rc.len() || base_keys.len() != base.len() {
        return Err(Error::Invalid("trace set contains duplicate turns".into()));
    }
    let mut cases = Vec::new();
    for b in base {
        let r = rc_by_key.get(&b.key()).ok_or_else(|| {
            Error::Invalid(format!("turn {}#{} has no rc trace", b.dialog_id, b.cu_index))
        })?;
        if r.words != b.words || r.end_index != b.end_index {
            return Err(Error::Invalid(format!(
                "traces for {}#{} cover different words",
                b.dialog_id, b.cu_index
            )));
        }
        let bo = classify_turn(b, base_threshold)?;
        let ro = classify_turn(r, rc_threshold)?;
        if bo.outcome != Outcome::BargeIn || ro.outcome != Outcome::CorrectShift {
            continue;
        }
        let k = bo.first_cross_index.expect("barge-in has a crossing");
        cases.push(DivergenceCase {
            dialog_id: b.dialog_id.clone(),
            cu_index: b.cu_index,
            base_cross_index: k,
            end_index: b.end_index,
            p_base: b.probs[k],
            p_rc: r.probs[k],
            delta: b.probs[k] - r.probs[k],
            tail_words: b.words[k + 1..].to_vec(),
        });
    }
    sort_cases(&mut cases);
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopBottom<'a> {
    pub top: &'a [DivergenceCase],
    pub bottom: &'a [DivergenceCase],
    /// Set when the two subsets share cases.
    pub overlap: bool,
}

/// First and last `min(n, len)` cases of an already sorted list.
pub fn top_bottom(cases: &[DivergenceCase], n: usize) -> Result<TopBottom<'_>> {
    if n == 0 {
        return Err(Error::Invalid("subset size must be at least 1".into()));
    }
    if cases.is_empty() {
        return Err(Error::Invalid("no divergence cases".into()));
    }
    let k = n.min(cases.len());
    Ok(TopBottom {
        top: &cases[..k],
        bottom: &cases[cases.len() - k..],
        overlap: cases.len() < 2 * n,
    })
}

/// Subset size actually used: `n`, or half the cases when there are fewer
/// than `2n`, so the subsets stay disjoint whenever possible.
pub fn effective_subset_size(n_cases: usize, n: usize) -> usize {
    if n_cases >= 2 * n {
        n
    } else {
        (n_cases / 2).max(1)
    }
}

// ---------------------------------------------------------------------------
// Annotators
// ---------------------------------------------------------------------------

/// The current utterance a case refers to.
#[derive(Debug, Clone, Copy)]
pub struct TurnView<'a> {
    pub dialog_id: &'a str,
    pub cu_index: usize,
    pub words: &'a [String],
    pub tags: &'a TurnTags,
}

pub trait Annotator {
    fn name(&self) -> &str;

    /// Whether the first `len` words of the turn end as a question.
    fn question_final(&self, turn: &TurnView<'_>, len: usize) -> Result<bool>;
}

/// Reads the generator tags: the full turn is question-final per its tag; a
/// strict prefix never is, since synthetic questions only complete at the end
/// of the turn.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAnnotator;

impl Annotator for OracleAnnotator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn question_final(&self, turn: &TurnView<'_>, len: usize) -> Result<bool> {
        let tag = turn.tags.question_final.ok_or_else(|| {
            Error::Invalid(format!(
                "turn {}#{} has no question_final tag",
                turn.dialog_id, turn.cu_index
            ))
        })?;
        Ok(len == turn.words.len() && tag)
    }
}

/// Words that open a question.
pub const INTERROGATIVES: &[&str] = &[
    "what", "how", "where", "when", "why", "who", "whom", "whose", "which",
];

/// How many trailing words the heuristic inspects.
pub const HEURISTIC_WINDOW: usize = 10;

/// Question-final iff one of the last ten words is an interrogative.
pub fn heuristic_question_final(words: &[String]) -> bool {
    let start = words.len().saturating_sub(HEURISTIC_WINDOW);
    words[start..]
        .iter()
        .any(|w| INTERROGATIVES.contains(&w.as_str()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicAnnotator;

impl Annotator for HeuristicAnnotator {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn question_final(&self, turn: &TurnView<'_>, len: usize) -> Result<bool> {
        Ok(heuristic_question_final(&turn.words[..len]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedAnnotation {
    pub full_question_final: bool,
    pub prefix_question_final: bool,
}

#[derive(Debug, Deserialize)]
struct ImportRecord {
    dialog_id: String,
    cu_index: usize,
    full_question_final: bool,
    prefix_question_final: bool,
}

/// Externally produced annotations. The prefix flag refers to the prefix
/// ending at the baseline's crossing.
#[derive(Debug, Clone, Default)]
pub struct ImportedAnnotator {
    map: HashMap<(String, usize), ImportedAnnotation>,
}

impl ImportedAnnotator {
    pub fn new(map: HashMap<(String, usize), ImportedAnnotation>) -> Self {
        ImportedAnnotator { map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ImportRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            map.insert(
                (r.dialog_id, r.cu_index),
                ImportedAnnotation {
                    full_question_final: r.full_question_final,
                    prefix_question_final: r.prefix_question_final,
                },
            );
        }
        Ok(ImportedAnnotator { map })
    }
}

impl Annotator for ImportedAnnotator {
    fn name(&self) -> &str {
        "imported"
    }

    fn question_final(&self, turn: &TurnView<'_>, len: usize) -> Result<bool> {
        let a = self
            .map
            .get(&(turn.dialog_id.to_owned(), turn.cu_index))
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "no imported annotation for {}#{}",
                    turn.dialog_id, turn.cu_index
                ))
            })?;
        Ok(if len == turn.words.len() {
            a.full_question_final
        } else {
            a.prefix_question_final
        })
    }
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, words: &[String]) -> Result<Vec<f64>>;
}

/// Mean of the final-layer hidden states of a model run over the words.
pub struct HiddenStateEmbedder<'a, T: Real> {
    pub model: &'a TransformerLM<T>,
    pub vocab: &'a Vocab,
}

impl<T: Real> Embedder for HiddenStateEmbedder<'_, T> {
    fn name(&self) -> &str {
        "hidden-state"
    }

    fn dim(&self) -> usize {
        self.model.config().d_model
    }

    fn embed(&self, words: &[String]) -> Result<Vec<f64>> {
        if words.is_empty() {
            return Err(Error::Invalid("cannot embed an empty word sequence".into()));
        }
        let max = self.model.config().max_seq_len;
        let tokens = self.vocab.encode(&words[words.len().saturating_sub(max)..]);
        let speakers = vec![Speaker::A; tokens.len()];
        let flags = vec![false; tokens.len()];
        let h = self.model.hidden_states(&SeqInput {
            tokens: &tokens,
            speakers: &speakers,
            response: &flags,
        })?;
        Ok(mean_rows(&h, self.dim()))
    }
}

/// Mean of the token-embedding rows of the words.
pub struct TokenEmbedder<'a, T: Real> {
    pub model: &'a TransformerLM<T>,
    pub vocab: &'a Vocab,
}

impl<T: Real> Embedder for TokenEmbedder<'_, T> {
    fn name(&self) -> &str {
        "token-embedding"
    }

    fn dim(&self) -> usize {
        self.model.config().d_model
    }

    fn embed(&self, words: &[String]) -> Result<Vec<f64>> {
        if words.is_empty() {
            return Err(Error::Invalid("cannot embed an empty word sequence".into()));
        }
        let c = self.dim();
        let wte = self.model.layout().block("wte").expect("token table").range();
        let table = &self.model.params()[wte];
        let rows: Vec<T> = self
            .vocab
            .encode(words)
            .into_iter()
            .flat_map(|id| table[id as usize * c..(id as usize + 1) * c].iter().copied())
            .collect();
        Ok(mean_rows(&rows, c))
    }
}

fn mean_rows<T: Real>(rows: &[T], dim: usize) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut out = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.to_f64();
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "embedding dimensions differ: {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("zero embedding vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Subset statistics
// ---------------------------------------------------------------------------

/// Samples indexed by (dialog id, CU index).
pub struct SampleIndex<'a> {
    map: HashMap<(&'a str, usize), &'a Sample>,
}

impl<'a> SampleIndex<'a> {
    pub fn new(samples: &'a [Sample]) -> Self {
        SampleIndex {
            map: samples
                .iter()
                .map(|s| ((s.dialog_id.as_str(), s.cu_index), s))
                .collect(),
        }
    }

    pub fn get(&self, case: &DivergenceCase) -> Result<&'a Sample> {
        self.map
            .get(&(case.dialog_id.as_str(), case.cu_index))
            .copied()
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "case {}#{} has no sample",
                    case.dialog_id, case.cu_index
                ))
            })
    }
}

/// Fraction of cases whose full CU is question-final while the prefix ending
/// at the baseline crossing is not.
pub fn question_shift_ratio(
    subset: &[DivergenceCase],
    samples: &SampleIndex<'_>,
    annotator: &dyn Annotator,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Invalid("empty subset".into()));
    }
    let mut hits = 0;
    for c in subset {
        let s = samples.get(c)?;
        let view = TurnView {
            dialog_id: &c.dialog_id,
            cu_index: c.cu_index,
            words: &s.current.words,
            tags: &s.current.tags,
        };
        let annotate = |len| {
            annotator.question_final(&view, len).map_err(|e| {
                Error::Invalid(format!(
                    "{} annotator failed on {}#{}: {e}",
                    annotator.name(),
                    c.dialog_id,
                    c.cu_index
                ))
            })
        };
        if annotate(s.current.words.len())? && !annotate(c.base_cross_index + 1)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / subset.len() as f64)
}

/// Mean cosine similarity between the response and the CU tail after the
/// baseline crossing.
pub fn semantic_match_score(
    subset: &[DivergenceCase],
    samples: &SampleIndex<'_>,
    embedder: &dyn Embedder,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Invalid("empty subset".into()));
    }
    let mut sum = 0.0;
    for c in subset {
        let s = samples.get(c)?;
        let r = embedder.embed(&s.response.words)?;
        let t = embedder.embed(&c.tail_words)?;
        if r.len() != embedder.dim() || t.len() != embedder.dim() {
            return Err(Error::Invalid(format!(
                "{} embedder returned a vector of the wrong size",
                embedder.name()
            )));
        }
        sum += cosine_similarity(&r, &t).map_err(|e| {
            Error::Invalid(format!("case {}#{}: {e}", c.dialog_id, c.cu_index))
        })?;
    }
    Ok(sum / subset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub size: usize,
    pub mean_delta: f64,
    pub question_shift_ratio: f64,
    pub semantic_similarity: f64,
    /// `1 - semantic_similarity`.
    pub semantic_distance: f64,
    /// Cases per scenario tag.
    pub scenarios: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub version: u32,
    pub base_threshold: f64,
    pub rc_threshold: f64,
    pub n_turns: usize,
    pub n_cases: usize,
    pub requested_subset_size: usize,
    pub subset_size: usize,
    pub scaled_down: bool,
    pub overlap: bool,
    pub annotator: String,
    pub embedder: String,
    pub top: SubsetStats,
    pub bottom: SubsetStats,
    pub caveats: Vec<String>,
}

fn subset_stats(
    subset: &[DivergenceCase],
    samples: &SampleIndex<'_>,
    annotator: &dyn Annotator,
    embedder: &dyn Embedder,
) -> Result<SubsetStats> {
    let similarity = semantic_match_score(subset, samples, embedder)?;
    let mut scenarios = BTreeMap::new();
    for c in subset {
        let label = samples
            .get(c)?
            .current
            .tags
            .scenario
            .map_or("untagged", |s| s.label());
        *scenarios.entry(label.to_owned()).or_insert(0) += 1;
    }
    Ok(SubsetStats {
        size: subset.len(),
        mean_delta: subset.iter().map(|c| c.delta).sum::<f64>() / subset.len() as f64,
        question_shift_ratio: question_shift_ratio(subset, samples, annotator)?,
        semantic_similarity: similarity,
        semantic_distance: 1.0 - similarity,
        scenarios,
    })
}

/// Full divergence analysis over two aligned trace sets.
#[allow(clippy::too_many_arguments)]
pub fn analyze(
    base: &[TsTrace],
    rc: &[TsTrace],
    base_threshold: f64,
    rc_threshold: f64,
    samples: &[Sample],
    n: usize,
    annotator: &dyn Annotator,
    embedder: &dyn Embedder,
) -> Result<(AnalysisReport, Vec<DivergenceCase>)> {
    let cases = divergence_cases(base, rc, base_threshold, rc_threshold)?;
    let index = SampleIndex::new(samples);
    let k = effective_subset_size(cases.len(), n.max(1));
    let tb = top_bottom(&cases, k)?;
    let mut caveats = Vec::new();
    if k < n {
        caveats.push(format!(
            "{} divergence cases: subsets scaled down from {n} to {k}",
            cases.len()
        ));
    }
    if tb.overlap {
        caveats.push("top and bottom subsets overlap".to_owned());
    }
    let report = AnalysisReport {
        version: ANALYSIS_VERSION,
        base_threshold,
        rc_threshold,
        n_turns: base.len(),
        n_cases: cases.len(),
        requested_subset_size: n,
        subset_size: k,
        scaled_down: k < n,
        overlap: tb.overlap,
        annotator: annotator.name().to_owned(),
        embedder: embedder.name().to_owned(),
        top: subset_stats(tb.top, &index, annotator, embedder)?,
        bottom: subset_stats(tb.bottom, &index, annotator, embedder)?,
        caveats,
    };
    Ok((report, cases))
}
