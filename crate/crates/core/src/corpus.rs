//! Dialog corpora: interchange-format loading, synthetic generation and splits.
//!
//! Text is normalized at load time: lowercased, every character that is not
//! alphanumeric or whitespace is removed, and the remainder is split on
//! whitespace. The raw text is not retained.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Speaker::A => 0,
            Speaker::B => 1,
        }
    }
}

/// Synthetic scenario a turn was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Statement optionally followed by a question.
    #[serde(rename = "SQ")]
    StatementQuestion,
    /// Topic request optionally narrowed to an attribute.
    #[serde(rename = "SEM")]
    SemanticMatch,
    /// Single completion point.
    #[serde(rename = "SIMPLE")]
    Simple,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::StatementQuestion,
        Scenario::SemanticMatch,
        Scenario::Simple,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::StatementQuestion => "SQ",
            Scenario::SemanticMatch => "SEM",
            Scenario::Simple => "SIMPLE",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Optional per-turn labels carried through the interchange format.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    /// Index of the last word of the early completion point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_end_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_final: Option<bool>,
}

impl TurnTags {
    pub fn is_empty(&self) -> bool {
        self.scenario.is_none() && self.early_end_index.is_none() && self.question_final.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub words: Vec<String>,
    pub tags: TurnTags,
}

impl Turn {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        Turn {
            speaker,
            words: normalize(text),
            tags: TurnTags::default(),
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
    pub source: String,
}

impl Dialog {
    /// Checks the structural invariants: at least three turns, strict speaker
    /// alternation, and non-empty normalized words.
    pub fn validate(&self) -> Result<()> {
        if self.turns.len() < 3 {
            return Err(Error::Invalid(format!(
                "dialog {} has {} turns, need at least 3",
                self.id,
                self.turns.len()
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.words.is_empty() {
                return Err(Error::Invalid(format!("dialog {} turn {i} is empty", self.id)));
            }
            if let Some(bad) = turn.words.iter().find(|w| !is_normalized_word(w)) {
                return Err(Error::Invalid(format!(
                    "dialog {} turn {i} has unnormalized word {bad:?}",
                    self.id
                )));
            }
            if i > 0 && self.turns[i - 1].speaker == turn.speaker {
                return Err(Error::Invalid(format!(
                    "dialog {} turns {} and {i} share a speaker",
                    self.id,
                    i - 1
                )));
            }
        }
        Ok(())
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

pub fn is_normalized_word(word: &str) -> bool {
    !word.is_empty()
        && word
            .chars()
            .all(|c| c.is_alphanumeric() && c.to_lowercase().eq(std::iter::once(c)))
}

// ---------------------------------------------------------------------------
// Interchange format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "TurnTags::is_empty")]
    tags: TurnTags,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogRecord {
    id: String,
    turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<serde_json::Value>,
}

/// Counts from one [`load_corpus`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub records: usize,
    pub dialogs: usize,
    /// Dialogs with fewer than 3 turns after merging.
    pub dropped_short: usize,
    /// Dialogs containing a turn that normalized to nothing.
    pub dropped_empty_turn: usize,
    /// Same-speaker turns folded into their predecessor.
    pub merged_turns: usize,
}

/// Reads a line-delimited dialog file.
///
/// Blank lines are skipped. Consecutive turns by one speaker are merged; the
/// merged turn keeps the tags of the last contributing turn.
pub fn load_corpus(path: &Path, source_label: &str) -> Result<(Vec<Dialog>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut dialogs = Vec::new();
    let mut seen = HashSet::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let record: DialogRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        report.records += 1;
        if !seen.insert(record.id.clone()) {
            return Err(malformed(format!("duplicate dialog id {:?}", record.id)));
        }

        let mut turns: Vec<Turn> = Vec::with_capacity(record.turns.len());
        let mut empty = false;
        for t in record.turns {
            let words = normalize(&t.text);
            if words.is_empty() {
                empty = true;
                break;
            }
            match turns.last_mut() {
                Some(prev) if prev.speaker == t.speaker => {
                    prev.words.extend(words);
                    if !t.tags.is_empty() {
                        prev.tags = t.tags;
                    }
                    report.merged_turns += 1;
                }
                _ => turns.push(Turn {
                    speaker: t.speaker,
                    words,
                    tags: t.tags,
                }),
            }
        }
        if empty {
            log::warn!(
                "{}:{}: dialog {} has an empty turn after normalization; dropped",
                path.display(),
                lineno + 1,
                record.id
            );
            report.dropped_empty_turn += 1;
            continue;
        }
        if turns.len() < 3 {
            report.dropped_short += 1;
            continue;
        }
        dialogs.push(Dialog {
            id: record.id,
            turns,
            source: source_label.to_owned(),
        });
    }
    report.dialogs = dialogs.len();
    Ok((dialogs, report))
}

/// Reads interchange records verbatim: turns are normalized but neither
/// merged nor filtered, and records of any length are kept. Used for
/// histories and candidate lists rather than corpora.
pub fn load_records(path: &Path) -> Result<Vec<(String, Vec<Turn>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let record: DialogRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let mut turns = Vec::with_capacity(record.turns.len());
        for (i, t) in record.turns.into_iter().enumerate() {
            let words = normalize(&t.text);
            if words.is_empty() {
                return Err(malformed(format!("turn {i} is empty after normalization")));
            }
            turns.push(Turn {
                speaker: t.speaker,
                words,
                tags: t.tags,
            });
        }
        out.push((record.id, turns));
    }
    Ok(out)
}

/// Serializes one dialog as an interchange record (no trailing newline).
pub fn dialog_to_record(dialog: &Dialog) -> String {
    let record = DialogRecord {
        id: dialog.id.clone(),
        turns: dialog
            .turns
            .iter()
            .map(|t| TurnRecord {
                speaker: t.speaker,
                text: t.text(),
                tags: t.tags.clone(),
            })
            .collect(),
        tags: None,
    };
    serde_json::to_string(&record).expect("dialog record serializes")
}

pub fn write_corpus(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in dialogs {
        writeln!(out, "{}", dialog_to_record(d)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Generator configuration.
///
/// Every dialog has three turns: an opener by A, the current utterance by B
/// and the response by A. Templates (frozen, version 1):
///
/// | scenario | current utterance | response |
/// |---|---|---|
/// | SQ, early | `i will visit <topic> <time>` | acknowledgment |
/// | SQ, late | `... what should i do there` | `you should see the old town first` |
/// | SQ, late | `... how is the <attribute> there` | `the <attribute> there is <quality>` |
/// | SEM, early | `tell me about <topic>` | `<topic> is a place with a long history` |
/// | SEM, late | `tell me about <topic> s <attribute>` | `the <attribute> of <topic> is <quality>` |
/// | SIMPLE | `what is the capital of <country>` | `it is <capital>` |
///
/// Acknowledgments are `that sounds lovely enjoy your trip` or
/// `great have fun in <topic>`. `<quality>` is keyed by (topic, attribute).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogs: usize,
    /// Proportions of SQ, SEM and SIMPLE dialogs.
    pub scenario_mix: [f64; 3],
    /// Fraction of SQ/SEM current utterances that end at the early completion point.
    pub ambiguity_rate: f64,
    pub topics: Vec<String>,
    pub attributes: Vec<String>,
    pub times: Vec<String>,
    pub qualities: Vec<String>,
    /// (country, capital) pairs for the SIMPLE scenario.
    pub capitals: Vec<(String, String)>,
    pub openers: Vec<String>,
    pub seed: u64,
}

pub const SYNTH_TEMPLATE_VERSION: u32 = 1;

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogs: 9000,
            scenario_mix: [0.4, 0.4, 0.2],
            ambiguity_rate: 0.5,
            topics: words(&[
                "rome", "paris", "tokyo", "vietnam", "peru", "norway", "kenya", "lisbon", "cairo",
                "chile", "oslo", "berlin",
            ]),
            attributes: words(&[
                "weather", "food", "economy", "history", "music", "nightlife",
            ]),
            times: words(&[
                "monday", "tuesday", "friday", "saturday", "sunday", "tomorrow",
            ]),
            qualities: words(&["mild", "excellent", "famous", "growing", "lively", "rich"]),
            capitals: vec![
                ("france".into(), "paris".into()),
                ("italy".into(), "rome".into()),
                ("japan".into(), "tokyo".into()),
                ("egypt".into(), "cairo".into()),
                ("germany".into(), "berlin".into()),
                ("portugal".into(), "lisbon".into()),
            ],
            openers: vec![
                "hello how can i help you".into(),
                "hi what can i do for you".into(),
                "good morning".into(),
            ],
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.scenario_mix.iter().sum();
        if self.scenario_mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "scenario_mix {:?} must be proportions summing to 1",
                self.scenario_mix
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config(format!(
                "ambiguity_rate {} outside [0, 1]",
                self.ambiguity_rate
            )));
        }
        let lexicons: [(&str, usize); 6] = [
            ("topics", self.topics.len()),
            ("attributes", self.attributes.len()),
            ("times", self.times.len()),
            ("qualities", self.qualities.len()),
            ("capitals", self.capitals.len()),
            ("openers", self.openers.len()),
        ];
        if let Some((name, _)) = lexicons.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("lexicon {name} is empty")));
        }
        let all_words = self
            .topics
            .iter()
            .chain(&self.attributes)
            .chain(&self.times)
            .chain(&self.qualities)
            .chain(self.capitals.iter().flat_map(|(a, b)| [a, b]));
        for w in all_words {
            if !is_normalized_word(w) {
                return Err(Error::Config(format!("lexicon entry {w:?} is not a normalized word")));
            }
        }
        if self.openers.iter().any(|o| normalize(o).is_empty()) {
            return Err(Error::Config("empty opener".into()));
        }
        Ok(())
    }
}

/// Deterministic (topic, attribute) key into the quality lexicon.
fn keyed_index(parts: &[&str], modulus: usize) -> usize {
    // FNV-1a, fixed so the templates do not depend on std's hasher.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    (h % modulus as u64) as usize
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// The SIMPLE response for a given fact phrase.
pub fn simple_response(fact: &str) -> Vec<String> {
    split_words(&format!("it is {fact}"))
}

/// Generates `cfg.n_dialogs` dialogs; identical configs give identical output.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Dialog>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_dialogs);
    let width = cfg.n_dialogs.max(1).to_string().len();

    for i in 0..cfg.n_dialogs {
        let u: f64 = rng.gen();
        let scenario = if u < cfg.scenario_mix[0] {
            Scenario::StatementQuestion
        } else if u < cfg.scenario_mix[0] + cfg.scenario_mix[1] {
            Scenario::SemanticMatch
        } else {
            Scenario::Simple
        };
        let opener = pick(&mut rng, &cfg.openers).clone();

        let (cu, early_end, question_final, response) = match scenario {
            Scenario::StatementQuestion => {
                let topic = pick(&mut rng, &cfg.topics).clone();
                let time = pick(&mut rng, &cfg.times).clone();
                let early = rng.gen_bool(cfg.ambiguity_rate);
                let mut cu = split_words(&format!("i will visit {topic} {time}"));
                let early_end = cu.len() - 1;
                let (response, qf) = if early {
                    let r = if rng.gen_bool(0.5) {
                        "that sounds lovely enjoy your trip".to_owned()
                    } else {
                        format!("great have fun in {topic}")
                    };
                    (r, false)
                } else if rng.gen_bool(0.5) {
                    cu.extend(split_words("what should i do there"));
                    ("you should see the old town first".to_owned(), true)
                } else {
                    let attr = pick(&mut rng, &cfg.attributes).clone();
                    cu.extend(split_words(&format!("how is the {attr} there")));
                    let q = &cfg.qualities[keyed_index(&[&topic, &attr], cfg.qualities.len())];
                    (format!("the {attr} there is {q}"), true)
                };
                (cu, Some(early_end), qf, response)
            }
            Scenario::SemanticMatch => {
                let topic = pick(&mut rng, &cfg.topics).clone();
                let early = rng.gen_bool(cfg.ambiguity_rate);
                let mut cu = split_words(&format!("tell me about {topic}"));
                let early_end = cu.len() - 1;
                let response = if early {
                    format!("{topic} is a place with a long history")
                } else {
                    let attr = pick(&mut rng, &cfg.attributes).clone();
                    cu.push("s".into());
                    cu.push(attr.clone());
                    let q = &cfg.qualities[keyed_index(&[&topic, &attr], cfg.qualities.len())];
                    format!("the {attr} of {topic} is {q}")
                };
                (cu, Some(early_end), false, response)
            }
            Scenario::Simple => {
                let (country, capital) = pick(&mut rng, &cfg.capitals).clone();
                let cu = split_words(&format!("what is the capital of {country}"));
                (cu, None, true, format!("it is {capital}"))
            }
        };

        let scenario_only = TurnTags {
            scenario: Some(scenario),
            ..TurnTags::default()
        };
        let turns = vec![
            Turn {
                speaker: Speaker::A,
                words: normalize(&opener),
                tags: scenario_only.clone(),
            },
            Turn {
                speaker: Speaker::B,
                words: cu,
                tags: TurnTags {
                    scenario: Some(scenario),
                    early_end_index: early_end,
                    question_final: Some(question_final),
                },
            },
            Turn {
                speaker: Speaker::A,
                words: split_words(&response),
                tags: scenario_only,
            },
        ];
        out.push(Dialog {
            id: format!("synth-{i:0width$}"),
            turns,
            source: "synthetic".into(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Dialog>,
    pub val: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

/// Seeded shuffle followed by a contiguous train/val/test partition.
///
/// Validation and test sizes are `floor(n * ratio)`; train takes the rest.
pub fn split_corpus(dialogs: Vec<Dialog>, ratios: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    let n = dialogs.len();
    if n < nonzero {
        return Err(Error::Invalid(format!(
            "{n} dialogs cannot fill {nonzero} non-empty partitions"
        )));
    }
    // Guard against representation error such as 0.29 * 100 = 28.999...
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_val = floor(ratios[1]);
    let n_test = floor(ratios[2]);
    let n_train = n - n_val - n_test;

    let mut dialogs = dialogs;
    dialogs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = dialogs.split_off(n_train + n_val);
    let val = dialogs.split_off(n_train);
    Ok(CorpusSplit {
        train: dialogs,
        val,
        test,
    })
}
