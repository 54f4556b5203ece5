//! Word-level vocabulary with reserved PAD/UNK/TS ids.
//!
//! Speaker identity and response role are embedding channels, not tokens, so
//! TS is the only special symbol that appears inside a sequence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Dialog;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const TS: TokenId = 2;
pub const N_RESERVED: usize = 3;

pub const PAD_STR: &str = "⟨pad⟩";
pub const UNK_STR: &str = "⟨unk⟩";
pub const TS_STR: &str = "⟨ts⟩";

const FORMAT_HEADER: &str = "#turnshift-vocab";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut words = vec![PAD_STR.to_owned(), UNK_STR.to_owned(), TS_STR.to_owned()];
        let mut counts = vec![0; N_RESERVED];
        for (w, c) in entries {
            words.push(w);
            counts.push(c);
        }
        let index = words
            .iter()
            .enumerate()
            .skip(N_RESERVED)
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Vocab {
            words,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TokenId) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.word(id).map(str::to_owned).ok_or_else(|| {
                    Error::Invalid(format!("token id {id} outside vocabulary of {}", self.len()))
                })
            })
            .collect()
    }

    /// Text serialization: a header line, then `id\tword\tcount` per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_HEADER}\tv{FORMAT_VERSION}\t{}\n", self.len());
        for (i, (w, c)) in self.words.iter().zip(&self.counts).enumerate() {
            writeln!(out, "{i}\t{w}\t{c}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 || fields[0] != FORMAT_HEADER {
            return Err(Error::Format(format!("bad vocabulary header {header:?}")));
        }
        if fields[1] != format!("v{FORMAT_VERSION}") {
            return Err(Error::Format(format!("unsupported vocabulary version {}", fields[1])));
        }
        let size: usize = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad vocabulary size {:?}", fields[2])))?;

        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            let [id, word, count] = parts[..] else {
                return Err(Error::Format(format!("vocabulary line {}: {line:?}", i + 2)));
            };
            if id.parse::<usize>().ok() != Some(i) {
                return Err(Error::Format(format!("vocabulary ids not dense at line {}", i + 2)));
            }
            let count: u64 = count
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {}: bad count", i + 2)))?;
            let expected_reserved = [PAD_STR, UNK_STR, TS_STR];
            if i < N_RESERVED {
                if word != expected_reserved[i] {
                    return Err(Error::Format(format!("reserved id {i} is {word:?}")));
                }
            } else {
                entries.push((word.to_owned(), count));
            }
        }
        let vocab = Vocab::from_entries(entries);
        if vocab.len() != size || vocab.index.len() != size - N_RESERVED {
            return Err(Error::Format(format!(
                "vocabulary declares {size} entries but holds {} distinct",
                vocab.index.len() + N_RESERVED
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a vocabulary from word frequencies over every turn.
///
/// Words seen at least `min_count` times are kept, most frequent first with
/// lexicographic tie-breaking, until the vocabulary holds `max_size` entries.
pub fn build_vocab(dialogs: &[Dialog], min_count: u64, max_size: usize) -> Result<Vocab> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if max_size <= N_RESERVED {
        return Err(Error::Config(format!("max_size must exceed {N_RESERVED}")));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for w in dialogs.iter().flat_map(|d| &d.turns).flat_map(|t| &t.words) {
        *freq.entry(w.as_str()).or_default() += 1;
    }
    if freq.is_empty() {
        log::warn!("building vocabulary from an empty corpus; only reserved tokens");
    }
    let mut entries: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .map(|(w, c)| (w.to_owned(), c))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(max_size - N_RESERVED);
    Ok(Vocab::from_entries(entries))
}
