//! Sliding-window sample extraction and the two sequence serializations.
//!
//! Baseline order is `H TS CU TS`. Response-conditioned (RC) order is
//! `R TS H TS CU TS`, with the response-role channel set on R and its TS, and
//! the loss restricted to the CU words and the TS that ends CU.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialog, Speaker, Turn, TurnTags};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab, TS};

pub const DEFAULT_WINDOW: usize = 3;

/// Which training objective a sequence (or model) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Rc,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Rc => "rc",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "rc" => Ok(Variant::Rc),
            _ => Err(Error::Config(format!("unknown variant {s:?} (baseline|rc)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (H, CU, R) window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub dialog_id: String,
    /// Turn index of CU within its dialog.
    pub cu_index: usize,
    pub history: Vec<Turn>,
    pub current: Turn,
    pub response: Turn,
}

impl Sample {
    pub fn key(&self) -> String {
        format!("{}#{}", self.dialog_id, self.cu_index)
    }

    pub fn tags(&self) -> &TurnTags {
        &self.current.tags
    }
}

/// Windows of `window_size` turns stepping by one: the last turn is R, the one
/// before it CU, everything earlier H.
pub fn extract_samples(dialog: &Dialog, window_size: usize) -> Result<Vec<Sample>> {
    if window_size < 3 {
        return Err(Error::Config(format!("window_size {window_size} < 3")));
    }
    Ok(dialog
        .turns
        .windows(window_size)
        .enumerate()
        .map(|(start, w)| Sample {
            dialog_id: dialog.id.clone(),
            cu_index: start + window_size - 2,
            history: w[..window_size - 2].to_vec(),
            current: w[window_size - 2].clone(),
            response: w[window_size - 1].clone(),
        })
        .collect())
}

pub fn extract_corpus(dialogs: &[Dialog], window_size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for d in dialogs {
        out.extend(extract_samples(d, window_size)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<TokenId>,
    pub speaker_ids: Vec<Speaker>,
    pub response_flags: Vec<bool>,
    /// `loss_mask[t]` marks token `t` as a counted prediction target.
    pub loss_mask: Vec<bool>,
    pub cu_word_positions: Vec<usize>,
    /// Position of the TS that terminates CU.
    pub cu_end_position: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn loss_terms(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }

    /// Per-sequence consistency checks shared by decoders and tests.
    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.speaker_ids.len() != n || self.response_flags.len() != n || self.loss_mask.len() != n
        {
            return Err(Error::Format("per-token arrays differ in length".into()));
        }
        if n == 0 || self.loss_mask[0] {
            return Err(Error::Format("empty sequence or loss on position 0".into()));
        }
        if self.cu_end_position >= n || self.token_ids[self.cu_end_position] != TS {
            return Err(Error::Format("cu_end_position is not a TS token".into()));
        }
        if self.cu_word_positions.iter().any(|&p| p >= self.cu_end_position) {
            return Err(Error::Format("CU word after its terminating TS".into()));
        }
        Ok(())
    }
}

struct Builder {
    seq: EncodedSequence,
}

impl Builder {
    fn new() -> Self {
        Builder {
            seq: EncodedSequence {
                token_ids: Vec::new(),
                speaker_ids: Vec::new(),
                response_flags: Vec::new(),
                loss_mask: Vec::new(),
                cu_word_positions: Vec::new(),
                cu_end_position: 0,
            },
        }
    }

    /// Appends the words of a turn plus its terminating TS; returns the
    /// positions of the words.
    fn push_turn(
        &mut self,
        vocab: &Vocab,
        speaker: Speaker,
        words: &[String],
        response: bool,
        counted: bool,
    ) -> std::ops::Range<usize> {
        let start = self.seq.token_ids.len();
        for id in vocab.encode(words).into_iter().chain(std::iter::once(TS)) {
            self.seq.token_ids.push(id);
            self.seq.speaker_ids.push(speaker);
            self.seq.response_flags.push(response);
            self.seq.loss_mask.push(counted);
        }
        start..start + words.len()
    }

    fn finish(mut self, name: &str, max_len: usize) -> Result<EncodedSequence> {
        if let Some(first) = self.seq.loss_mask.first_mut() {
            *first = false;
        }
        if self.seq.token_ids.len() > max_len {
            return Err(Error::SequenceTooLong {
                sample: name.to_owned(),
                len: self.seq.token_ids.len(),
                max: max_len,
            });
        }
        Ok(self.seq)
    }
}

/// Baseline serialization: `H TS CU TS`, no response tokens.
///
/// With `full_lm_loss` every position after the first is a target; otherwise
/// only the CU words and CU's TS are.
pub fn encode_baseline(
    sample: &Sample,
    vocab: &Vocab,
    full_lm_loss: bool,
    max_len: usize,
) -> Result<EncodedSequence> {
    let mut b = Builder::new();
    for h in &sample.history {
        b.push_turn(vocab, h.speaker, &h.words, false, full_lm_loss);
    }
    let cu = b.push_turn(vocab, sample.current.speaker, &sample.current.words, false, true);
    b.seq.cu_word_positions = cu.clone().collect();
    b.seq.cu_end_position = cu.end;
    b.finish(&sample.key(), max_len)
}

/// Response-conditioned serialization `R TS H TS CU TS` built from parts.
pub fn encode_rc_parts(
    history: &[Turn],
    current_speaker: Speaker,
    current_words: &[String],
    response_words: &[String],
    vocab: &Vocab,
    max_len: usize,
    name: &str,
) -> Result<EncodedSequence> {
    let mut b = Builder::new();
    b.push_turn(vocab, current_speaker.other(), response_words, true, false);
    for h in history {
        b.push_turn(vocab, h.speaker, &h.words, false, false);
    }
    let cu = b.push_turn(vocab, current_speaker, current_words, false, true);
    b.seq.cu_word_positions = cu.clone().collect();
    b.seq.cu_end_position = cu.end;
    b.finish(name, max_len)
}

pub fn encode_rc(sample: &Sample, vocab: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    encode_rc_parts(
        &sample.history,
        sample.current.speaker,
        &sample.current.words,
        &sample.response.words,
        vocab,
        max_len,
        &sample.key(),
    )
}

/// Encodes per variant; `full_lm_loss` only affects the baseline.
pub fn encode(
    sample: &Sample,
    variant: Variant,
    vocab: &Vocab,
    full_lm_loss: bool,
    max_len: usize,
) -> Result<EncodedSequence> {
    match variant {
        Variant::Baseline => encode_baseline(sample, vocab, full_lm_loss, max_len),
        Variant::Rc => encode_rc(sample, vocab, max_len),
    }
}

pub fn encode_all(
    samples: &[Sample],
    variant: Variant,
    vocab: &Vocab,
    full_lm_loss: bool,
    max_len: usize,
) -> Result<Vec<EncodedSequence>> {
    samples
        .iter()
        .map(|s| encode(s, variant, vocab, full_lm_loss, max_len))
        .collect()
}

// ---------------------------------------------------------------------------
// Prepared-sample cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"TSSEQCH\0";
const CACHE_VERSION: u32 = 1;

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        if b {
            byte |= 1 << (n % 8);
        }
        n += 1;
        if n % 8 == 0 {
            out.push(byte);
            byte = 0;
        }
    }
    if n % 8 != 0 {
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Binary container: magic, version, record count, then per record the
/// length, little-endian u32 ids, three bit-packed per-token arrays
/// (speaker B, response flag, loss mask), the CU word positions and the CU
/// end position.
pub fn encode_cache(seqs: &[EncodedSequence]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seqs.len() as u64).to_le_bytes());
    for s in seqs {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for id in &s.token_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        pack_bits(s.speaker_ids.iter().map(|sp| *sp == Speaker::B), &mut out);
        pack_bits(s.response_flags.iter().copied(), &mut out);
        pack_bits(s.loss_mask.iter().copied(), &mut out);
        out.extend_from_slice(&(s.cu_word_positions.len() as u32).to_le_bytes());
        for p in &s.cu_word_positions {
            out.extend_from_slice(&(*p as u32).to_le_bytes());
        }
        out.extend_from_slice(&(s.cu_end_position as u32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated sample cache".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_cache(buf: &[u8]) -> Result<Vec<EncodedSequence>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CACHE_MAGIC {
        return Err(Error::Format("not a sample cache".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported sample cache version {version}")));
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let token_ids = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let nbytes = n.div_ceil(8);
        let speaker_ids = unpack_bits(c.take(nbytes)?, n)
            .into_iter()
            .map(|b| if b { Speaker::B } else { Speaker::A })
            .collect();
        let response_flags = unpack_bits(c.take(nbytes)?, n);
        let loss_mask = unpack_bits(c.take(nbytes)?, n);
        let m = c.u32()? as usize;
        let cu_word_positions = (0..m)
            .map(|_| c.u32().map(|p| p as usize))
            .collect::<Result<Vec<_>>>()?;
        let cu_end_position = c.u32()? as usize;
        let seq = EncodedSequence {
            token_ids,
            speaker_ids,
            response_flags,
            loss_mask,
            cu_word_positions,
            cu_end_position,
        };
        seq.validate()?;
        out.push(seq);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in sample cache".into()));
    }
    Ok(out)
}

pub fn save_cache(path: &Path, seqs: &[EncodedSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_cache(seqs)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: &Path) -> Result<Vec<EncodedSequence>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    decode_cache(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;
    use Speaker::{A, B};

    fn turn(speaker: Speaker, text: &str) -> Turn {
        Turn::new(speaker, text)
    }

    pub(crate) fn toy_vocab() -> Vocab {
        // hello=3, hi=4, there=5, good=6 by descending frequency.
        let d = Dialog {
            id: "v".into(),
            turns: vec![
                turn(A, "hello hello hello hello hello hi hi hi hi there there there good good"),
                turn(B, "zz"),
                turn(A, "zz"),
            ],
            source: "t".into(),
        };
        let v = build_vocab(&[d], 1, 7).unwrap();
        assert_eq!(v.encode(&["hello", "hi", "there", "good"]), vec![3, 4, 5, 6]);
        v
    }

    fn toy_sample() -> Sample {
        Sample {
            dialog_id: "toy".into(),
            cu_index: 1,
            history: vec![turn(A, "hello")],
            current: turn(B, "hi there"),
            response: turn(A, "good"),
        }
    }

    #[test]
    fn windows() {
        let d = Dialog {
            id: "d".into(),
            turns: (0..5)
                .map(|i| turn(if i % 2 == 0 { A } else { B }, &format!("t{i}")))
                .collect(),
            source: "t".into(),
        };
        let s = extract_samples(&d, 3).unwrap();
        assert_eq!(s.len(), 3);
        for (k, smp) in s.iter().enumerate() {
            assert_eq!(smp.history, vec![d.turns[k].clone()]);
            assert_eq!(smp.current, d.turns[k + 1]);
            assert_eq!(smp.response, d.turns[k + 2]);
            assert_eq!(smp.cu_index, k + 1);
        }
        let s4 = extract_samples(&d, 4).unwrap();
        assert_eq!(s4.len(), 2);
        assert!(s4.iter().all(|s| s.history.len() == 2));
        let short = Dialog {
            turns: d.turns[..3].to_vec(),
            ..d.clone()
        };
        assert_eq!(extract_samples(&short, 3).unwrap().len(), 1);
        assert!(extract_samples(&d, 2).is_err());
        assert!(extract_samples(&short, 4).unwrap().is_empty());
    }

    #[test]
    fn baseline_toy() {
        let v = toy_vocab();
        let e = encode_baseline(&toy_sample(), &v, true, 128).unwrap();
        assert_eq!(e.token_ids, vec![3, 2, 4, 5, 2]);
        assert_eq!(e.speaker_ids, vec![A, A, B, B, B]);
        assert!(e.response_flags.iter().all(|f| !f));
        assert_eq!(e.loss_mask, vec![false, true, true, true, true]);
        assert_eq!(e.cu_end_position, 4);
        assert_eq!(e.cu_word_positions, vec![2, 3]);
        let cu_only = encode_baseline(&toy_sample(), &v, false, 128).unwrap();
        assert_eq!(cu_only.loss_mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn rc_toy() {
        let v = toy_vocab();
        let e = encode_rc(&toy_sample(), &v, 128).unwrap();
        assert_eq!(e.token_ids, vec![6, 2, 3, 2, 4, 5, 2]);
        assert_eq!(e.speaker_ids, vec![A, A, A, A, B, B, B]);
        assert_eq!(e.response_flags, vec![true, true, false, false, false, false, false]);
        assert_eq!(e.loss_mask, vec![false, false, false, false, true, true, true]);
        assert_eq!(e.cu_end_position, 6);
        assert_eq!(e.cu_word_positions, vec![4, 5]);
    }

    #[test]
    fn too_long_names_sample() {
        let v = toy_vocab();
        match encode_rc(&toy_sample(), &v, 6) {
            Err(Error::SequenceTooLong { sample, len, .. }) => {
                assert_eq!(sample, "toy#1");
                assert_eq!(len, 7);
            }
            other => panic!("{other:?}"),
        }
        assert!(encode_baseline(&toy_sample(), &v, true, 4).is_err());
    }

    #[test]
    fn cache_rejects_corruption() {
        let v = toy_vocab();
        let seqs = vec![encode_rc(&toy_sample(), &v, 128).unwrap()];
        let bytes = encode_cache(&seqs);
        assert_eq!(decode_cache(&bytes).unwrap(), seqs);
        assert!(decode_cache(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_cache(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_cache(&extra).is_err());
    }
}
