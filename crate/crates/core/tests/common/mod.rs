#![allow(dead_code)]

use turnshift::corpus::{generate_synthetic, Dialog, SynthConfig};
use turnshift::model::ModelConfig;
use turnshift::sequencing::{encode_all, extract_corpus, EncodedSequence, Sample, Variant, DEFAULT_WINDOW};
use turnshift::tokenizer::{build_vocab, Vocab};

pub fn synth(n: usize, seed: u64) -> Vec<Dialog> {
    generate_synthetic(&SynthConfig {
        n_dialogs: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub struct Fixture {
    pub vocab: Vocab,
    pub samples: Vec<Sample>,
}

pub fn fixture(n: usize, seed: u64) -> Fixture {
    let dialogs = synth(n, seed);
    let vocab = build_vocab(&dialogs, 1, 10_000).unwrap();
    let samples = extract_corpus(&dialogs, DEFAULT_WINDOW).unwrap();
    Fixture { vocab, samples }
}

impl Fixture {
    pub fn encode(&self, variant: Variant, full_lm_loss: bool) -> Vec<EncodedSequence> {
        encode_all(&self.samples, variant, &self.vocab, full_lm_loss, 128).unwrap()
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 128,
            dropout_rate: 0.0,
            seed,
        }
    }
}
