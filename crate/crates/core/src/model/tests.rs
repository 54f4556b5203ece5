use super::*;
use crate::corpus::{Dialog, Speaker, Turn};
use crate::sequencing::{encode_baseline, encode_rc, Sample, Variant};
use crate::tokenizer::{build_vocab, Vocab, TS};

pub(crate) fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 32,
        dropout_rate: 0.0,
        seed: 11,
    }
}

fn seq(tokens: &[u32], speakers: &[Speaker], response: &[bool], mask: &[bool]) -> EncodedSequence {
    EncodedSequence {
        token_ids: tokens.to_vec(),
        speaker_ids: speakers.to_vec(),
        response_flags: response.to_vec(),
        loss_mask: mask.to_vec(),
        cu_word_positions: vec![],
        cu_end_position: tokens.len() - 1,
    }
}

fn toy_seq() -> EncodedSequence {
    use Speaker::{A, B};
    seq(
        &[6, 2, 3, 2, 4, 5, 2],
        &[A, A, A, A, B, B, B],
        &[true, true, false, false, false, false, false],
        &[false, false, false, false, true, true, true],
    )
}

fn toy_vocab_and_sample() -> (Vocab, Sample) {
    use Speaker::{A, B};
    let d = Dialog {
        id: "v".into(),
        turns: vec![
            Turn::new(A, "hello hello hello hello hello hi hi hi hi there there there good good"),
            Turn::new(B, "zz"),
            Turn::new(A, "zz"),
        ],
        source: "t".into(),
    };
    let vocab = build_vocab(&[d], 1, 16).unwrap();
    let sample = Sample {
        dialog_id: "toy".into(),
        cu_index: 1,
        history: vec![Turn::new(A, "hello")],
        current: Turn::new(B, "hi there"),
        response: Turn::new(A, "good"),
    };
    (vocab, sample)
}

fn trained_like(cfg: &ModelConfig) -> TransformerLM<f64> {
    // Larger weights than the 0.02 init so perturbation tests are sensitive.
    let mut m = TransformerLM::<f64>::new(cfg).unwrap();
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for p in m.params_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *p += ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.6;
    }
    m
}

#[test]
fn init_is_deterministic_and_seeded() {
    let a = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    let b = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    assert_eq!(a.params(), b.params());
    let c = TransformerLM::<f32>::new(&ModelConfig {
        seed: 12,
        ..tiny_cfg()
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
    let gain = a.layout().block("h0.ln1.gain").unwrap();
    assert!(a.params()[gain.range()].iter().all(|g| *g == 1.0));
    let bias = a.layout().block("h0.mlp.fc.bias").unwrap();
    assert!(a.params()[bias.range()].iter().all(|g| *g == 0.0));
}

#[test]
fn head_divisibility() {
    let ok = ModelConfig {
        vocab_size: 10,
        d_model: 64,
        n_heads: 2,
        ..ModelConfig::default()
    };
    assert!(TransformerLM::<f32>::new(&ok).is_ok());
    let bad = ModelConfig { d_model: 65, ..ok };
    assert!(matches!(TransformerLM::<f32>::new(&bad), Err(Error::Config(_))));
}

#[test]
fn parameter_count_matches_closed_form() {
    // wte 16*8 + wpe 32*8 + speaker 2*8 + role 8 = 408; one block:
    // ln1 16 + qkv 192+24 + proj 64+8 + ln2 16 + fc 128+16 + out 128+8 = 600;
    // final norm 16.
    let cfg = tiny_cfg();
    let m = TransformerLM::<f32>::new(&cfg).unwrap();
    assert_eq!(m.param_count(), 1024);
    assert_eq!(cfg.param_count(), 1024);
}

#[test]
fn single_token_softmax() {
    let m = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    let s = seq(&[5], &[Speaker::A], &[false], &[false]);
    let logits = m.logits(&SeqInput::from(&s)).unwrap();
    assert_eq!((logits.rows, logits.vocab), (1, 16));
    let sum: f32 = logits.probs(0).iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
}

#[test]
fn response_role_participates() {
    let m = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    let base = toy_seq();
    let mut flipped = base.clone();
    flipped.response_flags = vec![false; base.len()];
    let a = m.logits(&SeqInput::from(&base)).unwrap();
    let b = m.logits(&SeqInput::from(&flipped)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn batch_order_permutes_outputs() {
    let m = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    let s1 = toy_seq();
    let s2 = seq(&[3, 4, 2], &[Speaker::B; 3], &[false; 3], &[false, true, true]);
    let ab = m.forward(&[s1.clone(), s2.clone()], None).unwrap();
    let ba = m.forward(&[s2, s1], None).unwrap();
    assert_eq!(ab[0], ba[1]);
    assert_eq!(ab[1], ba[0]);
}

#[test]
fn forward_rejects_bad_input() {
    let m = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    let long = seq(&[3; 33], &[Speaker::A; 33], &[false; 33], &[false; 33]);
    assert!(matches!(m.forward(&[long], None), Err(Error::SequenceTooLong { .. })));
    let oov = seq(&[16], &[Speaker::A], &[false], &[false]);
    assert!(m.forward(&[oov], None).is_err());
}

#[test]
fn uniform_logits_loss() {
    let logits = Logits {
        rows: 2,
        vocab: 16,
        data: vec![0.0f64; 32],
    };
    let (loss, _) = nll_loss(&logits, &[3, 9], &[false, true]).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12);
    assert!((loss - 2.7726).abs() < 1e-4);
    assert!(nll_loss(&logits, &[3, 9], &[false, false]).is_err());
}

#[test]
fn unmasked_region_does_not_count() {
    let m = trained_like(&tiny_cfg());
    let s = toy_seq();
    let logits = m.logits(&SeqInput::from(&s)).unwrap();
    let (loss, _) = nll_loss(&logits, &s.token_ids, &s.loss_mask).unwrap();

    // Duplicate the unmasked rows: extra positions carry no loss terms.
    let v = logits.vocab;
    let mut data = logits.data[..4 * v].to_vec();
    data.extend_from_slice(&logits.data);
    let mut tokens = s.token_ids[..4].to_vec();
    tokens.extend_from_slice(&s.token_ids);
    let mut mask = vec![false; 4];
    mask.extend_from_slice(&s.loss_mask);
    let doubled = Logits {
        rows: tokens.len(),
        vocab: v,
        data,
    };
    let (loss2, _) = nll_loss(&doubled, &tokens, &mask).unwrap();
    assert_eq!(loss, loss2);
}

#[test]
fn logits_gradient_matches_model_gradient_path() {
    let m = trained_like(&tiny_cfg());
    let s = toy_seq();
    let logits = m.logits(&SeqInput::from(&s)).unwrap();
    let (loss, _) = nll_loss(&logits, &s.token_ids, &s.loss_mask).unwrap();
    let (loss2, _) = m.loss_and_grad(&[&s], None).unwrap();
    assert!((loss - loss2).abs() < 1e-12);
    let (sum, terms) = m.sequence_loss(&s).unwrap();
    assert_eq!(terms, 3);
    assert!((sum / 3.0 - loss).abs() < 1e-12);
}

#[test]
fn causal_perturbation() {
    let m = trained_like(&tiny_cfg());
    let s = toy_seq();
    let base = m.logits(&SeqInput::from(&s)).unwrap();
    for t in 1..s.len() {
        let mut p = s.clone();
        p.token_ids[t] = (p.token_ids[t] + 5) % 16;
        p.speaker_ids[t] = p.speaker_ids[t].other();
        p.response_flags[t] = !p.response_flags[t];
        let got = m.logits(&SeqInput::from(&p)).unwrap();
        assert_eq!(&got.data[..t * 16], &base.data[..t * 16]);
        assert_ne!(got.row(t), base.row(t));
    }
}

#[test]
fn gradient_check_tiny() {
    let r = grad_check(&tiny_cfg(), &toy_seq(), 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst_block);
    let r2 = grad_check(&tiny_cfg(), &toy_seq(), 1e-4).unwrap();
    assert_eq!(r, r2);
}

#[test]
fn gradient_check_perturbed_weights_and_dropout_paths() {
    let m = trained_like(&tiny_cfg());
    let r = grad_check_model(&m, &toy_seq(), 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst_block);
}

#[test]
fn untouched_positions_have_zero_gradient() {
    let m = trained_like(&tiny_cfg());
    let s = toy_seq();
    let (_, g) = m.loss_and_grad(&[&s], None).unwrap();
    let wpe = m.layout().block("wpe").unwrap();
    let c = tiny_cfg().d_model;
    let unused = &g[wpe.offset + s.len() * c..wpe.offset + wpe.len()];
    assert!(unused.iter().all(|v| *v == 0.0));
    let used = &g[wpe.offset..wpe.offset + s.len() * c];
    assert!(used.iter().any(|v| *v != 0.0));
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = ModelConfig {
        dropout_rate: 0.3,
        ..tiny_cfg()
    };
    let m = TransformerLM::<f32>::new(&cfg).unwrap();
    let s = toy_seq();
    let eval1 = m.forward(std::slice::from_ref(&s), None).unwrap();
    let eval2 = m.forward(std::slice::from_ref(&s), None).unwrap();
    assert_eq!(eval1, eval2);
    let train = m.forward(std::slice::from_ref(&s), Some(1)).unwrap();
    assert_ne!(train, eval1);
    assert_eq!(train, m.forward(std::slice::from_ref(&s), Some(1)).unwrap());
}

#[test]
fn dropout_gradient_is_exact_for_fixed_masks() {
    let cfg = ModelConfig {
        dropout_rate: 0.25,
        ..tiny_cfg()
    };
    let m = trained_like(&cfg);
    let s = toy_seq();
    let (_, g) = m.loss_and_grad(&[&s], Some(5)).unwrap();
    let mut probe = m.clone();
    let h = 1e-5;
    for i in (0..g.len()).step_by(37) {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let (lp, _) = probe.loss_and_grad(&[&s], Some(5)).unwrap();
        probe.params_mut()[i] = orig - h;
        let (lm, _) = probe.loss_and_grad(&[&s], Some(5)).unwrap();
        probe.params_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        assert!(relative_error(g[i], num) < 1e-4, "param {i}: {} vs {num}", g[i]);
    }
}

#[test]
fn checkpoint_roundtrip_and_errors() {
    let m = TransformerLM::<f32>::new(&tiny_cfg()).unwrap();
    let bytes = encode_checkpoint(&m, Variant::Rc, "abc");
    let back = decode_checkpoint(&bytes, Some("abc")).unwrap();
    assert_eq!(back.model.params(), m.params());
    assert_eq!(back.model.config(), m.config());
    assert_eq!(back.variant, Variant::Rc);
    assert!(matches!(
        decode_checkpoint(&bytes, Some("other")),
        Err(Error::VocabMismatch { .. })
    ));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 10], None),
        Err(Error::Checksum { .. })
    ));
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(decode_checkpoint(&flipped, None), Err(Error::Checksum { .. })));
    assert!(decode_checkpoint(b"garbage", None).is_err());
}

#[test]
fn trace_length_and_prefix_oracle() {
    let (vocab, sample) = toy_vocab_and_sample();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..tiny_cfg()
    };
    let m = trained_like(&cfg);
    for variant in [Variant::Baseline, Variant::Rc] {
        let tr = ts_trace(&m, &sample, variant, &vocab).unwrap();
        assert_eq!(tr.probs.len(), 2);
        assert_eq!(tr.words, vec!["hi", "there"]);
        assert_eq!(tr.end_index, 1);
        // Independent prefix forwards: truncate after each CU word.
        let full = match variant {
            Variant::Baseline => encode_baseline(&sample, &vocab, true, 32).unwrap(),
            Variant::Rc => encode_rc(&sample, &vocab, 32).unwrap(),
        };
        for (k, &pos) in full.cu_word_positions.iter().enumerate() {
            let prefix = seq(
                &full.token_ids[..=pos],
                &full.speaker_ids[..=pos],
                &full.response_flags[..=pos],
                &vec![false; pos + 1],
            );
            let logits = m.logits(&SeqInput::from(&prefix)).unwrap();
            let p = quantize(logits.probs(pos)[TS as usize]);
            assert_eq!(p, tr.probs[k]);
        }
    }
}

#[test]
fn response_changes_rc_trace_only() {
    let (vocab, sample) = toy_vocab_and_sample();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..tiny_cfg()
    };
    let m = trained_like(&cfg);
    let mut other = sample.clone();
    other.response = Turn::new(Speaker::A, "hello there there");
    let rc_a = ts_trace(&m, &sample, Variant::Rc, &vocab).unwrap();
    let rc_b = ts_trace(&m, &other, Variant::Rc, &vocab).unwrap();
    assert_ne!(rc_a.probs, rc_b.probs);
    let base_a = ts_trace(&m, &sample, Variant::Baseline, &vocab).unwrap();
    let base_b = ts_trace(&m, &other, Variant::Baseline, &vocab).unwrap();
    assert_eq!(base_a, base_b);
}

