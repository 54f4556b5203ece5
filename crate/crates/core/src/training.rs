//! Mini-batch training with Adam, linear warmup, global-norm clipping and
//! early stopping on masked validation loss.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, unknown_key, KeyValue};
use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::sequencing::{EncodedSequence, Variant};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient norm cap; non-positive disables clipping.
    pub gradient_clip_norm: f64,
    /// Batches per length-sorted shuffle bucket.
    pub bucket_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Baseline,
            batch_size: 32,
            max_steps: 2500,
            eval_interval: 100,
            patience: 5,
            learning_rate: 2e-3,
            warmup_steps: 100,
            gradient_clip_norm: 1.0,
            bucket_batches: 8,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.bucket_batches == 0 {
            return Err(Error::Config("bucket_batches must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "eval_interval" => self.eval_interval = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "gradient_clip_norm" => self.gradient_clip_norm = parse_value(key, value)?,
            "bucket_batches" => self.bucket_batches = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimizer steps taken.
    pub step: usize,
    pub epoch: usize,
    /// Mean masked loss over the training batches since the previous record.
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// The log without its timing field, for reproducibility comparisons.
    pub fn untimed(&self) -> TrainLog {
        TrainLog {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    /// One JSON object per evaluation, then a summary line. Wall-clock time
    /// is left out so identical runs write identical files.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            let mut v = serde_json::to_value(r).expect("record serializes");
            v["kind"] = "eval".into();
            writeln!(out, "{v}")?;
        }
        let summary = serde_json::json!({
            "kind": "summary",
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
        });
        writeln!(out, "{summary}")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// splitmix64 finalizer, used to derive per-step dropout seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One epoch of batches: shuffle, sort by length within buckets of
/// `bucket_batches` batches, cut into batches, then shuffle batch order.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, bucket_batches: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for bucket in order.chunks_mut(batch_size * bucket_batches) {
        bucket.sort_by_key(|&i| lengths[i]);
        batches.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = (1.0 - ADAM_BETA1.powi(self.t)) as f32;
        let c2 = (1.0 - ADAM_BETA2.powi(self.t)) as f32;
        let (lr, eps) = (lr as f32, ADAM_EPS as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

fn check_variant(seqs: &[EncodedSequence], variant: Variant, what: &str) -> Result<()> {
    let want = variant == Variant::Rc;
    if let Some(i) = seqs
        .iter()
        .position(|s| s.response_flags.iter().any(|&f| f) != want)
    {
        return Err(Error::Invalid(format!(
            "{what} sequence {i} is not encoded for the {variant} variant"
        )));
    }
    Ok(())
}

/// Trains `model` and returns the parameters with the lowest validation loss.
///
/// Validation loss is measured every `eval_interval` steps and after the
/// final step.
pub fn train(
    model: TransformerLM<f32>,
    train_set: &[EncodedSequence],
    val_set: &[EncodedSequence],
    cfg: &TrainConfig,
) -> Result<(TransformerLM<f32>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    check_variant(train_set, cfg.variant, "training")?;
    check_variant(val_set, cfg.variant, "validation")?;

    let started = Instant::now();
    let mut model = model;
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut stale = 0;
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut adam = Adam::new(model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train_set.iter().map(EncodedSequence::len).collect();

    let (mut step, mut epoch) = (0, 0);
    let (mut window_loss, mut window_batches) = (0.0, 0usize);
    let mut stop_reason = StopReason::MaxSteps;

    'outer: while step < cfg.max_steps {
        let batches = epoch_batches(&lengths, cfg.batch_size, cfg.bucket_batches, &mut rng);
        for batch in batches {
            let lr = cfg.lr_at(step);
            let members: Vec<&EncodedSequence> = batch.iter().map(|&i| &train_set[i]).collect();
            let dropout_seed = (model.config().dropout_rate > 0.0).then(|| mix(cfg.seed ^ mix(step as u64)));
            let (loss, mut grad) = model.loss_and_grad(&members, dropout_seed)?;
            let norm = grad.iter().map(|g| f64::from(*g).powi(2)).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged at step {step} (epoch {epoch}, learning rate {lr:e}): loss {loss}, gradient norm {norm}"
                )));
            }
            if cfg.gradient_clip_norm > 0.0 && norm > cfg.gradient_clip_norm {
                let s = (cfg.gradient_clip_norm / norm) as f32;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(model.params_mut(), &grad, lr);
            step += 1;
            window_loss += loss;
            window_batches += 1;

            let last = step == cfg.max_steps;
            if step % cfg.eval_interval == 0 || last {
                let val_loss = model.batch_loss(val_set)?;
                if !val_loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "validation loss {val_loss} at step {step}"
                    )));
                }
                let rec = EvalRecord {
                    step,
                    epoch,
                    train_loss: window_loss / window_batches as f64,
                    val_loss,
                    learning_rate: lr,
                };
                log::info!(
                    "{} step {step} epoch {epoch}: train {:.4} val {:.4}",
                    cfg.variant,
                    rec.train_loss,
                    val_loss
                );
                records.push(rec);
                window_loss = 0.0;
                window_batches = 0;
                if val_loss < best_val {
                    best_val = val_loss;
                    best_step = step;
                    best = model.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        stop_reason = StopReason::EarlyStop;
                        break 'outer;
                    }
                }
            }
            if last {
                break 'outer;
            }
        }
        epoch += 1;
    }

    if records.is_empty() {
        // max_steps == 0: report the untrained model.
        best_val = model.batch_loss(val_set)?;
        records.push(EvalRecord {
            step: 0,
            epoch: 0,
            train_loss: f64::NAN,
            val_loss: best_val,
            learning_rate: 0.0,
        });
    }
    Ok((
        best,
        TrainLog {
            records,
            best_step,
            best_val_loss: best_val,
            stop_reason,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}
