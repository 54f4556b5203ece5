use super::{ModelConfig, TransformerLM};
use crate::error::{Error, Result};
use crate::sequencing::EncodedSequence;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter block holding the worst entry.
    pub worst_block: String,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares the analytic gradient of the masked loss with centered finite
/// differences for every parameter, in 64-bit precision.
///
/// The difference quotient is the five-point centered stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose O(h^4)
/// truncation error stays below the tolerance even where layer norms of
/// small-scale initial embeddings make the loss sharply curved.
pub fn grad_check(cfg: &ModelConfig, seq: &EncodedSequence, step: f64) -> Result<GradCheckReport> {
    let model = TransformerLM::<f64>::new(cfg)?;
    grad_check_model(&model, seq, step)
}

pub fn grad_check_model(
    model: &TransformerLM<f64>,
    seq: &EncodedSequence,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grad(&[seq], None)?;
    let mut probe = model.clone();
    let loss_at = |m: &TransformerLM<f64>| m.loss_and_grad(&[seq], None).map(|(l, _)| l);
    let mut numeric = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let orig = probe.params()[i];
        let mut at = |offset: f64| {
            probe.params_mut()[i] = orig + offset;
            loss_at(&probe)
        };
        let (p1, m1) = (at(step)?, at(-step)?);
        let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
        probe.params_mut()[i] = orig;
        numeric[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
    }
    if let Some(i) = analytic
        .iter()
        .chain(&numeric)
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!("gradient entry {}", i % analytic.len())));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let worst_block = model
        .layout()
        .blocks()
        .iter()
        .find(|b| b.range().contains(&worst_index))
        .map(|b| b.name.clone())
        .unwrap_or_default();
    Ok(GradCheckReport {
        max_rel_error,
        worst_block,
        worst_index,
        analytic,
        numeric,
    })
}
