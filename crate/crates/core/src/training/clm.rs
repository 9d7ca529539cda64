use super::metrics::MetricsRecord;
use super::schedule::Phase;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::numerics::{AdamState, Tape};
use crate::textdata::{Batch, PAD};

/// Position of an optimizer step within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepIndex {
    pub step: u64,
    pub epoch: u64,
}

/// Clips the gradients already absorbed into the model and applies one
/// Adam update. Returns the pre-clip gradient norm.
pub(crate) fn apply_update(model: &mut LanguageModel, opt: &mut AdamState, grad_clip: f64) -> Result<f64> {
    model.params.fill_missing_grads();
    let norm = model.params.clip_grad_norm(grad_clip);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient norm" });
    }
    opt.step(&mut model.params)?;
    Ok(norm)
}

/// Inputs and PAD-marked targets for a batch, with columns past the
/// longest real row dropped.
fn inputs_and_targets(batch: &Batch) -> Result<(Vec<&[u32]>, Vec<u32>)> {
    let width = batch
        .mask
        .iter()
        .map(|m| m.iter().rposition(|&b| b).map_or(0, |p| p + 1))
        .max()
        .unwrap_or(0);
    if width == 0 {
        return Err(Error::DegenerateBatch);
    }
    let inputs = batch.tokens.iter().map(|r| &r[..width]).collect();
    let mut targets = Vec::with_capacity(batch.rows() * width);
    for (row, mask) in batch.tokens.iter().zip(&batch.mask) {
        targets.extend((0..width).map(|t| if mask[t] { row[t + 1] } else { PAD }));
    }
    Ok((inputs, targets))
}

/// One learning-phase update on `batch`.
pub fn clm_step(
    model: &mut LanguageModel,
    batch: &Batch,
    opt: &mut AdamState,
    grad_clip: f64,
    at: StepIndex,
) -> Result<MetricsRecord> {
    let (inputs, targets) = inputs_and_targets(batch)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model.forward_on_tape(&mut tape, &bound, &inputs)?;
    let loss = tape.cross_entropy_next_token(out.logits, &targets, PAD)?;
    tape.backward(loss)?;
    model.params.zero_grads();
    model.params.absorb_grads(&tape, &bound);
    let norm = apply_update(model, opt, grad_clip)?;
    let mut rec = MetricsRecord::new(at.step, at.epoch, Phase::Clm);
    rec.loss = Some(tape.value(loss).item());
    rec.grad_norm = Some(norm);
    Ok(rec)
}
