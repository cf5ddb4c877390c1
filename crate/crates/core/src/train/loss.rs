use crate::autodiff::{Scalar, Tape, Var};
use crate::data::LabeledBatch;
use crate::error::Result;

/// Loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// `cls + token`, no weighting.
    pub total: Var,
    pub cls: Var,
    pub token: Option<Var>,
}

/// Soft cross-entropy of the class logits against the image labels, plus,
/// when `with_tokens` holds, the soft cross-entropy of every patch logit
/// row against its patch label averaged over batch and patches.
pub fn token_label_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cls_logits: Var,
    token_logits: Var,
    batch: &LabeledBatch,
    with_tokens: bool,
) -> Result<LossVars> {
    let cls = tape.soft_cross_entropy(cls_logits, &batch.image_labels.cast())?;
    if !with_tokens {
        return Ok(LossVars { total: cls, cls, token: None });
    }
    let token = tape.soft_cross_entropy(token_logits, &batch.patch_labels.cast())?;
    let total = tape.add(cls, token)?;
    Ok(LossVars { total, cls, token: Some(token) })
}
