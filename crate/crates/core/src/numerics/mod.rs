//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Everything the model needs is expressed with the ops on [`Tape`]; the
//! only broadcast is a bias add over the last axis. Every op checks its
//! output for NaN/Inf and fails with [`crate::Error::NonFinite`] instead of
//! propagating it.

mod gradcheck;
mod tape;
mod tensor;


pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_EPS};
pub use tape::{gelu_scalar, Tape, Var, COSINE_EPS, LAYER_NORM_EPS};
pub use tensor::{Real, Tensor};

/// Standalone softmax of a vector; same arithmetic as [`Tape::softmax`].
pub fn softmax<F: Real>(v: &[F]) -> crate::Result<Vec<F>> {
    if v.is_empty() {
        return Err(crate::Error::dim("softmax of an empty vector"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![v.len()], v.to_vec())?)?;
    let y = tape.softmax(x)?;
    Ok(tape.value(y).to_vec())
}
