//! Truncated backpropagation through time.
//!
//! Sequences are processed in consecutive chunks of at most `truncation`
//! frames. Hidden and cell states carry forward across chunk boundaries;
//! gradients never flow back across them. During training each chunk ends
//! with an SGD update, using gradients averaged over the frames that
//! contributed to the chunk.

use crate::nn::{scale_all, sgd_step, ParamSet};
use crate::{Error, Result};

/// A model trainable by the BPTT driver. The gradient store is a second
/// instance of the same type with all tensors zeroed.
pub trait SequenceModel: ParamSet + Sized {
    /// One training sequence (inputs plus supervision).
    type Seq;
    /// Recurrent state carried across chunk boundaries.
    type State: Clone;

    fn grad_store(&self) -> Self;
    fn zero_state(&self) -> Self::State;
    fn seq_len(seq: &Self::Seq) -> usize;

    /// Forward and backward over frames `start..end` of `seq`, starting from
    /// `state` and treating it as constant (no gradient beyond the chunk).
    /// Accumulates raw (unscaled) parameter gradients into `grads`; returns
    /// the summed per-frame loss and the state after frame `end-1`.
    fn chunk_grads(
        &self,
        seq: &Self::Seq,
        start: usize,
        end: usize,
        state: &Self::State,
        grads: &mut Self,
    ) -> Result<(f64, Self::State)>;

    /// Which parameter tensors the optimizer may update.
    fn trainable(&self, _name: &str) -> bool {
        true
    }

    /// Global gradient-norm clip applied before each update.
    fn clip(&self) -> Option<f64> {
        Some(5.0)
    }
}

fn check_args(len: usize, truncation: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Invalid("empty sequence".into()));
    }
    if truncation == 0 {
        return Err(Error::Invalid("truncation must be >= 1".into()));
    }
    Ok(())
}

/// Gradient of the mean per-frame loss of one sequence under truncated BPTT,
/// with no parameter updates. Used by gradient checks and the truncation
/// contract tests; returns the mean loss.
pub fn bptt_grads<M: SequenceModel>(
    model: &M,
    seq: &M::Seq,
    truncation: usize,
    grads: &mut M,
) -> Result<f64> {
    let len = M::seq_len(seq);
    check_args(len, truncation)?;
    let mut state = model.zero_state();
    let mut total = 0.0;
    let mut start = 0;
    while start < len {
        let end = (start + truncation).min(len);
        let (loss, next) = model.chunk_grads(seq, start, end, &state, grads)?;
        total += loss;
        state = next;
        start = end;
    }
    scale_all(grads, 1.0 / len as f64);
    Ok(total / len as f64)
}

/// One epoch of minibatch training: sequences are grouped in order into
/// batches of `batch` members; within a batch all members advance through
/// the same chunk window, gradients are averaged over the frames the chunk
/// actually covered, and one SGD step is taken per chunk.
///
/// Returns the mean per-frame loss over the whole epoch (measured before
/// each update, in processing order).
pub fn bptt_train_epoch<M: SequenceModel>(
    model: &mut M,
    seqs: &[&M::Seq],
    batch: usize,
    truncation: usize,
    lr: f64,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Invalid("empty sequence".into()));
    }
    if batch == 0 {
        return Err(Error::Invalid("batch must be >= 1".into()));
    }
    for seq in seqs {
        check_args(M::seq_len(seq), truncation)?;
    }
    let mut grads = model.grad_store();
    let clip = model.clip();
    let trainable: std::collections::HashSet<String> = model
        .tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| model.trainable(n))
        .collect();
    let mut total_loss = 0.0;
    let mut total_frames = 0usize;
    for group in seqs.chunks(batch) {
        let mut states: Vec<M::State> = group.iter().map(|_| model.zero_state()).collect();
        let longest = group.iter().map(|s| M::seq_len(s)).max().unwrap();
        let mut start = 0;
        while start < longest {
            let mut chunk_frames = 0usize;
            let mut chunk_loss = 0.0;
            for (i, seq) in group.iter().enumerate() {
                let len = M::seq_len(seq);
                if start >= len {
                    continue;
                }
                let end = (start + truncation).min(len);
                let (loss, next) = model.chunk_grads(seq, start, end, &states[i], &mut grads)?;
                chunk_loss += loss;
                chunk_frames += end - start;
                states[i] = next;
            }
            if chunk_frames > 0 {
                scale_all(&mut grads, 1.0 / chunk_frames as f64);
                sgd_step(model, &mut grads, lr, clip, |n| trainable.contains(n))?;
            }
            total_loss += chunk_loss;
            total_frames += chunk_frames;
            start += truncation;
        }
    }
    Ok(total_loss / total_frames as f64)
}
