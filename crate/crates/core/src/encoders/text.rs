use medflip_tensor::Var;

use super::block;
use super::params::Bound;
use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::vocab::PAD_ID;

/// Right-padded token ids with an attention mask (`true` = real token).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Pads to the longest sequence (at most `max_length`, at least one
    /// column). Longer sequences are truncated.
    pub fn from_sequences(seqs: &[&[u32]], max_length: usize) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).clamp(1, max_length.max(1));
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for j in 0..len {
                match s.get(j) {
                    Some(&id) => {
                        ids.push(id);
                        mask.push(true);
                    }
                    None => {
                        ids.push(PAD_ID);
                        mask.push(false);
                    }
                }
            }
        }
        Self {
            ids,
            mask,
            rows: seqs.len(),
            len,
        }
    }
}

pub(super) fn forward(cfg: &TextConfig, bound: &Bound<'_>, batch: &TokenBatch) -> Result<Var> {
    if batch.rows == 0 || batch.len == 0 || batch.ids.len() != batch.rows * batch.len || batch.mask.len() != batch.ids.len() {
        return Err(Error::Tensor(medflip_tensor::TensorError::Shape {
            op: "text_forward",
            lhs: vec![batch.rows, batch.len],
            rhs: vec![batch.ids.len(), batch.mask.len()],
        }));
    }
    if batch.len > cfg.max_length {
        return Err(Error::config(format!("token batch length {} exceeds max_length {}", batch.len, cfg.max_length)));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Vocabulary { id: bad, vocab_size: cfg.vocab_size });
    }
    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..batch.rows).flat_map(|_| 0..batch.len).collect();
    let mut h = bound
        .var("text.token_embed")
        .gather_rows(&ids)?
        .add(&bound.var("text.pos_embed").gather_rows(&positions)?)?;
    for i in 0..cfg.depth {
        h = block::forward(bound, &format!("text.blocks.{i}"), &h, batch.rows, cfg.heads, Some(&batch.mask))?;
    }
    let weights: Vec<f64> = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let pooled = h.segment_mean(batch.rows, Some(&weights))?;
    Ok(pooled.linear(bound.var("text.proj.weight"), Some(bound.var("text.proj.bias")))?)
}
