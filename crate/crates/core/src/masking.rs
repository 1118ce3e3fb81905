//! Random patch-token masking for the image branch.
//!
//! A [`MaskPlan`] keeps `L - floor(ratio * L)` of the `L` patch tokens.
//! The subset is drawn by a partial Fisher–Yates shuffle over `0..L`
//! driven by a `ChaCha8Rng` seeded with the plan seed
//! (`SeedableRng::seed_from_u64`), using 32-bit `gen_range` draws, and is
//! returned sorted. Plans depend only on `(L, ratio, seed)`.

use medflip_tensor::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    total_tokens: usize,
    mask_ratio: f64,
    visible: Vec<usize>,
    seed: u64,
}

/// Number of tokens left visible: `L - floor(ratio * L)`.
pub fn visible_count(total_tokens: usize, mask_ratio: f64) -> usize {
    // The nudge keeps products such as 0.29 * 100 from flooring to 28.
    let masked = (mask_ratio * total_tokens as f64 + 1e-9).floor() as usize;
    total_tokens - masked.min(total_tokens)
}

/// Seed of the plan for one image in one epoch.
pub fn mask_seed(global_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    derive_seed(&[global_seed, epoch, sample_index])
}

pub fn make_mask_plan(total_tokens: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::config(format!("mask_ratio {mask_ratio} outside [0, 1)")));
    }
    if total_tokens == 0 {
        return Err(Error::config("mask plan needs at least one token"));
    }
    if total_tokens > u32::MAX as usize {
        return Err(Error::config("too many tokens for a mask plan"));
    }
    let keep = visible_count(total_tokens, mask_ratio);
    let mut visible: Vec<usize> = if keep == total_tokens {
        (0..total_tokens).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<usize> = (0..total_tokens).collect();
        for i in 0..keep {
            let j = rng.gen_range(i as u32..total_tokens as u32) as usize;
            pool.swap(i, j);
        }
        pool.truncate(keep);
        pool
    };
    visible.sort_unstable();
    Ok(MaskPlan {
        total_tokens,
        mask_ratio,
        visible,
        seed,
    })
}

impl MaskPlan {
    /// Plan that keeps every token.
    pub fn unmasked(total_tokens: usize) -> Self {
        Self {
            total_tokens,
            mask_ratio: 0.0,
            visible: (0..total_tokens).collect(),
            seed: 0,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sorted positions of the kept tokens.
    pub fn visible_indices(&self) -> &[usize] {
        &self.visible
    }

    pub fn visible_len(&self) -> usize {
        self.visible.len()
    }
}

/// Keeps the visible rows of an `L × d` token matrix, in plan order. The
/// gradient flows back to visible rows only.
pub fn apply_mask(tokens: &Var, plan: &MaskPlan) -> Result<Var> {
    match tokens.shape() {
        [l, _] if *l == plan.total_tokens => Ok(tokens.gather_rows(&plan.visible)?),
        s => Err(Error::Tensor(medflip_tensor::TensorError::Shape {
            op: "apply_mask",
            lhs: s.to_vec(),
            rhs: vec![plan.total_tokens],
        })),
    }
}
