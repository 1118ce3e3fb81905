use medflip_tensor::{Tensor, TensorError, Var};

use super::block;
use super::params::Bound;
use crate::config::VisionConfig;
use crate::error::Result;
use crate::masking::MaskPlan;

/// Splits an `H × W × C` image into `(H/p)·(W/p)` row-major patches, each
/// flattened in `(row, col, channel)` order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(TensorError::InvalidShape { op: "patchify", shape: s.to_vec(), reason: "expected H x W x C".into() }.into()),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::InvalidShape {
            op: "patchify",
            shape: image.shape().to_vec(),
            reason: format!("not divisible by patch size {patch}"),
        }
        .into());
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, dim], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, height: usize, width: usize, channels: usize) -> Result<Tensor> {
    let (gh, gw) = (height / patch, width / patch);
    let dim = patch * patch * channels;
    if tokens.shape() != [gh * gw, dim] || gh * patch != height || gw * patch != width {
        return Err(TensorError::InvalidShape {
            op: "unpatchify",
            shape: tokens.shape().to_vec(),
            reason: format!("does not tile {height}x{width}x{channels} with patch {patch}"),
        }
        .into());
    }
    let mut out = vec![0.0; height * width * channels];
    let src = tokens.data();
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * width + gx * patch;
                out[row * channels..(row + patch) * channels].copy_from_slice(&src[k..k + patch * channels]);
                k += patch * channels;
            }
        }
    }
    Ok(Tensor::new(vec![height, width, channels], out)?)
}

pub(super) fn forward(cfg: &VisionConfig, bound: &Bound<'_>, images: &[&Tensor], plans: &[MaskPlan]) -> Result<Var> {
    if images.len() != plans.len() || images.is_empty() {
        return Err(TensorError::Shape { op: "vision_forward", lhs: vec![images.len()], rhs: vec![plans.len()] }.into());
    }
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    let l = cfg.num_tokens();
    let keep = plans[0].visible_len();
    let dim = cfg.patch_dim();
    let mut tokens = Vec::with_capacity(images.len() * keep * dim);
    let mut positions = Vec::with_capacity(images.len() * keep);
    for (img, plan) in images.iter().zip(plans) {
        if img.shape() != expected {
            return Err(TensorError::Shape { op: "vision_forward", lhs: img.shape().to_vec(), rhs: expected.to_vec() }.into());
        }
        if plan.total_tokens() != l || plan.visible_len() != keep {
            return Err(TensorError::Shape {
                op: "vision_forward",
                lhs: vec![plan.total_tokens(), plan.visible_len()],
                rhs: vec![l, keep],
            }
            .into());
        }
        let patches = patchify(img, cfg.patch_size)?;
        for &i in plan.visible_indices() {
            tokens.extend_from_slice(patches.row(i));
        }
        positions.extend_from_slice(plan.visible_indices());
    }
    let n = images.len();
    let tape = bound.var("vision.pos_embed").tape().clone();
    let x = tape.constant(Tensor::new(vec![n * keep, dim], tokens)?);
    let mut h = x
        .linear(bound.var("vision.patch.weight"), Some(bound.var("vision.patch.bias")))?
        .add(&bound.var("vision.pos_embed").gather_rows(&positions)?)?;
    for i in 0..cfg.depth {
        h = block::forward(bound, &format!("vision.blocks.{i}"), &h, n, cfg.heads, None)?;
    }
    let pooled = h.segment_mean(n, None)?;
    Ok(pooled.linear(bound.var("vision.proj.weight"), Some(bound.var("vision.proj.bias")))?)
}
