//! Patch-based vision transformer and word-level text transformer that
//! map images and reports into a shared projection space.
//!
//! Both towers use pre-norm blocks, GELU (tanh form) MLPs and mean
//! pooling; positional embeddings are learned and indexed by the original
//! token position, so a model trained on masked inputs evaluates on
//! unmasked ones with the same weights.

mod block;
mod params;
mod text;
mod vision;

pub use params::{Bound, ParamSet};
pub use text::TokenBatch;
pub use vision::{patchify, unpatchify};

use medflip_tensor::{Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::rng;

/// Projected image embeddings `v_p`, text embeddings `t_p` and their
/// row-normalised forms.
#[derive(Clone, Debug)]
pub struct EmbeddingPair {
    pub v_p: Var,
    pub t_p: Var,
    pub v_norm: Var,
    pub t_norm: Var,
}

impl EmbeddingPair {
    pub fn new(v_p: Var, t_p: Var) -> Result<Self> {
        let v_norm = v_p.l2_normalize_rows()?;
        let t_norm = t_p.l2_normalize_rows()?;
        Ok(Self {
            v_p,
            t_p,
            v_norm,
            t_norm,
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedFlipModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let v = &config.vision;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    out.push(("vision.patch.weight".into(), vec![v.patch_dim(), v.embed_dim], fan(v.patch_dim())));
    out.push(("vision.patch.bias".into(), vec![v.embed_dim], Init::Zeros));
    out.push(("vision.pos_embed".into(), vec![v.num_tokens(), v.embed_dim], Init::Normal(0.02)));
    block::layout("vision", v.depth, v.embed_dim, v.mlp_ratio, &mut out);
    out.push(("vision.proj.weight".into(), vec![v.embed_dim, v.projection_dim], fan(v.embed_dim)));
    out.push(("vision.proj.bias".into(), vec![v.projection_dim], Init::Zeros));

    let t = &config.text;
    out.push(("text.token_embed".into(), vec![t.vocab_size, t.embed_dim], Init::Normal(1.0)));
    out.push(("text.pos_embed".into(), vec![t.max_length, t.embed_dim], Init::Normal(0.02)));
    block::layout("text", t.depth, t.embed_dim, t.mlp_ratio, &mut out);
    out.push(("text.proj.weight".into(), vec![t.embed_dim, t.projection_dim], fan(t.embed_dim)));
    out.push(("text.proj.bias".into(), vec![t.projection_dim], Init::Zeros));
    out
}

/// Number of scalar parameters implied by a configuration.
pub fn param_count(config: &ModelConfig) -> usize {
    layout(config)
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

impl MedFlipModel {
    /// Freshly initialised model. `config.text.vocab_size` must be set.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size < 2 {
            return Err(Error::config("model.text.vocab_size must be set (at least 2)"));
        }
        let mut rng = rng::rng(&[seed, rng::tag("init")]);
        let mut params = ParamSet::default();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn bind<'a>(&'a self, tape: &Tape, trainable: bool) -> Bound<'a> {
        self.params.bind(tape, trainable)
    }

    /// `N × projection_dim` image embeddings `v_p`; one plan per image.
    pub fn encode_images(&self, bound: &Bound<'_>, images: &[&Tensor], plans: &[MaskPlan]) -> Result<Var> {
        vision::forward(&self.config.vision, bound, images, plans)
    }

    /// `N × projection_dim` text embeddings `t_p`.
    pub fn encode_texts(&self, bound: &Bound<'_>, batch: &TokenBatch) -> Result<Var> {
        text::forward(&self.config.text, bound, batch)
    }
}
