use medflip_tensor::{attention, Var};

use super::params::Bound;
use super::Init;
use crate::error::Result;

pub(super) const LN_EPS: f64 = 1e-5;

pub(super) fn layout(prefix: &str, depth: usize, dim: usize, mlp_ratio: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let hidden = dim * mlp_ratio;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    for i in 0..depth {
        let p = format!("{prefix}.blocks.{i}");
        out.push((format!("{p}.ln1.gamma"), vec![dim], Init::Ones));
        out.push((format!("{p}.ln1.beta"), vec![dim], Init::Zeros));
        out.push((format!("{p}.attn.qkv.weight"), vec![dim, 3 * dim], fan(dim)));
        out.push((format!("{p}.attn.qkv.bias"), vec![3 * dim], Init::Zeros));
        out.push((format!("{p}.attn.proj.weight"), vec![dim, dim], fan(dim)));
        out.push((format!("{p}.attn.proj.bias"), vec![dim], Init::Zeros));
        out.push((format!("{p}.ln2.gamma"), vec![dim], Init::Ones));
        out.push((format!("{p}.ln2.beta"), vec![dim], Init::Zeros));
        out.push((format!("{p}.mlp.fc1.weight"), vec![dim, hidden], fan(dim)));
        out.push((format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros));
        out.push((format!("{p}.mlp.fc2.weight"), vec![hidden, dim], fan(hidden)));
        out.push((format!("{p}.mlp.fc2.bias"), vec![dim], Init::Zeros));
    }
}

/// Pre-norm transformer block over `groups` sequences stacked row-wise.
pub(super) fn forward(
    bound: &Bound<'_>,
    prefix: &str,
    x: &Var,
    groups: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let h = x.layer_norm(p("ln1.gamma"), p("ln1.beta"), LN_EPS)?;
    let qkv = h.linear(p("attn.qkv.weight"), Some(p("attn.qkv.bias")))?;
    let a = attention(&qkv, groups, heads, key_mask)?;
    let x = x.add(&a.linear(p("attn.proj.weight"), Some(p("attn.proj.bias")))?)?;
    let h = x.layer_norm(p("ln2.gamma"), p("ln2.beta"), LN_EPS)?;
    let m = h
        .linear(p("mlp.fc1.weight"), Some(p("mlp.fc1.bias")))?
        .gelu()
        .linear(p("mlp.fc2.weight"), Some(p("mlp.fc2.bias")))?;
    Ok(x.add(&m)?)
}
