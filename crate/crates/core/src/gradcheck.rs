//! Finite-difference verification of every differentiable operation and of
//! the full objective on a toy model.
//!
//! Each primitive is checked through `sum(w ⊙ op(x))` with a random
//! projection `w`, so every output entry contributes. The composite check
//! differentiates the combined loss of a four-pair batch with respect to
//! every encoder parameter.

use medflip_tensor::gradcheck::{check, FD_STEP};
use medflip_tensor::{attention, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TextConfig, VisionConfig};
use crate::encoders::{Bound, EmbeddingPair, MedFlipModel, TokenBatch};
use crate::error::Result;
use crate::loss::{self, LossConfig, LossMode};
use crate::masking::make_mask_plan;
use crate::rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub base_seed: u64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

fn random(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape")
}

type OpFn = Box<dyn Fn(&[Var]) -> medflip_tensor::Result<Var>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    op: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    range: (f64, f64),
    op: impl Fn(&[Var]) -> medflip_tensor::Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        op: Box::new(op),
    }
}

fn op_cases() -> Vec<OpCase> {
    let key_mask = [true, true, false, true, false, true];
    vec![
        case("add", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |v| v[0].add(&v[1])),
        case("sub", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |v| v[0].sub(&v[1])),
        case("mul", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |v| v[0].mul(&v[1])),
        case("scale", &[&[5]], (-2.0, 2.0), |v| Ok(v[0].scale(-1.7).add_scalar(0.3))),
        case("exp", &[&[5]], (-2.0, 2.0), |v| Ok(v[0].exp())),
        case("log", &[&[5]], (0.1, 3.0), |v| Ok(v[0].log())),
        case("sum", &[&[3, 4]], (-2.0, 2.0), |v| Ok(v[0].sum())),
        case("mean", &[&[3, 4]], (-2.0, 2.0), |v| Ok(v[0].mean())),
        case("transpose", &[&[3, 4]], (-2.0, 2.0), |v| v[0].transpose()),
        case("slice_rows", &[&[5, 3]], (-2.0, 2.0), |v| v[0].slice_rows(1, 4)),
        case("slice_cols", &[&[3, 5]], (-2.0, 2.0), |v| v[0].slice_cols(2, 5)),
        case("gather_rows", &[&[4, 3]], (-2.0, 2.0), |v| v[0].gather_rows(&[3, 0, 3, 1])),
        case("matmul", &[&[3, 4], &[4, 2]], (-2.0, 2.0), |v| v[0].matmul(&v[1])),
        case("matmul_nt", &[&[3, 4], &[5, 4]], (-2.0, 2.0), |v| v[0].matmul_nt(&v[1])),
        case("linear", &[&[3, 4], &[4, 2], &[2]], (-2.0, 2.0), |v| v[0].linear(&v[1], Some(&v[2]))),
        case("softmax_rows", &[&[3, 4]], (-3.0, 3.0), |v| v[0].softmax_rows(0.7)),
        case("log_softmax_rows", &[&[3, 4]], (-3.0, 3.0), |v| v[0].log_softmax_rows(0.3)),
        case("l2_normalize_rows", &[&[3, 4]], (-2.0, 2.0), |v| v[0].l2_normalize_rows()),
        case("gelu", &[&[3, 5]], (-3.0, 3.0), |v| Ok(v[0].gelu())),
        case("layer_norm", &[&[3, 6], &[6], &[6]], (-2.0, 2.0), |v| {
            v[0].layer_norm(&v[1], &v[2], 1e-5)
        }),
        case("segment_mean", &[&[6, 3]], (-2.0, 2.0), |v| {
            v[0].segment_mean(2, Some(&[1.0, 0.0, 1.0, 1.0, 1.0, 0.0]))
        }),
        case("attention", &[&[6, 12]], (-1.5, 1.5), |v| attention(&v[0], 2, 2, None)),
        case("attention_masked", &[&[6, 12]], (-1.5, 1.5), move |v| {
            attention(&v[0], 2, 2, Some(&key_mask))
        }),
        case("singular_values", &[&[6, 6]], (-1.0, 1.0), |v| Ok(v[0].singular_values()?.0)),
    ]
}

fn check_op(c: &OpCase, seed: u64) -> Result<f64> {
    let mut r = rng::rng(&[seed, rng::tag(c.name)]);
    let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random(s, &mut r, c.range.0, c.range.1)).collect();
    let probe_seed: u64 = r.gen();
    let report = check(&inputs, FD_STEP, |tape: &Tape, vars: &[Var]| {
        let out = (c.op)(vars)?;
        let mut pr = rng::rng(&[probe_seed]);
        let w = tape.constant(random(out.shape(), &mut pr, -1.0, 1.0));
        out.mul(&w).map(|p| p.sum())
    })?;
    Ok(report.max_rel_error)
}

fn random_labels(n: usize, k: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        data[i * k + r.gen_range(0..k)] = 1.0;
        for j in 0..k {
            if r.gen_bool(0.3) {
                data[i * k + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![n, k], data).expect("shape")
}

/// Loss pieces on random unit-norm embeddings: the spectral term and both
/// contrastive modes.
fn check_loss_terms(seed: u64) -> Result<[f64; 3]> {
    let mut r = rng::rng(&[seed, rng::tag("loss_terms")]);
    let v = random(&[4, 5], &mut r, -1.0, 1.0);
    let t = random(&[4, 5], &mut r, -1.0, 1.0);
    let l_img = random_labels(4, 3, &mut r);
    let l_txt = random_labels(4, 3, &mut r);
    let mut out = [0.0; 3];

    let svd = check(&[random(&[6, 6], &mut r, -1.0, 1.0)], FD_STEP, |_, x| {
        Ok(loss::svd_loss(&x[0], 0.7).map_err(into_tensor_error)?.value)
    })?;
    out[0] = svd.max_rel_error;

    for (slot, mode) in [(1, LossMode::SoftCe), (2, LossMode::Verbatim)] {
        let cfg = LossConfig {
            mode,
            beta: 0.0,
            temperature_t: 0.5,
            tau: 1.0,
        };
        let rep = check(&[v.clone(), t.clone()], FD_STEP, |_, x| {
            let emb = EmbeddingPair::new(x[0].clone(), x[1].clone()).map_err(into_tensor_error)?;
            Ok(loss::compute(&emb, &l_img, &l_txt, &cfg).map_err(into_tensor_error)?.0)
        })?;
        out[slot] = rep.max_rel_error;
    }
    Ok(out)
}

fn into_tensor_error(e: crate::error::Error) -> medflip_tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => medflip_tensor::TensorError::Domain {
            op: "gradcheck",
            reason: other.to_string(),
        },
    }
}

/// Configuration of the toy model used by the composite check.
pub fn toy_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            projection_dim: 8,
        },
        text: TextConfig {
            vocab_size,
            max_length: 6,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            projection_dim: 8,
        },
    }
}

/// Combined objective on a four-pair toy batch, differentiated with respect
/// to every encoder parameter.
pub fn check_composite(seed: u64) -> Result<f64> {
    const VOCAB: usize = 12;
    let mut r = rng::rng(&[seed, rng::tag("composite")]);
    let cfg = toy_model_config(VOCAB);
    let model = MedFlipModel::new(&cfg, r.gen())?;
    let images: Vec<Tensor> = (0..4).map(|_| random(&[8, 8, 1], &mut r, 0.0, 1.0)).collect();
    let plans = (0..4)
        .map(|_| make_mask_plan(cfg.vision.num_tokens(), 0.5, r.gen()))
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<Vec<u32>> = (0..4)
        .map(|_| {
            let len = r.gen_range(2..=6);
            (0..len).map(|_| r.gen_range(2..VOCAB as u32)).collect()
        })
        .collect();
    let seq_refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let tokens = TokenBatch::from_sequences(&seq_refs, cfg.text.max_length);
    let l_img = random_labels(4, 3, &mut r);
    let l_txt = random_labels(4, 3, &mut r);
    let loss_cfg = LossConfig {
        mode: LossMode::SoftCe,
        beta: 0.5,
        temperature_t: 0.5,
        tau: 1.0,
    };
    let image_refs: Vec<&Tensor> = images.iter().collect();

    let report = check(model.params.tensors(), FD_STEP, |_, vars| {
        let bound = Bound::from_vars(&model.params, vars.to_vec());
        let run = || -> Result<Var> {
            let v_p = model.encode_images(&bound, &image_refs, &plans)?;
            let t_p = model.encode_texts(&bound, &tokens)?;
            let emb = EmbeddingPair::new(v_p, t_p)?;
            Ok(loss::compute(&emb, &l_img, &l_txt, &loss_cfg)?.0)
        };
        run().map_err(into_tensor_error)
    })?;
    Ok(report.max_rel_error)
}

/// Runs every check over `n_seeds` seeds derived from `base_seed`.
pub fn run_suite(base_seed: u64, n_seeds: usize) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| rng::derive_seed(&[base_seed, i])).collect();
    let mut entries = Vec::new();
    let mut push = |name: &str, worst: f64, tolerance: f64| {
        entries.push(GradcheckEntry {
            name: name.to_string(),
            max_rel_error: worst,
            tolerance,
            seeds: n_seeds,
            passed: worst < tolerance,
        })
    };
    for c in op_cases() {
        let mut worst: f64 = 0.0;
        for &s in &seeds {
            worst = worst.max(check_op(&c, s)?);
        }
        push(c.name, worst, OP_TOLERANCE);
    }
    let mut terms = [0.0f64; 3];
    for &s in &seeds {
        for (w, e) in terms.iter_mut().zip(check_loss_terms(s)?) {
            *w = w.max(e);
        }
    }
    push("svd_loss", terms[0], OP_TOLERANCE);
    push("contrastive_soft_ce", terms[1], OP_TOLERANCE);
    push("contrastive_verbatim", terms[2], OP_TOLERANCE);
    let mut worst: f64 = 0.0;
    for &s in &seeds {
        worst = worst.max(check_composite(s)?);
    }
    push("medflip_loss_composite", worst, COMPOSITE_TOLERANCE);
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradcheckReport {
        base_seed,
        entries,
        passed,
    })
}
