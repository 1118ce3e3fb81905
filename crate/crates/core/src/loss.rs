//! Semantic soft targets, temperature-scaled cross-modal similarities, the
//! spectral (largest singular value) loss and the combined objective.
//!
//! Targets come from label vectors rather than pair identity: for image
//! labels `l_img` (N×K) and text labels `l_txt` (N_t×K),
//! `s_ij = cos(l_img_i, l_txt_j)`, and the image→text and text→image
//! targets are the row-wise softmaxes of `s` and `sᵀ`.
//!
//! Predictions use the cosine logits `s̃ = ṽ t̃ᵀ` of the normalised
//! embeddings, softmaxed at temperature `T` over texts (image→text) and over
//! images (text→image). Both directions are kept and averaged.
//!
//! The spectral term is `-log softmax(σ / τ)_1` over the singular values
//! `σ_1 ≥ … ≥ σ_r` of the batch logit matrix: small when the leading
//! singular value dominates the spectrum.
//!
//! Two contrastive forms are available:
//!
//! * [`LossMode::SoftCe`] (default): `½ [CE(y_v2t ‖ ŷ_v2t) + CE(y_t2v ‖ ŷ_t2v)]`
//!   with `CE(p ‖ q) = -Σ p log q / rows`.
//! * [`LossMode::Verbatim`]: `(-Σ_i log ŷ_ii + Σ_{i≠j} log(1 - ŷ_ij)) / N`,
//!   averaged over both directions. The second sum enters with a plus sign,
//!   so this form rewards large off-diagonal probabilities and ignores the
//!   soft targets; it is kept for comparison only.
//!
//! Either way, `total = contrastive + beta * svd`.

use std::fmt;
use std::str::FromStr;

use medflip_tensor::{softmax_rows, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingPair;
use crate::error::{Error, Result};

const LABEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Verbatim,
    #[default]
    SoftCe,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(LossMode::Verbatim),
            "soft_ce" => Ok(LossMode::SoftCe),
            other => Err(Error::config(format!("unknown loss mode `{other}` (expected verbatim or soft_ce)"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Verbatim => "verbatim",
            LossMode::SoftCe => "soft_ce",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub beta: f64,
    /// Softmax temperature of the cross-modal logits.
    #[serde(rename = "temperature_T")]
    pub temperature_t: f64,
    /// Temperature of the softmax over singular values.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::SoftCe,
            beta: 0.1,
            temperature_t: 0.07,
            tau: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_t > 0.0) || !self.temperature_t.is_finite() {
            return Err(Error::config("loss.temperature_T must be positive"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("loss.tau must be positive"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("loss.beta must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Multi-hot (or graded) membership over the K entity classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityLabelVector(Vec<f64>);

impl EntityLabelVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!("label entries must lie in [0, 1]: {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&k| self.0[k] > 0.0).collect()
    }

    /// The class index when exactly one entry is positive.
    pub fn single_class(&self) -> Option<usize> {
        match self.positives().as_slice() {
            [k] => Some(*k),
            _ => None,
        }
    }
}

/// Stacks label vectors into an `N × K` matrix.
pub fn stack_labels<'a>(labels: impl IntoIterator<Item = &'a EntityLabelVector>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = labels.into_iter().map(|l| l.0.clone()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Cosine similarity between image and text label vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSimilarityMatrix(pub Tensor);

pub fn semantic_similarity(l_img: &Tensor, l_txt: &Tensor) -> Result<SemanticSimilarityMatrix> {
    let (n, k) = l_img.dims2()?;
    let (nt, k2) = l_txt.dims2()?;
    if k != k2 {
        return Err(Error::Tensor(medflip_tensor::TensorError::Shape {
            op: "semantic_similarity",
            lhs: l_img.shape().to_vec(),
            rhs: l_txt.shape().to_vec(),
        }));
    }
    let dots = l_img.matmul(&l_txt.transpose()?)?;
    let norm = |t: &Tensor, r: usize| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
    let ni: Vec<f64> = (0..n).map(|i| norm(l_img, i)).collect();
    let nj: Vec<f64> = (0..nt).map(|j| norm(l_txt, j)).collect();
    let mut s = dots.into_data();
    for i in 0..n {
        for j in 0..nt {
            let d = ni[i] * nj[j];
            s[i * nt + j] = if ni[i] < LABEL_EPS || nj[j] < LABEL_EPS { 0.0 } else { s[i * nt + j] / d };
        }
    }
    Ok(SemanticSimilarityMatrix(Tensor::new(vec![n, nt], s)?))
}

/// Row-softmax targets in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    /// `N × N_t`, rows over texts.
    pub v2t: Tensor,
    /// `N_t × N`, rows over images.
    pub t2v: Tensor,
}

pub fn soft_targets(s: &SemanticSimilarityMatrix) -> Result<SoftTargets> {
    Ok(SoftTargets {
        v2t: softmax_rows(&s.0, 1.0)?,
        t2v: softmax_rows(&s.0.transpose()?, 1.0)?,
    })
}

#[derive(Clone, Debug)]
pub struct PredictedSimilarity {
    /// Cosine logits `ṽ t̃ᵀ`, `N × N_t`.
    pub logits: Var,
    pub y_hat_v2t: Var,
    pub y_hat_t2v: Var,
    pub log_y_hat_v2t: Var,
    pub log_y_hat_t2v: Var,
    pub temperature: f64,
}

pub fn predicted_similarity(v_norm: &Var, t_norm: &Var, temperature: f64) -> Result<PredictedSimilarity> {
    let logits = v_norm.matmul_nt(t_norm)?;
    let lt = logits.transpose()?;
    Ok(PredictedSimilarity {
        y_hat_v2t: logits.softmax_rows(temperature)?,
        y_hat_t2v: lt.softmax_rows(temperature)?,
        log_y_hat_v2t: logits.log_softmax_rows(temperature)?,
        log_y_hat_t2v: lt.log_softmax_rows(temperature)?,
        logits,
        temperature,
    })
}

#[derive(Clone, Debug)]
pub struct SvdTerm {
    pub value: Var,
    pub sigma: Vec<f64>,
}

/// `-log(exp(σ_1/τ) / Σ_i exp(σ_i/τ))` over the singular values of `logits`.
pub fn svd_loss(logits: &Var, tau: f64) -> Result<SvdTerm> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Tensor(medflip_tensor::TensorError::Domain {
            op: "svd_loss",
            reason: format!("tau must be positive, got {tau}"),
        }));
    }
    let (sigma_var, dec) = logits.singular_values()?;
    let r = dec.sigma.len();
    let value = sigma_var
        .reshape(&[1, r])?
        .log_softmax_rows(tau)?
        .slice_cols(0, 1)?
        .sum()
        .neg();
    Ok(SvdTerm {
        value,
        sigma: dec.sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub svd_term: f64,
    pub total: f64,
    pub sigma_spectrum: Vec<f64>,
    pub beta: f64,
    pub temperature_t: f64,
    pub tau: f64,
    /// Mean row entropy of the soft targets, averaged over directions.
    pub target_entropy: f64,
    pub mode: LossMode,
}

fn entropy_rows(p: &Tensor) -> f64 {
    let rows = p.shape()[0].max(1) as f64;
    -p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / rows
}

fn cross_entropy(tape_target: &Tensor, log_q: &Var) -> Result<Var> {
    let rows = tape_target.shape()[0].max(1) as f64;
    let p = log_q.tape().constant(tape_target.clone());
    Ok(p.mul(log_q)?.sum().scale(-1.0 / rows))
}

fn verbatim_term(y_hat: &Var) -> Result<Var> {
    let (n, m) = match y_hat.shape() {
        [n, m] => (*n, *m),
        s => return Err(Error::config(format!("verbatim loss needs a matrix, got {s:?}"))),
    };
    if n != m {
        return Err(Error::Tensor(medflip_tensor::TensorError::Shape {
            op: "medflip_loss(verbatim)",
            lhs: vec![n],
            rhs: vec![m],
        }));
    }
    let tape = y_hat.tape();
    let eye = tape.constant(Tensor::eye(n));
    let off = tape.constant(Tensor::new(vec![n, n], Tensor::eye(n).data().iter().map(|d| 1.0 - d).collect())?);
    let diag = y_hat.log().mul(&eye)?.sum();
    let rest = y_hat.neg().add_scalar(1.0).log().mul(&off)?.sum();
    Ok(rest.sub(&diag)?.scale(1.0 / n as f64))
}

/// Combines the contrastive term selected by `mode` with `beta * svd`.
pub fn medflip_loss(
    pred: &PredictedSimilarity,
    targets: &SoftTargets,
    svd: &SvdTerm,
    beta: f64,
    mode: LossMode,
) -> Result<(Var, LossBreakdown)> {
    let contrastive = match mode {
        LossMode::SoftCe => {
            if pred.log_y_hat_v2t.shape() != targets.v2t.shape() || pred.log_y_hat_t2v.shape() != targets.t2v.shape() {
                return Err(Error::Tensor(medflip_tensor::TensorError::Shape {
                    op: "medflip_loss(soft_ce)",
                    lhs: pred.log_y_hat_v2t.shape().to_vec(),
                    rhs: targets.v2t.shape().to_vec(),
                }));
            }
            let a = cross_entropy(&targets.v2t, &pred.log_y_hat_v2t)?;
            let b = cross_entropy(&targets.t2v, &pred.log_y_hat_t2v)?;
            a.add(&b)?.scale(0.5)
        }
        LossMode::Verbatim => verbatim_term(&pred.y_hat_v2t)?
            .add(&verbatim_term(&pred.y_hat_t2v)?)?
            .scale(0.5),
    };
    let total = contrastive.add(&svd.value.scale(beta))?;
    let breakdown = LossBreakdown {
        contrastive: contrastive.item(),
        svd_term: svd.value.item(),
        total: total.item(),
        sigma_spectrum: svd.sigma.clone(),
        beta,
        temperature_t: pred.temperature,
        tau: f64::NAN,
        target_entropy: 0.5 * (entropy_rows(&targets.v2t) + entropy_rows(&targets.t2v)),
        mode,
    };
    Ok((total, breakdown))
}

/// Full objective from embeddings and label batches.
pub fn compute(emb: &EmbeddingPair, l_img: &Tensor, l_txt: &Tensor, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let s = semantic_similarity(l_img, l_txt)?;
    let targets = soft_targets(&s)?;
    let pred = predicted_similarity(&emb.v_norm, &emb.t_norm, cfg.temperature_t)?;
    let svd = svd_loss(&pred.logits, cfg.tau)?;
    let (total, mut breakdown) = medflip_loss(&pred, &targets, &svd, cfg.beta, cfg.mode)?;
    breakdown.tau = cfg.tau;
    Ok((total, breakdown))
}
