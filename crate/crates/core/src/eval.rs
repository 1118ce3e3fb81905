//! Zero-shot classification, linear probing and image→text retrieval.
//!
//! All protocols embed images unmasked and read parameters only. Accuracy
//! counts single-label samples only (a multi-hot sample has no single
//! target); retrieval uses every sample, with a report relevant to a query
//! image when its label vector equals the image's exactly.

use std::collections::{BTreeMap, HashSet};

use medflip_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticSample, CLASS_NAMES, NUM_CLASSES};
use crate::encoders::{MedFlipModel, TokenBatch};
use crate::error::{Error, Result};
use crate::loss::EntityLabelVector;
use crate::masking::MaskPlan;
use crate::optim::AdamW;
use crate::vocab::Vocabulary;

const EMBED_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    /// Overall accuracy (classification protocols).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    /// Accuracy per class name (classification protocols).
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_class: BTreeMap<String, f64>,
    /// `"P@K"` → precision (retrieval).
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub precision_at_k: BTreeMap<String, f64>,
    pub n_eval: usize,
    pub checkpoint_id: String,
    pub mask_ratio: f64,
    pub seed: u64,
}

/// Unit-norm image embeddings, `N × projection_dim`, unmasked.
pub fn embed_images(model: &MedFlipModel, images: &[&Tensor]) -> Result<Tensor> {
    let l = model.config.vision.num_tokens();
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let plans = vec![MaskPlan::unmasked(l); chunk.len()];
        let v = model.encode_images(&bound, chunk, &plans)?.l2_normalize_rows()?;
        rows.extend_from_slice(v.data());
    }
    Ok(Tensor::new(vec![images.len(), model.config.vision.projection_dim], rows)?)
}

/// Unit-norm text embeddings, `N × projection_dim`.
pub fn embed_texts(model: &MedFlipModel, vocab: &Vocabulary, texts: &[&str]) -> Result<Tensor> {
    let max_length = model.config.text.max_length;
    let mut rows = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|t| vocab.encode(t, max_length)).collect();
        let seqs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let t = model
            .encode_texts(&bound, &TokenBatch::from_sequences(&seqs, max_length))?
            .l2_normalize_rows()?;
        rows.extend_from_slice(t.data());
    }
    Ok(Tensor::new(vec![texts.len(), model.config.text.projection_dim], rows)?)
}

/// Normalised mean of each class's normalised prompt embeddings.
pub fn class_anchors(model: &MedFlipModel, vocab: &Vocabulary, prompts: &[Vec<String>]) -> Result<Tensor> {
    if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
        return Err(Error::config("zero-shot needs at least one prompt per class"));
    }
    let d = model.config.text.projection_dim;
    let mut out = Vec::with_capacity(prompts.len() * d);
    for class in prompts {
        let texts: Vec<&str> = class.iter().map(String::as_str).collect();
        let e = embed_texts(model, vocab, &texts)?;
        let mut mean = vec![0.0; d];
        for r in 0..texts.len() {
            for (m, x) in mean.iter_mut().zip(e.row(r)) {
                *m += x / texts.len() as f64;
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(mean.iter().map(|x| if norm < medflip_tensor::NORM_EPS { 0.0 } else { x / norm }));
    }
    Ok(Tensor::new(vec![prompts.len(), d], out)?)
}

/// Argmax cosine per row; ties go to the lowest class.
pub fn predict(embeddings: &Tensor, anchors: &Tensor) -> Result<Vec<usize>> {
    let scores = embeddings.matmul(&unit_rows(anchors)?.transpose()?)?;
    let (n, k) = scores.dims2()?;
    // A positive per-row scale on the embeddings never moves the argmax.
    Ok((0..n)
        .map(|i| {
            let row = scores.row(i);
            (1..k).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let (_, d) = t.dims2()?;
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= medflip_tensor::NORM_EPS {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(Tensor::new(t.shape().to_vec(), out)?)
}

fn single_label(samples: &[SyntheticSample]) -> Vec<(&SyntheticSample, usize)> {
    samples
        .iter()
        .filter_map(|s| s.labels.single_class().map(|c| (s, c)))
        .collect()
}

fn accuracy_report(protocol: &str, predictions: &[usize], targets: &[usize], checkpoint_id: String, seed: u64) -> EvalReport {
    let mut hits = [0usize; NUM_CLASSES];
    let mut totals = [0usize; NUM_CLASSES];
    for (&p, &t) in predictions.iter().zip(targets) {
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let per_class = (0..NUM_CLASSES)
        .filter(|&k| totals[k] > 0)
        .map(|k| (CLASS_NAMES[k].to_string(), hits[k] as f64 / totals[k] as f64))
        .collect();
    EvalReport {
        protocol: protocol.into(),
        accuracy: Some(hits.iter().sum::<usize>() as f64 / targets.len() as f64),
        per_class,
        precision_at_k: BTreeMap::new(),
        n_eval: targets.len(),
        checkpoint_id,
        mask_ratio: 0.0,
        seed,
    }
}

pub fn zero_shot_classify(
    model: &MedFlipModel,
    vocab: &Vocabulary,
    test: &[SyntheticSample],
    prompts: &[Vec<String>],
) -> Result<EvalReport> {
    if prompts.len() != NUM_CLASSES {
        return Err(Error::config(format!("expected prompts for {NUM_CLASSES} classes, got {}", prompts.len())));
    }
    let anchors = class_anchors(model, vocab, prompts)?;
    let labelled = single_label(test);
    if labelled.is_empty() {
        return Err(Error::Protocol("no single-label samples to classify".into()));
    }
    let images: Vec<&Tensor> = labelled.iter().map(|(s, _)| &s.image).collect();
    let targets: Vec<usize> = labelled.iter().map(|(_, c)| *c).collect();
    let predictions = predict(&embed_images(model, &images)?, &anchors)?;
    Ok(accuracy_report("zero_shot", &predictions, &targets, model_id(model), 0))
}

fn model_id(model: &MedFlipModel) -> String {
    format!("{:08x}", crate::checkpoint::params_checksum(&model.params))
}

/// Affine softmax classifier on frozen unit-norm image embeddings, trained
/// full-batch with AdamW (no decay) from a zero initialisation.
pub fn linear_probe(
    model: &MedFlipModel,
    finetune: &[SyntheticSample],
    test: &[SyntheticSample],
    epochs: usize,
    lr: f64,
) -> Result<EvalReport> {
    let train_ids: HashSet<u64> = finetune.iter().map(|s| s.sample_id).collect();
    if let Some(s) = test.iter().find(|s| train_ids.contains(&s.sample_id)) {
        return Err(Error::Protocol(format!(
            "finetune and test splits overlap (sample {})",
            s.sample_id
        )));
    }
    let train = single_label(finetune);
    let eval = single_label(test);
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Protocol("linear probe needs single-label samples in both splits".into()));
    }
    let features = |set: &[(&SyntheticSample, usize)]| {
        let imgs: Vec<&Tensor> = set.iter().map(|(s, _)| &s.image).collect();
        embed_images(model, &imgs)
    };
    let x_train = features(&train)?;
    let x_test = features(&eval)?;
    let d = x_train.shape()[1];
    let n = train.len();
    let mut onehot = vec![0.0; n * NUM_CLASSES];
    for (i, (_, c)) in train.iter().enumerate() {
        onehot[i * NUM_CLASSES + c] = 1.0;
    }
    let y = Tensor::new(vec![n, NUM_CLASSES], onehot)?;

    let mut params = vec![Tensor::zeros(&[d, NUM_CLASSES]), Tensor::zeros(&[NUM_CLASSES])];
    let mut optim = AdamW::new(&params, lr, 0.0);
    for _ in 0..epochs {
        let tape = Tape::new();
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let x = tape.constant(x_train.clone());
        let logp = x.linear(&w, Some(&b))?.log_softmax_rows(1.0)?;
        let loss = tape.constant(y.clone()).mul(&logp)?.sum().scale(-1.0 / n as f64);
        tape.backward(&loss)?;
        let grads = [w.grad().expect("weight grad"), b.grad().expect("bias grad")];
        optim.update(&mut params, &grads);
    }
    let mut logits = x_test.matmul(&params[0])?;
    let bias = params[1].data().to_vec();
    for r in logits.data_mut().chunks_mut(NUM_CLASSES) {
        for (v, b) in r.iter_mut().zip(&bias) {
            *v += b;
        }
    }
    let (rows, k) = logits.dims2()?;
    let predictions: Vec<usize> = (0..rows)
        .map(|i| {
            let row = logits.row(i);
            (1..k).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    let targets: Vec<usize> = eval.iter().map(|(_, c)| *c).collect();
    Ok(accuracy_report("linear_probe", &predictions, &targets, model_id(model), 0))
}

/// Indices of the `k` best-scoring documents, ordered by score descending
/// then index ascending. Uses partial selection rather than a full sort.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Mean over queries of `relevant among top K / K` (K capped at the number
/// of documents). `scores` is `queries × documents`.
pub fn precision_at_k(
    scores: &Tensor,
    query_labels: &[&EntityLabelVector],
    doc_labels: &[&EntityLabelVector],
    ks: &[usize],
) -> Result<Vec<f64>> {
    let (q, d) = scores.dims2()?;
    if q == 0 || d == 0 {
        return Err(Error::Protocol("retrieval over an empty split".into()));
    }
    if q != query_labels.len() || d != doc_labels.len() {
        return Err(Error::Protocol("label count does not match the score matrix".into()));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut sums = vec![0.0; ks.len()];
    for i in 0..q {
        let ranked = top_k(scores.row(i), kmax);
        let mut hits = 0usize;
        let mut prefix = Vec::with_capacity(ranked.len() + 1);
        prefix.push(0usize);
        for &j in &ranked {
            hits += usize::from(doc_labels[j] == query_labels[i]);
            prefix.push(hits);
        }
        for (s, &k) in sums.iter_mut().zip(ks) {
            let k = k.min(d);
            *s += prefix[k] as f64 / k as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / q as f64).collect())
}

pub fn retrieval(model: &MedFlipModel, vocab: &Vocabulary, test: &[SyntheticSample], ks: &[usize]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Protocol("retrieval over an empty split".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config("retrieval needs positive K values"));
    }
    let images: Vec<&Tensor> = test.iter().map(|s| &s.image).collect();
    let reports: Vec<&str> = test.iter().map(|s| s.report.as_str()).collect();
    let vi = embed_images(model, &images)?;
    let ti = embed_texts(model, vocab, &reports)?;
    let scores = vi.matmul(&ti.transpose()?)?;
    let labels: Vec<&EntityLabelVector> = test.iter().map(|s| &s.labels).collect();
    let p = precision_at_k(&scores, &labels, &labels, ks)?;
    Ok(EvalReport {
        protocol: "retrieval".into(),
        accuracy: None,
        per_class: BTreeMap::new(),
        precision_at_k: ks.iter().zip(p).map(|(k, v)| (format!("P@{k}"), v)).collect(),
        n_eval: test.len(),
        checkpoint_id: model_id(model),
        mask_ratio: 0.0,
        seed: 0,
    })
}
