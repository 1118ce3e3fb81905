//! Pretraining loop and throughput measurement.
//!
//! Every step draws `batch_size` images and `batch_size` reports
//! independently, uniformly with replacement, from the pretrain pool (or at
//! shared indices when `sampling.paired`), masks each image with a fresh
//! plan, evaluates the combined loss and applies one AdamW update. Image
//! labels are the ground truth; report labels come from the rule-based
//! extractor.
//!
//! The batch stream of step `s` is `rng(seed, "batch", s)`; mask plans use
//! `mask_seed(seed, epoch, sample_id)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use medflip_tensor::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{extract_entities, Dataset, Split};
use crate::encoders::{EmbeddingPair, MedFlipModel, TokenBatch};
use crate::error::{Error, Result};
use crate::loss::{self, stack_labels, EntityLabelVector, LossBreakdown};
use crate::masking::{make_mask_plan, mask_seed, MaskPlan};
use crate::optim::AdamW;
use crate::rng;
use crate::vocab::Vocabulary;

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub contrastive: f64,
    pub svd: f64,
    pub total: f64,
    pub sigma_top3: Vec<f64>,
    pub img_per_sec: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Tokenised, labelled view of the samples a run draws from.
struct Pool<'a> {
    images: Vec<&'a Tensor>,
    ids: Vec<u64>,
    tokens: Vec<Vec<u32>>,
    l_img: Vec<&'a EntityLabelVector>,
    l_txt: Vec<EntityLabelVector>,
}

impl<'a> Pool<'a> {
    fn new(ds: &'a Dataset, fraction: f64, vocab: &Vocabulary, max_length: usize) -> Result<Self> {
        let split = ds.split(Split::Pretrain);
        let n = ((fraction * split.len() as f64).ceil() as usize).min(split.len());
        if n == 0 {
            return Err(Error::config("pretrain pool is empty"));
        }
        let samples = &split[..n];
        Ok(Self {
            images: samples.iter().map(|s| &s.image).collect(),
            ids: samples.iter().map(|s| s.sample_id).collect(),
            tokens: samples.iter().map(|s| vocab.encode(&s.report, max_length)).collect(),
            l_img: samples.iter().map(|s| &s.labels).collect(),
            l_txt: samples.iter().map(|s| extract_entities(&s.report)).collect(),
        })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Copy of `cfg` with the vocabulary size taken from the dataset when unset.
pub fn resolve_for_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    let v = ds.vocabulary().len();
    if cfg.model.text.vocab_size == 0 {
        cfg.model.text.vocab_size = v;
    } else if cfg.model.text.vocab_size < v {
        return Err(Error::config(format!(
            "model.text.vocab_size {} is smaller than the dataset vocabulary ({v})",
            cfg.model.text.vocab_size
        )));
    }
    if ds.manifest.height != cfg.model.vision.image_size || ds.manifest.channels != cfg.model.vision.channels {
        return Err(Error::config(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            ds.manifest.height,
            ds.manifest.width,
            ds.manifest.channels,
            cfg.model.vision.image_size,
            cfg.model.vision.image_size,
            cfg.model.vision.channels
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn steps_per_epoch(pool: usize, batch: usize) -> usize {
    pool.div_ceil(batch)
}

struct Batch<'p> {
    images: Vec<&'p Tensor>,
    plans: Vec<MaskPlan>,
    tokens: TokenBatch,
    l_img: Tensor,
    l_txt: Tensor,
}

fn draw_batch<'p>(pool: &Pool<'p>, cfg: &RunConfig, step: u64, epoch: u64) -> Result<(Batch<'p>, u64)> {
    let t = &cfg.train;
    let batch_seed = rng::derive_seed(&[t.seed, rng::tag("batch"), step]);
    let mut r = rng::rng(&[batch_seed]);
    let n = t.batch_size;
    let img_idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..pool.len())).collect();
    let txt_idx: Vec<usize> = if cfg.sampling.paired {
        img_idx.clone()
    } else {
        (0..n).map(|_| r.gen_range(0..pool.len())).collect()
    };
    let l_tokens = cfg.model.vision.num_tokens();
    let plans = img_idx
        .iter()
        .map(|&i| make_mask_plan(l_tokens, t.mask_ratio, mask_seed(t.seed, epoch, pool.ids[i])))
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<&[u32]> = txt_idx.iter().map(|&i| pool.tokens[i].as_slice()).collect();
    Ok((
        Batch {
            images: img_idx.iter().map(|&i| pool.images[i]).collect(),
            plans,
            tokens: TokenBatch::from_sequences(&seqs, cfg.model.text.max_length),
            l_img: stack_labels(img_idx.iter().map(|&i| pool.l_img[i]))?,
            l_txt: stack_labels(txt_idx.iter().map(|&i| &pool.l_txt[i]))?,
        },
        batch_seed,
    ))
}

/// Forward pass and loss on one batch; returns the tape-bound gradients.
fn loss_and_grads(model: &MedFlipModel, batch: &Batch<'_>, cfg: &RunConfig) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let v_p = model.encode_images(&bound, &batch.images, &batch.plans)?;
    let t_p = model.encode_texts(&bound, &batch.tokens)?;
    let emb = EmbeddingPair::new(v_p, t_p)?;
    let (total, breakdown) = loss::compute(&emb, &batch.l_img, &batch.l_txt, &cfg.loss)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    tape.backward(&total)?;
    Ok((breakdown, bound.grads()))
}

/// Runs pretraining with an optional per-step callback.
pub fn train_with<F: FnMut(&StepRecord)>(cfg: &RunConfig, ds: &Dataset, mut on_step: F) -> Result<TrainOutcome> {
    let cfg = resolve_for_dataset(cfg, ds)?;
    let t = &cfg.train;
    let vocab = ds.vocabulary().clone();
    let pool = Pool::new(ds, t.pretrain_fraction, &vocab, cfg.model.text.max_length)?;
    let mut model = MedFlipModel::new(&cfg.model, t.seed)?;
    let mut optim = AdamW::new(model.params.tensors(), t.learning_rate, t.weight_decay);
    let per_epoch = steps_per_epoch(pool.len(), t.batch_size);
    let total_steps = per_epoch * t.epochs;
    log::info!(
        "pretraining {} parameters for {total_steps} steps ({per_epoch}/epoch) on {} samples",
        model.param_count(),
        pool.len()
    );
    log::debug!("resolved config:\n{}", cfg.to_toml_string());

    let mut writer = match &t.log {
        Some(p) => {
            let path = Path::new(p);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
            Some((BufWriter::new(File::create(path).map_err(Error::io(path))?), path.to_path_buf()))
        }
        None => None,
    };
    let checkpoint_of = |model: &MedFlipModel, optim: &AdamW| Checkpoint {
        config: cfg.clone(),
        vocabulary: vocab.clone(),
        params: model.params.clone(),
        optimizer: optim.clone(),
    };

    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps as u64 {
        let epoch = step / per_epoch as u64;
        let start = Instant::now();
        let (batch, batch_seed) = draw_batch(&pool, &cfg, step, epoch)?;
        let (breakdown, grads) = loss_and_grads(&model, &batch, &cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss ({breakdown:?})"),
                step: step as usize,
                batch_seed,
            });
        }
        optim.update(model.params.tensors_mut(), &grads);
        if let Some((name, _)) = model.params.iter().find(|(_, p)| !p.all_finite()) {
            return Err(Error::NonFinite {
                what: format!("parameter `{name}`"),
                step: step as usize,
                batch_seed,
            });
        }
        let elapsed = start.elapsed().as_secs_f64();
        let (img_per_sec, wall_ms) = if t.record_timing {
            (t.batch_size as f64 / elapsed.max(1e-12), elapsed * 1e3)
        } else {
            (0.0, 0.0)
        };
        let record = StepRecord {
            step: step + 1,
            contrastive: breakdown.contrastive,
            svd: breakdown.svd_term,
            total: breakdown.total,
            sigma_top3: breakdown.sigma_spectrum.iter().take(3).copied().collect(),
            img_per_sec,
            wall_ms,
        };
        if let Some((w, path)) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(|e| Error::Output(e.to_string()))?;
            w.write_all(b"\n").map_err(Error::io(&*path))?;
        }
        on_step(&record);
        log.push(record);

        if t.eval_every > 0 && (step + 1) % t.eval_every as u64 == 0 && (step + 1) < total_steps as u64 {
            if let Some(p) = &t.checkpoint {
                checkpoint_of(&model, &optim).save(Path::new(p))?;
            }
        }
    }
    if let Some((mut w, path)) = writer {
        w.flush().map_err(Error::io(path))?;
    }
    let checkpoint = checkpoint_of(&model, &optim);
    if let Some(p) = &t.checkpoint {
        checkpoint.save(Path::new(p))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub mask_ratio: f64,
    pub mean_img_per_sec: f64,
    pub std_img_per_sec: f64,
    pub timed_steps: usize,
}

/// Forward+backward images/sec for each mask ratio on one fixed batch and
/// one fixed initialisation; `warmup` steps per ratio are not timed.
pub fn measure_throughput(
    cfg: &RunConfig,
    ds: &Dataset,
    ratios: &[f64],
    warmup: usize,
    timed: usize,
) -> Result<Vec<ThroughputRow>> {
    let cfg = resolve_for_dataset(cfg, ds)?;
    if timed == 0 {
        return Err(Error::config("throughput needs at least one timed step"));
    }
    let vocab = ds.vocabulary().clone();
    let pool = Pool::new(ds, 1.0, &vocab, cfg.model.text.max_length)?;
    let model = MedFlipModel::new(&cfg.model, cfg.train.seed)?;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut c = cfg.clone();
        c.train.mask_ratio = ratio;
        c.validate()?;
        let (batch, _) = draw_batch(&pool, &c, 0, 0)?;
        let mut rates = Vec::with_capacity(timed);
        for i in 0..warmup + timed {
            let start = Instant::now();
            let (b, _) = loss_and_grads(&model, &batch, &c)?;
            std::hint::black_box(b);
            let secs = start.elapsed().as_secs_f64();
            if i >= warmup {
                rates.push(c.train.batch_size as f64 / secs.max(1e-12));
            }
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len().max(2) - 1) as f64;
        rows.push(ThroughputRow {
            mask_ratio: ratio,
            mean_img_per_sec: mean,
            std_img_per_sec: var.sqrt(),
            timed_steps: timed,
        });
    }
    Ok(rows)
}
