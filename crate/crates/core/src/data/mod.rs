//! Synthetic image–report–label corpus.
//!
//! Each sample gets one entity drawn uniformly from five classes, plus every
//! other class independently with probability `multi_label_prob`. Each class
//! owns a fixed geometric signature; signatures are added, clipped to
//! `[0, 1]`, perturbed with Gaussian noise and clipped again. Reports contain
//! one templated sentence per positive entity (in shuffled order) followed
//! by up to two distractor sentences that mention no entity.
//!
//! The rule-based [`extract_entities`] recovers the label vector from report
//! text; it agrees with the generator on every generated sample.

mod format;

pub use format::{load_dataset, DatasetManifest, SplitRanges, FORMAT_VERSION};

use std::path::Path;

use medflip_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::loss::EntityLabelVector;
use crate::rng;
use crate::vocab::{tokenize, Vocabulary};

pub const NUM_CLASSES: usize = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "pleural effusion",
];

/// Alternative surface form of each class.
pub const SYNONYMS: [&str; NUM_CLASSES] = [
    "lung collapse",
    "enlarged heart",
    "airspace opacity",
    "fluid overload",
    "pleural fluid",
];

/// Sentence templates; `{e}` is replaced by a surface form.
pub const TEMPLATES: [&str; 4] = [
    "findings consistent with {e}.",
    "evidence of {e} is observed.",
    "there is {e}.",
    "{e} is noted.",
];

const DISTRACTORS: [&str; 8] = [
    "no acute osseous abnormality.",
    "the patient is positioned upright.",
    "comparison is made with the prior study.",
    "support lines and tubes are unchanged.",
    "the study is of adequate technical quality.",
    "bony structures are intact.",
    "no pneumothorax is seen.",
    "mediastinal contours are within normal limits.",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u64,
    /// `H × W × C`, values in `[0, 1]` (stored as f32 on disk).
    pub image: Tensor,
    pub report: String,
    /// Ground-truth entities of the image.
    pub labels: EntityLabelVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        let r = self.manifest.splits.range(split);
        &self.samples[r]
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        format::save(self, dir)
    }
}

/// Every surface form of class `k`.
pub fn surface_forms(k: usize) -> [&'static str; 2] {
    [CLASS_NAMES[k], SYNONYMS[k]]
}

/// Zero-shot prompts: every template with every surface form, per class.
pub fn class_prompts() -> Vec<Vec<String>> {
    (0..NUM_CLASSES)
        .map(|k| {
            TEMPLATES
                .iter()
                .flat_map(|t| surface_forms(k).map(|e| t.replace("{e}", e)))
                .collect()
        })
        .collect()
}

/// `l_txt[k] = 1` iff a surface form of class `k` occurs as a contiguous
/// token sequence of the report.
pub fn extract_entities(report: &str) -> EntityLabelVector {
    let tokens = tokenize(report);
    let mut out = vec![0.0; NUM_CLASSES];
    for (k, slot) in out.iter_mut().enumerate() {
        let hit = surface_forms(k).iter().any(|form| {
            let pat = tokenize(form);
            tokens.windows(pat.len()).any(|w| w == pat.as_slice())
        });
        if hit {
            *slot = 1.0;
        }
    }
    EntityLabelVector::new(out).expect("binary labels")
}

/// Fixed signature of class `k` on a `size × size` grid, before noise.
pub fn signature(k: usize, size: usize) -> Vec<f64> {
    let s = size as f64;
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = match k {
                // horizontal band across the middle
                0 => f64::from(fy >= 0.375 * s && fy < 0.625 * s) * 0.6,
                // centred disk
                1 => {
                    let r = ((fx - s / 2.0).powi(2) + (fy - s / 2.0).powi(2)).sqrt();
                    f64::from(r < 0.22 * s) * 0.6
                }
                // checkerboard in the top-left quadrant
                2 => {
                    let cell = (size / 8).max(1);
                    let inside = x < size / 2 && y < size / 2;
                    f64::from(inside && ((x / cell) + (y / cell)).is_multiple_of(2)) * 0.6
                }
                // left-to-right ramp
                3 => 0.5 * x as f64 / (s - 1.0).max(1.0),
                // main-diagonal stripe
                4 => f64::from((fx - fy).abs() < 0.1 * s) * 0.6,
                _ => unreachable!("class index"),
            };
            img[y * size + x] = v;
        }
    }
    img
}

fn render(labels: &[f64], size: usize, channels: usize, noise: &Normal<f64>, rng: &mut impl Rng) -> Tensor {
    let mut base = vec![0.0; size * size];
    for (k, &l) in labels.iter().enumerate() {
        if l > 0.0 {
            for (b, s) in base.iter_mut().zip(signature(k, size)) {
                *b += l * s;
            }
        }
    }
    let mut data = Vec::with_capacity(size * size * channels);
    for b in base {
        for _ in 0..channels {
            let clipped = b.clamp(0.0, 1.0);
            let noisy = (clipped + noise.sample(rng)).clamp(0.0, 1.0);
            data.push(f64::from(noisy as f32));
        }
    }
    Tensor::new(vec![size, size, channels], data).expect("image shape")
}

fn sample_labels(p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let primary = rng.gen_range(0..NUM_CLASSES);
    (0..NUM_CLASSES)
        .map(|k| {
            let extra = rng.gen_bool(p);
            f64::from(k == primary || extra)
        })
        .collect()
}

fn write_report(labels: &[f64], rng: &mut impl Rng) -> String {
    let mut entities: Vec<usize> = (0..NUM_CLASSES).filter(|&k| labels[k] > 0.0).collect();
    entities.shuffle(rng);
    let mut sentences: Vec<String> = entities
        .iter()
        .map(|&k| {
            let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
            let form = surface_forms(k)[rng.gen_range(0..2)];
            template.replace("{e}", form)
        })
        .collect();
    for _ in 0..rng.gen_range(0..=2) {
        sentences.push(DISTRACTORS[rng.gen_range(0..DISTRACTORS.len())].to_string());
    }
    sentences.join(" ")
}

/// Generates the full corpus in memory. Each sample draws from its own
/// stream `rng(seed, "sample", sample_id)`.
pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let (size, channels) = (cfg.image_size, 1);
    let samples: Vec<SyntheticSample> = (0..cfg.n_samples as u64)
        .map(|id| {
            let mut r = rng::rng(&[cfg.seed, rng::tag("sample"), id]);
            let labels = sample_labels(cfg.multi_label_prob, &mut r);
            let report = write_report(&labels, &mut r);
            let image = render(&labels, size, channels, &noise, &mut r);
            SyntheticSample {
                sample_id: id,
                image,
                report,
                labels: EntityLabelVector::new(labels).expect("binary labels"),
            }
        })
        .collect();
    let vocabulary = Vocabulary::build(
        samples
            .iter()
            .map(|s| s.report.as_str())
            .chain(class_prompts().iter().flatten().map(String::as_str)),
    );
    let n = cfg.n_samples;
    let test_start = n - cfg.n_test;
    let finetune_start = test_start - cfg.n_finetune;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n_samples: n,
        num_classes: NUM_CLASSES,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        vocabulary,
        splits: SplitRanges {
            pretrain: [0, finetune_start],
            finetune: [finetune_start, test_start],
            test: [test_start, n],
        },
        seed: cfg.seed,
        noise_sigma: cfg.noise_sigma,
        multi_label_prob: cfg.multi_label_prob,
        height: size,
        width: size,
        channels,
        images_crc32: 0,
        samples_crc32: 0,
    };
    Ok(Dataset { manifest, samples })
}

/// Generates the corpus and writes it to `dir`.
pub fn generate_dataset(cfg: &DataConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate(cfg)?;
    format::save(&ds, dir)?;
    // Reload so the returned manifest carries the checksums.
    load_dataset(dir)
}
