//! On-disk corpus layout.
//!
//! A dataset directory holds three files:
//!
//! * `images.bin` — little-endian: magic `MFLP`, `u32` version, `u32 n`,
//!   `u32 h`, `u32 w`, `u32 c`, then `n·h·w·c` `f32` pixels (sample-major,
//!   then row, column, channel), then a `u32` CRC32 of every preceding byte.
//! * `samples.jsonl` — one `{"sample_id", "report", "labels"}` object per
//!   line, in sample order.
//! * `manifest.json` — counts, class names, vocabulary, split ranges,
//!   generator settings and the CRC32 of both other files.

use std::fs;
use std::ops::Range;
use std::path::Path;

use medflip_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split, SyntheticSample};
use crate::error::{Error, Result};
use crate::loss::EntityLabelVector;
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MFLP";
const HEADER_LEN: usize = 24;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const SAMPLES_FILE: &str = "samples.jsonl";

/// Half-open `[start, end)` sample ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub pretrain: [usize; 2],
    pub finetune: [usize; 2],
    pub test: [usize; 2],
}

impl SplitRanges {
    pub fn range(&self, split: Split) -> Range<usize> {
        let [a, b] = match split {
            Split::Pretrain => self.pretrain,
            Split::Finetune => self.finetune,
            Split::Test => self.test,
        };
        a..b
    }

    /// Contiguous, disjoint and covering `0..n`.
    fn check(&self, n: usize) -> Result<()> {
        let ok = self.pretrain[0] == 0
            && self.pretrain[0] <= self.pretrain[1]
            && self.pretrain[1] == self.finetune[0]
            && self.finetune[0] <= self.finetune[1]
            && self.finetune[1] == self.test[0]
            && self.test[0] <= self.test[1]
            && self.test[1] == n;
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!("split ranges {self:?} do not partition {n} samples")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_samples: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub vocabulary: Vocabulary,
    pub splits: SplitRanges,
    pub seed: u64,
    pub noise_sigma: f64,
    pub multi_label_prob: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images_crc32: u32,
    pub samples_crc32: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: u64,
    report: String,
    labels: Vec<f64>,
}

fn encode_images(ds: &Dataset) -> Vec<u8> {
    let m = &ds.manifest;
    let pixels = m.height * m.width * m.channels;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * pixels * m.n_samples + 4);
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION as usize, m.n_samples, m.height, m.width, m.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &ds.samples {
        for &p in s.image.data() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn encode_samples(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in &ds.samples {
        let rec = SampleRecord {
            sample_id: s.sample_id,
            report: s.report.clone(),
            labels: s.labels.values().to_vec(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Output(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub(super) fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let images = encode_images(ds);
    let samples = encode_samples(ds)?;
    let mut manifest = ds.manifest.clone();
    manifest.images_crc32 = crc32fast::hash(&images);
    manifest.samples_crc32 = crc32fast::hash(&samples);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Output(e.to_string()))?;
    for (name, bytes) in [(IMAGES_FILE, &images), (SAMPLES_FILE, &samples), (MANIFEST_FILE, &json)] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(Error::io(&path))?;
    }
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn decode_images(bytes: &[u8], m: &DatasetManifest) -> Result<Vec<Tensor>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format(format!("{IMAGES_FILE}: truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{IMAGES_FILE}: bad magic {:?}", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{IMAGES_FILE}: version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let dims: Vec<usize> = (0..4).map(|i| read_u32(bytes, 8 + 4 * i) as usize).collect();
    if dims != [m.n_samples, m.height, m.width, m.channels] {
        return Err(Error::Format(format!(
            "{IMAGES_FILE}: header dims {dims:?} disagree with the manifest"
        )));
    }
    let pixels = m.height * m.width * m.channels;
    let expected = HEADER_LEN + 4 * pixels * m.n_samples + 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{IMAGES_FILE}: {} bytes, expected {expected} (truncated or padded)",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = read_u32(bytes, expected - 4);
    if crc32fast::hash(body) != stored {
        return Err(Error::Format(format!("{IMAGES_FILE}: checksum mismatch")));
    }
    let shape = vec![m.height, m.width, m.channels];
    Ok(body[HEADER_LEN..]
        .chunks_exact(4 * pixels.max(1))
        .take(m.n_samples)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            Tensor::new(shape.clone(), data).expect("image shape")
        })
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(Error::io(&path))
    };
    let manifest_bytes = read(MANIFEST_FILE)?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{MANIFEST_FILE}: version {}, expected {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::Format(format!("{MANIFEST_FILE}: class count mismatch")));
    }
    manifest.splits.check(manifest.n_samples)?;

    let images_bytes = read(IMAGES_FILE)?;
    if crc32fast::hash(&images_bytes) != manifest.images_crc32 {
        // Decode first so a damaged header is reported precisely.
        decode_images(&images_bytes, &manifest)?;
        return Err(Error::Format(format!("{IMAGES_FILE}: does not match the manifest checksum")));
    }
    let images = decode_images(&images_bytes, &manifest)?;

    let samples_bytes = read(SAMPLES_FILE)?;
    if crc32fast::hash(&samples_bytes) != manifest.samples_crc32 {
        return Err(Error::Format(format!("{SAMPLES_FILE}: checksum mismatch")));
    }
    let text = std::str::from_utf8(&samples_bytes).map_err(|e| Error::Format(format!("{SAMPLES_FILE}: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for (line_no, (line, image)) in text.lines().zip(images).enumerate() {
        let rec: SampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{SAMPLES_FILE}:{}: {e}", line_no + 1)))?;
        if rec.sample_id != line_no as u64 || rec.labels.len() != manifest.num_classes {
            return Err(Error::Format(format!("{SAMPLES_FILE}:{}: inconsistent record", line_no + 1)));
        }
        let labels = EntityLabelVector::new(rec.labels).map_err(|e| Error::Format(e.to_string()))?;
        samples.push(SyntheticSample {
            sample_id: rec.sample_id,
            image,
            report: rec.report,
            labels,
        });
    }
    if samples.len() != manifest.n_samples || text.lines().count() != manifest.n_samples {
        return Err(Error::Format(format!(
            "{SAMPLES_FILE}: {} records, manifest says {}",
            text.lines().count(),
            manifest.n_samples
        )));
    }
    Ok(Dataset { manifest, samples })
}
