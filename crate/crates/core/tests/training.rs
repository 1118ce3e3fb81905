use std::sync::OnceLock;

use medflip::checkpoint::Checkpoint;
use medflip::config::{DataConfig, RunConfig};
use medflip::data::{self, class_prompts, Dataset, Split};
use medflip::optim::AdamW;
use medflip::{eval, train, Error};
use medflip_tensor::Tensor;

pub fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.data = DataConfig {
        n_samples: 240,
        n_finetune: 40,
        n_test: 40,
        image_size: 16,
        ..DataConfig::default()
    };
    let v = &mut c.model.vision;
    v.image_size = 16;
    v.embed_dim = 16;
    v.depth = 1;
    v.heads = 2;
    v.projection_dim = 8;
    let t = &mut c.model.text;
    t.embed_dim = 16;
    t.depth = 1;
    t.heads = 2;
    t.projection_dim = 8;
    t.max_length = 16;
    c.train.batch_size = 16;
    c.train.epochs = 2;
    c.train.record_timing = false;
    c
}

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| data::generate(&tiny().data).unwrap())
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut cfg = tiny();
    cfg.train.learning_rate = 0.0;
    let out = train::train(&cfg, dataset()).unwrap();
    let resolved = train::resolve_for_dataset(&cfg, dataset()).unwrap();
    let init = medflip::encoders::MedFlipModel::new(&resolved.model, cfg.train.seed).unwrap();
    assert_eq!(out.checkpoint.params, init.params);
    assert_eq!(out.checkpoint.step(), out.log.len() as u64);
}

#[test]
fn same_seed_gives_identical_loss_curves_and_other_seeds_do_not() {
    let a = train::train(&tiny(), dataset()).unwrap();
    let b = train::train(&tiny(), dataset()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let mut other = tiny();
    other.train.seed = 9;
    assert_ne!(train::train(&other, dataset()).unwrap().log, a.log);
}

#[test]
fn steps_scale_with_the_pretrain_pool() {
    assert_eq!(train::steps_per_epoch(160, 16), 10);
    assert_eq!(train::steps_per_epoch(161, 16), 11);
    let mut cfg = tiny();
    cfg.train.pretrain_fraction = 0.5;
    cfg.train.epochs = 1;
    assert_eq!(train::train(&cfg, dataset()).unwrap().log.len(), 5);
}

#[test]
fn log_file_holds_one_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.log = Some(dir.path().join("m/log.jsonl").to_string_lossy().into_owned());
    cfg.train.checkpoint = Some(dir.path().join("ck.mfck").to_string_lossy().into_owned());
    cfg.train.eval_every = 3;
    let out = train::train(&cfg, dataset()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("m/log.jsonl")).unwrap();
    let expected: Vec<String> = out.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert_eq!(text.lines().collect::<Vec<_>>(), expected);
    let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(text.lines().next().unwrap())
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert_eq!(keys.len(), 7);
    assert_eq!(Checkpoint::load(&dir.path().join("ck.mfck")).unwrap(), out.checkpoint);
}

#[test]
fn checkpoint_round_trip_is_byte_stable_and_behaviour_preserving() {
    let out = train::train(&tiny(), dataset()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mfck");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());

    let ds = dataset();
    let test = ds.split(Split::Test);
    let before = eval::zero_shot_classify(&out.checkpoint.model(), ds.vocabulary(), test, &class_prompts()).unwrap();
    let after = eval::zero_shot_classify(&loaded.model(), ds.vocabulary(), test, &class_prompts()).unwrap();
    assert_eq!(before, after);
}

#[test]
fn damaged_checkpoints_are_rejected_without_panicking() {
    let bytes = train::train(&tiny(), dataset()).unwrap().checkpoint.to_bytes();
    for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    let mut version = bytes.clone();
    version[4] = 99;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(_))));
}

#[test]
fn adamw_drives_a_quadratic_to_zero() {
    let mut w = vec![Tensor::vector(vec![1.0, -2.0, 0.5, 3.0])];
    let mut opt = AdamW::new(&w, 0.01, 0.0);
    let mut steps = 0;
    while w[0].data().iter().any(|x| x.abs() > 1e-6) {
        let g = Tensor::vector(w[0].data().iter().map(|x| 2.0 * x).collect());
        opt.update(&mut w, &[g]);
        steps += 1;
        assert!(steps <= 2000, "not converged: {:?}", w[0].data());
    }
}

#[test]
fn loss_falls_during_training() {
    let mut cfg = tiny();
    cfg.train.epochs = 8;
    let out = train::train(&cfg, dataset()).unwrap();
    let head: f64 = out.log[..5].iter().map(|r| r.total).sum();
    let tail: f64 = out.log[out.log.len() - 5..].iter().map(|r| r.total).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn throughput_reports_one_row_per_ratio() {
    let rows = train::measure_throughput(&tiny(), dataset(), &[0.0], 1, 2).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].mean_img_per_sec > 0.0);
    assert!(train::measure_throughput(&tiny(), dataset(), &[1.0], 1, 2).is_err());
}
