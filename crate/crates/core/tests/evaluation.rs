use std::sync::OnceLock;

use medflip::ablate::{self, Axis, FAILED};
use medflip::checkpoint::params_checksum;
use medflip::config::{DataConfig, RunConfig};
use medflip::data::{self, class_prompts, Dataset, Split};
use medflip::encoders::MedFlipModel;
use medflip::eval;
use medflip::loss::EntityLabelVector;
use medflip_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.data = DataConfig {
        n_samples: 200,
        n_finetune: 50,
        n_test: 50,
        image_size: 16,
        multi_label_prob: 0.0,
        ..DataConfig::default()
    };
    c.model.vision.image_size = 16;
    for (embed, depth, heads, proj) in [
        (&mut c.model.vision.embed_dim, &mut c.model.vision.depth, &mut c.model.vision.heads, &mut c.model.vision.projection_dim),
        (&mut c.model.text.embed_dim, &mut c.model.text.depth, &mut c.model.text.heads, &mut c.model.text.projection_dim),
    ] {
        (*embed, *depth, *heads, *proj) = (16, 1, 2, 8);
    }
    c.train.batch_size = 16;
    c.train.epochs = 1;
    c.train.record_timing = false;
    c
}

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| data::generate(&tiny().data).unwrap())
}

fn random_model(seed: u64) -> MedFlipModel {
    let cfg = medflip::train::resolve_for_dataset(&tiny(), dataset()).unwrap();
    MedFlipModel::new(&cfg.model, seed).unwrap()
}

#[test]
fn untrained_zero_shot_sits_at_chance() {
    // 10 random models; binomial 3σ band around 0.2 over the pooled predictions.
    let ds = dataset();
    let test = ds.split(Split::Test);
    let accs: Vec<f64> = (0..10)
        .map(|s| {
            eval::zero_shot_classify(&random_model(s), ds.vocabulary(), test, &class_prompts())
                .unwrap()
                .accuracy
                .unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sigma = (0.2 * 0.8 / (10 * test.len()) as f64).sqrt();
    assert!((mean - 0.2).abs() <= 3.0 * sigma, "mean {mean}, per-model {accs:?}");
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (n, trials) = (250, 8);
    let mut total = 0.0;
    for _ in 0..trials {
        let scores = Tensor::new(vec![n, n], (0..n * n).map(|_| r.gen::<f64>()).collect()).unwrap();
        let labels: Vec<EntityLabelVector> = (0..n).map(|i| EntityLabelVector::one_hot(5, i % 5)).collect();
        let refs: Vec<&EntityLabelVector> = labels.iter().collect();
        total += eval::precision_at_k(&scores, &refs, &refs, &[1]).unwrap()[0];
    }
    let mean = total / trials as f64;
    let sigma = (0.2 * 0.8 / (n * trials) as f64).sqrt();
    assert!((mean - 0.2).abs() <= 3.0 * sigma, "{mean}");
}

#[test]
fn anchor_rescaling_does_not_change_predictions() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let emb = Tensor::new(vec![40, 6], (0..240).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let anchors = Tensor::new(vec![5, 6], (0..30).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let scaled: Vec<f64> = anchors
        .data()
        .chunks(6)
        .enumerate()
        .flat_map(|(k, row)| row.iter().map(move |v| v * (0.1 + 3.0 * k as f64)).collect::<Vec<_>>())
        .collect();
    let scaled = Tensor::new(vec![5, 6], scaled).unwrap();
    assert_eq!(eval::predict(&emb, &anchors).unwrap(), eval::predict(&emb, &scaled).unwrap());
}

#[test]
fn evaluation_never_mutates_parameters() {
    let ds = dataset();
    let model = random_model(1);
    let before = params_checksum(&model.params);
    let (ft, test) = (ds.split(Split::Finetune), ds.split(Split::Test));
    eval::zero_shot_classify(&model, ds.vocabulary(), test, &class_prompts()).unwrap();
    eval::linear_probe(&model, ft, test, 20, 1e-2).unwrap();
    eval::retrieval(&model, ds.vocabulary(), test, &[1, 2, 5, 10]).unwrap();
    assert_eq!(params_checksum(&model.params), before);
}

#[test]
fn probe_rejects_overlapping_splits() {
    let ds = dataset();
    let test = ds.split(Split::Test);
    let err = eval::linear_probe(&random_model(0), test, test, 5, 1e-2).unwrap_err();
    assert!(matches!(err, medflip::Error::Protocol(_)));
}

#[test]
fn reports_are_well_formed() {
    let ds = dataset();
    let model = random_model(2);
    let test = ds.split(Split::Test);
    let zs = eval::zero_shot_classify(&model, ds.vocabulary(), test, &class_prompts()).unwrap();
    assert!(zs.per_class.values().chain(zs.accuracy.iter()).all(|a| (0.0..=1.0).contains(a)));
    let ret = eval::retrieval(&model, ds.vocabulary(), test, &[1, 2, 5, 10]).unwrap();
    assert_eq!(ret.precision_at_k.len(), 4);
    assert_eq!(ret.n_eval, test.len());
    assert!(eval::retrieval(&model, ds.vocabulary(), &[], &[1]).is_err());
    assert!(eval::zero_shot_classify(&model, ds.vocabulary(), test, &[]).is_err());
}

#[test]
fn repeated_ablation_cells_are_identical() {
    let rows = ablate::ablate(&tiny(), dataset(), Axis::MaskRatio, &["0.0".into(), "0.0".into()], &[0]).unwrap();
    let (a, b): (Vec<_>, Vec<_>) = rows.iter().enumerate().partition(|(i, _)| *i < rows.len() / 2);
    let vals = |xs: Vec<(usize, &ablate::AblationRow)>| xs.into_iter().map(|(_, r)| (r.metric.clone(), r.value)).collect::<Vec<_>>();
    assert_eq!(vals(a), vals(b));
}

#[test]
fn loss_mode_ablation_is_complete_and_writes_outputs() {
    let rows = ablate::ablate(&tiny(), dataset(), Axis::LossMode, &["verbatim".into(), "soft_ce".into()], &[0]).unwrap();
    assert!(rows.iter().all(|r| r.metric != FAILED && r.value.is_finite()));
    for mode in ["verbatim", "soft_ce"] {
        assert_eq!(rows.iter().filter(|r| r.axis_value == mode && r.metric == "zero_shot_accuracy").count(), 1);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss_mode.csv");
    ablate::write_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("axis_value,metric,value,seed\n"));
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert!(ablate::render_svg(Axis::LossMode, &rows).contains("<polyline"));
}

#[test]
fn failing_cells_are_marked_and_the_rest_still_run() {
    // An absurd learning rate overflows the parameters on the first step.
    let mut base = tiny();
    base.train.learning_rate = 1e300;
    let rows = ablate::ablate(&base, dataset(), Axis::Beta, &["0.1".into()], &[0, 1]).unwrap();
    assert!(rows.iter().any(|r| r.metric == FAILED && r.value.is_nan()));
    assert!(ablate::ablate(&tiny(), dataset(), Axis::Beta, &["abc".into()], &[0]).is_err());
}
