use medflip::config::{ModelConfig, RunConfig};
use medflip::encoders::{param_count, patchify, unpatchify, EmbeddingPair, MedFlipModel, TokenBatch};
use medflip::loss::{self, EntityLabelVector};
use medflip::masking::{make_mask_plan, MaskPlan};
use medflip_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(vision_depth: usize, text_depth: usize) -> ModelConfig {
    let mut c = RunConfig::default().model;
    c.vision.image_size = 8;
    c.vision.embed_dim = 8;
    c.vision.heads = 2;
    c.vision.projection_dim = 6;
    c.vision.depth = vision_depth;
    c.text.vocab_size = 12;
    c.text.max_length = 6;
    c.text.embed_dim = 8;
    c.text.heads = 2;
    c.text.projection_dim = 6;
    c.text.depth = text_depth;
    c
}

fn image(r: &mut ChaCha8Rng, size: usize) -> Tensor {
    Tensor::new(vec![size, size, 1], (0..size * size).map(|_| r.gen::<f64>()).collect()).unwrap()
}

/// `x W + b` for a single row.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.at(i, j)).sum::<f64>())
        .collect()
}

#[test]
fn depth_zero_vision_is_projected_mean_of_visible_patch_embeddings() {
    let cfg = config(0, 0);
    let model = MedFlipModel::new(&cfg, 3).unwrap();
    let p = &model.params;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let imgs: Vec<Tensor> = (0..3).map(|_| image(&mut r, 8)).collect();
    let plans: Vec<MaskPlan> = (0..3).map(|i| make_mask_plan(4, 0.5, i).unwrap()).collect();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let out = model.encode_images(&bound, &imgs.iter().collect::<Vec<_>>(), &plans).unwrap();

    let (w, b, pos) = (p.get("vision.patch.weight").unwrap(), p.get("vision.patch.bias").unwrap(), p.get("vision.pos_embed").unwrap());
    for (n, (img, plan)) in imgs.iter().zip(&plans).enumerate() {
        let patches = patchify(img, 4).unwrap();
        let mut mean = vec![0.0; 8];
        for &i in plan.visible_indices() {
            let e = affine(patches.row(i), w, b);
            for d in 0..8 {
                mean[d] += (e[d] + pos.at(i, d)) / plan.visible_len() as f64;
            }
        }
        let want = affine(&mean, p.get("vision.proj.weight").unwrap(), p.get("vision.proj.bias").unwrap());
        for (a, b) in out.value().row(n).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn depth_zero_single_token_text_is_its_projected_embedding() {
    let cfg = config(0, 0);
    let model = MedFlipModel::new(&cfg, 4).unwrap();
    let p = &model.params;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let ids: [&[u32]; 2] = [&[7], &[3]];
    let out = model.encode_texts(&bound, &TokenBatch::from_sequences(&ids, 6)).unwrap();
    let (tok, pos) = (p.get("text.token_embed").unwrap(), p.get("text.pos_embed").unwrap());
    for (n, id) in [7usize, 3].into_iter().enumerate() {
        let e: Vec<f64> = (0..8).map(|d| tok.at(id, d) + pos.at(0, d)).collect();
        let want = affine(&e, p.get("text.proj.weight").unwrap(), p.get("text.proj.bias").unwrap());
        for (a, b) in out.value().row(n).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pad_content_does_not_change_text_embeddings() {
    let model = MedFlipModel::new(&config(1, 2), 5).unwrap();
    let ids: [&[u32]; 2] = [&[4, 5, 6, 7], &[8, 9]];
    let batch = TokenBatch::from_sequences(&ids, 6);
    let mut scrambled = batch.clone();
    for (id, &real) in scrambled.ids.iter_mut().zip(&batch.mask) {
        if !real {
            *id = 11;
        }
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let a = model.encode_texts(&bound, &batch).unwrap();
    let b = model.encode_texts(&bound, &scrambled).unwrap();
    assert_eq!(a.value(), b.value());
}

#[test]
fn out_of_vocabulary_ids_are_rejected() {
    let model = MedFlipModel::new(&config(1, 1), 0).unwrap();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let ids: [&[u32]; 1] = [&[3, 12]];
    let err = model.encode_texts(&bound, &TokenBatch::from_sequences(&ids, 6)).unwrap_err();
    assert!(matches!(err, medflip::Error::Vocabulary { id: 12, .. }));
}

#[test]
fn unmasked_vision_is_deterministic_and_shaped() {
    let model = MedFlipModel::new(&config(2, 1), 8).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let imgs: Vec<Tensor> = (0..4).map(|_| image(&mut r, 8)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let run = |seed: u64, ratio: f64| {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let plans: Vec<MaskPlan> = (0..4).map(|i| make_mask_plan(4, ratio, seed + i).unwrap()).collect();
        model.encode_images(&bound, &refs, &plans).unwrap().value().clone()
    };
    // Plan seeds are irrelevant at ratio 0.
    assert_eq!(run(0, 0.0), run(100, 0.0));
    for ratio in [0.0, 0.25, 0.5, 0.75] {
        assert_eq!(run(1, ratio).shape(), &[4, 6]);
    }
}

#[test]
fn normalized_embeddings_have_unit_rows() {
    let model = MedFlipModel::new(&config(1, 1), 9).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let imgs: Vec<Tensor> = (0..3).map(|_| image(&mut r, 8)).collect();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let v = model
        .encode_images(&bound, &imgs.iter().collect::<Vec<_>>(), &vec![MaskPlan::unmasked(4); 3])
        .unwrap();
    let ids: [&[u32]; 2] = [&[2, 3], &[4]];
    let t = model.encode_texts(&bound, &TokenBatch::from_sequences(&ids, 6)).unwrap();
    let emb = EmbeddingPair::new(v, t).unwrap();
    for m in [emb.v_norm.value(), emb.t_norm.value()] {
        for i in 0..m.shape()[0] {
            assert!((m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let mut cfg = RunConfig::default().model;
    cfg.text.vocab_size = 50;
    let a = MedFlipModel::new(&cfg, 0).unwrap();
    let b = MedFlipModel::new(&cfg, 1).unwrap();
    assert_eq!(a.param_count(), param_count(&cfg));
    assert_eq!(a.param_count(), b.param_count());
    assert_ne!(a.params, b.params);
}

#[test]
fn gradients_reach_almost_every_parameter() {
    let mut cfg = RunConfig::default();
    cfg.model.text.vocab_size = 40;
    let model = MedFlipModel::new(&cfg.model, 11).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let n = 16;
    let imgs: Vec<Tensor> = (0..n).map(|_| image(&mut r, 32)).collect();
    let plans: Vec<MaskPlan> = (0..n as u64).map(|i| make_mask_plan(64, 0.5, i).unwrap()).collect();
    let seqs: Vec<Vec<u32>> = (0..n).map(|_| (0..12).map(|_| r.gen_range(2..40)).collect()).collect();
    let seq_refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let labels: Vec<EntityLabelVector> = (0..n).map(|i| EntityLabelVector::one_hot(5, i % 5)).collect();
    let l = loss::stack_labels(&labels).unwrap();

    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let v = model.encode_images(&bound, &imgs.iter().collect::<Vec<_>>(), &plans).unwrap();
    let t = model.encode_texts(&bound, &TokenBatch::from_sequences(&seq_refs, 32)).unwrap();
    let (total, _) = loss::compute(&EmbeddingPair::new(v, t).unwrap(), &l, &l, &cfg.loss).unwrap();
    tape.backward(&total).unwrap();

    let mut seen_pos = vec![false; 64];
    for p in &plans {
        for &i in p.visible_indices() {
            seen_pos[i] = true;
        }
    }
    let mut seen_tok = vec![false; 40];
    for s in &seqs {
        for &id in s {
            seen_tok[id as usize] = true;
        }
    }
    let (mut zero, mut total_count) = (0usize, 0usize);
    for ((name, _), g) in model.params.iter().zip(bound.grads()) {
        let d = g.shape().last().copied().unwrap_or(1);
        for (k, &x) in g.data().iter().enumerate() {
            let row = k / d;
            let exempt = (name == "vision.pos_embed" && !seen_pos[row])
                || (name == "text.token_embed" && !seen_tok[row])
                || (name == "text.pos_embed" && row >= 12);
            if exempt {
                continue;
            }
            total_count += 1;
            zero += usize::from(x == 0.0);
        }
    }
    let frac = zero as f64 / total_count as f64;
    assert!(frac < 0.01, "{zero}/{total_count} parameters without gradient");
}

proptest! {
    #[test]
    fn patchify_round_trips(g in 1usize..5, p in 1usize..5, c in 1usize..3, seed in any::<u64>()) {
        let size = g * p;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::new(vec![size, size, c], (0..size * size * c).map(|_| r.gen::<f64>()).collect()).unwrap();
        let tokens = patchify(&img, p).unwrap();
        prop_assert_eq!(tokens.shape(), &[g * g, p * p * c]);
        prop_assert_eq!(unpatchify(&tokens, p, size, size, c).unwrap(), img);
    }
}

#[test]
fn patchify_examples() {
    let tokens = patchify(&Tensor::zeros(&[8, 8, 1]), 4).unwrap();
    assert_eq!(tokens.shape(), &[4, 16]);
    let constant = patchify(&Tensor::new(vec![8, 8, 1], vec![0.3; 64]).unwrap(), 4).unwrap();
    assert!((1..4).all(|i| constant.row(i) == constant.row(0)));
    assert!(patchify(&Tensor::zeros(&[8, 8, 1]), 3).is_err());
}
