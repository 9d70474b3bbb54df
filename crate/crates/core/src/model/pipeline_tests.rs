use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::truncated_normal;
use super::*;
use crate::dataio::{collate, CollateOptions, DatasetHeader, EmbeddingRecord, ModalityId};
use crate::numcore::{finite_diff_gradcheck, GradcheckConfig};

fn modalities(dims: [usize; 3]) -> Vec<ModalityInfo> {
    [ModalityId::GLOBAL, ModalityId::LOCAL, ModalityId::TEXT]
        .into_iter()
        .zip(dims)
        .map(|(id, dim)| ModalityInfo {
            id,
            dim,
            name: id.default_name(),
        })
        .collect()
}

fn tiny_config(dims: [usize; 3]) -> ModelConfig {
    let mut cfg = ModelConfig::new(modalities(dims), 3);
    cfg.d_model = 16;
    cfg.ff_dim = 24;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.init_std = 0.2;
    cfg
}

/// Records with `counts[i]` tokens per modality, values drawn from `rng`.
fn records(
    header: &DatasetHeader,
    counts: &[[usize; 3]],
    rng: &mut ChaCha8Rng,
) -> Vec<EmbeddingRecord> {
    counts
        .iter()
        .enumerate()
        .map(|(i, c)| EmbeddingRecord {
            id: format!("r{i}"),
            label: i % header.num_classes(),
            tokens: header
                .modalities
                .iter()
                .zip(c)
                .map(|(m, &n)| truncated_normal(n, m.dim, 1.0, rng))
                .collect(),
        })
        .collect()
}

fn setup(cfg: &ModelConfig, counts: &[[usize; 3]], seed: u64) -> (MaaModel<f64>, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header = DatasetHeader::new(
        (0..cfg.num_classes).map(|c| format!("c{c}")).collect(),
        cfg.modalities.clone(),
    );
    let recs = records(&header, counts, &mut rng);
    let batch = collate(&recs, &header, &CollateOptions::default()).unwrap();
    (MaaModel::new(cfg.clone(), &mut rng).unwrap(), batch)
}

fn max_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

#[test]
fn adapter_none_is_identity() {
    let mut cfg = tiny_config([16, 16, 16]);
    cfg.adapter = AdapterMode::None;
    let (model, batch) = setup(&cfg, &[[1, 2, 3], [1, 0, 2]], 0);
    let (out, _) = model.adapter.forward(&batch).unwrap();
    let expected = batch.tokens.cast::<f64>();
    assert_eq!(out, expected);
}

#[test]
fn adapter_none_rejects_mismatched_width() {
    let mut cfg = tiny_config([16, 8, 16]);
    cfg.adapter = AdapterMode::None;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(MaaModel::<f64>::new(cfg, &mut rng), Err(MaaError::Config(_))));
}

#[test]
fn adapter_zero_token_yields_activation_of_bias() {
    let mut cfg = tiny_config([4, 4, 4]);
    cfg.activation = Activation::Relu;
    let (mut model, mut batch) = setup(&cfg, &[[1, 0, 0]], 1);
    batch.tokens.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bias: Matrix<f64> = truncated_normal(1, 16, 1.0, &mut rng);
    model.adapter.blocks[0].fc.bias.as_mut().unwrap().value = bias.clone();
    let (out, _) = model.adapter.forward(&batch).unwrap();
    assert_eq!(out.row(0), bias.map(|v| v.max(0.0)).data());
}

#[test]
fn independent_adapters_differ_across_modalities() {
    let cfg = tiny_config([6, 6, 6]);
    let (model, mut batch) = setup(&cfg, &[[1, 1, 0]], 2);
    let first = batch.tokens.row(0).to_vec();
    batch.tokens.row_mut(1).copy_from_slice(&first);
    let (out, _) = model.adapter.forward(&batch).unwrap();
    assert!(out.row(0).iter().zip(out.row(1)).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn unknown_modality_is_rejected() {
    let cfg = tiny_config([6, 6, 6]);
    let (model, mut batch) = setup(&cfg, &[[1, 1, 0]], 2);
    batch.modality_ids[0] = ModalityId(9);
    assert!(matches!(model.logits(&batch), Err(MaaError::UnknownModality(9))));
}

#[test]
fn modality_embedding_adds_table_row() {
    let cfg = tiny_config([16, 16, 16]);
    let (mut model, batch) = setup(&cfg, &[[1, 0, 0]], 3);
    let mut hidden = batch.tokens.cast::<f64>();
    let before = hidden.clone();
    model.modality_embedding.value.fill(0.0);
    model.add_modality_embedding(&mut hidden, &batch).unwrap();
    assert_eq!(hidden, before);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    model.modality_embedding.value = truncated_normal(3, 16, 1.0, &mut rng);
    model.add_modality_embedding(&mut hidden, &batch).unwrap();
    for (c, (&h, &t)) in hidden.row(0).iter().zip(before.row(0)).enumerate() {
        assert_eq!(h, t + model.modality_embedding.value.get(0, c));
    }
}

fn layer_norm_row(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

fn affine(x: &[f64], lin: &Linear<f64>) -> Vec<f64> {
    let w = &lin.weight.value;
    (0..w.cols())
        .map(|j| lin.bias.as_ref().map_or(0.0, |b| b.value.get(0, j)) + x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>())
        .collect()
}

#[test]
fn single_token_layer_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut layer: EncoderLayer<f64> =
        EncoderLayer::new(0, 8, 12, 2, NormLayout::Post, Activation::Relu, 0.0, 1e-5, 0.4, &mut rng);
    for p in layer.params_mut() {
        if p.name.ends_with(".bias") {
            p.value = truncated_normal(1, p.value.cols(), 0.3, &mut rng);
        }
    }
    let x: Matrix<f64> = truncated_normal(1, 8, 1.0, &mut rng);
    let seq = SeqLayout {
        size: 1,
        seq_len: 1,
        mask: &[true],
    };
    let (y, _) = layer.forward(&x, seq, None).unwrap();

    // one key: attention weights are exactly 1, so the block is Wo(Wv x)
    let attn = affine(&affine(x.row(0), &layer.attention.value), &layer.attention.output);
    let r1: Vec<f64> = x.row(0).iter().zip(&attn).map(|(a, b)| a + b).collect();
    let y1 = layer_norm_row(&r1, 1e-5);
    let h: Vec<f64> = affine(&y1, &layer.ffn.up).into_iter().map(|v| v.max(0.0)).collect();
    let f = affine(&h, &layer.ffn.down);
    let r2: Vec<f64> = y1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let expected = layer_norm_row(&r2, 1e-5);
    for (a, b) in y.row(0).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_parameters_stay_finite_and_masked() {
    let cfg = tiny_config([5, 6, 7]);
    let (mut model, batch) = setup(&cfg, &[[1, 2, 0], [1, 1, 3]], 6);
    for layer in &mut model.layers {
        for p in layer.params_mut() {
            if !p.name.ends_with(".gamma") {
                p.value.fill(0.0);
            }
        }
    }
    let (mut hidden, _) = model.adapter.forward(&batch).unwrap();
    model.add_modality_embedding(&mut hidden, &batch).unwrap();
    let (out, _) = model.encode(hidden, &batch, None).unwrap();
    assert!(out.is_finite());
    for r in (0..out.rows()).filter(|&r| !batch.mask[r]) {
        assert!(out.row(r).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn logits_invariant_to_token_permutation() {
    for layout in [NormLayout::Post, NormLayout::Pre] {
        let mut cfg = tiny_config([5, 6, 7]);
        cfg.layers = 2;
        cfg.norm = layout;
        let (model, batch) = setup(&cfg, &[[1, 3, 2], [1, 2, 0]], 7);
        let base = model.logits(&batch).unwrap();
        let mut shuffled = batch.clone();
        shuffled.permute_sample(0, &[5, 2, 0, 4, 1, 3]).unwrap();
        shuffled.permute_sample(1, &[3, 5, 4, 1, 0, 2]).unwrap();
        let permuted = model.logits(&shuffled).unwrap();
        assert!(max_diff(&base, &permuted) <= 1e-10);
    }
}

#[test]
fn logits_invariant_to_permutation_in_f32() {
    let cfg = tiny_config([5, 6, 7]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, batch) = setup(&cfg, &[[1, 4, 3]], 8);
    let model: MaaModel<f32> = MaaModel::new(cfg, &mut rng).unwrap();
    let base = model.logits(&batch).unwrap();
    let mut shuffled = batch.clone();
    shuffled.permute_sample(0, &[7, 6, 5, 4, 3, 2, 1, 0]).unwrap();
    let permuted = model.logits(&shuffled).unwrap();
    assert!(base.max_abs_diff(&permuted).unwrap() <= 1e-5);
}

#[test]
fn masked_slot_values_never_matter() {
    let cfg = tiny_config([5, 6, 7]);
    let (model, batch) = setup(&cfg, &[[1, 3, 2], [1, 0, 1]], 9);
    let base = model.logits(&batch).unwrap();
    let mut dirty = batch.clone();
    for r in (0..dirty.mask.len()).filter(|&r| !dirty.mask[r]) {
        dirty.tokens.row_mut(r).fill(1e6);
        dirty.modality_ids[r] = ModalityId::LOCAL;
    }
    assert_eq!(model.logits(&dirty).unwrap(), base);
}

#[test]
fn pool_and_classify_cases() {
    let mut cfg = tiny_config([16, 16, 16]);
    cfg.num_classes = 16;
    let (mut model, batch) = setup(&cfg, &[[1, 1, 0], [1, 0, 0]], 10);
    let hidden = batch.tokens.cast::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b: Matrix<f64> = truncated_normal(1, 16, 1.0, &mut rng);
    model.classifier.weight.value.fill(0.0);
    model.classifier.bias.as_mut().unwrap().value = b.clone();
    let (_, logits) = model.pool_and_classify(&hidden, &batch).unwrap();
    for r in 0..2 {
        assert_eq!(logits.row(r), b.data());
    }

    model.classifier.weight.value = Matrix::identity(16);
    model.classifier.bias.as_mut().unwrap().value.fill(0.0);
    let (_, logits) = model.pool_and_classify(&hidden, &batch).unwrap();
    assert_eq!(logits.row(1), hidden.row(batch.slot(1, 0)));

    // the same token twice pools to itself
    let mut doubled = batch.clone();
    let t = doubled.tokens.row(0).to_vec();
    doubled.tokens.row_mut(1).copy_from_slice(&t);
    let (_, logits) = model.pool_and_classify(&doubled.tokens.cast(), &doubled).unwrap();
    for (a, &b) in logits.row(0).iter().zip(&t) {
        assert!((a - b as f64).abs() < 1e-12);
    }
}

#[test]
fn zero_layers_reduce_to_classifier_of_mean() {
    let mut cfg = tiny_config([5, 6, 7]);
    cfg.layers = 0;
    let (model, batch) = setup(&cfg, &[[1, 2, 3], [1, 0, 1]], 12);
    let logits = model.logits(&batch).unwrap();
    let (adapted, _) = model.adapter.forward(&batch).unwrap();
    for b in 0..batch.size {
        let mut mean = vec![0.0; 16];
        let n = batch.real_count(b) as f64;
        for s in (0..batch.seq_len).filter(|&s| batch.mask[batch.slot(b, s)]) {
            let r = batch.slot(b, s);
            let slot = model.adapter.slot_of(batch.modality_ids[r]).unwrap();
            for (c, m) in mean.iter_mut().enumerate() {
                *m += (adapted.get(r, c) + model.modality_embedding.value.get(slot, c)) / n;
            }
        }
        let expected = affine(&mean, &model.classifier);
        for (a, e) in logits.row(b).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn independent_and_shared_have_equal_parameter_counts() {
    for m in [1usize, 2, 3] {
        let mods: Vec<_> = modalities([32; 3]).into_iter().take(m).collect();
        let count = |mode| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let a: Adapter<f64> = Adapter::new(mode, Activation::Gelu, &mods, 32, 1e-5, 0.02, &mut rng).unwrap();
            a.params().iter().map(|p| p.numel()).sum::<usize>()
        };
        assert_eq!(count(AdapterMode::Independent), count(AdapterMode::Shared));
    }
}

#[test]
fn parameters_are_registered_once_in_stable_order() {
    let cfg = tiny_config([5, 6, 7]);
    let (model, _) = setup(&cfg, &[[1, 1, 1]], 14);
    let names: Vec<_> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert_eq!(names[0], "adapter.G.ln.gamma");
    assert_eq!(names.last().unwrap(), "classifier.bias");
    let (again, _) = setup(&cfg, &[[1, 1, 1]], 99);
    let again: Vec<_> = again.params().iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, again);
}

fn gradcheck_report(mode: AdapterMode, layout: NormLayout, counts: &[[usize; 3]]) -> crate::numcore::GradcheckReport {
    let mut cfg = tiny_config([5, 6, 7]);
    cfg.adapter = mode;
    cfg.norm = layout;
    if mode == AdapterMode::Shared {
        cfg.modalities = modalities([6; 3]);
    }
    let (mut model, batch) = setup(&cfg, counts, 15);
    finite_diff_gradcheck(
        &mut model,
        |m: &mut MaaModel<f64>| m.forward_backward(&batch, None).map(|(l, _)| l),
        &GradcheckConfig::default(),
    )
    .unwrap()
}

#[test]
fn gradcheck_tiny_config_all_modes() {
    for mode in [AdapterMode::Independent, AdapterMode::Shared] {
        for layout in [NormLayout::Post, NormLayout::Pre] {
            let report = gradcheck_report(mode, layout, &[[1, 2, 2], [1, 3, 0], [1, 1, 1]]);
            assert!(
                report.passed(),
                "{mode}/{layout}: {} at {}",
                report.max_rel_err,
                report.worst_param
            );
        }
    }
}

#[test]
fn gradcheck_catches_sabotaged_layer_norm() {
    let cfg = tiny_config([5, 6, 7]);
    let (mut model, batch) = setup(&cfg, &[[1, 2, 2], [1, 3, 0]], 16);
    model.sabotage_layer_norm_backward();
    let report = finite_diff_gradcheck(
        &mut model,
        |m: &mut MaaModel<f64>| m.forward_backward(&batch, None).map(|(l, _)| l),
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.worst_param.contains("gamma"), "{}", report.worst_param);
}

#[test]
fn absent_modality_gets_exactly_zero_gradient() {
    let cfg = tiny_config([5, 6, 7]);
    let (mut model, batch) = setup(&cfg, &[[1, 2, 0], [1, 1, 0]], 17);
    model.zero_grads();
    let (loss, _) = model.forward_backward(&batch, None).unwrap();
    assert!(loss.is_finite());
    for p in model.params().iter().filter(|p| p.name.starts_with("adapter.T.")) {
        assert!(p.grad.data().iter().all(|&g| g == 0.0), "{}", p.name);
    }
    let table = &model.modality_embedding.grad;
    assert!(table.row(2).iter().all(|&g| g == 0.0));
    assert!(table.row(1).iter().any(|&g| g != 0.0));
}

#[test]
fn duplicated_sample_loss_equals_single() {
    let cfg = tiny_config([5, 6, 7]);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let header = DatasetHeader::new(vec!["a".into(), "b".into(), "c".into()], cfg.modalities.clone());
    let recs = records(&header, &[[1, 2, 1]], &mut rng);
    let mut model: MaaModel<f64> = MaaModel::new(cfg, &mut rng).unwrap();
    let single = collate(&recs, &header, &CollateOptions::default()).unwrap();
    let double = collate(&[recs[0].clone(), recs[0].clone()], &header, &CollateOptions::default()).unwrap();
    let (l1, _) = model.forward_backward(&single, None).unwrap();
    let (l2, _) = model.forward_backward(&double, None).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
}

#[test]
fn dropout_changes_training_pass_only() {
    let mut cfg = tiny_config([5, 6, 7]);
    cfg.dropout = 0.3;
    let (model, batch) = setup(&cfg, &[[1, 3, 2]], 19);
    let eval_a = model.logits(&batch).unwrap();
    let eval_b = model.logits(&batch).unwrap();
    assert_eq!(eval_a, eval_b);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = model.forward(&batch, Some(&mut rng)).unwrap().logits;
    assert!(max_diff(&train, &eval_a) > 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(model.forward(&batch, Some(&mut rng)).unwrap().logits, train);
}

#[test]
fn softmax_rows_sum_to_one_and_loss_nonnegative() {
    let cfg = tiny_config([5, 6, 7]);
    let (model, batch) = setup(&cfg, &[[1, 3, 2], [1, 1, 1]], 20);
    let logits = model.logits(&batch).unwrap();
    for r in 0..logits.rows() {
        let s: f64 = softmax_rows(&logits).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(ce_loss(&logits, &batch.labels).unwrap().0 >= 0.0);
}


