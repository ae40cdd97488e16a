//! Loss composition, schedule, determinism and feature visualization.

#![allow(clippy::needless_range_loop)]

use fbnet::backbone::{ForwardResult, Model, ModelConfig};
use fbnet::data::{generate_split, CamoConfig, Sample};
use fbnet::loss::pointwise_ce;
use fbnet::train::{poly_lr, stack_images, total_loss, train, TrainConfig};
use fbnet::visualize::{channel_mean, colormap, heatmap};
use fbnet::{Graph, LabelMask, Stage, Tensor};

fn small_data(count: usize) -> Vec<Sample> {
    let cfg = CamoConfig {
        size: 32,
        ..CamoConfig::default()
    };
    generate_split(&cfg, "train", count).unwrap()
}

fn forward_f64(model: &Model<f64>, data: &[Sample]) -> (Graph<f64>, ForwardResult, Vec<LabelMask>) {
    let refs: Vec<&Sample> = data.iter().collect();
    let mut g = Graph::new();
    let x = g.constant(stack_images::<f64>(&refs).unwrap());
    let out = model.forward(&mut g, x).unwrap();
    (g, out, data.iter().map(|s| s.mask.clone()).collect())
}

#[test]
fn poly_half_point() {
    // 0.01 · 0.5^0.9 evaluated to 40 significant digits: 0.005358867312681465…
    let lr = poly_lr(500, 1000, 0.01, 0.9).unwrap();
    assert!((lr - 0.005_358_867_31).abs() < 5e-12);
}

#[test]
fn total_loss_is_sum_of_independent_terms() {
    let data = small_data(2);
    let cfg = ModelConfig {
        inject: vec![Stage::Res4, Stage::Res5],
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(cfg, 3).unwrap();

    let (mut g, out, masks) = forward_f64(&model, &data);
    let total = total_loss(&mut g, &model, &out, &masks, 1.0, 1.0).unwrap();
    let combined = g.value(total.var).data()[0];

    let (mut g, out, _) = forward_f64(&model, &data);
    let mut separate = pointwise_ce(&mut g, out.logits, &masks).unwrap().value(&g);
    for &(stage, p) in &out.aux {
        separate += model
            .block(stage)
            .unwrap()
            .aux_loss(&mut g, p, &masks, &model.config().scheme)
            .unwrap()
            .value(&g);
    }
    assert!((combined - separate).abs() < 1e-12);
}

#[test]
fn lambda_zero_and_empty_injection_reduce_to_ce() {
    let data = small_data(2);
    let fb = Model::<f64>::build(ModelConfig::default(), 1).unwrap();
    let (mut g, out, masks) = forward_f64(&fb, &data);
    let l = total_loss(&mut g, &fb, &out, &masks, 0.0, 1.0).unwrap();
    assert_eq!(g.value(l.var).data()[0], l.ce.value(&g));

    let plain = Model::<f64>::build(
        ModelConfig {
            inject: vec![],
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap();
    let (mut g, out, masks) = forward_f64(&plain, &data);
    assert!(out.aux.is_empty());
    let a = total_loss(&mut g, &plain, &out, &masks, 1.0, 1.0).unwrap();
    let b = total_loss(&mut g, &plain, &out, &masks, 0.0, 1.0).unwrap();
    assert_eq!(g.value(a.var).data()[0], g.value(b.var).data()[0]);
}

#[test]
fn repeated_aux_prediction_doubles_aux_term() {
    let data = small_data(2);
    let cfg = ModelConfig {
        inject: vec![Stage::Res4, Stage::Res5],
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(cfg, 2).unwrap();
    let (mut g, mut out, masks) = forward_f64(&model, &data);
    let p = out.aux[1].1;
    out.aux = vec![(Stage::Res5, p)];
    let single = total_loss(&mut g, &model, &out, &masks, 1.0, 0.0).unwrap();
    out.aux = vec![(Stage::Res4, p), (Stage::Res5, p)];
    let double = total_loss(&mut g, &model, &out, &masks, 1.0, 0.0).unwrap();
    assert_eq!(g.value(double.var).data()[0], 2.0 * g.value(single.var).data()[0]);
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        crop: 32,
        batch_size: 2,
        max_iterations: Some(4),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible() {
    let data = small_data(4);
    let run = || {
        let cfg = quick_config();
        let mut model = Model::build(cfg.model.clone(), cfg.seed).unwrap();
        let mut log = Vec::new();
        train(&mut model, &data, &cfg, |row, _| {
            log.push(row.to_csv());
            Ok(())
        })
        .unwrap();
        (model.checkpoint_bytes(), log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.1.len(), 4);
}

#[test]
fn different_seed_changes_trajectory() {
    let data = small_data(4);
    let run = |seed| {
        let cfg = TrainConfig { seed, ..quick_config() };
        let mut model = Model::build(cfg.model.clone(), cfg.seed).unwrap();
        train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
        model.checkpoint_bytes()
    };
    assert_ne!(run(0), run(1));
}

#[test]
fn closed_gates_draw_lowest_colour() {
    let data = small_data(1);
    let mut model = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
    model.close_gates(-40.0).unwrap();
    let map = heatmap(&model, &data[0].image, Stage::Res5).unwrap();
    assert_eq!(map.shape(), &[3, 32, 32]);
    let lut = colormap();
    for c in 0..3 {
        let want = lut[0][c] as f32 / 255.0;
        assert!(map.data()[c * 1024..][..1024].iter().all(|&v| v == want));
    }
}

#[test]
fn constant_image_gives_constant_heatmap_without_border_effects() {
    // An 8×8 input leaves a single cell at stride 8, where zero padding
    // cannot distinguish positions.
    let model = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
    let img = Tensor::full(&[3, 8, 8], 0.4);
    let map = heatmap(&model, &img, Stage::Res5).unwrap();
    let first: Vec<f32> = (0..3).map(|c| map.data()[c * 64]).collect();
    for c in 0..3 {
        assert!(map.data()[c * 64..][..64].iter().all(|&v| v == first[c]));
    }
    let raw = channel_mean(&model, &img, Stage::Res5).unwrap();
    assert_eq!(raw.shape(), &[1, 1]);
}
