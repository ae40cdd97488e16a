//! Trains the baseline and the full block for the same budget and prints
//! per-class IoU side by side.
//!
//! `cargo run --release --example evaluate -- [iterations]`

use fbnet::ablation::Arm;
use fbnet::data::{generate_split, CamoConfig};
use fbnet::train::{evaluate, train, TrainConfig};
use fbnet::Model;

fn main() -> fbnet::Result<()> {
    let iterations = std::env::args().nth(1).map_or(400, |a| a.parse().expect("iterations"));
    let data = CamoConfig::default();
    let train_set = generate_split(&data, "train", 256)?;
    let val = generate_split(&data, "val", 64)?;
    let mut reports = Vec::new();
    for arm in [Arm::Baseline, Arm::Fbnet] {
        let mut cfg = TrainConfig {
            max_iterations: Some(iterations),
            ..TrainConfig::default()
        };
        arm.configure(&mut cfg.model);
        let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
        train(&mut model, &train_set, &cfg, |_, _| Ok(()))?;
        reports.push((arm, evaluate(&model, &val, 8)?));
    }
    println!("{:>6}  {:>9}  {:>9}", "class", "baseline", "fbnet");
    for c in 0..data.scheme.num_classes() {
        let cell = |i: usize| reports[i].1.per_class_iou[c].map_or("-".to_string(), |v| format!("{:.4}", v));
        let tag = if data.scheme.is_foreground(c as u8) { "*" } else { " " };
        println!("{:>5}{tag}  {:>9}  {:>9}", c, cell(0), cell(1));
    }
    for (arm, r) in &reports {
        println!("{arm}: mIoU {:.4}  f-mIoU {:.4}", r.miou, r.f_miou);
    }
    Ok(())
}
