//! Trains the default model for a few hundred iterations on an in-memory
//! split and evaluates it.
//!
//! `cargo run --release --example train_tiny -- [iterations] [train count]`

use std::time::Instant;

use fbnet::data::{generate_split, CamoConfig};
use fbnet::train::{evaluate, train, TrainConfig};
use fbnet::Model;

fn main() -> fbnet::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("numeric argument"));
    let iterations = args.next().unwrap_or(200);
    let count = args.next().unwrap_or(64);
    let data = CamoConfig::default();
    let train_set = generate_split(&data, "train", count)?;
    let val = generate_split(&data, "val", 32)?;
    let cfg = TrainConfig {
        max_iterations: Some(iterations),
        ..TrainConfig::default()
    };
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    println!("{} parameters", model.param_count());
    let start = Instant::now();
    train(&mut model, &train_set, &cfg, |row, _| {
        if row.iter % 20 == 0 {
            println!(
                "iter {:>4}  lr {:.5}  total {:.4}  ce {:.4}  {:?}  {:.1}s",
                row.iter,
                row.lr,
                row.total,
                row.ce,
                row.bwbce,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let report = evaluate(&model, &val, 8)?;
    println!("val mIoU {:.4}  f-mIoU {:.4}", report.miou, report.f_miou);
    println!("per class {:?}", report.per_class_iou);
    Ok(())
}
