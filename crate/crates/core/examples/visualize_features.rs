//! Trains a small model with the block at Res5 and writes heatmaps of the
//! modulated features next to their input images.
//!
//! `cargo run --release --example visualize_features -- <out dir> [iterations]`

use std::path::PathBuf;

use fbnet::data::netpbm::write_ppm;
use fbnet::data::{generate_split, CamoConfig};
use fbnet::train::{train, TrainConfig};
use fbnet::visualize::heatmap;
use fbnet::{Model, Stage};

fn main() -> fbnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "heatmaps".into()));
    let iterations = args.next().map_or(300, |a| a.parse().expect("iterations"));
    std::fs::create_dir_all(&out).map_err(|source| fbnet::Error::Io {
        path: out.clone(),
        source,
    })?;
    let data = CamoConfig::default();
    let train_set = generate_split(&data, "train", 128)?;
    let cfg = TrainConfig {
        max_iterations: Some(iterations),
        ..TrainConfig::default()
    };
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    train(&mut model, &train_set, &cfg, |_, _| Ok(()))?;
    for (i, sample) in generate_split(&data, "val", 4)?.iter().enumerate() {
        let map = heatmap(&model, &sample.image, Stage::Res5)?;
        write_ppm(&out.join(format!("{i}_image.ppm")), &sample.image)?;
        write_ppm(&out.join(format!("{i}_res5.ppm")), &map)?;
    }
    println!("wrote 4 image/heatmap pairs to {}", out.display());
    Ok(())
}
