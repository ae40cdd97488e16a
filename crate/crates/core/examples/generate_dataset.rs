//! Writes a train and a val split of the camouflage benchmark to disk and
//! reports the class pixel fractions.
//!
//! `cargo run --release --example generate_dataset -- <dir> [train] [val]`

use std::path::PathBuf;

use fbnet::data::{read_split, write_split, CamoConfig};

fn main() -> fbnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "camo".into()));
    let train = args.next().map_or(512, |a| a.parse().expect("train count"));
    let val = args.next().map_or(128, |a| a.parse().expect("val count"));
    let config = CamoConfig::default();
    write_split(&dir, "train", &config, train, true)?;
    write_split(&dir, "val", &config, val, true)?;
    let samples = read_split(&dir, "train")?;
    let mut counts = vec![0u64; config.scheme.num_classes()];
    for s in &samples {
        for &id in s.mask.ids() {
            counts[id as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    for (id, n) in counts.iter().enumerate() {
        let kind = if config.scheme.is_foreground(id as u8) {
            "fg"
        } else {
            "bg"
        };
        println!("class {id} ({kind}): {:.4}", *n as f64 / total as f64);
    }
    println!("wrote {train} train and {val} val samples to {}", dir.display());
    Ok(())
}
