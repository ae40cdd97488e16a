//! Four-arm ablation on the in-memory benchmark (512 train / 128 val).
//!
//! `cargo run --release --example ablation -- [seeds] [epochs] [arms...]`

use fbnet::ablation::{run_arm, AblationReport, Arm};
use fbnet::data::{generate_split, CamoConfig};
use fbnet::train::TrainConfig;

fn main() -> fbnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(3, |s| s.parse().expect("seed count"));
    let epochs: usize = args
        .get(1)
        .map_or(TrainConfig::default().epochs, |s| s.parse().expect("epochs"));
    let arms: Vec<Arm> = if args.len() > 2 {
        args[2..].iter().map(|a| a.parse()).collect::<fbnet::Result<_>>()?
    } else {
        Arm::ALL.to_vec()
    };
    let data = CamoConfig::default();
    let train_set = generate_split(&data, "train", 512)?;
    let val = generate_split(&data, "val", 128)?;
    let base = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut report = AblationReport::default();
    for &arm in &arms {
        for seed in 0..seeds {
            let r = run_arm(arm, seed, &base, &train_set, &val)?;
            println!(
                "{:<10} seed {seed}  mIoU {:.4}  f-mIoU {:.4}  loss {:.4}",
                arm, r.miou, r.f_miou, r.final_loss
            );
            report.rows.push(r);
        }
    }
    print!("{}", report.to_markdown());
    Ok(())
}
