//! Class-pixel statistics of the default generator.

use fbnet::data::{camo_scheme, generate, CamoConfig, CLASS_NAMES};

#[test]
fn default_benchmark_is_background_dominated() {
    let cfg = CamoConfig::default();
    let scheme = camo_scheme();
    let mut counts = [0u64; 8];
    for i in 0..100 {
        let s = generate(&cfg, i).unwrap();
        for &id in s.mask.ids() {
            counts[id as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let fg: u64 = scheme.foreground().iter().map(|&c| counts[c as usize]).sum();
    let fg_fraction = fg as f64 / total as f64;
    println!("foreground fraction over 100 samples: {fg_fraction:.6}");
    for (name, c) in CLASS_NAMES.iter().zip(counts) {
        println!("{name:>8}: {:.6}", c as f64 / total as f64);
    }
    assert!(fg_fraction < 0.20);
    assert!(1.0 - fg_fraction > 0.75);
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}
