//! Gradient reaching a single block logit as the number of foreground
//! pixels in the block grows, for point-wise CE and for block-wise BCE.
//!
//! `cargo run --example dilution_probe -- [stride]`

use fbnet::metrics::dilution_probe;

fn main() -> fbnet::Result<()> {
    let stride = std::env::args().nth(1).map_or(3, |a| a.parse().expect("stride"));
    let report = dilution_probe(stride)?;
    println!(
        "{:>3}  {:>12}  {:>12}  {:>9}  {:>9}",
        "k", "|dCE/dz|", "|dBwBCE/dz|", "CE ratio", "BwBCE"
    );
    for r in &report.rows {
        println!(
            "{:>3}  {:>12.6}  {:>12.6}  {:>9.4}  {:>9.4}",
            r.k, r.ce_grad, r.bwbce_grad, r.ce_ratio, r.bwbce_ratio
        );
    }
    Ok(())
}
