//! Block label assignment on a small hand-drawn mask: a thin pole and a
//! sign over background, assigned at stride 4.

use fbnet::label::{assign, block_foreground_count};
use fbnet::{ClassScheme, LabelMask};

fn main() -> fbnet::Result<()> {
    let scheme = ClassScheme::new(3, vec![1, 2])?;
    #[rustfmt::skip]
    let mask = LabelMask::new(8, 8, vec![
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 1, 0, 0, 0, 0, 0, 0,
        0, 1, 0, 0, 0, 2, 2, 0,
        0, 1, 0, 0, 0, 2, 2, 0,
        0, 1, 0, 0, 0, 0, 0, 0,
        0, 1, 0, 0, 0, 0, 0, 0,
        0, 1, 0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 0, 0, 0,
    ])?;
    let stride = 4;
    let labels = assign(&mask, &scheme, stride)?;
    let counts = block_foreground_count(&mask, &scheme, stride)?;
    let (h, w) = (labels.height(), labels.width());
    for (slot, &id) in scheme.foreground().iter().enumerate() {
        println!("class {id}: block bits (pixel counts)");
        for i in 0..h {
            let row: Vec<String> = (0..w)
                .map(|j| {
                    format!(
                        "{} ({:>2})",
                        u8::from(labels.get(slot, i, j)),
                        counts[(slot * h + i) * w + j]
                    )
                })
                .collect();
            println!("  {}", row.join("  "));
        }
    }
    Ok(())
}
