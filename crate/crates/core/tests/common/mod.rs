//! Reference implementations shared by the integration tests.

#![allow(dead_code)]

use fbnet::label::{assign, ClassScheme, LabelMask, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// For every foreground slot and block, scan the block's pixels for that
/// class.
pub fn brute_force_blocks(mask: &LabelMask, scheme: &ClassScheme, s: usize) -> Vec<u8> {
    let (bh, bw) = (mask.height() / s, mask.width() / s);
    let mut out = Vec::new();
    for &class in scheme.foreground() {
        for i in 0..bh {
            for j in 0..bw {
                let mut present = false;
                for y in i * s..(i + 1) * s {
                    for x in j * s..(j + 1) * s {
                        present |= mask.get(y, x) == class;
                    }
                }
                out.push(present as u8);
            }
        }
    }
    out
}

/// Entries where `assign` disagrees with the scan.
pub fn assign_mismatches(mask: &LabelMask, scheme: &ClassScheme, s: usize) -> usize {
    let got = assign(mask, scheme, s).unwrap();
    let want = brute_force_blocks(mask, scheme, s);
    got.bits().iter().zip(&want).filter(|(a, b)| a != b).count() + got.bits().len().abs_diff(want.len())
}

/// `(masks checked, mismatches)` over `count` random masks with sides in
/// 4..=16 and strides 2..=4.
pub fn random_mask_sweep(seed: u64, count: usize) -> (usize, usize) {
    let scheme = ClassScheme::new(6, vec![1, 3, 4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for _ in 0..count {
        let s = rng.gen_range(2..=4);
        let side = |rng: &mut ChaCha8Rng| s * rng.gen_range(4usize.div_ceil(s)..=16 / s);
        let (h, w) = (side(&mut rng), side(&mut rng));
        let fg_rate = rng.gen_range(0.0..0.3);
        let ids = (0..h * w)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    IGNORE
                } else if rng.gen_bool(fg_rate) {
                    [1, 3, 4][rng.gen_range(0..3)]
                } else {
                    [0, 2, 5][rng.gen_range(0..3)]
                }
            })
            .collect();
        total += assign_mismatches(&LabelMask::new(h, w, ids).unwrap(), &scheme, s);
    }
    (count, total)
}

/// Every 4×4 foreground/background mask at stride 2 (a 2×2 block grid),
/// then every 2×2 mask over `{0, 1, 2, IGNORE}` as a single block.
pub fn exhaustive_sweep() -> (usize, usize) {
    let mut checked = 0;
    let mut total = 0;
    let binary = ClassScheme::new(2, vec![1]).unwrap();
    for bits in 0u32..1 << 16 {
        let ids = (0..16).map(|i| ((bits >> i) & 1) as u8).collect();
        total += assign_mismatches(&LabelMask::new(4, 4, ids).unwrap(), &binary, 2);
        checked += 1;
    }
    let three = ClassScheme::new(3, vec![1, 2]).unwrap();
    let values = [0, 1, 2, IGNORE];
    for code in 0..256usize {
        let ids = (0..4).map(|i| values[(code >> (2 * i)) & 3]).collect();
        total += assign_mismatches(&LabelMask::new(2, 2, ids).unwrap(), &three, 2);
        checked += 1;
    }
    (checked, total)
}
