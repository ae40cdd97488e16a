//! Label masks, class schemes and the block-wise label assignment that turns
//! a full-resolution mask into stride-`s` multi-hot foreground supervision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Class id of pixels excluded from supervision and evaluation.
pub const IGNORE: u8 = 255;

/// H×W map of class ids in `[0, C_total)` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty mask {height}×{width}")));
        }
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}×{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(LabelMask { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMask {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    /// Checks every non-ignore id against the scheme's class count.
    pub fn validate(&self, scheme: &ClassScheme) -> Result<()> {
        match self
            .ids
            .iter()
            .position(|&id| id != IGNORE && id as usize >= scheme.num_classes())
        {
            Some(i) => Err(Error::arg(format!(
                "mask pixel ({}, {}) has id {} but the scheme has {} classes",
                i / self.width,
                i % self.width,
                self.ids[i],
                scheme.num_classes()
            ))),
            None => Ok(()),
        }
    }
}

/// Partition of `[0, C_total)` into foreground and background ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct ClassScheme {
    num_classes: usize,
    foreground: Vec<u8>,
    /// Index of each class id within `foreground`, or `None` for background.
    fg_slot: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    num_classes: usize,
    foreground: Vec<u8>,
}

impl TryFrom<SchemeRepr> for ClassScheme {
    type Error = Error;

    fn try_from(r: SchemeRepr) -> Result<Self> {
        ClassScheme::new(r.num_classes, r.foreground)
    }
}

impl From<ClassScheme> for SchemeRepr {
    fn from(s: ClassScheme) -> Self {
        SchemeRepr {
            num_classes: s.num_classes,
            foreground: s.foreground,
        }
    }
}

impl ClassScheme {
    /// `foreground` lists the Ĉ foreground ids in channel order.
    pub fn new(num_classes: usize, foreground: Vec<u8>) -> Result<Self> {
        if num_classes == 0 || num_classes > IGNORE as usize {
            return Err(Error::Config(format!(
                "class count {num_classes} must be in 1..={}",
                IGNORE - 1
            )));
        }
        let mut fg_slot = vec![None; num_classes];
        for (slot, &id) in foreground.iter().enumerate() {
            let entry = fg_slot
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("foreground id {id} outside {num_classes} classes")))?;
            if entry.replace(slot).is_some() {
                return Err(Error::Config(format!("foreground id {id} listed twice")));
            }
        }
        Ok(ClassScheme {
            num_classes,
            foreground,
            fg_slot,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Ĉ, the number of foreground classes.
    pub fn num_foreground(&self) -> usize {
        self.foreground.len()
    }

    pub fn foreground(&self) -> &[u8] {
        &self.foreground
    }

    pub fn background(&self) -> Vec<u8> {
        (0..self.num_classes as u8)
            .filter(|&id| self.fg_slot[id as usize].is_none())
            .collect()
    }

    pub fn is_foreground(&self, id: u8) -> bool {
        self.foreground_slot(id).is_some()
    }

    /// Channel of `id` in block labels, if it is a foreground class.
    pub fn foreground_slot(&self, id: u8) -> Option<usize> {
        self.fg_slot.get(id as usize).copied().flatten()
    }
}

/// Multi-hot Ĉ×h×w block supervision at a given stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLabel {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    bits: Vec<u8>,
}

impl BlockLabel {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Flat `c·h·w` row-major bits, each 0 or 1.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> bool {
        self.bits[(c * self.height + i) * self.width + j] != 0
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.bits
                .iter()
                .map(|&b| if b != 0 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("block label dims are positive")
    }
}

fn check_stride(mask: &LabelMask, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::arg("stride must be ≥ 1"));
    }
    if !mask.height.is_multiple_of(stride) || !mask.width.is_multiple_of(stride) {
        return Err(Error::arg(format!(
            "mask {}×{} is not divisible by stride {stride}",
            mask.height, mask.width
        )));
    }
    Ok((mask.height / stride, mask.width / stride))
}

/// Number of pixels of each foreground class inside each s×s block, as a
/// Ĉ×h×w row-major vector of counts in `[0, s²]`.
pub fn block_foreground_count(mask: &LabelMask, scheme: &ClassScheme, stride: usize) -> Result<Vec<u32>> {
    mask.validate(scheme)?;
    let (h, w) = check_stride(mask, stride)?;
    let mut counts = vec![0u32; scheme.num_foreground() * h * w];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if let Some(c) = scheme.foreground_slot(mask.get(y, x)) {
                counts[(c * h + y / stride) * w + x / stride] += 1;
            }
        }
    }
    Ok(counts)
}

/// Block label assignment: bit (c, i, j) is set iff at least one pixel of the
/// c-th foreground class lies in the s×s block starting at (s·i, s·j).
/// Background and ignore pixels never set a bit.
pub fn assign(mask: &LabelMask, scheme: &ClassScheme, stride: usize) -> Result<BlockLabel> {
    let counts = block_foreground_count(mask, scheme, stride)?;
    let (h, w) = (mask.height / stride, mask.width / stride);
    Ok(BlockLabel {
        channels: scheme.num_foreground(),
        height: h,
        width: w,
        stride,
        bits: counts.iter().map(|&n| u8::from(n > 0)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme() -> ClassScheme {
        // 0 background, 1 and 2 foreground
        ClassScheme::new(3, vec![1, 2]).unwrap()
    }

    #[test]
    fn stride_one_is_foreground_one_hot() {
        let mask = LabelMask::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
        let y = assign(&mask, &scheme(), 1).unwrap();
        assert_eq!(y.bits(), &[0, 1, 0, 0, /* class 2 */ 0, 0, 1, 0]);
    }

    #[test]
    fn single_pixel_sets_single_block_bit() {
        let mut mask = LabelMask::filled(3, 3, 0);
        mask.set(0, 0, 1);
        let y = assign(&mask, &scheme(), 3).unwrap();
        assert_eq!((y.channels(), y.height(), y.width()), (2, 1, 1));
        assert_eq!(y.bits(), &[1, 0]);
    }

    #[test]
    fn indivisible_is_an_error() {
        let mask = LabelMask::filled(6, 5, 0);
        assert!(matches!(assign(&mask, &scheme(), 2), Err(Error::Argument(_))));
        assert!(assign(&mask, &scheme(), 0).is_err());
    }

    #[test]
    fn counts_background_and_solid() {
        let s = scheme();
        let bg = LabelMask::filled(4, 4, 0);
        assert!(block_foreground_count(&bg, &s, 2).unwrap().iter().all(|&c| c == 0));
        let solid = LabelMask::filled(4, 4, 2);
        let counts = block_foreground_count(&solid, &s, 2).unwrap();
        assert_eq!(&counts[..4], &[0, 0, 0, 0]);
        assert_eq!(&counts[4..], &[4, 4, 4, 4]);
    }

    #[test]
    fn out_of_scheme_ids_rejected() {
        let mask = LabelMask::new(1, 2, vec![0, 7]).unwrap();
        assert!(assign(&mask, &scheme(), 1).is_err());
    }

    #[test]
    fn scheme_validation() {
        assert!(ClassScheme::new(3, vec![1, 1]).is_err());
        assert!(ClassScheme::new(3, vec![3]).is_err());
        let s = ClassScheme::new(5, vec![4, 2]).unwrap();
        assert_eq!(s.background(), vec![0, 1, 3]);
        assert_eq!(s.foreground_slot(2), Some(1));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ClassScheme>(&json).unwrap(), s);
    }

    fn mask_strategy() -> impl Strategy<Value = (LabelMask, usize)> {
        (1usize..=4, 1usize..=4, 1usize..=3).prop_flat_map(|(bh, bw, s)| {
            let (h, w) = (bh * s, bw * s);
            prop::collection::vec(prop_oneof![Just(0u8), Just(1), Just(2), Just(IGNORE)], h * w)
                .prop_map(move |ids| (LabelMask::new(h, w, ids).unwrap(), s))
        })
    }

    proptest! {
        #[test]
        fn assign_is_indicator_of_count((mask, s) in mask_strategy()) {
            let counts = block_foreground_count(&mask, &scheme(), s).unwrap();
            let y = assign(&mask, &scheme(), s).unwrap();
            for (&c, &b) in counts.iter().zip(y.bits()) {
                prop_assert!(c as usize <= s * s);
                prop_assert_eq!(b, u8::from(c > 0));
            }
        }

        #[test]
        fn adding_foreground_never_clears((mask, s) in mask_strategy(), pick in any::<prop::sample::Index>(), cls in 1u8..=2) {
            let before = assign(&mask, &scheme(), s).unwrap();
            let mut grown = mask.clone();
            let i = pick.index(grown.ids().len());
            prop_assume!(!scheme().is_foreground(grown.ids()[i]));
            grown.ids_mut()[i] = cls;
            let after = assign(&grown, &scheme(), s).unwrap();
            for (&a, &b) in before.bits().iter().zip(after.bits()) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn ignore_never_sets((mask, s) in mask_strategy(), pick in any::<prop::sample::Index>()) {
            let before = assign(&mask, &scheme(), s).unwrap();
            let mut hidden = mask.clone();
            let i = pick.index(hidden.ids().len());
            hidden.ids_mut()[i] = IGNORE;
            let after = assign(&hidden, &scheme(), s).unwrap();
            for (&a, &b) in before.bits().iter().zip(after.bits()) {
                prop_assert!(b <= a);
            }
        }
    }
}
