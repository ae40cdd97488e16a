//! Channel-mean heatmaps of modulated features.

use std::sync::OnceLock;

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::fbnet::Stage;
use crate::tensor::{Graph, Tensor};

const LUT_SOURCE: &str = include_str!("../assets/blue_red.lut");

/// Spreads below this are treated as a flat map and drawn in the lowest
/// colour rather than stretched over the full range.
pub const FLAT_RANGE: f32 = 1e-6;

/// The 256-entry blue-to-red colormap.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [[0u8; 3]; 256];
        let rows = LUT_SOURCE
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut n = 0;
        for (entry, line) in lut.iter_mut().zip(rows) {
            let v: Vec<u8> = line
                .split_whitespace()
                .map(|t| t.parse().expect("colormap entry"))
                .collect();
            *entry = [v[0], v[1], v[2]];
            n += 1;
        }
        assert_eq!(n, 256, "colormap must have 256 entries");
        lut
    })
}

/// Channel mean of the modulated features at `stage` for one `3×H×W`
/// image, as an `h×w` map at that stage's resolution.
pub fn channel_mean(model: &Model<f32>, image: &Tensor<f32>, stage: Stage) -> Result<Tensor<f32>> {
    let injected = model.block(stage).is_some_and(|b| b.variant.has_modulator());
    if !injected {
        return Err(Error::arg(format!("stage {stage} has no modulator in this model")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut g = Graph::new();
    let x = g.constant(image.reshape(&shape)?);
    let out = model.forward(&mut g, x)?;
    let xo = out
        .modulated
        .iter()
        .find(|(s, _)| *s == stage)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::arg(format!("stage {stage} produced no modulated features")))?;
    let [_, c, h, w] = g.value(xo).dims4()?;
    let d = g.value(xo).data();
    let inv = 1.0 / c as f32;
    Ok(Tensor::from_fn(&[h, w], |p| {
        (0..c).map(|ch| d[ch * h * w + p]).sum::<f32>() * inv
    }))
}

/// Min-max normalizes a map and colours it, enlarging each cell to
/// `upscale × upscale` pixels. Returns a `3×(h·upscale)×(w·upscale)` image.
pub fn colorize(map: &Tensor<f32>, upscale: usize) -> Result<Tensor<f32>> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("heatmap must be 2-D, got {s:?}"))),
    };
    if !map.all_finite() {
        return Err(Error::Numeric("heatmap contains non-finite values".into()));
    }
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let idx: Vec<usize> = map
        .data()
        .iter()
        .map(|&v| {
            if hi - lo <= FLAT_RANGE {
                0
            } else {
                (((v - lo) / (hi - lo)) * 255.0).round() as usize
            }
        })
        .collect();
    let u = upscale.max(1);
    let (oh, ow) = (h * u, w * u);
    let lut = colormap();
    Ok(Tensor::from_fn(&[3, oh, ow], |i| {
        let (c, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        lut[idx[(y / u) * w + x / u]][c] as f32 / 255.0
    }))
}

/// Colourized channel-mean heatmap at the input image's resolution.
pub fn heatmap(model: &Model<f32>, image: &Tensor<f32>, stage: Stage) -> Result<Tensor<f32>> {
    let map = channel_mean(model, image, stage)?;
    let upscale = image.shape()[1] / map.shape()[0];
    colorize(&map, upscale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    #[test]
    fn colormap_runs_blue_to_red() {
        let lut = colormap();
        assert!(lut[0][2] > 100 && lut[0][0] == 0);
        assert!(lut[255][0] > 100 && lut[255][2] == 0);
    }

    #[test]
    fn flat_map_uses_lowest_colour() {
        let img = colorize(&Tensor::full(&[2, 3], 0.25), 2).unwrap();
        assert_eq!(img.shape(), &[3, 4, 6]);
        let lut = colormap();
        for c in 0..3 {
            assert!(img.data()[c * 24..][..24]
                .iter()
                .all(|&v| v == lut[0][c] as f32 / 255.0));
        }
    }

    #[test]
    fn extremes_map_to_ends() {
        let m = Tensor::new(vec![1, 2], vec![-3.0, 5.0]).unwrap();
        let img = colorize(&m, 1).unwrap();
        let lut = colormap();
        assert_eq!(img.at(&[0, 0, 1]), lut[255][0] as f32 / 255.0);
        assert_eq!(img.at(&[2, 0, 0]), lut[0][2] as f32 / 255.0);
    }

    #[test]
    fn baseline_has_nothing_to_show() {
        let cfg = ModelConfig {
            inject: vec![],
            ..ModelConfig::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(channel_mean(&model, &img, Stage::Res5).is_err());
    }
}
