//! Procedural urban-scene-like images with camouflaged foreground objects.
//!
//! Each image is three horizontal background bands (sky, building, road)
//! with thin or small foreground objects painted on top. An object's colour
//! is the colour of the band underneath it shifted by at most `delta` per
//! channel, so `delta` is the camouflage dial: at 0 the objects are
//! invisible, and the default keeps them faint.

pub mod netpbm;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassScheme, LabelMask};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 8] = ["sky", "building", "road", "pole", "sign", "light", "person", "vehicle"];

/// Eight classes: sky, building and road are background; pole, sign, light,
/// person and vehicle are foreground.
pub fn camo_scheme() -> ClassScheme {
    ClassScheme::new(8, vec![3, 4, 5, 6, 7]).expect("static scheme is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamoConfig {
    /// Square image side in pixels; must be divisible by 8.
    pub size: usize,
    /// Three background ids (sky, building, road bands, top to bottom) and
    /// five foreground ids (pole, sign, light, person, vehicle).
    pub scheme: ClassScheme,
    pub thickness_min: usize,
    pub thickness_max: usize,
    /// Maximum per-channel colour offset between an object and its band.
    pub delta: f32,
    /// Amplitude of the uniform per-pixel noise on background bands.
    pub noise: f32,
    pub objects_min: usize,
    pub objects_max: usize,
    pub seed: u64,
}

impl Default for CamoConfig {
    fn default() -> Self {
        CamoConfig {
            size: 96,
            scheme: camo_scheme(),
            thickness_min: 1,
            thickness_max: 4,
            delta: 0.2,
            noise: 0.02,
            objects_min: 3,
            objects_max: 7,
            seed: 0,
        }
    }
}

impl CamoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size == 0 || !self.size.is_multiple_of(8) {
            return bad(format!("image size {} must be a positive multiple of 8", self.size));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1]", self.delta));
        }
        if !(0.0..=0.15).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.15]", self.noise));
        }
        if self.thickness_min < 1 || self.thickness_max < self.thickness_min {
            return bad(format!(
                "thickness range {}..={} invalid",
                self.thickness_min, self.thickness_max
            ));
        }
        if self.objects_max < self.objects_min {
            return bad("objects_max < objects_min".into());
        }
        if self.scheme.background().len() != 3 || self.scheme.num_foreground() != 5 {
            return bad("scheme must have 3 background and 5 foreground classes".into());
        }
        Ok(())
    }
}

/// One image (`3×H×W`, values in `[0, 1]`) with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

#[derive(Clone, Copy)]
enum Shape {
    Pole,
    Sign,
    Light,
    Person,
    Vehicle,
}

struct Canvas<'a> {
    size: usize,
    band_of_row: Vec<usize>,
    base: [[f32; 3]; 3],
    rgb: Vec<[f32; 3]>,
    mask: Vec<u8>,
    rng: &'a mut ChaCha8Rng,
    fg_noise: f32,
}

impl Canvas<'_> {
    fn paint(&mut self, y: usize, x: usize, id: u8, offset: [f32; 3]) {
        let band = self.band_of_row[y];
        let i = y * self.size + x;
        for c in 0..3 {
            let n = if self.fg_noise > 0.0 {
                self.rng.gen_range(-self.fg_noise..=self.fg_noise)
            } else {
                0.0
            };
            self.rgb[i][c] = self.base[band][c] + offset[c] + n;
        }
        self.mask[i] = id;
    }

    fn rect(&mut self, y0: isize, x0: isize, h: usize, w: usize, id: u8, offset: [f32; 3]) {
        let s = self.size as isize;
        for y in y0.max(0)..(y0 + h as isize).min(s) {
            for x in x0.max(0)..(x0 + w as isize).min(s) {
                self.paint(y as usize, x as usize, id, offset);
            }
        }
    }

    fn disc(&mut self, cy: isize, cx: isize, r: usize, id: u8, offset: [f32; 3]) {
        let r = r as isize;
        let s = self.size as isize;
        for y in (cy - r).max(0)..=(cy + r).min(s - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(s - 1) {
                let (dy, dx) = (y - cy, x - cx);
                if dy * dy + dx * dx <= r * r {
                    self.paint(y as usize, x as usize, id, offset);
                }
            }
        }
    }
}

/// Deterministic in `(config, index)`; no state is shared between calls.
pub fn generate(config: &CamoConfig, index: u64) -> Result<Sample> {
    render(config, index).map(|r| r.sample)
}

struct Rendered {
    sample: Sample,
    #[cfg_attr(not(test), allow(dead_code))]
    band_base: [[f32; 3]; 3],
    #[cfg_attr(not(test), allow(dead_code))]
    band_of_row: Vec<usize>,
}

fn render(config: &CamoConfig, index: u64) -> Result<Rendered> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let n = config.size;
    let nf = n as f32;
    let bg = config.scheme.background();
    let fg = config.scheme.foreground().to_vec();

    let sky_end = rng.gen_range((0.2 * nf) as usize..=(0.4 * nf) as usize);
    let road_start = rng.gen_range((0.6 * nf) as usize..=(0.75 * nf) as usize);
    let mut base = [[0f32; 3]; 3];
    for band in &mut base {
        for c in band.iter_mut() {
            *c = rng.gen_range(0.15..0.85);
        }
    }
    let band_of_row: Vec<usize> = (0..n)
        .map(|y| {
            if y < sky_end {
                0
            } else if y < road_start {
                1
            } else {
                2
            }
        })
        .collect();
    let mut rgb = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for &band in &band_of_row {
        for _ in 0..n {
            let mut px = base[band];
            for c in &mut px {
                *c += rng.gen_range(-config.noise..=config.noise);
            }
            rgb.push(px);
            mask.push(bg[band]);
        }
    }

    let count = rng.gen_range(config.objects_min..=config.objects_max);
    let mut shapes: Vec<Shape> = (0..count)
        .map(|_| match rng.gen_range(0..5) {
            0 => Shape::Pole,
            1 => Shape::Sign,
            2 => Shape::Light,
            3 => Shape::Person,
            _ => Shape::Vehicle,
        })
        .collect();
    // large shapes first so small ones stay visible
    shapes.sort_by_key(|s| match s {
        Shape::Vehicle => 0,
        Shape::Person => 1,
        Shape::Pole => 2,
        Shape::Sign => 3,
        Shape::Light => 4,
    });

    let fg_noise = config.noise.min(config.delta);
    let mut canvas = Canvas {
        size: n,
        band_of_row,
        base,
        rgb,
        mask,
        rng: &mut rng,
        fg_noise,
    };
    let (t_lo, t_hi) = (config.thickness_min, config.thickness_max);
    for shape in shapes {
        let mut offset = [0f32; 3];
        for o in &mut offset {
            let mag = if config.delta > 0.0 {
                canvas.rng.gen_range(0.5 * config.delta..=config.delta)
            } else {
                0.0
            };
            *o = if canvas.rng.gen_bool(0.5) { mag } else { -mag };
        }
        let r = &mut *canvas.rng;
        let sky = sky_end as isize;
        let road = road_start as isize;
        let ni = n as isize;
        match shape {
            Shape::Pole => {
                let t = r.gen_range(t_lo..=t_hi);
                let x = r.gen_range(0..ni - t as isize);
                let top = r.gen_range(ni / 10..(road - ni / 5).max(ni / 10 + 1));
                let bottom = road + r.gen_range(0..=ni / 10);
                let h = (bottom - top).max(1) as usize;
                canvas.rect(top, x, h, t, fg[0], offset);
            }
            Shape::Sign => {
                let rad = r.gen_range(3..=5);
                let cy = r.gen_range(ni / 10..road.max(ni / 10 + 1));
                let cx = r.gen_range(0..ni);
                canvas.disc(cy, cx, rad, fg[1], offset);
            }
            Shape::Light => {
                let rad = r.gen_range(1..=2);
                let cy = r.gen_range(sky / 2..road.max(sky / 2 + 1));
                let cx = r.gen_range(0..ni);
                canvas.disc(cy, cx, rad, fg[2], offset);
            }
            Shape::Person => {
                let t = r.gen_range(t_lo..=t_hi);
                let w = 2 * t;
                let h = r.gen_range(3 * w..=5 * w).max(4);
                let foot = road + r.gen_range(0..=ni / 8);
                let x = r.gen_range(0..ni - w as isize);
                canvas.rect(foot - h as isize, x, h, w, fg[3], offset);
            }
            Shape::Vehicle => {
                let w = r.gen_range(n / 8..=n / 4);
                let h = r.gen_range(n / 16..=n / 10).max(2);
                let y = r.gen_range(road - h as isize / 2..(ni - h as isize).max(road));
                let x = r.gen_range(0..ni - w as isize);
                canvas.rect(y, x, h, w, fg[4], offset);
            }
        }
    }

    let plane = n * n;
    let mut data = vec![0f32; 3 * plane];
    for (p, px) in canvas.rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c].clamp(0.0, 1.0);
        }
    }
    let band_of_row = std::mem::take(&mut canvas.band_of_row);
    Ok(Rendered {
        sample: Sample {
            image: Tensor::new(vec![3, n, n], data)?,
            mask: LabelMask::new(n, n, canvas.mask)?,
        },
        band_base: base,
        band_of_row,
    })
}

/// Index of the first sample in a named split, so splits generated from one
/// config never share samples.
pub fn split_base_index(split: &str) -> u64 {
    if split == "train" {
        return 0;
    }
    let h = split
        .bytes()
        .fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193));
    (h as u64 | 1) << 32
}

pub const MANIFEST: &str = "dataset.json";

/// Contents of `dataset.json`: the generator config and the sample count of
/// each split written so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: CamoConfig,
    pub splits: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn sample_paths(dir: &Path, split: &str, index: usize) -> (PathBuf, PathBuf) {
    let d = dir.join(split);
    (d.join(format!("{index}.ppm")), d.join(format!("{index}.pgm")))
}

/// Writes `count` samples of `split` under `dir` and records them in the
/// manifest. Refuses to touch a non-empty split directory or a manifest with
/// a different config unless `force` is set.
pub fn write_split(dir: &Path, split: &str, config: &CamoConfig, count: usize, force: bool) -> Result<Manifest> {
    config.validate()?;
    if split.is_empty() || split.contains(['/', '\\']) || split == "." || split == ".." {
        return Err(Error::arg(format!("invalid split name {split:?}")));
    }
    let split_dir = dir.join(split);
    let nonempty = fs::read_dir(&split_dir).is_ok_and(|mut it| it.next().is_some());
    if nonempty && !force {
        return Err(Error::arg(format!(
            "{} is not empty; pass --force to overwrite",
            split_dir.display()
        )));
    }
    let mut manifest = match Manifest::read(dir) {
        Ok(m) if m.config == *config => m,
        Ok(_) if !force => {
            return Err(Error::arg(format!(
                "{} was generated with a different config; pass --force to overwrite",
                dir.display()
            )))
        }
        _ => Manifest {
            config: config.clone(),
            splits: BTreeMap::new(),
        },
    };
    if nonempty {
        fs::remove_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    }
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let base = split_base_index(split);
    for i in 0..count {
        let s = generate(config, base + i as u64)?;
        let (img, msk) = sample_paths(dir, split, i);
        netpbm::write_ppm(&img, &s.image)?;
        netpbm::write_pgm(&msk, &s.mask)?;
    }
    manifest.splits.insert(split.to_string(), count);
    manifest.write(dir)?;
    Ok(manifest)
}

/// Loads every sample of a split listed in the manifest.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(dir)?;
    let count = *manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Data(format!("{} has no split {split:?}", dir.display())))?;
    (0..count)
        .map(|i| {
            let (img, msk) = sample_paths(dir, split, i);
            let image = netpbm::read_ppm(&img)?;
            let mask = netpbm::read_pgm(&msk)?;
            if image.shape()[1..] != [mask.height(), mask.width()] {
                return Err(Error::Data(format!(
                    "{} and {} disagree in size",
                    img.display(),
                    msk.display()
                )));
            }
            mask.validate(&manifest.config.scheme)?;
            Ok(Sample { image, mask })
        })
        .collect()
}

/// The same samples `write_split` would produce, kept in memory.
pub fn generate_split(config: &CamoConfig, split: &str, count: usize) -> Result<Vec<Sample>> {
    let base = split_base_index(split);
    (0..count).map(|i| generate(config, base + i as u64)).collect()
}
