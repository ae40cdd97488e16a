//! Training: the combined objective, SGD with momentum and weight decay
//! under a poly schedule, scale/flip/crop augmentation, and evaluation.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardResult, Model, ModelConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fbnet::Stage;
use crate::label::LabelMask;
use crate::loss::{pointwise_ce, LossValue};
use crate::metrics::EvalReport;
use crate::params::ParamMap;
use crate::tensor::{sc, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the summed auxiliary block-wise losses.
    pub lambda1: f64,
    /// Weight of the final point-wise cross-entropy.
    pub lambda2: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_iterations: Option<usize>,
    pub batch_size: usize,
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub augment: bool,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda1: 1.0,
            lambda2: 1.0,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            epochs: 12,
            max_iterations: None,
            batch_size: 8,
            crop: 96,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            augment: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!(
                "loss weights must be ≥ 0, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay ≥ 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) || !self.crop.is_multiple_of(self.model.output_stride()) {
            return bad(format!(
                "crop {} must be a positive multiple of 8 and of the output stride",
                self.crop
            ));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad(format!("scale range [{}, {}] invalid", self.scale_min, self.scale_max));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        Ok(())
    }

    pub fn total_iterations(&self, train_len: usize) -> usize {
        self.max_iterations
            .unwrap_or_else(|| self.epochs * train_len.div_ceil(self.batch_size))
    }
}

/// `lr0 · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::arg(format!("iteration {iter} outside schedule of {max_iter}")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// The combined objective and its parts.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub var: Var,
    pub ce: LossValue,
    pub aux: Vec<(Stage, LossValue)>,
}

/// `λ1 · Σ_f bwbce_f + λ2 · ce(Z, Y)` over every auxiliary prediction.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    result: &ForwardResult,
    masks: &[LabelMask],
    lambda1: f64,
    lambda2: f64,
) -> Result<TotalLoss> {
    let ce = pointwise_ce(g, result.logits, masks)?;
    let mut total = g.scale(ce.var, sc(lambda2));
    let mut aux = Vec::with_capacity(result.aux.len());
    for &(stage, probs) in &result.aux {
        let block = model
            .block(stage)
            .ok_or_else(|| Error::Config(format!("aux output for non-injected stage {stage}")))?;
        let l = block.aux_loss(g, probs, masks, &model.config().scheme)?;
        let weighted = g.scale(l.var, sc(lambda1));
        total = g.add(total, weighted)?;
        aux.push((stage, l));
    }
    Ok(TotalLoss { var: total, ce, aux })
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar = f32> {
    pub iteration: usize,
    pub momentum_buffers: ParamMap<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamMap<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        TrainState {
            iteration: 0,
            momentum_buffers: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            rng,
        }
    }

    /// Applies one update. Every gradient must be finite; a missing gradient
    /// counts as zero.
    pub fn step(
        &mut self,
        params: &mut ParamMap<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {name} at element {bad} (iteration {})",
                    self.iteration
                )));
            }
        }
        let (lr, mu, wd): (T, T, T) = (sc(lr), sc(momentum), sc(weight_decay));
        for (name, p) in params.iter_mut() {
            let v = self
                .momentum_buffers
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no momentum buffer for {name}")))?;
            let g = grads.get(name);
            for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                *vv = mu * *vv + (gi + wd * *pv);
                *pv = *pv - lr * *vv;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Per-sample geometric augmentation, drawn once and applied congruently to
/// image and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop: usize,
}

impl AugmentParams {
    /// Scale is uniform in the configured range but never below the value
    /// that keeps the resized image at least `crop` pixels on each side.
    pub fn sample(rng: &mut impl Rng, cfg: &TrainConfig, h: usize, w: usize) -> Self {
        let floor = cfg.crop as f64 / h.min(w) as f64;
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..cfg.scale_max)
        } else {
            cfg.scale_min
        }
        .max(floor);
        let flip = rng.gen_bool(cfg.flip_prob);
        let (nh, nw) = scaled_dims(h, w, scale, cfg.crop);
        let crop_y = rng.gen_range(0..=nh - cfg.crop);
        let crop_x = rng.gen_range(0..=nw - cfg.crop);
        AugmentParams {
            scale,
            flip,
            crop_y,
            crop_x,
            crop: cfg.crop,
        }
    }

    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let [_, h, w] = match sample.image.shape() {
            [c, h, w] => [*c, *h, *w],
            s => return Err(Error::shape(format!("expected C×H×W image, got {s:?}"))),
        };
        let (nh, nw) = scaled_dims(h, w, self.scale, self.crop);
        if self.crop_y + self.crop > nh || self.crop_x + self.crop > nw {
            return Err(Error::arg(format!(
                "crop {} at ({}, {}) exceeds resized {nh}×{nw}",
                self.crop, self.crop_y, self.crop_x
            )));
        }
        let mut out = Sample {
            image: resize_bilinear(&sample.image, nh, nw)?,
            mask: resize_nearest(&sample.mask, nh, nw),
        };
        if self.flip {
            out = flip_horizontal(&out);
        }
        crop(&out, self.crop_y, self.crop_x, self.crop)
    }
}

fn scaled_dims(h: usize, w: usize, scale: f64, min: usize) -> (usize, usize) {
    let r = |d: usize| ((d as f64 * scale).round() as usize).max(min);
    (r(h), r(w))
}

/// Source index of output position `o` under nearest resampling from `src`
/// to `dst` samples (pixel-centre aligned).
pub fn nearest_source(o: usize, src: usize, dst: usize) -> usize {
    (((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

pub fn resize_nearest(mask: &LabelMask, nh: usize, nw: usize) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    let cols: Vec<usize> = (0..nw).map(|x| nearest_source(x, w, nw)).collect();
    let mut ids = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = nearest_source(y, h, nh);
        ids.extend(cols.iter().map(|&sx| mask.get(sy, sx)));
    }
    LabelMask::new(nh, nw, ids).expect("positive dims")
}

/// Align-corners-false bilinear resize of a `C×H×W` image to arbitrary size.
pub fn resize_bilinear(image: &Tensor<f32>, nh: usize, nw: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape(format!("expected C×H×W image, got {s:?}"))),
    };
    if (nh, nw) == (h, w) {
        return Ok(image.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, if hi == lo { 0.0 } else { (src - lo as f64) as f32 })
            })
            .collect()
    };
    let ty = taps(nh, h);
    let tx = taps(nw, w);
    let d = image.data();
    let mut out = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        let p = &d[ch * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, nh, nw], out)
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let [c, h, w] = [sample.image.shape()[0], sample.mask.height(), sample.mask.width()];
    let d = sample.image.data();
    let image = Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    });
    let m = sample.mask.ids();
    let ids = (0..h * w).map(|i| m[i - i % w + (w - 1 - i % w)]).collect();
    Sample {
        image,
        mask: LabelMask::new(h, w, ids).expect("same dims"),
    }
}

pub fn crop(sample: &Sample, y0: usize, x0: usize, size: usize) -> Result<Sample> {
    let (h, w) = (sample.mask.height(), sample.mask.width());
    if y0 + size > h || x0 + size > w {
        return Err(Error::arg(format!("crop {size} at ({y0}, {x0}) exceeds {h}×{w}")));
    }
    let c = sample.image.shape()[0];
    let d = sample.image.data();
    let image = Tensor::from_fn(&[c, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        d[(ch * h + y0 + y) * w + x0 + x]
    });
    let ids = (0..size * size)
        .map(|i| sample.mask.get(y0 + i / size, x0 + i % size))
        .collect();
    Ok(Sample {
        image,
        mask: LabelMask::new(size, size, ids)?,
    })
}

pub fn augment(sample: &Sample, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = (sample.mask.height(), sample.mask.width());
    AugmentParams::sample(rng, cfg, h, w).apply(sample)
}

/// Stacks `C×H×W` images into an `N×C×H×W` batch.
pub fn stack_images<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::arg("cannot stack an empty batch"))?
        .image
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.iter().product::<usize>());
    for s in samples {
        if s.image.shape() != first.as_slice() {
            return Err(Error::shape(format!(
                "batch images differ in shape: {first:?} vs {:?}",
                s.image.shape()
            )));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let mut shape = vec![samples.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

/// One line of `train_log.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub bwbce: Vec<(Stage, f64)>,
}

impl LogRow {
    pub fn csv_header(stages: &[Stage]) -> String {
        let mut h = String::from("iter,lr,total,ce");
        for s in stages {
            h.push_str(&format!(",bwbce_{s}"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{},{},{}", self.iter, self.lr, self.total, self.ce);
        for (_, v) in &self.bwbce {
            line.push_str(&format!(",{v}"));
        }
        line
    }
}

/// Forward, loss and backward on one batch; returns the loss breakdown and
/// the gradient of every parameter.
pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[&Sample],
    lambda1: f64,
    lambda2: f64,
) -> Result<(LogRow, BTreeMap<String, Tensor<T>>)> {
    let images = stack_images::<T>(batch)?;
    let masks: Vec<LabelMask> = batch.iter().map(|s| s.mask.clone()).collect();
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = model.forward(&mut g, x)?;
    let loss = total_loss(&mut g, model, &out, &masks, lambda1, lambda2)?;
    let total = g.value(loss.var).data()[0];
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }
    g.backward(loss.var)?;
    let grads = out
        .bound
        .iter()
        .filter_map(|(name, v)| g.grad(v).map(|t| (name.to_string(), t.clone())))
        .collect();
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let row = LogRow {
        iter: 0,
        lr: 0.0,
        total: f(total),
        ce: f(loss.ce.value(&g)),
        bwbce: loss.aux.iter().map(|(s, l)| (*s, f(l.value(&g)))).collect(),
    };
    Ok((row, grads))
}

/// Trains `model` in place. `on_step` sees every iteration's log row and the
/// updated model, and may stop training by returning an error.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow, &Model<f32>) -> Result<()>,
) -> Result<TrainState<f32>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let max_iter = cfg.total_iterations(train_set.len());
    let mut state = TrainState::new(model.params(), cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while state.iteration < max_iter {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut state.rng);
                cursor = 0;
            }
            let s = &train_set[order[cursor]];
            cursor += 1;
            batch.push(if cfg.augment {
                augment(s, cfg, &mut state.rng)?
            } else {
                s.clone()
            });
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let lr = poly_lr(state.iteration, max_iter, cfg.lr0, cfg.poly_power)?;
        let (mut row, grads) = compute_gradients(model, &refs, cfg.lambda1, cfg.lambda2)?;
        row.iter = state.iteration;
        row.lr = lr;
        state.step(model.params_mut(), &grads, lr, cfg.momentum, cfg.weight_decay)?;
        on_step(&row, model)?;
    }
    Ok(state)
}

/// Confusion-matrix evaluation of full images, `batch` at a time.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], batch: usize) -> Result<EvalReport> {
    let mut report = EvalReport::new(&model.config().scheme);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let preds = model.predict(&stack_images(&refs)?)?;
        for (s, p) in chunk.iter().zip(preds) {
            let pred = LabelMask::new(s.mask.height(), s.mask.width(), p)?;
            report.accumulate(&pred, &s.mask)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, CamoConfig};

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        // 0.01 · 0.5^0.9 = 0.00535886731 (evaluated independently to 12 digits)
        assert!((poly_lr(50, 100, 0.01, 0.9).unwrap() - 0.005_358_867_312_681).abs() < 1e-12);
        assert!(poly_lr(101, 100, 0.01, 0.9).is_err());
    }

    fn one_param(v: f32) -> ParamMap<f32> {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    fn grad(v: f32) -> BTreeMap<String, Tensor<f32>> {
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn sgd_hand_trajectory() {
        // p0 = 1, grads 0.5, -0.2, 0.1, lr 0.1, μ 0.9, wd 0.01
        // v1 = 0.5 + 0.01·1 = 0.51;            p1 = 1 − 0.051 = 0.949
        // v2 = 0.459 + (−0.2 + 0.00949) = 0.26849;    p2 = 0.949 − 0.026849 = 0.922151
        // v3 = 0.241641 + (0.1 + 0.00922151) = 0.35086251; p3 = 0.922151 − 0.035086251 = 0.887064749
        let mut params = one_param(1.0);
        let mut st = TrainState::new(&params, 0);
        for g in [0.5, -0.2, 0.1] {
            st.step(&mut params, &grad(g), 0.1, 0.9, 0.01).unwrap();
        }
        assert!((params["w"].data()[0] - 0.887_064_75).abs() < 1e-6);
        assert_eq!(st.iteration, 3);
    }

    #[test]
    fn sgd_zero_grad_no_decay_is_noop() {
        let mut params = one_param(0.7);
        let mut st = TrainState::new(&params, 0);
        for _ in 0..5 {
            st.step(&mut params, &grad(0.0), 0.1, 0.9, 0.0).unwrap();
        }
        assert_eq!(params["w"].data()[0], 0.7);
    }

    #[test]
    fn sgd_decay_without_momentum_is_geometric() {
        let mut params: ParamMap<f64> = ParamMap::new();
        params.insert("w".into(), Tensor::scalar(2.0));
        let mut st = TrainState::new(&params, 0);
        let zero: BTreeMap<String, Tensor<f64>> = [("w".to_string(), Tensor::scalar(0.0))].into();
        for k in 1..=4 {
            st.step(&mut params, &zero, 0.5, 0.0, 0.1).unwrap();
            let expected = 2.0 * (1.0f64 - 0.05).powi(k);
            assert!((params["w"].data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_nan_naming_parameter() {
        let mut params = one_param(1.0);
        let mut st = TrainState::new(&params, 0);
        let err = st.step(&mut params, &grad(f32::NAN), 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains('w')));
    }

    fn small_sample() -> Sample {
        generate(
            &CamoConfig {
                size: 32,
                ..CamoConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = small_sample();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }

    #[test]
    fn unit_scale_center_crop_is_subwindow() {
        let s = small_sample();
        let p = AugmentParams {
            scale: 1.0,
            flip: false,
            crop_y: 8,
            crop_x: 8,
            crop: 16,
        };
        let out = p.apply(&s).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.mask.get(y, x), s.mask.get(y + 8, x + 8));
                for c in 0..3 {
                    assert_eq!(out.image.at(&[c, y, x]), s.image.at(&[c, y + 8, x + 8]));
                }
            }
        }
    }

    #[test]
    fn augmented_mask_follows_inverse_map() {
        let s = small_sample();
        let cfg = TrainConfig {
            crop: 32,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = AugmentParams::sample(&mut rng, &cfg, 32, 32);
            let out = p.apply(&s).unwrap();
            let n = (32.0 * p.scale).round() as usize;
            for y in 0..32 {
                for x in 0..32 {
                    let ry = y + p.crop_y;
                    let mut rx = x + p.crop_x;
                    if p.flip {
                        rx = n - 1 - rx;
                    }
                    let sy = ((ry as f64 + 0.5) * 32.0 / n as f64).floor() as usize;
                    let sx = ((rx as f64 + 0.5) * 32.0 / n as f64).floor() as usize;
                    assert_eq!(out.mask.get(y, x), s.mask.get(sy.min(31), sx.min(31)));
                }
            }
        }
    }

    #[test]
    fn scale_floor_keeps_crop_inside() {
        let s = small_sample();
        let cfg = TrainConfig {
            crop: 32,
            scale_min: 0.5,
            scale_max: 0.6,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &cfg, &mut rng).unwrap();
        assert_eq!(out.mask.height(), 32);
    }
}
