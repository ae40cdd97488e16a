//! A four-stage dilated FCN with optional FBNet blocks after any stage and
//! a 1×1 classification head upsampled back to input resolution.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::camo_scheme;
use crate::error::{Error, Result};
use crate::fbnet::{BlockOutput, BlockVariant, FbnetBlock, Stage};
use crate::label::ClassScheme;
use crate::params::{insert_conv, Bound, ParamMap};
use crate::tensor::{read_checkpoint, sc, write_checkpoint, Conv2dParams, Graph, Scalar, Tensor, Var};

/// Images in `[0, 1]` are standardized as `(x − INPUT_MEAN) / INPUT_STD`
/// before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Cumulative output stride after each stage.
    pub stage_strides: Vec<usize>,
    pub inject: Vec<Stage>,
    #[serde(default)]
    pub variant: BlockVariant,
    pub scheme: ClassScheme,
}

fn default_in_channels() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            stage_channels: vec![8, 16, 32, 32],
            stage_strides: vec![4, 8, 8, 8],
            inject: vec![Stage::Res5],
            variant: BlockVariant::Full,
            scheme: camo_scheme(),
        }
    }
}

/// One 3×3 convolution inside a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvPlan {
    fn params(&self) -> Conv2dParams {
        Conv2dParams {
            stride: self.stride,
            padding: self.dilation,
            dilation: self.dilation,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    /// Two convolutions per stage. A stage that raises the output stride by
    /// 2 or 4 does so with stride-2 convolutions; a stage that keeps it
    /// doubles the dilation instead.
    pub fn layout(&self) -> Result<Vec<[ConvPlan; 2]>> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stage_channels.len() != 4 || self.stage_strides.len() != 4 {
            return cfg(format!(
                "need exactly 4 stages, got {} channel entries and {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            ));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return cfg("channel counts must be positive".into());
        }
        let unique: BTreeSet<_> = self.inject.iter().collect();
        if unique.len() != self.inject.len() {
            return cfg(format!("duplicate injection stage in {:?}", self.inject));
        }
        let mut plans = Vec::with_capacity(4);
        let (mut prev_stride, mut dilation, mut c_in) = (1usize, 1usize, self.in_channels);
        for (k, (&stride, &c)) in self.stage_strides.iter().zip(&self.stage_channels).enumerate() {
            if stride % prev_stride != 0 {
                return cfg(format!(
                    "stage {} stride {stride} is not a multiple of {prev_stride}",
                    k + 1
                ));
            }
            let ratio = stride / prev_stride;
            let (s1, s2) = match ratio {
                1 => {
                    dilation *= 2;
                    (1, 1)
                }
                2 | 4 if dilation > 1 => {
                    return cfg(format!("stage {} strides again after dilation began", k + 1));
                }
                2 => (2, 1),
                4 => (2, 2),
                _ => return cfg(format!("stage {} stride ratio {ratio} must be 1, 2 or 4", k + 1)),
            };
            plans.push([
                ConvPlan {
                    c_in,
                    c_out: c,
                    stride: s1,
                    dilation,
                },
                ConvPlan {
                    c_in: c,
                    c_out: c,
                    stride: s2,
                    dilation,
                },
            ]);
            prev_stride = stride;
            c_in = c;
        }
        Ok(plans)
    }

    pub fn output_stride(&self) -> usize {
        self.stage_strides.last().copied().unwrap_or(1)
    }

    /// Stages whose block carries an auxiliary head, in forward order.
    pub fn aux_stages(&self) -> Vec<Stage> {
        self.blocks()
            .into_iter()
            .filter(|b| b.variant.has_aux_head())
            .map(|b| b.stage)
            .collect()
    }

    pub fn blocks(&self) -> Vec<FbnetBlock> {
        let mut stages = self.inject.clone();
        stages.sort();
        stages
            .into_iter()
            .map(|stage| FbnetBlock {
                stage,
                channels: self.stage_channels[stage.index()],
                num_foreground: self.scheme.num_foreground(),
                stride: self.stage_strides[stage.index()],
                variant: self.variant,
            })
            .collect()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let convs: usize = self
            .layout()?
            .iter()
            .flatten()
            .map(|p| p.c_in * p.c_out * 9 + p.c_out)
            .sum();
        let scales: usize = self.stage_channels.iter().sum();
        let head = self.stage_channels[3] * self.scheme.num_classes() + self.scheme.num_classes();
        let blocks: usize = self.blocks().iter().map(FbnetBlock::param_count).sum();
        Ok(convs + scales + head + blocks)
    }
}

/// Final logits plus each injected block's auxiliary prediction and
/// modulated features, all as nodes on the forward graph.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// `N×C_total×H×W` logits at input resolution.
    pub logits: Var,
    /// `(stage, P)` for every block with an auxiliary head.
    pub aux: Vec<(Stage, Var)>,
    /// `(stage, X_o)` for every block with a modulator.
    pub modulated: Vec<(Stage, Var)>,
    pub bound: Bound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamMap<T>,
}

pub(crate) fn conv_name(stage: usize, conv: usize) -> String {
    format!("backbone.stage{}.conv{}", stage + 1, conv + 1)
}

pub(crate) fn scale_name(stage: usize) -> String {
    format!("backbone.stage{}.scale", stage + 1)
}

impl<T: Scalar> Model<T> {
    /// Deterministically initialized model; each parameter's values depend
    /// only on `seed` and the parameter's name.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = config.layout()?;
        let mut params = ParamMap::new();
        for (k, stage) in layout.iter().enumerate() {
            for (j, p) in stage.iter().enumerate() {
                insert_conv(&mut params, seed, &conv_name(k, j), p.c_in, p.c_out, 3);
            }
            params.insert(scale_name(k), Tensor::ones(&[config.stage_channels[k], 1, 1]));
        }
        insert_conv(
            &mut params,
            seed,
            "head",
            config.stage_channels[3],
            config.scheme.num_classes(),
            1,
        );
        for block in config.blocks() {
            block.init_params(seed, &mut params);
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn block(&self, stage: Stage) -> Option<FbnetBlock> {
        self.config.blocks().into_iter().find(|b| b.stage == stage)
    }

    /// Closes the sensor gates of every injected block (see
    /// [`FbnetBlock::close_gates`]).
    pub fn close_gates(&mut self, bias: T) -> Result<()> {
        for b in self.config.blocks() {
            if b.variant.has_modulator() {
                b.close_gates(&mut self.params, bias)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records a forward pass of an `N×C_in×H×W` batch.
    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<ForwardResult> {
        let bound = Bound::bind(g, &self.params);
        self.forward_bound(g, bound, image)
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, bound: Bound, image: Var) -> Result<ForwardResult> {
        let [_, c, h, w] = g.value(image).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "image channel axis: expected {}, got {c}",
                self.config.in_channels
            )));
        }
        let os = self.config.output_stride();
        if h % os != 0 || w % os != 0 {
            return Err(Error::arg(format!(
                "image {h}×{w} is not divisible by output stride {os}"
            )));
        }
        let layout = self.config.layout()?;
        let blocks = self.config.blocks();
        let mut aux = Vec::new();
        let mut modulated = Vec::new();
        let shift = g.constant(Tensor::scalar(sc(-INPUT_MEAN)));
        let centred = g.add(image, shift)?;
        let mut x = g.scale(centred, sc(1.0 / INPUT_STD));
        for (k, stage) in layout.iter().enumerate() {
            for (j, plan) in stage.iter().enumerate() {
                let name = conv_name(k, j);
                let wv = bound.get(&format!("{name}.weight"))?;
                let bv = bound.get(&format!("{name}.bias"))?;
                let y = g.conv2d(x, wv, Some(bv), plan.params())?;
                x = g.relu(y);
            }
            x = g.mul(x, bound.get(&scale_name(k))?)?;
            if let Some(block) = blocks.iter().find(|b| b.stage.index() == k) {
                let BlockOutput {
                    fused,
                    modulated: xo,
                    probs,
                    ..
                } = block.forward(g, &bound, x)?;
                if let Some(p) = probs {
                    aux.push((block.stage, p));
                }
                if let Some(xo) = xo {
                    modulated.push((block.stage, xo));
                }
                x = fused;
            }
        }
        let logits = g.conv2d(
            x,
            bound.get("head.weight")?,
            Some(bound.get("head.bias")?),
            Conv2dParams::default(),
        )?;
        let logits = g.upsample_bilinear(logits, os)?;
        Ok(ForwardResult {
            logits,
            aux,
            modulated,
            bound,
        })
    }

    /// Class-id prediction for each image of a batch, as flat H×W maps.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x)?;
        let z = g.value(out.logits);
        let [n, c, h, w] = z.dims4()?;
        let hw = h * w;
        Ok((0..n)
            .map(|b| {
                (0..hw)
                    .map(|p| {
                        let mut best = 0;
                        for ch in 1..c {
                            if z.data()[(b * c + ch) * hw + p] > z.data()[(b * c + best) * hw + p] {
                                best = ch;
                            }
                        }
                        best as u8
                    })
                    .collect()
            })
            .collect())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.params).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_checkpoint(&mut out, &self.params)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint into a freshly built model of `config`; every
    /// parameter must be present with the expected shape.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let loaded: ParamMap<T> = read_checkpoint(&mut BufReader::new(file))?;
        let mut model = Model::build(config, 0)?;
        for (name, t) in model.params.iter_mut() {
            let src = loaded
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint {} lacks {name}", path.display())))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        if let Some(extra) = loaded.keys().find(|k| !model.params.contains_key(*k)) {
            return Err(Error::Config(format!(
                "checkpoint {} has unexpected tensor {extra}",
                path.display()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(inject: Vec<Stage>) -> ModelConfig {
        ModelConfig {
            stage_channels: vec![2, 2, 2, 2],
            inject,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_layout() {
        let plans = ModelConfig::default().layout().unwrap();
        let strides: Vec<_> = plans.iter().map(|s| (s[0].stride, s[1].stride)).collect();
        let dil: Vec<_> = plans.iter().map(|s| s[0].dilation).collect();
        assert_eq!(strides, vec![(2, 2), (2, 1), (1, 1), (1, 1)]);
        assert_eq!(dil, vec![1, 1, 2, 4]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::default();
        c.stage_channels.clear();
        c.stage_strides.clear();
        assert!(matches!(Model::<f32>::build(c, 0), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.stage_strides = vec![4, 8, 12, 12];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.stage_strides = vec![4, 4, 8, 8];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.inject = vec![Stage::Res5, Stage::Res5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shapes_and_aux() {
        for inject in [vec![], vec![Stage::Res5], Stage::ALL.to_vec()] {
            let cfg = tiny(inject.clone());
            let model = Model::<f32>::build(cfg, 1).unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[2, 3, 16, 24], 0.5));
            let out = model.forward(&mut g, x).unwrap();
            assert_eq!(g.value(out.logits).shape(), &[2, 8, 16, 24]);
            assert_eq!(out.aux.len(), inject.len());
            for (stage, p) in &out.aux {
                let s = model.config().stage_strides[stage.index()];
                assert_eq!(g.value(*p).shape(), &[2, 5, 16 / s, 24 / s]);
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let model = Model::<f32>::build(tiny(vec![]), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 12, 16]));
        assert!(matches!(model.forward(&mut g, x), Err(Error::Argument(_))));
    }

    #[test]
    fn checkpoint_names() {
        let model = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
        let names: Vec<_> = model.params().keys().cloned().collect();
        assert!(names.contains(&"backbone.stage1.conv1.weight".to_string()));
        assert!(names.contains(&"backbone.stage4.conv2.bias".to_string()));
        assert!(names.contains(&"head.weight".to_string()));
        assert!(names.contains(&"fbnet.res5.spatial.weight".to_string()));
        assert!(names.contains(&"fbnet.res5.channel.bias".to_string()));
        assert!(names.contains(&"fbnet.res5.aux.weight".to_string()));
    }
}
