//! The FBNet add-on block: a dual feature modulator (spatial and channel
//! sensors whose sigmoid gates rescale the feature map), an auxiliary
//! foreground head trained with block-wise BCE, and the residual fusion of
//! the modulated features back into the original ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{assign, ClassScheme, LabelMask};
use crate::loss::{bwbce, LossValue};
use crate::params::{he_uniform, insert_conv, Bound, ParamMap};
use crate::tensor::{Conv2dParams, Graph, Scalar, Tensor, Var};

/// Backbone stage an FBNet block can be attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Res2,
    Res3,
    Res4,
    Res5,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Res2, Stage::Res3, Stage::Res4, Stage::Res5];

    /// Zero-based position among the four backbone stages.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Res2 => "res2",
            Stage::Res3 => "res3",
            Stage::Res4 => "res4",
            Stage::Res5 => "res5",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::arg(format!("unknown stage {s:?}; expected one of res2, res3, res4, res5")))
    }
}

/// Which parts of the block are active. `AuxOnly` attaches the auxiliary
/// head straight to the stage features without sensors; `ModulatorOnly`
/// keeps the sensors and fusion but has no auxiliary head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    #[default]
    Full,
    AuxOnly,
    ModulatorOnly,
}

impl BlockVariant {
    pub fn has_modulator(self) -> bool {
        self != BlockVariant::AuxOnly
    }

    pub fn has_aux_head(self) -> bool {
        self != BlockVariant::ModulatorOnly
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FbnetBlock {
    pub stage: Stage,
    pub channels: usize,
    pub num_foreground: usize,
    /// Input-image pixels per feature-map cell along each axis.
    pub stride: usize,
    pub variant: BlockVariant,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// Features passed on to the next stage (`X_l + X_o`, or `X_l` without a modulator).
    pub fused: Var,
    /// Modulated features `X_o`.
    pub modulated: Option<Var>,
    pub spatial_gate: Option<Var>,
    pub channel_gate: Option<Var>,
    /// Foreground probabilities `N×Ĉ×h×w` from the auxiliary head.
    pub probs: Option<Var>,
}

impl FbnetBlock {
    pub fn prefix(&self) -> String {
        format!("fbnet.{}", self.stage)
    }

    pub fn spatial_name(&self, field: &str) -> String {
        format!("{}.spatial.{field}", self.prefix())
    }

    pub fn channel_name(&self, field: &str) -> String {
        format!("{}.channel.{field}", self.prefix())
    }

    pub fn aux_name(&self, field: &str) -> String {
        format!("{}.aux.{field}", self.prefix())
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let mut n = 0;
        if self.variant.has_modulator() {
            n += (c + 1) + (c * c + c);
        }
        if self.variant.has_aux_head() {
            n += c * self.num_foreground + self.num_foreground;
        }
        n
    }

    pub fn init_params<T: Scalar>(&self, seed: u64, params: &mut ParamMap<T>) {
        let c = self.channels;
        if self.variant.has_modulator() {
            insert_conv(params, seed, &format!("{}.spatial", self.prefix()), c, 1, 1);
            let wname = self.channel_name("weight");
            params.insert(wname.clone(), he_uniform(seed, &wname, &[c, c], c));
            params.insert(self.channel_name("bias"), Tensor::zeros(&[c]));
        }
        if self.variant.has_aux_head() {
            insert_conv(
                params,
                seed,
                &format!("{}.aux", self.prefix()),
                c,
                self.num_foreground,
                1,
            );
        }
    }

    /// Drives both sensor biases to `bias` (e.g. −40) so the gates close and
    /// the block reduces to the identity on its input.
    pub fn close_gates<T: Scalar>(&self, params: &mut ParamMap<T>, bias: T) -> Result<()> {
        for name in [self.spatial_name("bias"), self.channel_name("bias")] {
            let t = params
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing")))?;
            t.data_mut().fill(bias);
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<BlockOutput> {
        let [n, c, _, _] = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "{} block channel axis: expected {}, got {c}",
                self.stage, self.channels
            )));
        }
        let mut out = BlockOutput {
            fused: x,
            modulated: None,
            spatial_gate: None,
            channel_gate: None,
            probs: None,
        };
        let mut head_input = x;
        if self.variant.has_modulator() {
            let s = g.conv2d(
                x,
                bound.get(&self.spatial_name("weight"))?,
                Some(bound.get(&self.spatial_name("bias"))?),
                Conv2dParams::default(),
            )?;
            let spatial = g.sigmoid(s);

            let pooled = g.global_avg_pool(x)?;
            let flat = g.reshape(pooled, &[n, c])?;
            let fc = g.linear(
                flat,
                bound.get(&self.channel_name("weight"))?,
                Some(bound.get(&self.channel_name("bias"))?),
            )?;
            let gate = g.sigmoid(fc);
            let channel = g.reshape(gate, &[n, c, 1, 1])?;

            let xs = g.mul(x, spatial)?;
            let modulated = g.mul(xs, channel)?;
            out.fused = g.add(x, modulated)?;
            out.modulated = Some(modulated);
            out.spatial_gate = Some(spatial);
            out.channel_gate = Some(channel);
            head_input = modulated;
        }
        if self.variant.has_aux_head() {
            let logits = g.conv2d(
                head_input,
                bound.get(&self.aux_name("weight"))?,
                Some(bound.get(&self.aux_name("bias"))?),
                Conv2dParams::default(),
            )?;
            out.probs = Some(g.sigmoid(logits));
        }
        Ok(out)
    }

    /// Block-wise BCE of the auxiliary prediction against labels assigned
    /// from full-resolution masks at this block's stride.
    pub fn aux_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        probs: Var,
        masks: &[LabelMask],
        scheme: &ClassScheme,
    ) -> Result<LossValue> {
        let [_, _, h, w] = g.value(probs).dims4()?;
        let mut labels = Vec::with_capacity(masks.len());
        for m in masks {
            if (m.height(), m.width()) != (h * self.stride, w * self.stride) {
                return Err(Error::shape(format!(
                    "{} aux loss: mask {}×{} does not match {h}×{w} at stride {}",
                    self.stage,
                    m.height(),
                    m.width(),
                    self.stride
                )));
            }
            labels.push(assign(m, scheme, self.stride)?);
        }
        bwbce(g, probs, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamMap;
    use proptest::prelude::*;

    fn block(variant: BlockVariant) -> FbnetBlock {
        FbnetBlock {
            stage: Stage::Res5,
            channels: 3,
            num_foreground: 2,
            stride: 2,
            variant,
        }
    }

    fn input(seed: u64) -> Tensor<f64> {
        let mut rng = crate::params::param_rng(seed, "input");
        Tensor::from_fn(&[2, 3, 4, 4], |_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
    }

    #[test]
    fn zero_sensors_give_quarter_gain() {
        let b = block(BlockVariant::Full);
        let mut params: ParamMap<f64> = ParamMap::new();
        b.init_params(1, &mut params);
        for t in params.values_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let xt = input(3);
        let x = g.constant(xt.clone());
        let out = b.forward(&mut g, &bound, x).unwrap();
        let xo = g.value(out.modulated.unwrap());
        let fused = g.value(out.fused);
        for ((&v, &o), &f) in xt.data().iter().zip(xo.data()).zip(fused.data()) {
            assert!((o - 0.25 * v).abs() < 1e-15);
            assert!((f - 1.25 * v).abs() < 1e-15);
        }
        assert!(g.value(out.probs.unwrap()).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn closed_gates_are_identity() {
        let b = block(BlockVariant::Full);
        let mut params: ParamMap<f64> = ParamMap::new();
        b.init_params(5, &mut params);
        b.close_gates(&mut params, -40.0).unwrap();
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let xt = input(9);
        let x = g.constant(xt.clone());
        let out = b.forward(&mut g, &bound, x).unwrap();
        assert!(g.value(out.fused).max_abs_diff(&xt).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let b = block(BlockVariant::Full);
        let mut params: ParamMap<f64> = ParamMap::new();
        b.init_params(1, &mut params);
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(matches!(b.forward(&mut g, &bound, x), Err(Error::Shape(_))));
    }

    #[test]
    fn variants_expose_expected_outputs() {
        for (variant, modulated, probs) in [
            (BlockVariant::Full, true, true),
            (BlockVariant::AuxOnly, false, true),
            (BlockVariant::ModulatorOnly, true, false),
        ] {
            let b = block(variant);
            let mut params: ParamMap<f64> = ParamMap::new();
            b.init_params(1, &mut params);
            assert_eq!(params.values().map(|t| t.len()).sum::<usize>(), b.param_count());
            let mut g = Graph::new();
            let bound = Bound::bind(&mut g, &params);
            let x = g.constant(input(1));
            let out = b.forward(&mut g, &bound, x).unwrap();
            assert_eq!(out.modulated.is_some(), modulated);
            assert_eq!(out.probs.is_some(), probs);
            if variant == BlockVariant::AuxOnly {
                assert_eq!(out.fused, x);
            }
        }
    }

    #[test]
    fn aux_head_gets_no_gradient_from_fused_path() {
        let b = block(BlockVariant::Full);
        let mut params: ParamMap<f64> = ParamMap::new();
        b.init_params(2, &mut params);
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let x = g.constant(input(4));
        let out = b.forward(&mut g, &bound, x).unwrap();
        let aux_w = bound.get(&b.aux_name("weight")).unwrap();
        let spatial_w = bound.get(&b.spatial_name("weight")).unwrap();
        assert!(!g.depends_on(out.fused, aux_w));
        assert!(g.depends_on(out.fused, spatial_w));
        assert!(g.depends_on(out.probs.unwrap(), spatial_w));
        let s = g.sum(out.fused);
        g.backward(s).unwrap();
        assert!(g.grad(aux_w).is_none());
        assert!(g.grad(spatial_w).is_some());
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("RES4".parse::<Stage>().unwrap(), Stage::Res4);
        assert!("res6".parse::<Stage>().is_err());
    }

    proptest! {
        #[test]
        fn modulation_is_a_sub_unit_gain(seed in 0u64..1000) {
            let b = block(BlockVariant::Full);
            let mut params: ParamMap<f64> = ParamMap::new();
            b.init_params(seed, &mut params);
            let mut g = Graph::new();
            let bound = Bound::bind(&mut g, &params);
            let xt = input(seed + 17);
            let x = g.constant(xt.clone());
            let out = b.forward(&mut g, &bound, x).unwrap();
            let xo = g.value(out.modulated.unwrap());
            for (&v, &o) in xt.data().iter().zip(xo.data()) {
                prop_assert!(o.abs() < v.abs() || v == 0.0);
                prop_assert!(o.signum() == v.signum() || v == 0.0);
            }
            let ss = g.value(out.spatial_gate.unwrap());
            let sc = g.value(out.channel_gate.unwrap());
            prop_assert!(ss.data().iter().chain(sc.data()).all(|&s| s > 0.0 && s < 1.0));
        }
    }
}
