//! Central finite-difference checks of the reverse-mode gradients in 64-bit
//! precision, per op and end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Model, ModelConfig};
use crate::data::camo_scheme;
use crate::error::{Error, Result};
use crate::fbnet::{BlockVariant, FbnetBlock, Stage};
use crate::label::{ClassScheme, LabelMask, IGNORE};
use crate::params::{Bound, ParamMap};
use crate::tensor::{Conv2dParams, Graph, Tensor, Var};
use crate::train::total_loss;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely rather than
/// relatively, so that round-off on near-zero entries does not dominate.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub elements: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the gradient of the scalar produced by `build` with respect to
/// every element of every input against central differences.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<(usize, f64)> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        g.value(root)
            .item()
            .ok_or_else(|| Error::shape("gradient check needs a scalar output"))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut elements = 0;
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[i].data()[j], numeric));
            elements += 1;
        }
    }
    Ok((elements, worst))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces an arbitrary-shape node to a scalar through a fixed random
/// projection, so every output element carries a distinct weight.
fn project(g: &mut Graph<f64>, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let r = g.constant(uniform(rng, &shape, -1.0, 1.0));
    let y = g.mul(v, r)?;
    Ok(g.sum(y))
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
);

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj_seed: u64 = rng.gen();
    let p = move || ChaCha8Rng::seed_from_u64(proj_seed);
    let mut cases: Vec<Case> = Vec::new();

    let conv_variants = [
        ("conv2d", Conv2dParams::default(), 3),
        (
            "conv2d stride 2 pad 1",
            Conv2dParams {
                stride: 2,
                padding: 1,
                dilation: 1,
            },
            3,
        ),
        (
            "conv2d dilation 2 pad 2",
            Conv2dParams {
                stride: 1,
                padding: 2,
                dilation: 2,
            },
            3,
        ),
        ("conv2d 1x1", Conv2dParams::default(), 1),
    ];
    for (name, params, k) in conv_variants {
        let inputs = vec![
            uniform(&mut rng, &[2, 3, 5, 6], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, k, k], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ];
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), params)?;
                project(g, y, &mut p())
            }),
        ));
    }
    cases.push((
        "linear",
        vec![
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[4, 5], -1.0, 1.0),
            uniform(&mut rng, &[5], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, &mut p())
        }),
    ));
    let x4 = |rng: &mut ChaCha8Rng| uniform(rng, &[2, 3, 3, 4], -2.0, 2.0);
    cases.push((
        "global_avg_pool",
        vec![x4(&mut rng)],
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, &mut p())
        }),
    ));
    cases.push((
        "sigmoid",
        vec![x4(&mut rng)],
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, &mut p())
        }),
    ));
    // Keep inputs away from the kink.
    let relu_in = Tensor::from_fn(&[2, 3, 3, 4], |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    cases.push((
        "relu",
        vec![relu_in],
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, &mut p())
        }),
    ));
    for factor in [2, 3] {
        cases.push((
            if factor == 2 {
                "upsample_nearest x2"
            } else {
                "upsample_nearest x3"
            },
            vec![x4(&mut rng)],
            Box::new(move |g, v| {
                let y = g.upsample_nearest(v[0], factor)?;
                project(g, y, &mut p())
            }),
        ));
        cases.push((
            if factor == 2 {
                "upsample_bilinear x2"
            } else {
                "upsample_bilinear x3"
            },
            vec![x4(&mut rng)],
            Box::new(move |g, v| {
                let y = g.upsample_bilinear(v[0], factor)?;
                project(g, y, &mut p())
            }),
        ));
    }
    for (name, bshape) in [
        ("add", vec![2, 3, 3, 4]),
        ("add broadcast", vec![3, 1, 1]),
        ("mul", vec![2, 3, 3, 4]),
        ("mul broadcast", vec![2, 1, 3, 4]),
    ] {
        let is_mul = name.starts_with("mul");
        cases.push((
            name,
            vec![x4(&mut rng), uniform(&mut rng, &bshape, -2.0, 2.0)],
            Box::new(move |g, v| {
                let y = if is_mul { g.mul(v[0], v[1])? } else { g.add(v[0], v[1])? };
                project(g, y, &mut p())
            }),
        ));
    }
    cases.push((
        "scale",
        vec![x4(&mut rng)],
        Box::new(move |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, &mut p())
        }),
    ));
    cases.push((
        "sum",
        vec![x4(&mut rng)],
        Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            Ok(g.sum(y))
        }),
    ));
    cases.push((
        "mean",
        vec![x4(&mut rng)],
        Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            Ok(g.mean(y))
        }),
    ));
    cases.push((
        "reshape",
        vec![x4(&mut rng)],
        Box::new(move |g, v| {
            let y = g.reshape(v[0], &[6, 12])?;
            project(g, y, &mut p())
        }),
    ));

    let pixels = 2 * 3 * 4;
    let targets: Vec<Option<usize>> = (0..pixels)
        .map(|_| (!rng.gen_bool(0.2)).then(|| rng.gen_range(0..5)))
        .collect();
    let weights: Vec<f64> = (0..pixels).map(|_| rng.gen_range(0.2..2.0)).collect();
    cases.push((
        "softmax_cross_entropy",
        vec![uniform(&mut rng, &[2, 5, 3, 4], -3.0, 3.0)],
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], targets.clone(), weights.clone(), 7.0)),
    ));
    let n = 2 * 3 * 3 * 4;
    let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                rng.gen_range(0.2..2.0)
            }
        })
        .collect();
    cases.push((
        "binary_cross_entropy",
        vec![uniform(&mut rng, &[2, 3, 3, 4], 0.05, 0.95)],
        Box::new(move |g, v| g.binary_cross_entropy(v[0], targets.clone(), weights.clone(), 5.0, 1e-7)),
    ));
    cases
}

/// Every differentiable op, each reduced to a scalar.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, build)| {
            let (elements, max_rel_error) = check_graph(&inputs, build)?;
            Ok(CheckResult {
                name: name.to_string(),
                seed,
                elements,
                max_rel_error,
            })
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, scheme: &ClassScheme, h: usize, w: usize) -> LabelMask {
    let c = scheme.num_classes() as u8;
    let ids = (0..h * w)
        .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..c) })
        .collect();
    LabelMask::new(h, w, ids).expect("positive dims")
}

fn check_params(
    name: &str,
    seed: u64,
    params: &ParamMap<f64>,
    extra: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let names: Vec<String> = params.keys().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = params.values().cloned().collect();
    inputs.extend(extra);
    let k = names.len();
    let (elements, max_rel_error) = check_graph(&inputs, |g, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars[..k].iter().copied()));
        build(g, &bound, &vars[k..])
    })?;
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        elements,
        max_rel_error,
    })
}

/// The full block with its auxiliary block-wise loss, differentiated with
/// respect to its input features and every block parameter.
pub fn check_block(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scheme = ClassScheme::new(4, vec![2, 3])?;
    let block = FbnetBlock {
        stage: Stage::Res3,
        channels: 3,
        num_foreground: scheme.num_foreground(),
        stride: 2,
        variant: BlockVariant::Full,
    };
    let mut params = ParamMap::new();
    block.init_params(seed, &mut params);
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let x = uniform(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let masks: Vec<LabelMask> = (0..2).map(|_| random_mask(&mut rng, &scheme, 6, 8)).collect();
    let proj_seed: u64 = rng.gen();
    check_params("fbnet block", seed, &params, vec![x], |g, bound, v| {
        let out = block.forward(g, bound, v[0])?;
        let probs = out.probs.expect("full block has an aux head");
        let aux = block.aux_loss(g, probs, &masks, &scheme)?;
        let feat = project(g, out.fused, &mut ChaCha8Rng::seed_from_u64(proj_seed))?;
        g.add(aux.var, feat)
    })
}

/// Configuration of the end-to-end check: two channels per stage and a
/// block at every stage.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![2; 4],
        inject: Stage::ALL.to_vec(),
        ..ModelConfig::default()
    }
}

/// The whole network on an 8×8 image under the combined training loss.
pub fn check_network(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(tiny_config(), seed)?;
    // Random biases and scales so no parameter sits at its symmetric init.
    for t in model.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let scheme = camo_scheme();
    let image = uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let masks = vec![random_mask(&mut rng, &scheme, 8, 8)];
    let params = model.params().clone();
    check_params("network", seed, &params, vec![image], |g, bound, v| {
        let out = model.forward_bound(g, bound.clone(), v[0])?;
        Ok(total_loss(g, &model, &out, &masks, 1.0, 1.0)?.var)
    })
}

/// All checks over `seeds`.
pub fn run(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(check_ops(s)?);
        out.push(check_block(s)?);
        out.push(check_network(s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x² is 2x; claiming the value of sum(x) instead must fail.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let (_, err) = check_graph(std::slice::from_ref(&x), |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-8);
        let (_, err) = check_graph(&[x], |g, v| {
            // A constant copy breaks the gradient path of one factor.
            let c = g.constant(g.value(v[0]).clone());
            let y = g.mul(v[0], c)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn ops_pass_seed_zero() {
        for r in check_ops(0).unwrap() {
            assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn block_passes() {
        let r = check_block(1).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
