//! Named parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Parameters keyed by their checkpoint name. Sorted iteration order keeps
/// checkpoints and optimizer sweeps deterministic.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// Parameter leaves of one recorded forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every parameter as a gradient-carrying leaf on `g`.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamMap<T>) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.param(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Binds already-recorded leaves under the given names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// PRNG dedicated to one parameter, so a parameter's initial value depends
/// only on the seed and its name, not on which other parameters exist.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Uniform He-style initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub(crate) fn he_uniform<T: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

pub(crate) fn insert_conv<T: Scalar>(
    params: &mut ParamMap<T>,
    seed: u64,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let wname = format!("{prefix}.weight");
    let w = he_uniform(seed, &wname, &[c_out, c_in, k, k], c_in * k * k);
    params.insert(wname, w);
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
}
