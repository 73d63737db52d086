use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::func::softplus_inv;
use crate::nd::{Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::vae::config::{Architecture, NoiseModel, VaeConfig};

/// Description of the initialisation, stored with checkpoints.
pub const INIT_SCHEME: &str =
    "weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; layer-norm gain 1, shift 0; noise s = softplus^-1(1)";

/// Every trainable array of one model, keyed by a stable name.
///
/// Names starting with `enc.` belong to the inference network; `dec.` and
/// `noise.` are generative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub tensors: IndexMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Weight,
    Bias,
    Gain,
    Noise,
}

/// True for decoder and noise parameters (θ); false for the encoder (φ).
pub fn is_generative(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("noise.")
}

pub fn is_encoder(name: &str) -> bool {
    name.starts_with("enc.")
}

fn layout(cfg: &VaeConfig) -> Vec<(String, Vec<usize>, Kind)> {
    let (p, d, h) = (cfg.feature_dim, cfg.latent_dim, cfg.hidden_dim);
    let mut out = Vec::new();
    let linear = |name: String, o: usize, i: usize, out: &mut Vec<_>| {
        out.push((format!("{name}.w"), vec![o, i], Kind::Weight));
        out.push((format!("{name}.b"), vec![o], Kind::Bias));
    };
    for (side, input, output) in [("enc", p, d), ("dec", d, p)] {
        match cfg.architecture {
            Architecture::Residual => {
                linear(format!("{side}.in"), h, input, &mut out);
                for i in 0..cfg.num_blocks {
                    out.push((format!("{side}.block{i}.ln.gain"), vec![h], Kind::Gain));
                    out.push((format!("{side}.block{i}.ln.shift"), vec![h], Kind::Bias));
                    linear(format!("{side}.block{i}.fc1"), h, h, &mut out);
                    linear(format!("{side}.block{i}.fc2"), h, h, &mut out);
                }
            }
            Architecture::Mlp => {
                for i in 0..cfg.num_blocks {
                    let fan_in = if i == 0 { input } else { h };
                    linear(format!("{side}.hidden{i}"), h, fan_in, &mut out);
                }
            }
        }
        linear(format!("{side}.mu"), output, h, &mut out);
        if side == "enc" || cfg.noise_model == NoiseModel::Conditional {
            linear(format!("{side}.sigma"), output, h, &mut out);
        }
    }
    match cfg.noise_model {
        NoiseModel::LearnableScalar => out.push(("noise.s".into(), vec![1], Kind::Noise)),
        NoiseModel::LearnableVector => out.push(("noise.s".into(), vec![p], Kind::Noise)),
        NoiseModel::FixedScalar { .. } | NoiseModel::Conditional => {}
    }
    out
}

impl VaeParams {
    pub fn init(config: &VaeConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape, kind) in layout(config) {
            let t = match kind {
                Kind::Weight => {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                        .collect();
                    Tensor::new(shape, data)?
                }
                Kind::Bias => Tensor::zeros(&shape),
                Kind::Gain => Tensor::full(&shape, 1.0),
                Kind::Noise => Tensor::full(&shape, softplus_inv(1.0)),
            };
            tensors.insert(name, t);
        }
        Ok(Self { config: config.clone(), tensors })
    }

    /// Every array zero, including layer-norm gains and noise parameters.
    pub fn zeros(config: &VaeConfig) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))
    }

    /// Replace one array, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{name}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the config, e.g. after loading.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = layout(&self.config);
        if want.len() != self.tensors.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter arrays, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in want {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Schema(format!("{name}: shape {:?} != {:?}", t.shape(), shape)));
            }
            t.ensure_finite(&name)?;
        }
        Ok(())
    }

    /// Record every array on `tape`; those accepted by `trainable` become leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape.
#[derive(Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
