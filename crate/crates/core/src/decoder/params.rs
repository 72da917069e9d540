use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::attention::{self, AttentionDims, AttentionParams};
use crate::graphcore::{Bindings, GradientMap, Tensor};

pub const EMBED: &str = "embed";
pub const LSTM_W: &str = "lstm_w";
pub const LSTM_B: &str = "lstm_b";
pub const INIT_C_W1: &str = "init_c_w1";
pub const INIT_C_B1: &str = "init_c_b1";
pub const INIT_C_W2: &str = "init_c_w2";
pub const INIT_C_B2: &str = "init_c_b2";
pub const INIT_H_W1: &str = "init_h_w1";
pub const INIT_H_B1: &str = "init_h_b1";
pub const INIT_H_W2: &str = "init_h_w2";
pub const INIT_H_B2: &str = "init_h_b2";
pub const OUT_O: &str = "out_o";
pub const OUT_H: &str = "out_h";
pub const OUT_Z: &str = "out_z";

/// Model sizes: vocabulary K, embedding m, LSTM n, feature D, attention A.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub features: usize,
    pub attn: usize,
}

impl ModelDims {
    pub fn attention(&self) -> AttentionDims {
        AttentionDims {
            features: self.features,
            hidden: self.hidden,
            attn: self.attn,
        }
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let Self {
            vocab: k,
            embed: m,
            hidden: n,
            features: d,
            attn: a,
        } = *self;
        vec![
            (EMBED, vec![m, k]),
            (LSTM_W, vec![m + n + d, 4 * n]),
            (LSTM_B, vec![4 * n]),
            (INIT_C_W1, vec![d, n]),
            (INIT_C_B1, vec![n]),
            (INIT_C_W2, vec![n, n]),
            (INIT_C_B2, vec![n]),
            (INIT_H_W1, vec![d, n]),
            (INIT_H_B1, vec![n]),
            (INIT_H_W2, vec![n, n]),
            (INIT_H_B2, vec![n]),
            (OUT_O, vec![k, m]),
            (OUT_H, vec![m, n]),
            (OUT_Z, vec![m, d]),
            (attention::PROJ_ANNOTATION, vec![d, a]),
            (attention::PROJ_HIDDEN, vec![n, a]),
            (attention::SCORER, vec![a]),
            (attention::GATE_WEIGHT, vec![n]),
            (attention::GATE_BIAS, vec![1]),
        ]
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let all = [self.vocab, self.embed, self.hidden, self.features, self.attn];
        if all.contains(&0) {
            return Err(DecoderError::InvalidDims(*self));
        }
        Ok(())
    }
}

/// All learned tensors of the decoder, keyed by name.
///
/// The stacked LSTM affine map takes `[E y_{t-1}; h_{t-1}; z_t]` (in that
/// order) to `4n` pre-activations laid out as gate blocks `i, f, o, g`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    dims: ModelDims,
    tensors: BTreeMap<String, Tensor>,
}

impl DecoderParams {
    pub fn zeros(dims: ModelDims) -> Result<Self, DecoderError> {
        dims.validate()?;
        let tensors = dims
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name.to_string(), Tensor::zeros(&shape)))
            .collect();
        Ok(Self { dims, tensors })
    }

    /// Glorot-uniform matrices and zero biases, with the forget-gate bias
    /// block set to 1.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self, DecoderError> {
        let mut params = Self::zeros(dims)?;
        for (name, t) in params.tensors.iter_mut() {
            if t.rank() == 2 {
                let (fan_in, fan_out) = (t.rows(), t.cols());
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                for v in t.data_mut() {
                    *v = dist.sample(rng);
                }
            } else if name == attention::SCORER || name == attention::GATE_WEIGHT {
                let limit = (3.0 / t.len() as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                for v in t.data_mut() {
                    *v = dist.sample(rng);
                }
            }
        }
        let n = dims.hidden;
        params.tensors.get_mut(LSTM_B).unwrap().data_mut()[n..2 * n].fill(1.0);
        Ok(params)
    }

    /// Builds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(dims: ModelDims, mut tensors: BTreeMap<String, Tensor>) -> Result<Self, DecoderError> {
        dims.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in dims.param_shapes() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| DecoderError::MissingParam(name.to_string()))?;
            if t.shape() != shape.as_slice() {
                return Err(DecoderError::ParamShape {
                    name: name.to_string(),
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(DecoderError::NonFiniteParam(name.to_string()));
            }
            out.insert(name.to_string(), t);
        }
        if let Some(extra) = tensors.into_keys().next() {
            return Err(DecoderError::UnknownParam(extra));
        }
        Ok(Self { dims, tensors: out })
    }

    /// Recovers the dimensions from a full set of named tensors.
    pub fn infer_dims(tensors: &BTreeMap<String, Tensor>) -> Result<ModelDims, DecoderError> {
        let shape = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| DecoderError::MissingParam(name.to_string()))
        };
        let embed = shape(EMBED)?;
        let out_z = shape(OUT_Z)?;
        let proj_h = shape(attention::PROJ_HIDDEN)?;
        if embed.len() != 2 || out_z.len() != 2 || proj_h.len() != 2 {
            return Err(DecoderError::MissingParam("matrix-shaped parameters".into()));
        }
        Ok(ModelDims {
            vocab: embed[1],
            embed: embed[0],
            hidden: proj_h[0],
            features: out_z[1],
            attn: proj_h[1],
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn attention(&self) -> AttentionParams {
        let t = |n: &str| self.tensors[n].clone();
        AttentionParams {
            proj_annotation: t(attention::PROJ_ANNOTATION),
            proj_hidden: t(attention::PROJ_HIDDEN),
            scorer: t(attention::SCORER),
            gate_weight: t(attention::GATE_WEIGHT),
            gate_bias: t(attention::GATE_BIAS),
        }
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (name, t) in &self.tensors {
            bindings.bind(name.clone(), t);
        }
    }

    /// A zero gradient for every parameter.
    pub fn zero_gradients(&self) -> GradientMap {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect()
    }

    /// First parameter block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}
