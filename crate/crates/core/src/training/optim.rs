use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::decoder::DecoderParams;
use crate::graphcore::{GradientMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Decay of the squared-gradient average (RMSProp).
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 0.005,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !unit(self.decay) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(TrainError::Config("decay, beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(TrainError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Accumulators of an adaptive optimizer, one per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// First moments (Adam only).
    pub first: BTreeMap<String, Tensor>,
    /// Squared-gradient averages.
    pub second: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &DecoderParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let first = match config.kind {
            OptimizerKind::Adam => zeros.clone(),
            OptimizerKind::Rmsprop => BTreeMap::new(),
        };
        Self {
            config,
            first,
            second: zeros,
            step: 0,
        }
    }
}

/// One descent step on `grads` (gradients of a loss to minimise). Blocks
/// without a gradient are treated as having a zero gradient.
pub fn optimizer_step(
    params: &DecoderParams,
    grads: &GradientMap,
    state: &OptimizerState,
) -> Result<(DecoderParams, OptimizerState), TrainError> {
    for (name, g) in grads.iter() {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            _ => return Err(TrainError::GradientShape { param: name.clone() }),
        }
    }
    let mut next = params.clone();
    let mut st = state.clone();
    st.step += 1;
    let c = st.config;
    let (bias1, bias2) = (1.0 - c.beta1.powi(st.step as i32), 1.0 - c.beta2.powi(st.step as i32));
    for (name, p) in next.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let second = st
            .second
            .get_mut(name)
            .ok_or_else(|| TrainError::GradientShape { param: name.clone() })?;
        match c.kind {
            OptimizerKind::Rmsprop => {
                for ((w, &gi), s) in p.data_mut().iter_mut().zip(g.data()).zip(second.data_mut()) {
                    *s = c.decay * *s + (1.0 - c.decay) * gi * gi;
                    *w -= c.learning_rate * gi / (s.sqrt() + c.epsilon);
                }
            }
            OptimizerKind::Adam => {
                let first = st
                    .first
                    .get_mut(name)
                    .ok_or_else(|| TrainError::GradientShape { param: name.clone() })?;
                for (((w, &gi), m), v) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(first.data_mut())
                    .zip(second.data_mut())
                {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                }
            }
        }
    }
    Ok((next, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> DecoderParams {
        let dims = ModelDims {
            vocab: 4,
            embed: 2,
            hidden: 2,
            features: 3,
            attn: 2,
        };
        DecoderParams::random(dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn config(kind: OptimizerKind) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            learning_rate: 0.01,
            ..OptimizerConfig::default()
        }
    }

    fn ramp(p: &DecoderParams) -> GradientMap {
        p.iter()
            .enumerate()
            .map(|(k, (n, t))| {
                let data = (0..t.len()).map(|i| ((k * 31 + i) as f64 * 0.37).sin()).collect();
                (n.clone(), Tensor::new(t.shape(), data).unwrap())
            })
            .collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let p = params();
        for kind in [OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let st = OptimizerState::new(config(kind), &p);
            let (q, _) = optimizer_step(&p, &p.zero_gradients(), &st).unwrap();
            assert_eq!(q, p);
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let p = params();
        let g = ramp(&p);
        let cfg = config(OptimizerKind::Adam);
        let (q, st) = optimizer_step(&p, &g, &OptimizerState::new(cfg, &p)).unwrap();
        assert_eq!(st.step, 1);
        for (name, t) in q.iter() {
            for ((w1, w0), gi) in t
                .data()
                .iter()
                .zip(p.get(name).unwrap().data())
                .zip(g.get(name).unwrap().data())
            {
                // m_hat = g and v_hat = g^2 after bias correction
                let m_hat = (1.0 - cfg.beta1) * gi / (1.0 - cfg.beta1);
                let v_hat = (1.0 - cfg.beta2) * gi * gi / (1.0 - cfg.beta2);
                let expected = w0 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                assert!((w1 - expected).abs() < 1e-15, "{name}");
            }
        }
    }

    #[test]
    fn rmsprop_first_step_by_hand() {
        let p = params();
        let g = ramp(&p);
        let cfg = config(OptimizerKind::Rmsprop);
        let (q, _) = optimizer_step(&p, &g, &OptimizerState::new(cfg, &p)).unwrap();
        let (name, t) = q.iter().next().unwrap();
        let (w0, gi) = (p.get(name).unwrap().data()[0], g.get(name).unwrap().data()[0]);
        let s = (1.0 - cfg.decay) * gi * gi;
        assert!((t.data()[0] - (w0 - cfg.learning_rate * gi / (s.sqrt() + cfg.epsilon))).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let p = params();
        let g = ramp(&p);
        let st = OptimizerState::new(config(OptimizerKind::Adam), &p);
        assert_eq!(
            optimizer_step(&p, &g, &st).unwrap(),
            optimizer_step(&p, &g, &st).unwrap()
        );
    }

    #[test]
    fn mismatched_gradient_rejected() {
        let p = params();
        let mut g = GradientMap::new();
        g.insert("embed", Tensor::zeros(&[1, 1]));
        let st = OptimizerState::new(config(OptimizerKind::Rmsprop), &p);
        assert!(matches!(
            optimizer_step(&p, &g, &st),
            Err(TrainError::GradientShape { .. })
        ));
    }
}
