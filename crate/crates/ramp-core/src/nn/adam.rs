//! Adam parameter updates with bias correction.

use crate::error::{Error, Result};
use crate::nn::{GradientSet, MlpModel};

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state for one model. Updates are deterministic given the state and
/// the gradient sequence.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    step: u64,
    first_moment: GradientSet,
    second_moment: GradientSet,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, model: &MlpModel) -> Self {
        Adam {
            cfg,
            step: 0,
            first_moment: GradientSet::zeros_like(model),
            second_moment: GradientSet::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &GradientSet) -> Result<()> {
        if !grads.is_congruent_with(model) {
            return Err(Error::InvalidConfig(
                "gradient set does not match model shape".into(),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);

        for (li, layer) in model.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers()[li];
            update_slice(
                layer.weights_mut(),
                &g.weights,
                &mut self.first_moment.layers_mut()[li].weights,
                &mut self.second_moment.layers_mut()[li].weights,
                c,
                bias1,
                bias2,
            );
            update_slice(
                layer.bias_mut(),
                &g.bias,
                &mut self.first_moment.layers_mut()[li].bias,
                &mut self.second_moment.layers_mut()[li].bias,
                c,
                bias1,
                bias2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    c: OptimizerConfig,
    bias1: f64,
    bias2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
    }
}
