use ndarray::Zip;

use super::{ModelParams, TrainConfig};
use crate::error::{Error, Result};

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut zero = params.clone();
        for layer in zero.layers_mut() {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        Self {
            m: zero.clone(),
            v: zero,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if !params.same_structure(grads) || !params.same_structure(&state.m) {
        return Err(Error::Internal(
            "adam: parameter, gradient and state shapes differ".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    let (lr, eps) = (cfg.learning_rate, cfg.adam_epsilon);

    let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    let layers = params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(state.m.layers_mut().iter_mut().zip(state.v.layers_mut()));
    for ((p, g), (m, v)) in layers {
        Zip::from(&mut p.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, LayerSpec};

    fn model() -> ModelParams {
        init_model(
            &[
                LayerSpec::new(3, 2, Activation::Relu),
                LayerSpec::new(2, 2, Activation::Softmax),
            ],
            1,
        )
        .unwrap()
    }

    fn filled(m: &ModelParams, value: f64) -> ModelParams {
        let mut g = m.clone();
        for layer in g.layers_mut() {
            layer.weights.fill(value);
            layer.bias.fill(value);
        }
        g
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig::default();
        let mut m = model();
        let before = m.clone();
        let mut state = AdamState::new(&m);
        adam_step(&mut m, &filled(&before, 0.0), &mut state, &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut m = model();
        let before = m.clone();
        let mut state = AdamState::new(&m);
        adam_step(&mut m, &filled(&before, 1.0), &mut state, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = cfg.learning_rate / (1.0 + cfg.adam_epsilon);
        for (a, b) in before.layers().iter().zip(m.layers()) {
            for (x, y) in a.flat_iter().zip(b.flat_iter()) {
                assert!(((x - y) - expected).abs() < 1e-12);
                assert!(((x - y) - cfg.learning_rate).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_internal_error() {
        let cfg = TrainConfig::default();
        let mut m = model();
        let other = init_model(
            &[
                LayerSpec::new(3, 4, Activation::Relu),
                LayerSpec::new(4, 2, Activation::Softmax),
            ],
            1,
        )
        .unwrap();
        let mut state = AdamState::new(&m);
        assert!(matches!(
            adam_step(&mut m, &other, &mut state, &cfg),
            Err(Error::Internal(_))
        ));
    }
}
