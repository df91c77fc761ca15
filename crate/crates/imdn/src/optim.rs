//! Adam optimizer and the step-halving learning-rate schedule.

use crate::tensor::Tensor;

/// Training hyperparameters.
///
/// Defaults follow the published protocol: Adam with `beta1 = 0.9`, initial
/// learning rate `2e-4` halved every `2e5` iterations, mini-batches of 16
/// patches of 192x192 high-resolution pixels, random horizontal flips and
/// 90 degree rotations.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Halve the learning rate every this many iterations.
    pub halve_every: u64,
    pub batch_size: usize,
    /// High-resolution patch side; must be divisible by the scale factor.
    pub hr_patch: usize,
    pub augment_flip: bool,
    pub augment_rotate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            halve_every: 200_000,
            batch_size: 16,
            hr_patch: 192,
            augment_flip: true,
            augment_rotate: true,
        }
    }
}

/// `initial_lr * 2^-floor(iteration / halve_every)`.
pub fn lr_schedule(iteration: u64, config: &TrainConfig) -> f64 {
    let halvings = (iteration / config.halve_every) as i32;
    config.learning_rate * 2f64.powi(-halvings)
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
}

impl AdamState {
    pub fn new(shape: [usize; 4]) -> Self {
        AdamState {
            m: Tensor::zeros(shape[0], shape[1], shape[2], shape[3]),
            v: Tensor::zeros(shape[0], shape[1], shape[2], shape[3]),
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// `iteration` is 1-based and doubles as the bias-correction step count and
/// the schedule position.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    config: &TrainConfig,
    iteration: u64,
) {
    debug_assert!(iteration >= 1);
    debug_assert_eq!(param.shape(), grad.shape());
    let lr = lr_schedule(iteration, config);
    let b1 = config.beta1;
    let b2 = config.beta2;
    let bc1 = 1.0 - b1.powi(iteration as i32);
    let bc2 = 1.0 - b2.powi(iteration as i32);

    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}
