//! Adam with global-norm clipping, plus learning-rate schedules.
//!
//! The optimizer operates on flat `f64` tensors so every trainable
//! struct in the crate can share it. Weight decay is decoupled
//! (applied to parameters directly, not folded into the gradient).

use serde::{Deserialize, Serialize};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("total_steps must be >= 1")]
    ZeroTotalSteps,
    #[error("non-finite gradient in tensor {tensor} at index {index}")]
    BadGradient { tensor: usize, index: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Triangular,
}

/// Hyperparameters shared by every training loop in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Warmup length in instances; divided by batch_size (rounded up)
    /// to get warmup steps.
    pub warmup_instances: usize,
    pub schedule: Schedule,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig::retriever_default()
    }
}

impl TrainConfig {
    /// Defaults for contrastive retriever training.
    pub fn retriever_default() -> TrainConfig {
        TrainConfig {
            learn_rate: 5e-5,
            batch_size: 128,
            epochs: 2,
            warmup_instances: 0,
            schedule: Schedule::Linear,
            max_grad_norm: 1.0,
            weight_decay: 0.0,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }

    /// Defaults for generator training.
    pub fn generator_default() -> TrainConfig {
        TrainConfig {
            learn_rate: 3e-5,
            batch_size: 128,
            epochs: 1,
            warmup_instances: 10_000,
            schedule: Schedule::Triangular,
            ..TrainConfig::retriever_default()
        }
    }

    /// Defaults for few-shot adaptation (tiny batches, more epochs).
    pub fn few_shot_default() -> TrainConfig {
        TrainConfig {
            learn_rate: 3e-6,
            batch_size: 1,
            epochs: 3,
            warmup_instances: 0,
            schedule: Schedule::Linear,
            ..TrainConfig::retriever_default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learn_rate >= 0.0) || !self.learn_rate.is_finite() {
            return Err(OptimError::BadConfig("learn_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(OptimError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(OptimError::BadConfig("epochs must be >= 1".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(OptimError::BadConfig("max_grad_norm must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::BadConfig("weight_decay must be >= 0".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(OptimError::BadConfig("adam_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_instances.div_ceil(self.batch_size)
    }
}

/// Learning rate at `step` of `total_steps`.
///
/// linear:     lr · (1 − step/total)
/// triangular: ramp 0 → lr over the warmup steps, then linear decay
///             to 0 at total. The apex (step == warmup) is exactly lr.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64, OptimError> {
    if total_steps == 0 {
        return Err(OptimError::ZeroTotalSteps);
    }
    assert!(step <= total_steps, "step {step} > total {total_steps}");
    let lr = config.learn_rate;
    Ok(match config.schedule {
        Schedule::Linear => lr * (1.0 - step as f64 / total_steps as f64),
        Schedule::Triangular => {
            let warmup = config.warmup_steps().min(total_steps);
            if step < warmup {
                lr * step as f64 / warmup as f64
            } else if step == warmup {
                lr
            } else {
                lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
            }
        }
    })
}

/// Adam moment buffers. Shapes mirror the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> AdamState {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One Adam step over a set of tensors: clip the gradient to
/// max_grad_norm by global norm, then update with bias correction and
/// decoupled weight decay.
pub fn optimizer_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), OptimError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let mut sq_norm = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        assert_eq!(g.len(), params[ti].len(), "shape mismatch in tensor {ti}");
        for (i, &x) in g.iter().enumerate() {
            if !x.is_finite() {
                return Err(OptimError::BadGradient { tensor: ti, index: i });
            }
            sq_norm += x * x;
        }
    }
    let norm = sq_norm.sqrt();
    let scale = if norm > config.max_grad_norm {
        config.max_grad_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    for ti in 0..grads.len() {
        let p = &mut *params[ti];
        let g = grads[ti];
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        for i in 0..g.len() {
            let gi = g[i] * scale;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            if config.weight_decay > 0.0 {
                p[i] -= lr * config.weight_decay * p[i];
            }
            p[i] -= lr * mhat / (vhat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::retriever_default()
    }

    #[test]
    fn linear_schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, 10, &c).unwrap(), c.learn_rate);
        assert_eq!(lr_at(10, 10, &c).unwrap(), 0.0);
        assert!((lr_at(5, 10, &c).unwrap() - c.learn_rate * 0.5).abs() < 1e-18);
        assert!(lr_at(1, 0, &c).is_err());
    }

    #[test]
    fn triangular_apex_and_slopes() {
        let mut c = cfg();
        c.schedule = Schedule::Triangular;
        c.warmup_instances = 40;
        c.batch_size = 10; // 4 warmup steps
        assert_eq!(c.warmup_steps(), 4);
        assert_eq!(lr_at(0, 10, &c).unwrap(), 0.0);
        assert!((lr_at(2, 10, &c).unwrap() - c.learn_rate * 0.5).abs() < 1e-18);
        assert_eq!(lr_at(4, 10, &c).unwrap(), c.learn_rate);
        assert!((lr_at(7, 10, &c).unwrap() - c.learn_rate * 0.5).abs() < 1e-18);
        assert_eq!(lr_at(10, 10, &c).unwrap(), 0.0);
        // Warmup longer than the run clamps to the run length.
        c.warmup_instances = 10_000;
        assert_eq!(lr_at(10, 10, &c).unwrap(), c.learn_rate);
    }

    #[test]
    fn triangular_zero_warmup_decays_from_peak() {
        let mut c = cfg();
        c.schedule = Schedule::Triangular;
        c.warmup_instances = 0;
        assert_eq!(lr_at(0, 10, &c).unwrap(), c.learn_rate);
        assert!((lr_at(5, 10, &c).unwrap() - c.learn_rate * 0.5).abs() < 1e-18);
    }

    #[test]
    fn warmup_steps_round_up() {
        let mut c = cfg();
        c.warmup_instances = 10_000;
        c.batch_size = 128;
        assert_eq!(c.warmup_steps(), 79);
    }

    #[test]
    fn zero_gradient_is_identity_on_params() {
        let c = cfg();
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(&[3]);
        optimizer_step(&mut [&mut p], &[&g], &mut st, 0.1, &c).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn global_norm_clipping_scales_by_tenth() {
        let c = cfg(); // max_grad_norm 1
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0];
        // Norm over BOTH tensors: sqrt(36 + 64) = 10.
        let ga = vec![6.0, 0.0];
        let gb = vec![8.0];
        let mut st = AdamState::new(&[2, 1]);
        optimizer_step(&mut [&mut a, &mut b], &[&ga, &gb], &mut st, 0.1, &c).unwrap();
        assert!((st.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((st.m[1][0] - 0.1 * 0.8).abs() < 1e-15);
    }

    /// Constant gradient 1 on a scalar: the bias-corrected update is
    /// lr / (1 + eps) at every step, checked against an independent
    /// transliteration of the recurrence.
    #[test]
    fn two_step_hand_recurrence() {
        let mut c = cfg();
        c.max_grad_norm = 10.0; // keep g=1 unclipped
        let lr = 0.05;
        let mut p = vec![0.3];
        let g = vec![1.0];
        let mut st = AdamState::new(&[1]);
        optimizer_step(&mut [&mut p], &[&g], &mut st, lr, &c).unwrap();
        let after1 = 0.3 - lr * 1.0 / (1.0 + c.adam_epsilon);
        assert!((p[0] - after1).abs() < 1e-12, "{} vs {after1}", p[0]);
        optimizer_step(&mut [&mut p], &[&g], &mut st, lr, &c).unwrap();

        // Independent recurrence.
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.3);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * 1.0;
            v = 0.999 * v + 0.001 * 1.0;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat: f64 = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mhat / (vhat.sqrt() + c.adam_epsilon);
        }
        assert!((p[0] - x).abs() < 1e-15, "{} vs {x}", p[0]);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let c = cfg();
        let mut p = vec![1.0];
        let g = vec![f64::NAN];
        let mut st = AdamState::new(&[1]);
        assert!(optimizer_step(&mut [&mut p], &[&g], &mut st, 0.1, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.learn_rate = -1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_serde_round_trip_with_defaults() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::retriever_default());
        let c: TrainConfig =
            serde_json::from_str(r#"{"schedule":"triangular","learn_rate":3e-5}"#).unwrap();
        assert_eq!(c.schedule, Schedule::Triangular);
        assert_eq!(c.learn_rate, 3e-5);
        assert_eq!(c.batch_size, 128);
    }
}
