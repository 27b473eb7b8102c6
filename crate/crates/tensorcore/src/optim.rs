//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            moments: params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect(),
        }
    }
}

#[derive(Debug)]
pub enum OptimError {
    /// A gradient contained NaN or Inf; the step was not applied.
    NonFiniteGradient { param_index: usize },
    ShapeMismatch { param_index: usize },
}

impl std::fmt::Display for OptimError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimError::NonFiniteGradient { param_index } => {
                write!(f, "non-finite gradient for parameter {param_index}; step rejected")
            }
            OptimError::ShapeMismatch { param_index } => {
                write!(f, "gradient/state shape mismatch for parameter {param_index}")
            }
        }
    }
}

impl std::error::Error for OptimError {}

/// One AdamW update with bias-corrected moments. Decay is decoupled from the
/// gradient and skipped for parameters flagged `no_decay` (biases and layer
/// normalization parameters). `step` counts from 1.
///
/// The whole step is rejected, with parameters and state untouched, if any
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&[f32]],
    no_decay: &[bool],
    state: &mut AdamState,
    step: u64,
    hyper: &AdamHyper,
) -> Result<(), OptimError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), no_decay.len());
    assert_eq!(params.len(), state.moments.len(), "optimizer state size mismatch");
    assert!(step >= 1, "AdamW step count starts at 1");

    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.moments[i].0.len() != g.len() {
            return Err(OptimError::ShapeMismatch { param_index: i });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient { param_index: i });
        }
    }

    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    let eps = hyper.eps as f32;
    let lr = hyper.lr as f32;

    for (i, param) in params.iter_mut().enumerate() {
        let (m, v) = &mut state.moments[i];
        let wd = if no_decay[i] { 0.0 } else { hyper.weight_decay as f32 };
        let g = grads[i];
        for (j, p) in param.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bc1 as f32;
            let v_hat = v[j] / bc2 as f32;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr` over `warmup` steps, then cosine decay
/// to 0 at `max_steps`.
pub fn lr_at_step(step: u64, warmup: u64, max_steps: u64, peak_lr: f64) -> f64 {
    assert!(warmup < max_steps, "warmup must be shorter than max_steps");
    assert!(step <= max_steps, "step {step} past max_steps {max_steps}");
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (max_steps - warmup) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_step(
        value: f32,
        grad: f32,
        step: u64,
        hyper: &AdamHyper,
        no_decay: bool,
        state: &mut AdamState,
    ) -> f32 {
        let mut p = Tensor::new(&[1], vec![value]);
        {
            let mut refs: Vec<&mut Tensor> = vec![&mut p];
            adamw_step(&mut refs, &[&[grad]], &[no_decay], state, step, hyper).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let hyper = AdamHyper { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut state = AdamState { moments: vec![(vec![0.0], vec![0.0])] };
        let p = single_param_step(1.5, 0.0, 1, &hyper, false, &mut state);
        assert_eq!(p, 1.5);
    }

    #[test]
    fn hand_computed_first_step() {
        // param 1.0, grad 0.1, lr 1e-5, wd 0.05, betas (0.9, 0.999), eps 1e-8:
        // m_hat = 0.1, v_hat = 0.01, update = lr * (0.1/sqrt(0.01) + 0.05 * 1)
        let hyper = AdamHyper { lr: 1e-5, weight_decay: 0.05, ..Default::default() };
        let mut state = AdamState { moments: vec![(vec![0.0], vec![0.0])] };
        let p = single_param_step(1.0, 0.1, 1, &hyper, false, &mut state);
        assert!((p - 0.9999895).abs() < 1e-9, "got {p}");
    }

    #[test]
    fn no_decay_set_matches_zero_decay() {
        let decayed = AdamHyper { lr: 1e-3, weight_decay: 0.05, ..Default::default() };
        let plain = AdamHyper { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut s1 = AdamState { moments: vec![(vec![0.0], vec![0.0])] };
        let mut s2 = AdamState { moments: vec![(vec![0.0], vec![0.0])] };
        let a = single_param_step(0.7, 0.3, 1, &decayed, true, &mut s1);
        let b = single_param_step(0.7, 0.3, 1, &plain, false, &mut s2);
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let hyper = AdamHyper::default();
        let mut state = AdamState { moments: vec![(vec![0.0], vec![0.0])] };
        let mut p = Tensor::new(&[1], vec![1.0]);
        let before = p.clone();
        let err = {
            let mut refs: Vec<&mut Tensor> = vec![&mut p];
            adamw_step(&mut refs, &[&[f32::NAN]], &[false], &mut state, 1, &hyper)
        };
        assert!(err.is_err());
        assert_eq!(p, before);
        assert_eq!(state.moments[0].0[0], 0.0);
    }

    #[test]
    fn deterministic_from_cloned_state() {
        let hyper = AdamHyper { lr: 3e-4, weight_decay: 0.01, ..Default::default() };
        let grads: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let run = |mut p: Tensor, mut state: AdamState| {
            for step in 1..=10 {
                let mut refs: Vec<&mut Tensor> = vec![&mut p];
                adamw_step(&mut refs, &[&grads], &[false], &mut state, step, &hyper).unwrap();
            }
            p
        };
        let p0 = Tensor::from_fn(&[64], |i| (i as f32 * 0.11).cos());
        let s0 = AdamState::new(&[&p0]);
        let a = run(p0.clone(), s0.clone());
        let b = run(p0, s0);
        assert_eq!(a.data(), b.data(), "AdamW must be bit-deterministic");
    }

    #[test]
    fn schedule_boundaries() {
        let peak = 3e-4;
        assert_eq!(lr_at_step(0, 200, 5000, peak), 0.0);
        assert_eq!(lr_at_step(200, 200, 5000, peak), peak);
        assert!(lr_at_step(5000, 200, 5000, peak).abs() < 1e-12);
        let mid = lr_at_step(200 + (5000 - 200) / 2, 200, 5000, peak);
        assert!((mid - peak / 2.0).abs() < 1e-12, "midpoint {mid}");
    }

    #[test]
    fn schedule_linear_during_warmup() {
        let peak = 1.0;
        assert!((lr_at_step(50, 200, 5000, peak) - 0.25).abs() < 1e-12);
        assert!((lr_at_step(100, 200, 5000, peak) - 0.5).abs() < 1e-12);
    }
}
