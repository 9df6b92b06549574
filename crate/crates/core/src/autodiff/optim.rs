//! AdamW with decoupled weight decay, and the warmup/cosine learning-rate
//! schedule.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second-moment state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, hp: &AdamHyper) {
    assert_eq!(
        param.len(),
        grad.len(),
        "adamw param/grad length mismatch: {} vs {}",
        param.len(),
        grad.len()
    );
    assert_eq!(param.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * param[i]);
    }
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_fraction` of
/// steps, then cosine decay to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = if warmup_fraction > 0.0 {
        ((total_steps as f64 * warmup_fraction).round() as usize).max(1)
    } else {
        0
    };
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return if step == total_steps { 0.0 } else { base_lr };
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
