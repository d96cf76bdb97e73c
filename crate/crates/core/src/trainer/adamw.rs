use crate::error::{shape_err, Error, Result};
use crate::numcore::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update of `params` in place. Weight decay is applied to the
/// weights directly (`w -= lr * wd * w`), not folded into the gradient.
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err!(
            "{} params, {} grads, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

/// Applies [`adamw_step`] to every parameter of `store` using its
/// accumulated gradients.
pub fn adamw_step_store(store: &mut ParamStore, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    let grads = store.flat_grads();
    let mut values = store.flat_values();
    if state.m.is_empty() && state.t == 0 {
        *state = AdamWState::new(values.len());
    }
    adamw_step(&mut values, &grads, state, cfg)?;
    store.set_flat_values(&values)
}
