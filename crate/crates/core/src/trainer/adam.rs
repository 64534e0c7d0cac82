use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients stored on `store`, followed by
/// decoupled weight decay on parameters flagged `decay`. Nothing changes if
/// any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state holds {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        match p.value.grad() {
            Some(g) if g.iter().all(|x| x.is_finite()) => {}
            Some(_) => return Err(Error::NonFiniteGradient(p.name.clone())),
            None => return Err(Error::NonFiniteGradient(format!("{} has no gradient", p.name))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let grad = p.value.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decay = if p.decay { lr * weight_decay } else { 0.0 };
        for (k, x) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            *x -= decay * *x;
        }
    }
    Ok(())
}
