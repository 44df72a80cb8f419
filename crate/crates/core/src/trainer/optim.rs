use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKind};
use crate::numkernel::Scalar;

/// First and second moment estimates, kept in 64-bit.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn grads<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<&[T]>> {
    params
        .params()
        .iter()
        .map(|p| {
            p.tensor
                .grad
                .as_deref()
                .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))
        })
        .collect()
}

/// L2 norm over every parameter gradient, accumulated in 64-bit.
pub fn global_grad_norm<T: Scalar>(params: &ModelParams<T>) -> Result<f64> {
    let sq: f64 = grads(params)?
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum();
    Ok(sq.sqrt())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when under the threshold).
pub fn clip_gradients<T: Scalar>(params: &mut ModelParams<T>, max_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(params)?;
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    // Rounding in low precision can leave the norm a hair above the cap;
    // shrink the factor until it holds.
    let mut factor = scale;
    loop {
        let scaled: f64 = grads(params)?
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| {
                let s = T::from_f64(v.as_f64() * factor).as_f64();
                s * s
            })
            .sum();
        if scaled.sqrt() <= max_norm {
            break;
        }
        factor *= 1.0 - 1e-7;
    }
    for p in params.params_mut() {
        if let Some(g) = p.tensor.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * factor));
        }
    }
    Ok(scale)
}

/// One decoupled-weight-decay Adam update. Decay touches only weight
/// matrices.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.params().len();
    if state.m.len() != n
        || params
            .params()
            .iter()
            .zip(&state.m)
            .any(|(p, m)| p.tensor.len() != m.len())
    {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    grads(params)?;
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        let g = p.tensor.grad.take().expect("checked above");
        for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let th = theta.as_f64();
            *theta = T::from_f64(th - lr * mhat / (vhat.sqrt() + cfg.eps) - lr * decay * th);
        }
        p.tensor.grad = Some(g);
    }
    Ok(())
}
