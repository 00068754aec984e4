//! SGD and Adam updates over block parameters.

use crate::blocks::BlockParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Hyper {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Hyper {
    pub fn sgd(lr: f64) -> Hyper {
        Hyper { kind: OptimizerKind::Sgd, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam(lr: f64) -> Hyper {
        Hyper { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-block optimizer state: first/second moments and the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    m: BlockParams,
    v: BlockParams,
    t: u64,
}

impl OptState {
    pub fn new(params: &BlockParams) -> OptState {
        OptState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One optimizer update in place. Adam uses the standard bias-corrected
/// moment recursion; SGD is `params - lr * grads`.
pub fn optimizer_step(
    params: &mut BlockParams,
    grads: &BlockParams,
    state: &mut OptState,
    hyper: &Hyper,
) -> Result<()> {
    for ((name, g), p) in grads.tensors().iter().zip(params.tensors_mut()) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "optimizer_step: {name} grad shape {:?} vs param {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    match hyper.kind {
        OptimizerKind::Sgd => {
            for (g, p) in grads.tensors().iter().zip(params.tensors_mut()) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.1.data()) {
                    *pv -= hyper.lr * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            state.t += 1;
            let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
            let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
            for (((g, p), m), v) in grads
                .tensors()
                .iter()
                .zip(params.tensors_mut())
                .zip(state.m.tensors_mut())
                .zip(state.v.tensors_mut())
            {
                for (((pv, gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.1.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
                    *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
                }
            }
        }
    }
    Ok(())
}
