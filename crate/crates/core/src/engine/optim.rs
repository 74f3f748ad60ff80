//! Momentum SGD with lazy per-column updates for class centers.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity of one parameter matrix plus the iteration at which each
/// column was last updated.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Matrix,
    pub last_touched: Vec<Option<usize>>,
}

impl OptimizerState {
    pub fn for_param(param: &Matrix) -> Self {
        OptimizerState {
            velocity: Matrix::zeros(param.rows(), param.cols()),
            last_touched: vec![None; param.cols()],
        }
    }
}

/// `v ← μ·v + g + λ·p ; p ← p − lr·v`, applied to the listed columns only
/// (`None` updates every column). Untouched columns keep both their value
/// and their velocity.
pub fn sgd_momentum_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut OptimizerState,
    cfg: &SgdConfig,
    touched: Option<&[usize]>,
    iteration: usize,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.velocity.shape() {
        return Err(Error::contract(format!(
            "optimizer shapes differ: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            state.velocity.shape()
        )));
    }
    let (rows, cols) = param.shape();
    let mut update = |i: usize, j: usize| {
        let p = param.get(i, j);
        let v = cfg.momentum * state.velocity.get(i, j) + grad.get(i, j) + cfg.weight_decay * p;
        state.velocity.set(i, j, v);
        param.set(i, j, p - cfg.lr * v);
    };
    match touched {
        None => {
            for i in 0..rows {
                for j in 0..cols {
                    update(i, j);
                }
            }
            state
                .last_touched
                .iter_mut()
                .for_each(|t| *t = Some(iteration));
        }
        Some(list) => {
            if let Some(&j) = list.iter().find(|&&j| j >= cols) {
                return Err(Error::contract(format!("touched column {j} out of {cols}")));
            }
            for i in 0..rows {
                for &j in list {
                    update(i, j);
                }
            }
            for &j in list {
                state.last_touched[j] = Some(iteration);
            }
        }
    }
    param.ensure_finite("sgd_momentum_step")
}

/// Learning rate after dividing by 10 at every milestone `≤ iteration`.
pub fn scheduled_lr(lr0: f64, milestones: &[usize], iteration: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= iteration).count();
    lr0 / 10f64.powi(passed as i32)
}
