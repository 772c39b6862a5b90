//! Adam and the staged learning-rate schedules used by both training stages.

use thiserror::Error;

use crate::numerics::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: shape {param:?} but gradient {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("{params} parameter tensors but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self { m, v, t: 0 }
    }

    pub fn for_params(params: &[&mut Matrix]) -> Self {
        Self::new(params.iter().map(|p| p.shape()))
    }
}

fn check_shapes(params: &[&mut Matrix], grads: &[Matrix]) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::CountMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch {
                index,
                param: p.shape(),
                grad: g.shape(),
            });
        }
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<(), OptimError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(OptimError::BadLearningRate(lr));
    }
    Ok(())
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), OptimError> {
    adam_step_masked(params, grads, state, lr, &[])
}

/// [`adam_step`] that skips tensors whose `frozen` flag is set; they keep
/// their value and moments.
pub fn adam_step_masked(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    frozen: &[bool],
) -> Result<(), OptimError> {
    check_shapes(params, grads)?;
    check_lr(lr)?;
    if state.m.len() != params.len() {
        return Err(OptimError::CountMismatch {
            params: params.len(),
            grads: state.m.len(),
        });
    }
    for (index, (p, m)) in params.iter().zip(&state.m).enumerate() {
        if p.shape() != m.shape() {
            return Err(OptimError::ShapeMismatch {
                index,
                param: p.shape(),
                grad: m.shape(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], lr: f64, frozen: &[bool]) -> Result<(), OptimError> {
    check_shapes(params, grads)?;
    check_lr(lr)?;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !frozen.get(i).copied().unwrap_or(false) {
            p.add_scaled(g, -lr);
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate keyed by starting epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    stages: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(stages: Vec<(usize, f64)>) -> Result<Self, OptimError> {
        match stages.first() {
            None => return Err(OptimError::BadSchedule("no stages".into())),
            Some(&(start, _)) if start != 0 => {
                return Err(OptimError::BadSchedule(format!(
                    "first stage starts at epoch {start}, not 0"
                )))
            }
            _ => {}
        }
        if stages.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(OptimError::BadSchedule(
                "stage start epochs must strictly increase".into(),
            ));
        }
        if let Some(&(_, rate)) = stages.iter().find(|(_, r)| !(*r > 0.0 && r.is_finite())) {
            return Err(OptimError::BadSchedule(format!("rate {rate} is not positive")));
        }
        Ok(Self { stages })
    }

    pub fn constant(rate: f64) -> Result<Self, OptimError> {
        Self::new(vec![(0, rate)])
    }

    /// 2e-4 for the first 15 epochs, 2e-5 afterwards.
    pub fn base_default() -> Self {
        Self::new(vec![(0, 2e-4), (15, 2e-5)]).expect("valid")
    }

    /// Fixed 2e-5.
    pub fn contrastive_default() -> Self {
        Self::constant(2e-5).expect("valid")
    }

    pub fn stages(&self) -> &[(usize, f64)] {
        &self.stages
    }

    /// Parses `rate` or `start:rate,start:rate,...`.
    pub fn parse(text: &str) -> Result<Self, OptimError> {
        let bad = || OptimError::BadSchedule(format!("cannot parse {text:?}"));
        if let Ok(rate) = text.trim().parse::<f64>() {
            return Self::constant(rate);
        }
        let stages = text
            .split(',')
            .map(|part| {
                let (start, rate) = part.split_once(':').ok_or_else(bad)?;
                Ok((
                    start.trim().parse().map_err(|_| bad())?,
                    rate.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect::<Result<Vec<_>, OptimError>>()?;
        Self::new(stages)
    }

    pub fn render(&self) -> String {
        self.stages
            .iter()
            .map(|(s, r)| format!("{s}:{r}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Rate of the last stage whose start epoch is at or before `epoch`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule
        .stages
        .iter()
        .rev()
        .find(|(start, _)| *start <= epoch)
        .map(|&(_, rate)| rate)
        .expect("first stage starts at 0")
}
