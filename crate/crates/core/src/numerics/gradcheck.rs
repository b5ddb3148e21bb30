//! Central finite-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Result, SgrError};

/// Default central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
///
/// With a step of 1e-5 the central difference carries roundoff of about
/// `u * |loss| / eps`, a few 1e-10 for losses around ten, so entries much
/// below 1e-5 cannot be resolved to four relative digits.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.max_relative_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_relative_error >= self.tolerance)
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares autodiff gradients of `model_fn` with central differences for
/// every element of every parameter in `params` (or only `only`, if given).
pub fn grad_check<F>(
    model_fn: F,
    params: &ParamStore,
    tolerance: f64,
    only: Option<&[ParamId]>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let loss = model_fn(&tape, store)?;
        tape.scalar_value(loss)
    };

    let tape = Tape::new();
    let loss_var = model_fn(&tape, params)?;
    let loss = tape.scalar_value(loss_var)?;
    let second = eval(params)?;
    if loss.to_bits() != second.to_bits() {
        return Err(SgrError::NonDeterministic {
            first: loss,
            second,
        });
    }
    let analytic = tape.backward(loss_var)?.param_grads(params);

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.ids().collect(),
    };
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let original = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = original + FD_EPSILON;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = original - FD_EPSILON;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        checks.push(ParamCheck {
            name: params.name(id).to_string(),
            elements: n,
            max_relative_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        loss,
        params: checks,
        tolerance,
    })
}
