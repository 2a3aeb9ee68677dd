//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Worst-case agreement for one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(tape_grad: f64, fd_grad: f64) -> f64 {
    (tape_grad - fd_grad).abs() / (tape_grad.abs() + fd_grad.abs()).max(1e-8)
}

/// Compares tape gradients of `f` with central differences for every entry
/// of the parameters in `ids` (all parameters when `None`).
///
/// `f` builds a scalar on a fresh tape bound to `store`. The step actually
/// taken is `(θ+h) − (θ−h)` as represented in `T`, not `2h`.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    ids: Option<&[ParamId]>,
    f: F,
    h: T,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let grads = {
        let mut tape = Tape::with_params(&*store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first != second {
        return Err(Error::NonDeterministic {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }

    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut check = ParamCheck {
            name: store.get(id).name().to_string(),
            entries: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for idx in 0..n {
            let original = store.value(id).data()[idx];
            let plus = original + h;
            let minus = original - h;
            store.value_mut(id).data_mut()[idx] = plus;
            let f_plus = eval(store);
            store.value_mut(id).data_mut()[idx] = minus;
            let f_minus = eval(store);
            store.value_mut(id).data_mut()[idx] = original;
            let fd = ((f_plus? - f_minus?) / (plus - minus)).as_f64();
            let tape = grads.get(id).map_or(0.0, |g| g.data()[idx].as_f64());
            let rel = relative_error(tape, fd);
            check.max_abs_error = check.max_abs_error.max((tape - fd).abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = idx;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tolerance: tol })
}
