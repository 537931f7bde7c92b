//! Central finite-difference verification of tape gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Worst agreement between analytic and numeric gradients for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose relative error exceeds the tolerance.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.failures > 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<'s, F>(store: &'s ParamStore, f: &mut F) -> Result<(f64, Graph<'s>, Var)>
where
    F: for<'g> FnMut(&mut Graph<'g>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok((g.scalar(loss), g, loss))
}

/// Compares tape gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every element of every parameter in `store`.
///
/// `f` is evaluated twice at the unperturbed point first; any difference is a
/// determinism error. The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: for<'g> FnMut(&mut Graph<'g>) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Config(alloc::format!("step {h} outside (0, 1e-2]")));
    }
    let analytic: ParamGrads = {
        let (first, g, loss) = evaluate(store, &mut f)?;
        let grads = g.backward(loss)?.into_params();
        let (second, _, _) = evaluate(store, &mut f)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::Determinism { first, second });
        }
        grads
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let mut check = ParamCheck {
            id,
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            failures: 0,
        };
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = evaluate(store, &mut f).map(|r| r.0);
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = evaluate(store, &mut f).map(|r| r.0);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            if err > tol {
                check.failures += 1;
            }
            if err > check.max_rel_error || j == 0 {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance: tol,
        params,
    })
}
