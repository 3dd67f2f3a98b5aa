//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of [`grad_check_inputs`].
#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_err: T,
    /// `(input index, flat element index)` of the worst component.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    let denom = a.abs().max(b.abs()).max(T::lit(1e-8));
    (a - b).abs() / denom
}

fn eval_scalar<T: Scalar>(g: &Graph<T>, y: Var) -> Result<T> {
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::dim("grad_check", format!("output {:?} is not scalar", v.shape())));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::Numeric("non-finite function value during grad_check".into()));
    }
    Ok(s)
}

/// Checks the gradient of a scalar function of one tensor against central
/// differences; returns the largest component-wise relative error.
///
/// Values passed through `stop_gradient` are frozen at their base-point
/// values while differencing, so straight-through constructions are checked
/// along their pass-through path only.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), None, eps)?;
    Ok(report.max_rel_err)
}

/// Multi-input variant. `coords` restricts the check to a subset of
/// `(input, element)` pairs; `None` checks every element of every input.
pub fn grad_check_inputs<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    coords: Option<&[(usize, usize)]>,
    eps: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }

    let g = Graph::recording();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&g, &vars)?;
    eval_scalar(&g, y)?;
    let grads = g.backward(y)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    if analytic.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("non-finite gradient during grad_check".into()));
    }
    let recorded = g.take_recorded();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let eval_at = |which: usize, idx: usize, delta: T| -> Result<T> {
        let gr = Graph::replaying(recorded.clone());
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                gr.constant(t)
            })
            .collect();
        let y = f(&gr, &vars)?;
        eval_scalar(&gr, y)
    };

    let mut report = GradCheckReport {
        max_rel_err: T::zero(),
        worst: (0, 0),
        checked: 0,
    };
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].len() {
            return Err(Error::Contract(format!("grad_check coordinate ({i}, {j}) out of range")));
        }
        let plus = eval_at(i, j, eps)?;
        let minus = eval_at(i, j, -eps)?;
        let fd = (plus - minus) / (eps + eps);
        let err = relative_error(analytic[i].data()[j], fd);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}
