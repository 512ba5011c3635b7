//! Central finite-difference checks against the tape's analytic gradients.
//!
//! The finite-difference side only ever evaluates the forward pass, so it is
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used by every gradient check in this workspace.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the denominator floored at `floor`, so gradients
/// far below the finite-difference noise level are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function with respect to every element
/// of every input.
pub fn numeric_gradients<F>(mut f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grads = vec![0.0; inputs[t].numel()];
        for (i, g) in grads.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
        out.push(grads);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
}

/// Builds the scalar function with `build` on fresh graphs, compares the
/// analytic gradient of every input with central differences.
pub fn check_gradients<B>(build: B, inputs: &[Tensor], step: f64, floor: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let numeric = numeric_gradients(
        |ts| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).item())
        },
        inputs,
        step,
    )?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = relative_error(av, nv, floor);
            report.checked += 1;
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = e;
                report.worst = (t, i);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-8), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn numeric_gradient_of_square() {
        let x = Tensor::new(vec![2], vec![1.0, -3.0]).unwrap();
        let g = numeric_gradients(
            |ts| Ok(ts[0].data().iter().map(|v| v * v).sum()),
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g[0][0] - 2.0).abs() < 1e-8);
        assert!((g[0][1] + 6.0).abs() < 1e-8);
    }
}
