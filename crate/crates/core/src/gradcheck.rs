//! Central finite-difference checks for graph-built functions.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)` over all
    /// inputs together.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates left out because `±h` straddles a kink (e.g. a ReLU at
    /// zero), where a central difference is not a derivative.
    pub kinks: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Slope change across `±h`, relative to the gradient scale, above which a
/// coordinate is treated as sitting on a kink.
const KINK_BEND: f64 = 1e-3;

/// Fixed projection weights used to reduce non-scalar outputs to a scalar.
fn projection(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| 0.5 + ((i as f64) * 0.618_033_988_7).fract())
}

fn scalar_output(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    if n == 1 {
        return Ok(y);
    }
    let flat = g.reshape(y, &[n])?;
    let w = g.constant(projection(n))?;
    let prod = g.mul(flat, w)?;
    g.sum_all(prod)
}

/// Compares reverse-mode gradients of `f(inputs)` against central
/// differences with step `h`. Non-scalar outputs are reduced by a fixed
/// positive projection first.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<_>>()?;
    let y = f(&mut g, &vars)?;
    let y = scalar_output(&mut g, y)?;
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<_>>()?;
        let y = f(&mut g, &vars)?;
        let y = scalar_output(&mut g, y)?;
        Ok(g.value(y).item())
    };

    let centre = eval(inputs)?;
    let mut numeric_all = Vec::with_capacity(inputs.len());
    // |right slope − left slope| per coordinate
    let mut bend_all = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut bend = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * h);
            bend[i] = ((plus - centre) - (centre - minus)).abs() / h;
        }
        numeric_all.push(numeric);
        bend_all.push(bend);
    }
    // one scale for the whole gradient, so inputs whose true gradient is
    // zero (e.g. a bias feeding batchnorm) are judged against it
    let scale = analytic
        .iter()
        .chain(&numeric_all)
        .flatten()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    // smooth curvature bends the slope by O(h); a kink by O(gradient)
    let is_kink = |b: f64| b > KINK_BEND * scale;
    let kinks = bend_all.iter().flatten().filter(|&&b| is_kink(b)).count();
    let max_abs_error = analytic
        .iter()
        .flatten()
        .zip(numeric_all.iter().flatten())
        .zip(bend_all.iter().flatten())
        .filter(|(_, &b)| !is_kink(b))
        .map(|((x, y), _)| (x - y).abs())
        .fold(0.0, f64::max);
    let report = GradCheck {
        max_rel_error: max_abs_error / scale,
        max_abs_error,
        kinks,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::new(vec![2], vec![0.3, -1.1]).unwrap();
        let ok = check_gradients(std::slice::from_ref(&x), 1e-3, |g, v| g.exp(v[0])).unwrap();
        assert!(ok.passes(1e-4), "{ok:?}");
        // Gradient blocked by treating the input as a constant inside f.
        let bad = check_gradients(&[x], 1e-3, |g, v| {
            let c = g.constant(g.value(v[0]).clone())?;
            let e = g.exp(c)?;
            g.add(e, v[0])
        })
        .unwrap();
        assert!(!bad.passes(1e-3));
    }

    #[test]
    fn kinks_are_skipped_not_hidden() {
        let x = Tensor::new(vec![3], vec![2e-6, 0.5, -0.7]).unwrap();
        let relu = check_gradients(std::slice::from_ref(&x), 1e-5, |g, v| g.relu(v[0])).unwrap();
        assert_eq!(relu.kinks, 1);
        assert!(relu.passes(1e-6), "{relu:?}");
        // a wrong gradient away from the kink is still caught
        let bad = check_gradients(&[x], 1e-5, |g, v| {
            let r = g.relu(v[0])?;
            let c = g.constant(g.value(v[0]).clone())?;
            g.add(r, c)
        })
        .unwrap();
        assert!(!bad.passes(1e-3));
    }
}
