use super::{BackwardFault, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(1, |a|, |n|)`, the per-coordinate disagreement measure.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` with central differences
/// `(f(x+h·e) - f(x-h·e)) / 2h` on every coordinate and returns the
/// largest relative disagreement.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, h, &all)
}

/// Same as [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_with_fault(f, x, h, coords, None)
}

/// Runs the analytic pass on a tape with a deliberately broken backward
/// rule, for mutation-testing the checker itself.
#[doc(hidden)]
pub fn finite_diff_check_with_fault<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize], fault: Option<BackwardFault>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::param(
            "finite_diff_check",
            format!("step {h} outside [1e-7, 1e-4]"),
        ));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::param(
            "finite_diff_check",
            format!("coordinate {bad} out of range for {} values", x.numel()),
        ));
    }

    let mut g = Graph::with_fault(fault);
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let grad = g.grad(xv).expect("leaf gradient after backward");
    let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_parts(x.shape().to_vec(), data));
        let loss = f(&mut g, xv)?;
        g.scalar_value(loss)
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(max_rel_error(&analytic, &numeric))
}
