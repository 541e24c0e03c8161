//! Central finite-difference oracle for gradient verification.
//!
//! Test-support code: rebuilds the forward pass at perturbed inputs and
//! compares the quotient against the analytic gradient from `backward`.
//! Kept independent of any backward-pass machinery by construction.

use super::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Largest relative deviation between analytic and finite-difference
/// gradients of `f` (a scalar-valued function) at `inputs`.
pub fn max_rel_error<F>(f: F, inputs: &[Vec<f64>], shapes: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::leaf(s.clone(), v.clone()))
        .collect::<Result<_>>()?;
    let root = f(&leaves)?;
    root.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |points: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor> = points
            .iter()
            .zip(shapes)
            .map(|(v, s)| Tensor::leaf(s.clone(), v.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&ts)?.item())
    };

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[pi][ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[pi][ei] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let rel = (analytic[pi][ei] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Asserts the finite-difference check at the standard tolerance.
pub fn assert_grads<F>(f: F, inputs: &[Vec<f64>], shapes: &[Vec<usize>])
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let err = max_rel_error(f, inputs, shapes).expect("gradcheck forward failed");
    assert!(err < REL_TOL, "gradient mismatch: max rel error {err:.3e}");
}
