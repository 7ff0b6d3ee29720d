use super::tape::{Array, Tape, TensorError, TensorResult, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: max |analytic - numeric| over elements, divided by the
    /// larger of the two gradients' max magnitudes.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Check `f` at `params` against `(f(p+eps) - f(p-eps)) / 2eps`.
///
/// `f` receives a fresh tape and one tracked leaf per entry of `params`, and
/// must be deterministic (pin any dropout or shuffling RNG inside it).
pub fn grad_check<F>(f: F, params: &[Array], eps: f64, tol: f64) -> TensorResult<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> TensorResult<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }

    let analytic: Vec<Array> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&tape, &leaves)?;
        let v = root.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite(v));
        }
        tape.backward(root)?;
        leaves
            .iter()
            .zip(params)
            .map(|(l, p)| l.grad().unwrap_or_else(|| Array::zeros(p.raw_dim())))
            .collect()
    };

    let eval = |inputs: &[Array]| -> TensorResult<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &leaves)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite(v))
        }
    };

    let mut work: Vec<Array> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut numeric = Array::zeros(grad.raw_dim());
        for k in 0..params[pi].len() {
            let orig = params[pi].as_slice().expect("standard layout")[k];
            work[pi].as_slice_mut().expect("standard layout")[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].as_slice_mut().expect("standard layout")[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].as_slice_mut().expect("standard layout")[k] = orig;
            numeric.as_slice_mut().expect("standard layout")[k] = (plus - minus) / (2.0 * eps);
        }
        let max_abs = |a: &Array| a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let scale = max_abs(grad).max(max_abs(&numeric)).max(1e-12);
        let diff = grad
            .iter()
            .zip(numeric.iter())
            .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
        max_rel_error.push(if diff == 0.0 { 0.0 } else { diff / scale });
    }
    let passed = max_rel_error.iter().all(|&e| e <= tol);
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        passed,
    })
}
