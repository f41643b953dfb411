use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Gradients smaller than this are compared in absolute terms; central
/// differences carry roughly `eps * |f| / h` of round-off.
const REL_FLOOR: f64 = 1e-4;

/// Checks `d f(x) / dx` coordinate-wise against `(f(x+h) - f(x-h)) / 2h`.
///
/// `f` must build a scalar on the tape it is handed, starting from the leaf
/// standing in for `x`. The error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract("gradcheck step must be positive".into()));
    }
    let analytic = {
        let leaf = x.clone().with_grad();
        let mut tape = Tape::new();
        let vx = tape.input(leaf);
        let out = f(&mut tape, vx)?;
        let grads = tape.backward(out)?;
        grads
            .get(vx)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let mut tape = Tape::new();
        let vx = tape.input(t);
        let out = f(&mut tape, vx)?;
        Ok(tape.value(out)[0])
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(n);
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        passed: max_rel_error <= tol,
    })
}
