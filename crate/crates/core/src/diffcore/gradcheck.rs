use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences and returns the worst coordinate error
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// `1 x 1` node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(DiffError::InvalidStep(eps));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone());
        let out = f(&mut tape, leaf);
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(DiffError::NotScalar(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    let shape = tape.value(out).shape().to_vec();
    if tape.value(out).len() != 1 {
        return Err(DiffError::NotScalar(shape));
    }
    let analytic = tape
        .backward(out)
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
