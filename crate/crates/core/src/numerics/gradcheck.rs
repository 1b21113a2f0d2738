use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection so that every
/// output element contributes. Returns the maximum relative error over the
/// input elements.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |x: &Tensor<f64>, want_grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
        let tape = Tape::new();
        let input = tape.leaf(x.clone());
        let out = f(&tape, input)?;
        let shape = out.shape();
        let proj = projection.get_or_insert_with(|| Tensor::randn(&shape, 1.0, &mut rng)).clone();
        if proj.shape() != shape.as_slice() {
            return Err(NumericsError::shape("finite_difference_check", "output shape changed between evaluations"));
        }
        let scalar = out.mul(tape.constant(proj))?.sum();
        let value = scalar.value().data()[0];
        if !value.is_finite() {
            return Err(NumericsError::NonFinite("finite_difference_check output".into()));
        }
        let grad = if want_grad {
            let grads = tape.backward(scalar)?;
            Some(grads.wrt(input).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        } else {
            None
        };
        Ok((value, grad))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.expect("requested");
    if !analytic.is_finite() {
        return Err(NumericsError::NonFinite("analytic gradient".into()));
    }
    let mut worst = 0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of a scalar loss with respect to model parameters.
///
/// At most `per_param` evenly spaced elements of each parameter are probed to
/// bound the cost on larger models. Parameters that receive no gradient from
/// the tape are compared against a zero analytic gradient.
pub fn param_gradient_check<F>(
    params: &super::ParamStore<f64>,
    f: F,
    eps: f64,
    per_param: usize,
) -> Result<f64>
where
    F: for<'a> Fn(super::Ctx<'a, f64>) -> Result<Var<'a, f64>>,
{
    let eval = |store: &super::ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let out = f(super::Ctx::new(&tape, store))?;
        let v = out.value();
        if v.numel() != 1 || !v.data()[0].is_finite() {
            return Err(NumericsError::NonFinite("param_gradient_check loss".into()));
        }
        Ok(v.data()[0])
    };
    let tape = Tape::new();
    let loss = f(super::Ctx::new(&tape, params))?;
    let grads = tape.backward(loss)?;
    let mut probe = params.clone();
    let mut worst = 0f64;
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = params.get(id).numel();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let analytic = grads.param(id.index()).map_or(0.0, |g| g.data()[i]);
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
