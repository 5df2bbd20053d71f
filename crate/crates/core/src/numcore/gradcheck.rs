use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Compares tape gradients with central finite differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε` on every parameter coordinate.
///
/// Returns the worst relative error, measured against
/// `max(|analytic|, |numeric|, 1e-8)`. `store` gradients are left zeroed
/// and its values are restored exactly.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).data().to_vec()).collect();
    store.zero_grad();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(&mut tape, store)?;
        let v = tape.value(l).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric("loss evaluation is not finite"))
        }
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for (j, &a) in analytic[pi].iter().enumerate() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
