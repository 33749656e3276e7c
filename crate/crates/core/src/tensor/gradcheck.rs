use crate::error::{Error, Result};

use super::{Real, Shape4, Tape, TensorId};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences.
///
/// `build` receives a fresh tape and the leaf under test and must construct a
/// scalar output; it is re-evaluated 2 * len(x) + 1 times, so it has to be
/// deterministic. Returns the maximum over elements of
/// |analytic - cd| / max(|analytic|, |cd|, 1e-8).
pub fn grad_check<R, F>(build: F, shape: Shape4, x: &[R], eps: R) -> Result<R>
where
    R: Real,
    F: Fn(&mut Tape<R>, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(shape, x.to_vec(), true);
    let out = build(&mut tape, leaf)?;
    if !tape.shape(out).is_scalar() {
        return Err(Error::NonScalarLoss { shape: tape.shape(out) });
    }
    if !tape.values(out)[0].is_finite() {
        return Err(Error::NonFinite { op: "grad_check forward".to_string(), index: 0 });
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).expect("leaf requires grad").to_vec();

    let two_eps = eps + eps;
    let floor = R::from_f64(1e-8);
    let mut max_rel = R::zero();
    for i in 0..x.len() {
        if !analytic[i].is_finite() {
            return Err(Error::NonFinite { op: "grad_check analytic".to_string(), index: i });
        }
        let mut bumped = x.to_vec();
        bumped[i] = x[i] + eps;
        let f_plus = eval_scalar(&build, shape, &bumped)?;
        bumped[i] = x[i] - eps;
        let f_minus = eval_scalar(&build, shape, &bumped)?;
        let cd = (f_plus - f_minus) / two_eps;
        if !cd.is_finite() {
            return Err(Error::NonFinite { op: "grad_check difference".to_string(), index: i });
        }
        let denom = analytic[i].abs().max(cd.abs()).max(floor);
        let rel = (analytic[i] - cd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn eval_scalar<R, F>(build: &F, shape: Shape4, x: &[R]) -> Result<R>
where
    R: Real,
    F: Fn(&mut Tape<R>, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(shape, x.to_vec(), false);
    let out = build(&mut tape, leaf)?;
    Ok(tape.values(out)[0])
}
