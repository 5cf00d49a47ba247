use alloc::string::String;

use super::ext::F64x2;
use super::{DiffError, Gradients, ParamStore, Scalar, Tape, Var};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic - central| / (|analytic| + |central| + 1e-12)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Entries sitting on a kink: every probe, down to the smallest step,
    /// changed the branch signature. They are not compared.
    pub at_kinks: usize,
}

/// Step refinements tried when a probe crosses a kink.
const REFINEMENTS: usize = 5;

/// Scalar function of a parameter store that can be built at any precision.
pub trait Objective {
    type Error: From<DiffError>;

    fn build<T: Scalar>(&mut self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var, Self::Error>;
}

fn evaluate<T, F, E>(f: &mut F, params: &ParamStore<T>, name: &str) -> Result<(T, u64), E>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var, E>,
    E: From<DiffError>,
{
    let mut tape = Tape::verifying();
    let out = f(&mut tape, params)?;
    let value = tape.value(out).item().ok_or_else(|| DiffError::NonScalarSeed(tape.shape(out).into()))?;
    if !value.is_finite() {
        return Err(DiffError::NonFiniteValue { name: name.into() }.into());
    }
    Ok((value, tape.branch_signature()))
}

/// Signature of the unperturbed evaluation.
fn base_signature<T, F, E>(f: &mut F, params: &ParamStore<T>) -> Result<u64, E>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var, E>,
    E: From<DiffError>,
{
    evaluate(f, params, "<unperturbed>").map(|(_, sig)| sig)
}

/// Central difference of entry `i` of `name`, or `None` if every step down
/// to `eps / 10⁵` crosses a kink. With `richardson`, returns
/// `(4 D(h/2) - D(h)) / 3`.
#[allow(clippy::too_many_arguments)]
fn central<T, F, E>(
    f: &mut F,
    work: &mut ParamStore<T>,
    name: &str,
    i: usize,
    base: u64,
    eps: f64,
    richardson: bool,
) -> Result<Option<f64>, E>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var, E>,
    E: From<DiffError>,
{
    let original = work.get(name)?.values()[i];
    let mut probe = |h: f64| -> Result<Option<T>, E> {
        let step = T::from_f64_lossy(h);
        work.get_mut(name)?.values_mut()[i] = original + step;
        let (plus, sp) = evaluate(f, work, name)?;
        work.get_mut(name)?.values_mut()[i] = original - step;
        let (minus, sm) = evaluate(f, work, name)?;
        work.get_mut(name)?.values_mut()[i] = original;
        Ok((sp == base && sm == base).then(|| (plus - minus) / (step + step)))
    };
    let mut h = eps;
    for _ in 0..=REFINEMENTS {
        if !richardson {
            if let Some(d) = probe(h)? {
                return Ok(Some(d.to_f64_lossless()));
            }
        } else if let (Some(coarse), Some(fine)) = (probe(h)?, probe(h / 2.0)?) {
            let four = T::from_f64_lossy(4.0);
            let three = T::from_f64_lossy(3.0);
            return Ok(Some(((four * fine - coarse) / three).to_f64_lossless()));
        }
        h /= 10.0;
    }
    Ok(None)
}

fn compare<E, G>(analytic: &Gradients<f64>, params: &ParamStore<f64>, mut estimate: G) -> Result<FdReport, E>
where
    E: From<DiffError>,
    G: FnMut(&str, usize) -> Result<Option<f64>, E>,
{
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0, at_kinks: 0 };
    for p in params.iter().filter(|p| p.requires_grad()) {
        let name = p.name();
        let grad = analytic.get(name).ok_or_else(|| DiffError::UnknownParam(name.into()))?;
        for (i, &a) in grad.data().iter().enumerate() {
            let Some(c) = estimate(name, i)? else {
                report.at_kinks += 1;
                continue;
            };
            let rel = (a - c).abs() / (a.abs() + c.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.into(), i));
            }
        }
    }
    Ok(report)
}

fn analytic<F, E>(f: &mut F, params: &ParamStore<f64>) -> Result<Gradients<f64>, E>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<DiffError>,
{
    let mut tape = Tape::verifying();
    let out = f(&mut tape, params)?;
    if !tape.value(out).all_finite() {
        return Err(DiffError::NonFiniteValue { name: String::from("<unperturbed>") }.into());
    }
    Ok(tape.backward(out)?.into_gradients(params))
}

/// Checks the gradient of the scalar built by `f` against central
/// differences over every trainable entry of `params`, all in `f64`.
///
/// Each entry uses the Richardson-extrapolated central difference
/// `(4 D(h/2) - D(h)) / 3`, `D(h) = (f(x + h) - f(x - h)) / 2h`, whose
/// truncation error is `O(h⁴)`, starting from `h = eps`. A probe that
/// changes the tape's branch signature straddles a kink (a relu, abs or
/// recorded argmax switch) and the step is shrunk tenfold, up to five times.
///
/// `f` must be deterministic.
pub fn finite_diff_check<F, E>(mut f: F, params: &ParamStore<f64>, eps: f64) -> Result<FdReport, E>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<DiffError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DiffError::BadStep(eps).into());
    }
    let grads = analytic(&mut f, params)?;
    let base = base_signature(&mut f, params)?;
    let mut work = params.clone();
    compare(&grads, params, |name, i| central(&mut f, &mut work, name, i, base, eps, true))
}

/// Checks the `f64` analytic gradient of `objective` against central
/// differences of the same objective evaluated in double-double precision.
///
/// The extended reference removes the roundoff floor of 64-bit differences,
/// so entries many orders of magnitude below the function value are
/// resolved too. Steps start at `eps` and shrink across kinks as in
/// [`finite_diff_check`].
pub fn reference_diff_check<O: Objective>(objective: &mut O, params: &ParamStore<f64>, eps: f64) -> Result<FdReport, O::Error> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DiffError::BadStep(eps).into());
    }
    let grads = analytic(&mut |t: &mut Tape<f64>, p: &ParamStore<f64>| objective.build(t, p), params)?;
    let mut wide = |t: &mut Tape<F64x2>, p: &ParamStore<F64x2>| objective.build(t, p);
    let mut work: ParamStore<F64x2> = params.cast();
    let base = base_signature(&mut wide, &work)?;
    compare(&grads, params, |name, i| central(&mut wide, &mut work, name, i, base, eps, false))
}
