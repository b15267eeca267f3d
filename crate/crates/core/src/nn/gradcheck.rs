//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NnError;

/// `|a − b| / max(|a|, |b|, 1e-8)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64, NnError> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(NnError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Checks the gradient of scalar `f` with respect to its input `x` at every
/// coordinate. Returns the maximum relative error.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NnError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_input_coords(f, x, h, &coords)
}

/// As [`finite_diff_gradcheck`] over a subset of coordinates.
pub fn gradcheck_input_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let full = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let analytic: Vec<f64> = coords.iter().map(|&c| full[c]).collect();

    let eval = |xp: Tensor| -> Result<f64, NnError> {
        let mut t = Tape::new();
        let v = t.input(xp, false);
        let out = f(&mut t, v)?;
        scalar(&t, out)
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] += h;
        let mut minus = x.clone();
        minus.data_mut()[c] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Gradient check with respect to parameter entries `(id, flat index)`.
/// `f` records a scalar on a fresh tape; it may update batch-norm buffers,
/// which are restored before every evaluation.
pub fn gradcheck_params<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    coords: &[(ParamId, usize)],
) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, &mut ParamStore) -> Result<Var, NnError>,
{
    let buffers = store.buffers().to_vec();
    let restore = |s: &mut ParamStore| s.buffers_mut().clone_from_slice(&buffers);

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut scratch = store.clone();
    scratch.zero_grad();
    tape.accumulate_param_grads(&mut scratch);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, j)| scratch.grad(id).map_or(0.0, |g| g[j]))
        .collect();
    drop(scratch);
    drop(tape);

    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, j) in coords {
        let orig = store.value(id).data()[j];
        let side = |delta: f64, s: &mut ParamStore| -> Result<f64, NnError> {
            restore(s);
            s.value_mut(id).data_mut()[j] = orig + delta;
            let mut t = Tape::new();
            let out = f(&mut t, s)?;
            scalar(&t, out)
        };
        let fp = side(h, store)?;
        let fm = side(-h, store)?;
        store.value_mut(id).data_mut()[j] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    restore(store);
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_case() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let sum_sq = |t: &mut Tape, v: Var| {
            let sq = t.mul(v, v)?;
            t.sum(sq)
        };
        let mut tape = Tape::new();
        let v = tape.input(x.clone(), true);
        let l = sum_sq(&mut tape, v).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);
        assert!(finite_diff_gradcheck(sum_sq, &x, 1e-4).unwrap() < 1e-6);
    }

    #[test]
    fn linear_case_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 5.0]).unwrap();
        let err =
            finite_diff_gradcheck(|t, v| t.dot_const(v, vec![2.0, -3.0, 0.5]), &x, 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }
}
