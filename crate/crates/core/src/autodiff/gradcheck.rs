//! Central finite-difference verification of tape gradients (64-bit).

use std::sync::Arc;

use super::tape::{OpKind, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the ±h probe crossed a leaky-ReLU kink.
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tol
    }
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

/// Checks the gradient of the scalar built by `build` with respect to
/// every input. At most `max_coords` coordinates per input are probed
/// (evenly strided); `None` probes all of them.
pub fn gradient_check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs, true)?;
    let grads = tape.backward(out)?;
    let base_kinks = tape.kink_pattern();

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped_kinks: 0, tol };
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].len();
        let ad = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(stride) {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + h;
            let (tp, _, op) = eval(&probe, false)?;
            probe[which].data_mut()[i] = orig - h;
            let (tm, _, om) = eval(&probe, false)?;
            probe[which].data_mut()[i] = orig;
            if tp.kink_pattern() != base_kinks || tm.kink_pattern() != base_kinks {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (tp.scalar_value(op) - tm.scalar_value(om)) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(relative_error(ad[i], fd));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks a single kernel by reducing its output to `sum(r ⊙ op(inputs))`
/// with a fixed pseudo-random weighting `r`.
pub fn check_op(kind: &OpKind, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport> {
    gradient_check(
        inputs,
        |tape, vars| {
            let y = tape.apply(kind, vars)?;
            let n = tape.value(y).len();
            let r: Vec<f64> = (0..n)
                .map(|i| ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 2.0 + 0.1)
                .collect();
            let shape = tape.value(y).shape().to_vec();
            let rv = tape.constant(Tensor::new(shape, r)?)?;
            let prod = tape.mul(y, rv)?;
            tape.sum(prod)
        },
        h,
        tol,
        None,
    )
}

/// Convenience for building gather indices.
pub fn index(v: Vec<usize>) -> Arc<[usize]> {
    v.into()
}
