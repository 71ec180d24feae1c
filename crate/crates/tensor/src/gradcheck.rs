use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-8)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let out = tape.value(y);
    if out.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(tape.scalar_f64(y))
}

/// Checks the gradient of scalar `f` at `x` against central differences with
/// step `eps`. The step actually taken in f32 is used as the divisor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.value(y).shape()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.wrt_or_zeros(xv, x.shape());

    let mut numeric = Vec::with_capacity(x.len());
    let mut worst = (0.0f64, 0usize);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data_mut()[i] = hi;
        let f_hi = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let cd = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let a = analytic.data()[i] as f64;
        let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
        numeric.push(cd);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
