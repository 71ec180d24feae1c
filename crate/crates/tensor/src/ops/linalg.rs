use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c[m×n] = op(a) · op(b)` where `op` optionally transposes.
///
/// Accumulates over the inner index in ascending order with separate
/// multiply and add, so results are reproducible and exactly cancel when
/// the inner sum contains `x, -x` pairs.
pub(crate) fn gemm(
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let a_at = |i: usize, p: usize| if a_t { a[p * m + i] } else { a[i * k + p] };
    if !b_t {
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let s = a_at(i, p);
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a_at(i, p) * b[j * k + p];
                }
                c[i * n + j] = acc;
            }
        }
    }
    c
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm(self.value(a).data(), false, self.value(b).data(), false, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, &[a, b], move |ctx| {
            let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            // dA = G · Bᵀ, dB = Aᵀ · G
            let ga = ctx.needs[0].then(|| {
                Tensor::new(vec![m, k], gemm(g.data(), false, bv.data(), true, m, n, k)).unwrap()
            });
            let gb = ctx.needs[1].then(|| {
                Tensor::new(vec![k, n], gemm(av.data(), true, g.data(), false, k, m, n)).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(x))?;
        let out = Tensor::new(vec![c, r], transpose_data(self.value(x).data(), r, c))?;
        Ok(self.record(out, &[x], move |ctx| {
            vec![Some(
                Tensor::new(vec![r, c], transpose_data(ctx.grad.data(), c, r)).unwrap(),
            )]
        }))
    }
}

fn transpose_data(x: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
