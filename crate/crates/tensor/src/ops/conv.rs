use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded correlation along one axis.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    let patch = g.patch();
    let mut cols = vec![0.0f32; g.rows() * patch];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.k + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&x[src * g.cin..(src + 1) * g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &Geometry) -> Vec<f32> {
    let patch = g.patch();
    let mut x = vec![0.0f32; g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let from = (ky * g.k + kx) * g.cin;
                        for (d, s) in x[src * g.cin..(src + 1) * g.cin]
                            .iter_mut()
                            .zip(&row[from..from + g.cin])
                        {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Row-major `c = a · b` (optionally transposed operands) via `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn sgemm(a: &[f32], a_t: bool, b: &[f32], b_t: bool, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices cover m×k, k×n and m×n elements under the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

impl Tape {
    /// Zero-padded cross-correlation of `x: h×w×cin` with `kernel: k×k×cin×cout`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = self.value(x).hwc()?;
        let (k, cout) = match *self.shape(kernel) {
            [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            _ => return Err(TensorError::shape("conv2d", self.shape(x), self.shape(kernel))),
        };
        if k % 2 == 0 {
            return Err(TensorError::Contract(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be at least 1".into()));
        }
        let (oh, ow) = match (
            conv2d_output_extent(h, k, stride, pad),
            conv2d_output_extent(w, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(TensorError::Degenerate {
                    op: "conv2d",
                    detail: format!("{h}×{w} input, kernel {k}, stride {stride}, pad {pad}"),
                })
            }
        };
        let g = Geometry {
            h,
            w,
            cin,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(self.value(x).data(), &g);
        let out = sgemm(&cols, false, self.value(kernel).data(), false, g.rows(), g.patch(), cout);
        let out = Tensor::new(vec![oh, ow, cout], out)?;
        Ok(self.record(out, &[x, kernel], move |ctx| {
            let (xv, kv, gr) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
            let gx = ctx.needs[0].then(|| {
                let dcols = sgemm(gr, false, kv.data(), true, g.rows(), cout, g.patch());
                Tensor::new(vec![h, w, cin], col2im(&dcols, &g)).unwrap()
            });
            let gk = ctx.needs[1].then(|| {
                let cols = im2col(xv.data(), &g);
                let dk = sgemm(&cols, true, gr, false, g.patch(), g.rows(), cout);
                Tensor::new(vec![k, k, cin, cout], dk).unwrap()
            });
            vec![gx, gk]
        }))
    }
}
