use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Carries the f64 copy through arithmetic on one-element operands.
    fn propagate_precise(&mut self, out: Var, inputs: &[Var], f: impl Fn(&[f64]) -> f64) -> Var {
        if self.value(out).len() == 1 && inputs.iter().all(|&v| self.value(v).len() == 1) {
            let args: Vec<f64> = inputs.iter().map(|&v| self.scalar_f64(v)).collect();
            self.set_precise(out, f(&args));
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let out = self.record(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        });
        Ok(self.propagate_precise(out, &[a, b], |v| v[0] + v[1]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let out = self.record(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        });
        Ok(self.propagate_precise(out, &[a, b], |v| v[0] - v[1]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let out = self.record(out, &[a, b], |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(y, |g, y| g * y).unwrap()),
                ctx.needs[1].then(|| ctx.grad.zip_map(x, |g, x| g * x).unwrap()),
            ]
        });
        Ok(self.propagate_precise(out, &[a, b], |v| v[0] * v[1]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: "div" });
        }
        let out = self.record(out, &[a, b], |ctx| {
            let (y, out) = (ctx.inputs[1], ctx.output);
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(y, |g, y| g / y).unwrap()),
                ctx.needs[1].then(|| {
                    let go = ctx.grad.zip_map(out, |g, o| g * o).unwrap();
                    go.zip_map(y, |v, y| -v / y).unwrap()
                }),
            ]
        });
        Ok(self.propagate_precise(out, &[a, b], |v| v[0] / v[1]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let out = self.record(out, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * s))]);
        self.propagate_precise(out, &[x], |v| v[0] * s as f64)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v + s);
        let out = self.record(out, &[x], |ctx| vec![Some(ctx.grad.clone())]);
        self.propagate_precise(out, &[x], |v| v[0] + s as f64)
    }

    /// `s - x`
    pub fn rsub_scalar(&mut self, s: f32, x: Var) -> Var {
        let out = self.value(x).map(|v| s - v);
        let out = self.record(out, &[x], |ctx| vec![Some(ctx.grad.map(|g| -g))]);
        self.propagate_precise(out, &[x], |v| s as f64 - v[0])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::abs);
        self.record(out, &[x], |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .unwrap(),
            )]
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::exp);
        self.record(out, &[x], |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y).unwrap())]
        })
    }

    /// Square root; gradient is taken as zero at the origin.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f32::sqrt);
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: "sqrt" });
        }
        Ok(self.record(out, &[x], |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.output, |g, y| if y > 0.0 { g * 0.5 / y } else { 0.0 })
                    .unwrap(),
            )]
        }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        self.record(out, &[x], move |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { g * slope })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.record(out, &[x], |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.output, |g, y| g * y * (1.0 - y))
                    .unwrap(),
            )]
        })
    }

    /// `x[..., c] + v[c]`, broadcasting `v` over every leading position.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.channel_check("add_channel", x, v)?;
        let mut out = self.value(x).clone();
        let bias = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bias) {
                *o += *b;
            }
        }
        Ok(self.record(out, &[x, v], move |ctx| {
            let g = ctx.grad;
            let gv = ctx.needs[1].then(|| {
                let mut acc = vec![0.0f64; c];
                for row in g.data().chunks(c) {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x as f64;
                    }
                }
                Tensor::from_vec(acc.into_iter().map(|x| x as f32).collect())
            });
            vec![Some(g.clone()), gv]
        }))
    }

    /// `x[..., c] * v[c]` (a 1×1 depthwise convolution for spatial `x`).
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.channel_check("mul_channel", x, v)?;
        let mut out = self.value(x).clone();
        let scale = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, s) in row.iter_mut().zip(&scale) {
                *o *= *s;
            }
        }
        Ok(self.record(out, &[x, v], move |ctx| {
            let (xv, vv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let gx = ctx.needs[0].then(|| {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(c) {
                    for (o, s) in row.iter_mut().zip(vv.data()) {
                        *o *= *s;
                    }
                }
                gx
            });
            let gv = ctx.needs[1].then(|| {
                let mut acc = vec![0.0f64; c];
                for (grow, xrow) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                    for ((a, &gg), &xx) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += (gg * xx) as f64;
                    }
                }
                Tensor::from_vec(acc.into_iter().map(|x| x as f32).collect())
            });
            vec![gx, gv]
        }))
    }

    fn channel_check(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        match (xs.last(), vs) {
            (Some(&c), [vc]) if c == *vc && c > 0 => Ok(c),
            _ => Err(TensorError::shape(op, xs, vs)),
        }
    }
}
