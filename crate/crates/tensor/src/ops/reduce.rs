use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// Reductions accumulate in f64 so that finite differences of a scalar loss
// only see rounding from the elements that actually changed.

impl Tape {
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let out = self.record(Tensor::scalar(total as f32), &[x], |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        });
        self.set_precise(out, total);
        out
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let total = self.value(x).sum() / n as f64;
        let out = self.record(Tensor::scalar(total as f32), &[x], move |ctx| {
            let g = ctx.grad.item() / n as f32;
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        });
        self.set_precise(out, total);
        out
    }

    /// Mean over the trailing axis: `[.., c] -> [..]`.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&c, lead)) = shape.split_last() else {
            return Err(TensorError::Contract("mean_last_axis on a scalar".into()));
        };
        if c == 0 {
            return Err(TensorError::Degenerate {
                op: "mean_last_axis",
                detail: "empty trailing axis".into(),
            });
        }
        let lead = lead.to_vec();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32)
            .collect();
        let out = Tensor::new(lead, data)?;
        Ok(self.record(out, &[x], move |ctx| {
            let inv = 1.0 / c as f32;
            let mut d = Vec::with_capacity(ctx.grad.len() * c);
            for &g in ctx.grad.data() {
                d.extend(std::iter::repeat(g * inv).take(c));
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        }))
    }

    /// Global average pool over the spatial axes: `h×w×c -> c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let n = h * w;
        let mut acc = vec![0.0f64; c];
        for row in self.value(x).data().chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let out = Tensor::from_vec(acc.into_iter().map(|a| (a / n as f64) as f32).collect());
        Ok(self.record(out, &[x], move |ctx| {
            let inv = 1.0 / n as f32;
            let g: Vec<f32> = ctx.grad.data().iter().map(|g| g * inv).collect();
            let mut d = Vec::with_capacity(n * c);
            for _ in 0..n {
                d.extend_from_slice(&g);
            }
            vec![Some(Tensor::new(vec![h, w, c], d).unwrap())]
        }))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let sq: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        let norm = sq.sqrt();
        let out = self.record(Tensor::scalar(norm as f32), &[x], |ctx| {
            let n = ctx.output.item();
            let g = ctx.grad.item();
            let d = if n > 0.0 {
                ctx.inputs[0].map(|v| g * v / n)
            } else {
                Tensor::zeros(ctx.inputs[0].shape())
            };
            vec![Some(d)]
        });
        self.set_precise(out, norm);
        out
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("dot", self.shape(a), self.shape(b)));
        }
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let out = self.record(Tensor::scalar(total as f32), &[a, b], |ctx| {
            let g = ctx.grad.item();
            vec![
                ctx.needs[0].then(|| ctx.inputs[1].map(|v| v * g)),
                ctx.needs[1].then(|| ctx.inputs[0].map(|v| v * g)),
            ]
        });
        self.set_precise(out, total);
        Ok(out)
    }
}
