use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Source taps for ×2 bilinear upsampling with half-pixel centres.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f32;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

impl Tape {
    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match *self.shape(x) {
            [m, n] => (m, n),
            _ => {
                return Err(TensorError::Contract(format!(
                    "softmax_rows expects a matrix, got {:?}",
                    self.shape(x)
                )))
            }
        };
        let src = self.value(x);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0f32; m * n];
        for (orow, row) in out.chunks_mut(n.max(1)).zip(src.data().chunks(n.max(1))) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, &[x], move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut d = vec![0.0f32; m * n];
            for r in 0..m {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let inner: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[r * n + j] = yr[j] * (gr[j] - inner);
                }
            }
            vec![Some(Tensor::new(vec![m, n], d).unwrap())]
        }))
    }

    /// Bilinear ×2 upsampling of an `h×w×c` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if h == 0 || w == 0 {
            return Err(TensorError::Degenerate {
                op: "upsample2x",
                detail: format!("{h}×{w} input"),
            });
        }
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; oh * ow * c];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let o = (oy * ow + ox) * c;
                let corners = [
                    ((y0 * w + x0) * c, wy0 * wx0),
                    ((y0 * w + x1) * c, wy0 * wx1),
                    ((y1 * w + x0) * c, wy1 * wx0),
                    ((y1 * w + x1) * c, wy1 * wx1),
                ];
                for (base, wt) in corners {
                    for ch in 0..c {
                        out[o + ch] += wt * src[base + ch];
                    }
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.record(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0f32; h * w * c];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let o = (oy * ow + ox) * c;
                    let corners = [
                        ((y0 * w + x0) * c, wy0 * wx0),
                        ((y0 * w + x1) * c, wy0 * wx1),
                        ((y1 * w + x0) * c, wy1 * wx0),
                        ((y1 * w + x1) * c, wy1 * wx1),
                    ];
                    for (base, wt) in corners {
                        for ch in 0..c {
                            d[base + ch] += wt * g[o + ch];
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![h, w, c], d).unwrap())]
        }))
    }

    /// 3×3 box mean over `h×w` or `h×w×c`, same size output. Border windows
    /// average only the in-bounds neighbours.
    pub fn avg_pool3x3(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (h, w, c) = match *shape.as_slice() {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => {
                return Err(TensorError::Contract(format!(
                    "avg_pool3x3 expects h×w or h×w×c, got {shape:?}"
                )))
            }
        };
        let windows = box_windows(h, w);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; src.len()];
        for (p, (ys, xs, inv)) in windows.iter().enumerate() {
            for y in ys.clone() {
                for xx in xs.clone() {
                    let b = (y * w + xx) * c;
                    for ch in 0..c {
                        out[p * c + ch] += src[b + ch];
                    }
                }
            }
            for ch in 0..c {
                out[p * c + ch] *= inv;
            }
        }
        let out = Tensor::new(shape.clone(), out)?;
        Ok(self.record(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0f32; g.len()];
            for (p, (ys, xs, inv)) in windows.iter().enumerate() {
                for y in ys.clone() {
                    for xx in xs.clone() {
                        let b = (y * w + xx) * c;
                        for ch in 0..c {
                            d[b + ch] += g[p * c + ch] * inv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        }))
    }
}

type Window = (std::ops::Range<usize>, std::ops::Range<usize>, f32);

fn box_windows(h: usize, w: usize) -> Vec<Window> {
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let ys = y.saturating_sub(1)..(y + 2).min(h);
            let xs = x.saturating_sub(1)..(x + 2).min(w);
            let count = (ys.len() * xs.len()) as f32;
            v.push((ys, xs, 1.0 / count));
        }
    }
    v
}
