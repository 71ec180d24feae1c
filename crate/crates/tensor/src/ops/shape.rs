use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, &[x], move |ctx| {
            vec![Some(ctx.grad.clone().reshape(&from).unwrap())]
        }))
    }

    /// Concatenate channels-last tensors along the trailing axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat of nothing".into()));
        };
        let lead: Vec<usize> = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::shape("concat_channels", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0f32; rows * total];
        let mut offset = 0;
        for (&p, &cw) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + cw]
                    .copy_from_slice(&src[r * cw..(r + 1) * cw]);
            }
            offset += cw;
        }
        let mut shape = lead.clone();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, parts, move |ctx| {
            let g = ctx.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &cw) in widths.iter().enumerate() {
                if ctx.needs[i] {
                    let mut d = vec![0.0f32; rows * cw];
                    for r in 0..rows {
                        d[r * cw..(r + 1) * cw]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + cw]);
                    }
                    let mut shape = lead.clone();
                    shape.push(cw);
                    grads.push(Some(Tensor::new(shape, d).unwrap()));
                } else {
                    grads.push(None);
                }
                offset += cw;
            }
            grads
        }))
    }

    /// Forward difference along `axis` (0 = rows/y, 1 = columns/x) of an
    /// `h×w` or `h×w×c` tensor. The last slice along the axis is zero.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 3) || axis > 1 {
            return Err(TensorError::Contract(format!(
                "forward_diff axis {axis} on shape {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let c = if shape.len() == 3 { shape[2] } else { 1 };
        let src = self.value(x).data();
        let mut out = vec![0.0f32; src.len()];
        let stride = if axis == 0 { w * c } else { c };
        for y in 0..h {
            for xx in 0..w {
                let last = if axis == 0 { y + 1 == h } else { xx + 1 == w };
                if last {
                    continue;
                }
                let base = (y * w + xx) * c;
                for ch in 0..c {
                    out[base + ch] = src[base + ch + stride] - src[base + ch];
                }
            }
        }
        let out = Tensor::new(shape.clone(), out)?;
        Ok(self.record(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0f32; g.len()];
            for y in 0..h {
                for xx in 0..w {
                    let last = if axis == 0 { y + 1 == h } else { xx + 1 == w };
                    if last {
                        continue;
                    }
                    let base = (y * w + xx) * c;
                    for ch in 0..c {
                        d[base + ch + stride] += g[base + ch];
                        d[base + ch] -= g[base + ch];
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        }))
    }
}
