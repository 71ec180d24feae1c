//! Unsupervised training objectives and supervised error metrics.

use protodepth_tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Warped;

const SSIM_C1: f32 = 0.01 * 0.01;
const SSIM_C2: f32 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_ph: f32,
    pub w_sz: f32,
    pub w_sm: f32,
    pub w_dr: f32,
    pub w_co: f32,
    pub w_st: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_ph: 1.0,
            w_sz: 1.0,
            w_sm: 0.1,
            w_dr: 0.1,
            w_co: 0.15,
            w_st: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_ph", self.w_ph),
            ("w_sz", self.w_sz),
            ("w_sm", self.w_sm),
            ("w_dr", self.w_dr),
            ("w_co", self.w_co),
            ("w_st", self.w_st),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Which objective is being optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Pretrain,
    AdaptIncremental,
    AdaptAgnostic,
}

/// Per-pixel structural similarity (h×w), 3×3 windows clipped at the border,
/// averaged over channels. Window statistics are accumulated in f64.
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (h, w, c) = tape.value(a).hwc()?;
    if tape.shape(b) != tape.shape(a) {
        return Err(TensorError::shape("ssim", tape.shape(a), tape.shape(b)).into());
    }
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    let (c1, c2) = (SSIM_C1 as f64, SSIM_C2 as f64);
    // Per (pixel, channel): ∂S/∂ of μa, E[a²], E[ab], μb, E[b²].
    let mut coef = vec![[0f64; 5]; h * w * c];
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let ys = y.saturating_sub(1)..(y + 2).min(h);
        for x in 0..w {
            let xs = x.saturating_sub(1)..(x + 2).min(w);
            let n = (ys.len() * xs.len()) as f64;
            let mut acc = 0f64;
            for ch in 0..c {
                let mut m = [0f64; 5];
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        let i = (yy * w + xx) * c + ch;
                        let (p, q) = (av[i] as f64, bv[i] as f64);
                        m[0] += p;
                        m[1] += q;
                        m[2] += p * p;
                        m[3] += q * q;
                        m[4] += p * q;
                    }
                }
                let [mu_a, mu_b, e_aa, e_bb, e_ab] = m.map(|v| v / n);
                let l_num = 2.0 * mu_a * mu_b + c1;
                let c_num = 2.0 * (e_ab - mu_a * mu_b) + c2;
                let l_den = mu_a * mu_a + mu_b * mu_b + c1;
                let c_den = (e_aa - mu_a * mu_a) + (e_bb - mu_b * mu_b) + c2;
                let s = l_num * c_num / (l_den * c_den);
                acc += s;
                coef[(y * w + x) * c + ch] = [
                    s * (2.0 * mu_b / l_num - 2.0 * mu_b / c_num - 2.0 * mu_a / l_den + 2.0 * mu_a / c_den) / n,
                    -s / c_den / n,
                    2.0 * s / c_num / n,
                    s * (2.0 * mu_a / l_num - 2.0 * mu_a / c_num - 2.0 * mu_b / l_den + 2.0 * mu_b / c_den) / n,
                    -s / c_den / n,
                ];
            }
            out[y * w + x] = (acc / c as f64) as f32;
        }
    }
    let out = Tensor::new(vec![h, w], out)?;
    if !out.is_finite() {
        return Err(Error::NonFiniteLoss { term: "ssim" });
    }
    Ok(tape.record(out, &[a, b], move |ctx| {
        let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut ga = vec![0f64; h * w * c];
        let mut gb = vec![0f64; h * w * c];
        for y in 0..h {
            let ys = y.saturating_sub(1)..(y + 2).min(h);
            for x in 0..w {
                let xs = x.saturating_sub(1)..(x + 2).min(w);
                let gp = g[y * w + x] as f64 / c as f64;
                for ch in 0..c {
                    let [d_mu_a, d_aa, d_ab, d_mu_b, d_bb] = coef[(y * w + x) * c + ch];
                    for yy in ys.clone() {
                        for xx in xs.clone() {
                            let i = (yy * w + xx) * c + ch;
                            let (p, q) = (av[i] as f64, bv[i] as f64);
                            ga[i] += gp * (d_mu_a + 2.0 * p * d_aa + q * d_ab);
                            gb[i] += gp * (d_mu_b + 2.0 * q * d_bb + p * d_ab);
                        }
                    }
                }
            }
        }
        let shape = ctx.inputs[0].shape().to_vec();
        let to = |v: Vec<f64>| Tensor::new(shape.clone(), v.into_iter().map(|x| x as f32).collect()).unwrap();
        vec![ctx.needs[0].then(|| to(ga)), ctx.needs[1].then(|| to(gb))]
    }))
}

/// Photometric reconstruction error pooled over every valid pixel of every view.
pub struct Photometric {
    pub value: Var,
    /// Number of (view, pixel) pairs that contributed.
    pub support: usize,
}

/// `w_co·L1 + w_st·(1−SSIM)` between `target` (h×w×3) and each warped
/// view, averaged over valid pixels. No valid pixel gives a constant zero.
pub fn photometric_loss(
    tape: &mut Tape,
    target: Var,
    views: &[Warped],
    weights: &LossWeights,
) -> Result<Photometric> {
    let mut total: Option<Var> = None;
    let mut support = 0usize;
    for view in views {
        let count = view.valid_count();
        if count == 0 {
            continue;
        }
        support += count;
        let diff = tape.sub(view.image, target)?;
        let l1 = tape.abs(diff);
        let l1 = tape.mean_last_axis(l1)?;
        let l1 = tape.scale(l1, weights.w_co);
        let s = ssim(tape, view.image, target)?;
        let dissim = tape.rsub_scalar(1.0, s);
        let dissim = tape.scale(dissim, weights.w_st);
        let e = tape.add(l1, dissim)?;
        let m = tape.constant(view.validity.clone());
        let e = tape.mul(e, m)?;
        let s = tape.sum(e);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let value = match total {
        Some(t) => tape.scale(t, 1.0 / support as f32),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(Photometric { value, support })
}

/// `Σ |M ⊙ (pred − z)| / (h·w)`.
pub fn sparse_loss(tape: &mut Tape, pred: Var, sparse: &Tensor, mask: &Tensor) -> Result<Var> {
    let n = sparse.len();
    let z = tape.constant(sparse.clone());
    let m = tape.constant(mask.clone());
    let diff = tape.sub(pred, z)?;
    let diff = tape.mul(diff, m)?;
    let a = tape.abs(diff);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / n as f32))
}

/// Image-gradient edge weights `exp(−mean_c |∂I|)` along x then y (each h×w).
pub fn edge_weights(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = image.hwc()?;
    let px = image.data();
    let mut wx = vec![0f32; h * w];
    let mut wy = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (mut gx, mut gy) = (0f32, 0f32);
            for ch in 0..c {
                let here = px[i * c + ch];
                if x + 1 < w {
                    gx += (px[(i + 1) * c + ch] - here).abs();
                }
                if y + 1 < h {
                    gy += (px[(i + w) * c + ch] - here).abs();
                }
            }
            wx[i] = (-gx / c as f32).exp();
            wy[i] = (-gy / c as f32).exp();
        }
    }
    Ok((Tensor::new(vec![h, w], wx)?, Tensor::new(vec![h, w], wy)?))
}

/// Edge-aware first-order smoothness of `pred` (h×w) guided by `image`.
pub fn smoothness_loss(tape: &mut Tape, pred: Var, image: &Tensor) -> Result<Var> {
    let (wx, wy) = edge_weights(image)?;
    let n = wx.len();
    let dx = tape.forward_diff(pred, 1)?;
    let dy = tape.forward_diff(pred, 0)?;
    let dx = tape.abs(dx);
    let dy = tape.abs(dy);
    let wx = tape.constant(wx);
    let wy = tape.constant(wy);
    let ex = tape.mul(dx, wx)?;
    let ey = tape.mul(dy, wy)?;
    let e = tape.add(ex, ey)?;
    let s = tape.sum(e);
    Ok(tape.scale(s, 1.0 / n as f32))
}

/// Cosine similarity of two plain vectors, in f64.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::domain(
            "cosine",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::domain("cosine", "zero-norm vector"));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

fn cosine_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.l2_norm(a);
    let nb = tape.l2_norm(b);
    if tape.scalar_f64(na) == 0.0 || tape.scalar_f64(nb) == 0.0 {
        return Err(Error::domain("descriptor", "zero-norm descriptor"));
    }
    let d = tape.dot(a, b)?;
    let n = tape.mul(na, nb)?;
    Ok(tape.div(d, n)?)
}

/// `1 − cos(s, r) + Σ_j cos(r_j, r) / w_jk`, with `w_jk` defaulting to the
/// number of other descriptors. Only `r` may track gradient.
pub fn descriptor_loss(
    tape: &mut Tape,
    sample: &Tensor,
    r: Var,
    others: &[Tensor],
    w_jk: Option<f32>,
) -> Result<Var> {
    let s = tape.constant(sample.clone());
    let attract = cosine_var(tape, s, r)?;
    let mut loss = tape.rsub_scalar(1.0, attract);
    if !others.is_empty() {
        let w = w_jk.unwrap_or(others.len() as f32);
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::domain("descriptor", format!("w_jk must be positive, got {w}")));
        }
        for o in others {
            let o = tape.constant(o.clone());
            let c = cosine_var(tape, o, r)?;
            let c = tape.scale(c, 1.0 / w);
            loss = tape.add(loss, c)?;
        }
    }
    Ok(loss)
}

/// The individual terms of one sample's objective.
pub struct LossTerms {
    pub photometric: Var,
    pub sparse: Var,
    pub smoothness: Var,
    /// Present only when adapting with domain-agnostic routing.
    pub descriptor: Option<Var>,
}

/// Weighted sum of the terms. A non-finite term is reported by name.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights, mode: LossMode) -> Result<Var> {
    match (mode, terms.descriptor.is_some()) {
        (LossMode::AdaptAgnostic, false) => {
            return Err(Error::domain("loss", "agnostic adaptation needs a descriptor term"));
        }
        (LossMode::Pretrain | LossMode::AdaptIncremental, true) => {
            return Err(Error::domain("loss", format!("descriptor term is not used in {mode:?} mode")));
        }
        _ => {}
    }
    let mut parts = vec![
        ("photometric", terms.photometric, weights.w_ph),
        ("sparse", terms.sparse, weights.w_sz),
        ("smoothness", terms.smoothness, weights.w_sm),
    ];
    if let Some(d) = terms.descriptor {
        parts.push(("descriptor", d, weights.w_dr));
    }
    let mut total: Option<Var> = None;
    for (term, v, w) in parts {
        if tape.value(v).len() != 1 {
            return Err(Error::domain("loss", format!("{term} term is not a scalar")));
        }
        if !tape.scalar_f64(v).is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
        let scaled = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total.expect("at least three terms"))
}

/// Dense error against ground truth, in the units of the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
}

impl ErrorMetrics {
    pub const NAMES: [&'static str; 4] = ["mae", "rmse", "imae", "irmse"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mae" => Some(self.mae),
            "rmse" => Some(self.rmse),
            "imae" => Some(self.imae),
            "irmse" => Some(self.irmse),
            _ => None,
        }
    }

    pub fn scaled(&self, s: f64) -> ErrorMetrics {
        ErrorMetrics {
            mae: self.mae * s,
            rmse: self.rmse * s,
            imae: self.imae * s,
            irmse: self.irmse * s,
        }
    }

    /// Arithmetic mean of per-sample metrics.
    pub fn mean(items: &[ErrorMetrics]) -> Result<ErrorMetrics> {
        if items.is_empty() {
            return Err(Error::domain("metrics", "no samples to average"));
        }
        let n = items.len() as f64;
        let mut m = ErrorMetrics {
            mae: 0.0,
            rmse: 0.0,
            imae: 0.0,
            irmse: 0.0,
        };
        for e in items {
            m.mae += e.mae;
            m.rmse += e.rmse;
            m.imae += e.imae;
            m.irmse += e.irmse;
        }
        Ok(m.scaled(1.0 / n))
    }
}

/// MAE, RMSE and their inverse-depth counterparts over pixels whose ground
/// truth lies in `range`.
pub fn error_metrics(pred: &Tensor, gt: &Tensor, range: [f32; 2]) -> Result<ErrorMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::domain(
            "metrics",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut ae, mut se, mut iae, mut ise) = (0f64, 0f64, 0f64, 0f64);
    let mut n = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !(g > 0.0 && g >= range[0] && g <= range[1]) {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::domain("metrics", format!("predicted depth must be positive, got {p}")));
        }
        n += 1;
        let (p, g) = (p as f64, g as f64);
        ae += (p - g).abs();
        se += (p - g) * (p - g);
        let inv = 1.0 / p - 1.0 / g;
        iae += inv.abs();
        ise += inv * inv;
    }
    if n == 0 {
        return Err(Error::domain("metrics", format!("no ground-truth pixels within {range:?}")));
    }
    let n = n as f64;
    Ok(ErrorMetrics {
        mae: ae / n,
        rmse: (se / n).sqrt(),
        imae: iae / n,
        irmse: (ise / n).sqrt(),
    })
}
