//! Pinhole camera model, rigid poses and the differentiable reprojection warp.

use protodepth_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame depth below which a point counts as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics. Serialized as `[fx, fy, cx, cy]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct Intrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

impl Intrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::domain(
                "intrinsics",
                format!("focal lengths must be positive and finite, got fx={fx} fy={fy}"),
            ));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::domain("intrinsics", "principal point must be finite"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Same field of view rescaled by a focal factor.
    pub fn with_focal_scale(self, s: f32) -> Result<Self> {
        Intrinsics::new(self.fx * s, self.fy * s, self.cx, self.cy)
    }
}

impl TryFrom<[f32; 4]> for Intrinsics {
    type Error = Error;
    fn try_from(v: [f32; 4]) -> Result<Self> {
        Intrinsics::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Intrinsics> for [f32; 4] {
    fn from(k: Intrinsics) -> Self {
        [k.fx, k.fy, k.cx, k.cy]
    }
}

/// Rigid transform `p ↦ R p + t`. Serialized as the 12 numbers of `[R | t]`
/// row by row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-5 {
                    return Err(Error::domain("pose", "rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-5 {
            return Err(Error::domain("pose", format!("rotation determinant {det}")));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::domain("pose", "translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Rotation of `angle` radians about `axis` (Rodrigues), then translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if angle == 0.0 {
            return Pose::new(Pose::identity().rotation, translation);
        }
        if !(n > 0.0) {
            return Err(Error::domain("pose", "rotation axis has zero length"));
        }
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let v = 1.0 - c;
        let rotation = [
            [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
            [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
            [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
        ];
        Pose::new(rotation, translation)
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        Pose {
            rotation,
            translation: self.transform_point(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.rotation[j][i];
            }
        }
        let inv_rot = Pose {
            rotation: rt,
            translation: [0.0; 3],
        };
        let t = inv_rot.rotate(self.translation);
        Pose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }
}

impl TryFrom<Vec<f64>> for Pose {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::domain("pose", format!("expected 12 numbers, got {}", v.len())));
        }
        let row = |i: usize| [v[4 * i], v[4 * i + 1], v[4 * i + 2]];
        Pose::new([row(0), row(1), row(2)], [v[3], v[7], v[11]])
    }
}

impl From<Pose> for Vec<f64> {
    fn from(p: Pose) -> Self {
        let mut out = Vec::with_capacity(12);
        for i in 0..3 {
            out.extend_from_slice(&p.rotation[i]);
            out.push(p.translation[i]);
        }
        out
    }
}

/// Camera-frame point seen at pixel `(u, v)` with depth `depth`.
pub fn backproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Result<[f64; 3]> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::domain("backproject", format!("depth must be positive, got {depth}")));
    }
    Ok([
        depth * (u - k.cx as f64) / k.fx as f64,
        depth * (v - k.cy as f64) / k.fy as f64,
        depth,
    ])
}

/// Pixel coordinates of a camera-frame point, or `None` behind the camera.
pub fn project(p: [f64; 3], k: &Intrinsics) -> Option<[f64; 2]> {
    if !(p[2] > MIN_PROJECTED_DEPTH) {
        return None;
    }
    Some([
        k.fx as f64 * p[0] / p[2] + k.cx as f64,
        k.fy as f64 * p[1] / p[2] + k.cy as f64,
    ])
}

/// A reprojected view: the warped image node and its validity mask.
pub struct Warped {
    /// h×w×c, zero where invalid.
    pub image: Var,
    /// h×w of 0/1.
    pub validity: Tensor,
}

impl Warped {
    pub fn valid_count(&self) -> usize {
        self.validity.data().iter().filter(|&&m| m > 0.0).count()
    }
}

struct Sample {
    x: f64,
    y: f64,
    du_dd: f64,
    dv_dd: f64,
}

/// Reconstructs the target view by sampling `source` (h×w×c) at the
/// reprojection of every target pixel, using target depth `depth` (h×w) and
/// `pose` mapping target-frame points into the source frame. Bilinear
/// sampling; a pixel is valid when its reprojection lies strictly inside the
/// source image in front of the camera. Differentiable with respect to depth.
pub fn warp_image(
    tape: &mut Tape,
    source: &Tensor,
    depth: Var,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<Warped> {
    let (h, w, c) = source.hwc()?;
    let dshape = tape.shape(depth).to_vec();
    if dshape != [h, w] {
        return Err(Error::domain(
            "warp",
            format!("depth shape {dshape:?} does not match source {h}x{w}"),
        ));
    }
    let d = tape.value(depth).data().to_vec();
    let (fx, fy, cx, cy) = (k.fx as f64, k.fy as f64, k.cx as f64, k.cy as f64);
    let t = pose.translation;
    let mut samples: Vec<Option<Sample>> = Vec::with_capacity(h * w);
    let mut out = vec![0f32; h * w * c];
    let mut validity = vec![0f32; h * w];
    let src = source.data();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let z = d[i] as f64;
            if !(z > 0.0 && z.is_finite()) {
                samples.push(None);
                continue;
            }
            let ray = [(u as f64 - cx) / fx, (v as f64 - cy) / fy, 1.0];
            let a = pose.rotate(ray);
            let p = [z * a[0] + t[0], z * a[1] + t[1], z * a[2] + t[2]];
            if !(p[2] > MIN_PROJECTED_DEPTH) {
                samples.push(None);
                continue;
            }
            let x = fx * p[0] / p[2] + cx;
            let y = fy * p[1] / p[2] + cy;
            if !(x > 0.0 && x < (w - 1) as f64 && y > 0.0 && y < (h - 1) as f64) {
                samples.push(None);
                continue;
            }
            let z2 = p[2] * p[2];
            let du_dd = fx * (a[0] * p[2] - p[0] * a[2]) / z2;
            let dv_dd = fy * (a[1] * p[2] - p[1] * a[2]) / z2;
            validity[i] = 1.0;
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (ax, ay) = (x - x0 as f64, y - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - ax) + at(y0, x0 + 1) * ax;
                let bot = at(y0 + 1, x0) * (1.0 - ax) + at(y0 + 1, x0 + 1) * ax;
                out[i * c + ch] = (top * (1.0 - ay) + bot * ay) as f32;
            }
            samples.push(Some(Sample { x, y, du_dd, dv_dd }));
        }
    }
    let image = Tensor::new(vec![h, w, c], out)?;
    let src_owned = source.clone();
    let image = tape.record(image, &[depth], move |ctx| {
        let src = src_owned.data();
        let g = ctx.grad.data();
        let mut gd = vec![0f32; h * w];
        for (i, s) in samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let (x0, y0) = (s.x.floor() as usize, s.y.floor() as usize);
            let (ax, ay) = (s.x - x0 as f64, s.y - y0 as f64);
            let mut acc = 0f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let di_dx = (1.0 - ay) * (at(y0, x0 + 1) - at(y0, x0))
                    + ay * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
                let di_dy = (1.0 - ax) * (at(y0 + 1, x0) - at(y0, x0))
                    + ax * (at(y0 + 1, x0 + 1) - at(y0, x0 + 1));
                acc += g[i * c + ch] as f64 * (di_dx * s.du_dd + di_dy * s.dv_dd);
            }
            gd[i] = acc as f32;
        }
        vec![Some(Tensor::new(vec![h, w], gd).unwrap())]
    });
    Ok(Warped {
        image,
        validity: Tensor::new(vec![h, w], validity)?,
    })
}
