//! Ray-cast multi-domain benchmark: textured planar scenes seen from three
//! nearby camera poses, with sparse depth and dense ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use protodepth_tensor::{io as pdt, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::rng::{self, Rng};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Points per frame at 640×480 that the indoor profile's density is scaled from.
const INDOOR_POINTS_AT_VGA: f64 = 1500.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    /// Valid ground-truth depth interval, metres.
    pub depth_range: [f32; 2],
    /// Distance of the back wall.
    pub wall_depth: [f32; 2],
    /// Height of the camera above the floor.
    pub camera_height: [f32; 2],
    pub box_count: [usize; 2],
    /// Distance of each box's front face.
    pub box_depth: [f32; 2],
    /// Width, height and thickness of boxes.
    pub box_size: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceParams {
    /// Texture cycles per metre.
    pub texture_frequency: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub hue_shift_deg: f32,
    /// Per-frame additive pixel noise.
    pub noise_std: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionParams {
    /// Camera displacement between consecutive frames, metres.
    pub baseline: f32,
    pub rotation_deg: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub scene: SceneParams,
    pub appearance: AppearanceParams,
    /// Fraction of pixels carrying a sparse measurement.
    pub sparse_density: f64,
    #[serde(default)]
    pub sparse_noise_std: f32,
    pub intrinsics: Intrinsics,
    pub motion: MotionParams,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.2
}

fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = 0.8 * width as f32;
    Intrinsics::new(f, f, (width as f32 - 1.0) / 2.0, (height as f32 - 1.0) / 2.0).unwrap()
}

impl DomainSpec {
    /// Room-scale scenes, 0.2–5 m, about 1500 points per VGA frame.
    pub fn indoor_like(seed: u64) -> DomainSpec {
        let (h, w) = (64, 96);
        DomainSpec {
            name: "indoor".into(),
            seed,
            height: h,
            width: w,
            scene: SceneParams {
                depth_range: [0.2, 5.0],
                wall_depth: [4.0, 4.8],
                camera_height: [0.9, 1.3],
                box_count: [2, 4],
                box_depth: [1.0, 3.2],
                box_size: [0.4, 1.2],
            },
            appearance: AppearanceParams {
                texture_frequency: 2.0,
                brightness: 1.0,
                contrast: 1.0,
                hue_shift_deg: 0.0,
                noise_std: 0.004,
            },
            sparse_density: INDOOR_POINTS_AT_VGA / (640.0 * 480.0),
            sparse_noise_std: 0.0,
            intrinsics: default_intrinsics(w, h),
            motion: MotionParams {
                baseline: 0.08,
                rotation_deg: 1.5,
            },
            eval_fraction: default_eval_fraction(),
        }
    }

    /// Street-scale scenes with 5% sparse density.
    pub fn outdoor_like(seed: u64) -> DomainSpec {
        let (h, w) = (64, 96);
        DomainSpec {
            name: "outdoor".into(),
            seed,
            height: h,
            width: w,
            scene: SceneParams {
                depth_range: [1.0, 60.0],
                wall_depth: [40.0, 55.0],
                camera_height: [1.5, 1.8],
                box_count: [2, 4],
                box_depth: [5.0, 30.0],
                box_size: [1.5, 4.0],
            },
            appearance: AppearanceParams {
                texture_frequency: 0.25,
                brightness: 1.0,
                contrast: 1.0,
                hue_shift_deg: 0.0,
                noise_std: 0.004,
            },
            sparse_density: 0.05,
            sparse_noise_std: 0.0,
            intrinsics: default_intrinsics(w, h),
            motion: MotionParams {
                baseline: 0.5,
                rotation_deg: 1.0,
            },
            eval_fraction: default_eval_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config(format!("domain spec {:?}: {detail}", self.name)));
        if !(self.sparse_density > 0.0 && self.sparse_density <= 0.1) {
            return bad(format!("sparse_density must lie in (0, 0.1], got {}", self.sparse_density));
        }
        let s = &self.scene;
        let [d_min, d_max] = s.depth_range;
        if !(d_min > 0.0 && d_max > d_min) {
            return bad(format!("depth_range must satisfy 0 < d_min < d_max, got {:?}", s.depth_range));
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("extent {}x{} must be positive multiples of 8", self.height, self.width));
        }
        for (name, r) in [
            ("wall_depth", s.wall_depth),
            ("camera_height", s.camera_height),
            ("box_depth", s.box_depth),
            ("box_size", s.box_size),
        ] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return bad(format!("{name} must be a positive ordered interval, got {r:?}"));
            }
        }
        if s.wall_depth[1] > d_max || s.box_depth[0] < d_min {
            return bad("scene layout leaves the depth range".into());
        }
        if s.box_count[0] > s.box_count[1] {
            return bad("box_count must be ordered".into());
        }
        let a = &self.appearance;
        if !(a.texture_frequency > 0.0 && a.brightness > 0.0 && a.contrast > 0.0) {
            return bad("texture frequency, brightness and contrast must be positive".into());
        }
        if !(a.noise_std >= 0.0 && self.sparse_noise_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.motion.baseline >= 0.0 && self.motion.rotation_deg >= 0.0) {
            return bad("motion magnitudes must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)".into());
        }
        Intrinsics::new(self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy)?;
        Ok(())
    }

    /// Number of held-out samples among `n`.
    pub fn eval_count(&self, n: usize) -> usize {
        if n < 2 {
            return 0;
        }
        ((n as f64 * self.eval_fraction).round() as usize).clamp(1, n - 1)
    }
}

/// Per-domain changes applied by [`make_shifted_family`]. Multiplicative
/// factors are cycled over domains and raised to the power `gap`, so a gap
/// of 0 leaves every domain equal to the base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftProfile {
    pub gap: f32,
    /// Hue rotation added per domain index, degrees.
    pub hue_step_deg: f32,
    pub brightness: Vec<f32>,
    pub contrast: Vec<f32>,
    pub texture_frequency: Vec<f32>,
    pub focal: Vec<f32>,
    /// Scales wall distance, box distance, box size and camera height.
    pub room_scale: Vec<f32>,
}

impl Default for ShiftProfile {
    fn default() -> Self {
        ShiftProfile {
            gap: 1.0,
            hue_step_deg: 120.0,
            brightness: vec![1.0],
            contrast: vec![1.0, 0.3, 3.0],
            texture_frequency: vec![1.0, 1.0, 3.0],
            focal: vec![1.0, 0.6, 1.6],
            room_scale: vec![1.0, 0.7, 0.5],
        }
    }
}

/// `n_domains` variants of `base` sharing its scene family.
pub fn make_shifted_family(base: &DomainSpec, n_domains: usize, shift: &ShiftProfile) -> Result<Vec<DomainSpec>> {
    if n_domains < 2 {
        return Err(Error::Config(format!("a shifted family needs at least 2 domains, got {n_domains}")));
    }
    if !(shift.gap >= 0.0 && shift.gap.is_finite()) {
        return Err(Error::Config("shift gap must be finite and non-negative".into()));
    }
    let factors = [&shift.brightness, &shift.contrast, &shift.texture_frequency, &shift.focal, &shift.room_scale];
    if factors.iter().any(|v| v.iter().any(|&f| !(f > 0.0 && f.is_finite()))) {
        return Err(Error::Config("shift factors must be positive and finite".into()));
    }
    let g = shift.gap;
    let cycle = |v: &[f32], i: usize| if v.is_empty() { 1.0 } else { v[i % v.len()].powf(g) };
    let mut out = Vec::with_capacity(n_domains);
    for i in 0..n_domains {
        let mut spec = base.clone();
        spec.name = format!("{}-{}", base.name, i + 1);
        spec.seed = rng::derive_seed(base.seed, &format!("family-domain-{i}"));
        let a = &mut spec.appearance;
        a.hue_shift_deg = base.appearance.hue_shift_deg + g * shift.hue_step_deg * i as f32;
        a.brightness = base.appearance.brightness * cycle(&shift.brightness, i);
        a.contrast = base.appearance.contrast * cycle(&shift.contrast, i);
        a.texture_frequency = base.appearance.texture_frequency * cycle(&shift.texture_frequency, i);
        spec.intrinsics = base.intrinsics.with_focal_scale(cycle(&shift.focal, i))?;
        let r = cycle(&shift.room_scale, i);
        let sc = &mut spec.scene;
        for v in [&mut sc.wall_depth, &mut sc.box_depth, &mut sc.box_size, &mut sc.camera_height] {
            *v = v.map(|x| x * r);
        }
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One training triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// h×w×3 frames t−1, t, t+1.
    pub image_prev: Tensor,
    pub image: Tensor,
    pub image_next: Tensor,
    /// h×w sparse depth, zero where `mask` is 0.
    pub sparse: Tensor,
    pub mask: Tensor,
    /// h×w dense depth of frame t.
    pub gt: Tensor,
    pub intrinsics: Intrinsics,
    /// Maps frame-t points into frame t−1.
    pub pose_prev: Pose,
    /// Maps frame-t points into frame t+1.
    pub pose_next: Pose,
}

#[derive(Clone, Copy)]
enum Face {
    /// Plane of constant x, y or z; texture uses the other two.
    Axis(usize),
}

struct Surface {
    color: [f64; 3],
    phase: [f64; 3],
    tilt: f64,
}

struct Cuboid {
    lo: [f64; 3],
    hi: [f64; 3],
}

struct Scene {
    wall: f64,
    floor: f64,
    boxes: Vec<Cuboid>,
    /// Wall, floor, then one per box.
    surfaces: Vec<Surface>,
}

fn uniform(rng: &mut Rng, r: [f32; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0] as f64..r[1] as f64)
    } else {
        r[0] as f64
    }
}

fn random_surface(rng: &mut Rng) -> Surface {
    Surface {
        // warm palette, so a hue shift changes the colour statistics of a domain
        color: [rng.gen_range(0.55..0.95), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.45)],
        phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        tilt: rng.gen_range(0.0..PI),
    }
}

fn build_scene(spec: &DomainSpec, rng: &mut Rng) -> Scene {
    let s = &spec.scene;
    let k = &spec.intrinsics;
    let wall = uniform(rng, s.wall_depth);
    let floor = uniform(rng, s.camera_height);
    let count = rng.gen_range(s.box_count[0]..=s.box_count[1]);
    let mut boxes = Vec::with_capacity(count);
    let mut surfaces = vec![random_surface(rng), random_surface(rng)];
    for _ in 0..count {
        let z = uniform(rng, s.box_depth);
        let width = uniform(rng, s.box_size);
        let height = uniform(rng, s.box_size);
        let thick = uniform(rng, s.box_size);
        let half_fov = z * (spec.width as f64 / 2.0) / k.fx as f64;
        let x = rng.gen_range(-half_fov..half_fov);
        boxes.push(Cuboid {
            lo: [x - width / 2.0, floor - height, z],
            hi: [x + width / 2.0, floor, (z + thick).min(wall - 1e-3)],
        });
        surfaces.push(random_surface(rng));
    }
    Scene {
        wall,
        floor,
        boxes,
        surfaces,
    }
}

fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Cuboid) -> Option<(f64, Face)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < b.lo[a] || origin[a] > b.hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.lo[a] - origin[a]) / dir[a];
        let t2 = (b.hi[a] - origin[a]) / dir[a];
        let (t1, t2) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if t1 > t_near {
            t_near = t1;
            axis = a;
        }
        t_far = t_far.min(t2);
    }
    (t_near <= t_far && t_near > 1e-9).then_some((t_near, Face::Axis(axis)))
}

fn texture(surface: &Surface, a: f64, b: f64, freq: f64) -> [f64; 3] {
    let w = 2.0 * PI * freq;
    let p = &surface.phase;
    let (st, ct) = surface.tilt.sin_cos();
    let t = 0.5 + 0.25 * (w * a + p[0]).sin() * (w * b + p[1]).sin() + 0.2 * (1.7 * w * (ct * a + st * b) + p[2]).sin();
    let shade = 0.3 + 0.7 * t;
    [surface.color[0] * shade, surface.color[1] * shade, surface.color[2] * shade]
}

fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let t = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    [[c + t, t - r, t + r], [t + r, c + t, t - r], [t - r, t + r, c + t]]
}

/// Renders one view: camera-t points map into this camera by `pose`.
fn render(spec: &DomainSpec, scene: &Scene, pose: &Pose, noise_rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let (h, w) = (spec.height, spec.width);
    let k = &spec.intrinsics;
    let inv = pose.inverse();
    let origin = inv.translation;
    let [d_min, d_max] = spec.scene.depth_range;
    let a = &spec.appearance;
    let hue = hue_matrix(a.hue_shift_deg as f64);
    let noise = (a.noise_std > 0.0).then(|| Normal::new(0.0, a.noise_std as f64).unwrap());
    let freq = a.texture_frequency as f64;
    let mut image = vec![0f32; h * w * 3];
    let mut depth = vec![0f32; h * w];
    for v in 0..h {
        for u in 0..w {
            let cam = [(u as f64 - k.cx as f64) / k.fx as f64, (v as f64 - k.cy as f64) / k.fy as f64, 1.0];
            let dir = inv.rotate(cam);
            let mut best = (f64::INFINITY, 0usize, Face::Axis(2));
            if dir[2] > 1e-9 {
                best = ((scene.wall - origin[2]) / dir[2], 0, Face::Axis(2));
            }
            if dir[1] > 1e-9 {
                let t = (scene.floor - origin[1]) / dir[1];
                if t > 0.0 && t < best.0 {
                    best = (t, 1, Face::Axis(1));
                }
            }
            for (i, b) in scene.boxes.iter().enumerate() {
                if let Some((t, face)) = ray_box(origin, dir, b) {
                    if t < best.0 {
                        best = (t, i + 2, face);
                    }
                }
            }
            let (t, surf, Face::Axis(axis)) = best;
            let t = if t.is_finite() { t } else { d_max as f64 };
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
            let (ta, tb) = match axis {
                0 => (p[2], p[1]),
                1 => (p[0], p[2]),
                _ => (p[0], p[1]),
            };
            let albedo = texture(&scene.surfaces[surf], ta, tb, freq);
            let i = v * w + u;
            for ch in 0..3 {
                let mut c = (0..3).map(|j| hue[ch][j] * albedo[j]).sum::<f64>();
                c = ((c * a.brightness as f64) - 0.5) * a.contrast as f64 + 0.5;
                if let Some(n) = &noise {
                    c += n.sample(noise_rng);
                }
                image[3 * i + ch] = c.clamp(0.0, 1.0) as f32;
            }
            depth[i] = (t as f32).clamp(d_min, d_max);
        }
    }
    Ok((Tensor::new(vec![h, w, 3], image)?, Tensor::new(vec![h, w], depth)?))
}

fn random_motion(spec: &DomainSpec, rng: &mut Rng) -> Result<Pose> {
    let m = &spec.motion;
    let dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2), rng.gen_range(-0.5..1.0)];
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
    let b = m.baseline as f64;
    let t = [b * dir[0] / n, b * dir[1] / n, b * dir[2] / n];
    let axis = [rng.gen_range(-0.3..0.3), 1.0, rng.gen_range(-0.3..0.3)];
    let max = (m.rotation_deg as f64).to_radians();
    let angle = if max > 0.0 { rng.gen_range(-max..max) } else { 0.0 };
    Pose::from_axis_angle(axis, angle, t)
}

/// Renders sample `index` of `split`; each (split, index) has its own seed.
pub fn render_sample(spec: &DomainSpec, split: Split, index: usize) -> Result<Sample> {
    spec.validate()?;
    let seed = rng::derive_seed(spec.seed, &format!("{}/{index}", split.name()));
    let mut scene_rng = rng::substream(seed, "scene");
    let mut noise_rng = rng::substream(seed, "pixel-noise");
    let mut sparse_rng = rng::substream(seed, "sparse");
    let scene = build_scene(spec, &mut scene_rng);
    let pose_next = random_motion(spec, &mut scene_rng)?;
    let pose_prev = pose_next.inverse();
    let (image, gt) = render(spec, &scene, &Pose::identity(), &mut noise_rng)?;
    let (image_prev, _) = render(spec, &scene, &pose_prev, &mut noise_rng)?;
    let (image_next, _) = render(spec, &scene, &pose_next, &mut noise_rng)?;

    let n = gt.len();
    let mut sparse = vec![0f32; n];
    let mut mask = vec![0f32; n];
    let depth_noise = (spec.sparse_noise_std > 0.0).then(|| Normal::new(0.0f32, spec.sparse_noise_std).unwrap());
    for i in 0..n {
        if sparse_rng.gen_bool(spec.sparse_density) {
            let mut z = gt.data()[i];
            if let Some(d) = &depth_noise {
                z = (z + d.sample(&mut sparse_rng)).max(spec.scene.depth_range[0]);
            }
            sparse[i] = z;
            mask[i] = 1.0;
        }
    }
    let shape = vec![spec.height, spec.width];
    Ok(Sample {
        id: format!("{}_{index:04}", split.name()),
        split,
        image_prev,
        image,
        image_next,
        sparse: Tensor::new(shape.clone(), sparse)?,
        mask: Tensor::new(shape, mask)?,
        gt,
        intrinsics: spec.intrinsics,
        pose_prev,
        pose_next,
    })
}

const SAMPLE_FILES: [&str; 6] = ["image_t-1", "image_t", "image_t+1", "sparse_z", "mask", "gt"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub intrinsics: Intrinsics,
    pub pose_prev: Pose,
    pub pose_next: Pose,
    /// Array name to path relative to the dataset root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub spec: DomainSpec,
    pub sample_count: usize,
    pub samples: Vec<SampleEntry>,
}

/// Renders `n_samples` triplets into `dir` and returns the manifest path.
pub fn generate_domain(spec: &DomainSpec, n_samples: usize, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("a dataset needs at least one sample".into()));
    }
    let n_eval = spec.eval_count(n_samples);
    let n_train = n_samples - n_eval;
    let mut entries = Vec::with_capacity(n_samples);
    let jobs = (0..n_train)
        .map(|i| (Split::Train, i))
        .chain((0..n_eval).map(|i| (Split::Eval, i)));
    for (split, index) in jobs {
        let s = render_sample(spec, split, index)?;
        let rel = format!("samples/{}", s.id);
        let sample_dir = dir.join(&rel);
        fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
        let arrays = [&s.image_prev, &s.image, &s.image_next, &s.sparse, &s.mask, &s.gt];
        let mut files = BTreeMap::new();
        for (name, t) in SAMPLE_FILES.iter().zip(arrays) {
            let file = format!("{rel}/{name}.pdt");
            pdt::save(dir.join(&file), t)?;
            files.insert(name.to_string(), file);
        }
        entries.push(SampleEntry {
            id: s.id,
            split,
            intrinsics: s.intrinsics,
            pose_prev: s.pose_prev,
            pose_next: s.pose_next,
            files,
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        name: spec.name.clone(),
        spec: spec.clone(),
        sample_count: n_samples,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    crate::write_json(&path, &manifest)?;
    Ok(path)
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    /// Loads and checks every listed file. Accepts the dataset directory or its manifest.
    pub fn load(path: &Path) -> Result<Dataset> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("manifest.json"))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let manifest: DatasetManifest = crate::read_json(&manifest_path)?;
        let fail = |detail: String| Error::Dataset {
            path: manifest_path.clone(),
            detail,
        };
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format version {} (expected {DATASET_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.samples.len() != manifest.sample_count {
            return Err(fail(format!(
                "manifest lists {} samples but declares {}",
                manifest.samples.len(),
                manifest.sample_count
            )));
        }
        let (h, w) = (manifest.spec.height, manifest.spec.width);
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for e in &manifest.samples {
            let mut arrays = Vec::with_capacity(SAMPLE_FILES.len());
            for name in SAMPLE_FILES {
                let file = e
                    .files
                    .get(name)
                    .ok_or_else(|| fail(format!("sample {} lacks {name}", e.id)))?;
                let t = pdt::load(root.join(file)).map_err(|err| fail(format!("{file}: {err}")))?;
                let expect: &[usize] = if name.starts_with("image") { &[h, w, 3] } else { &[h, w] };
                if t.shape() != expect {
                    return Err(fail(format!("{file} has shape {:?}, expected {expect:?}", t.shape())));
                }
                arrays.push(t);
            }
            let mut it = arrays.into_iter();
            let mut next = || it.next().unwrap();
            let s = Sample {
                id: e.id.clone(),
                split: e.split,
                image_prev: next(),
                image: next(),
                image_next: next(),
                sparse: next(),
                mask: next(),
                gt: next(),
                intrinsics: e.intrinsics,
                pose_prev: e.pose_prev,
                pose_next: e.pose_next,
            };
            match e.split {
                Split::Train => train.push(s),
                Split::Eval => eval.push(s),
            }
        }
        Ok(Dataset {
            root,
            manifest,
            train,
            eval,
        })
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }
}
