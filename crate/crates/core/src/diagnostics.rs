//! Finite-difference gradient checks over every differentiable op and loss.

use protodepth_tensor::{grad_check, Tape, Tensor, TensorError, Var, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapt, local_bias, project_keys};
use crate::backbone::{tap_registry, Backbone, BackboneConfig, TapHook, TapId};
use crate::error::{Error, Result};
use crate::geometry::{warp_image, Intrinsics, Pose};
use crate::losses::{descriptor_loss, photometric_loss, smoothness_loss, sparse_loss, ssim, total_loss, LossMode, LossTerms, LossWeights};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOL
    }
}

type Objective<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).map(|v| v.signum() * (0.1 + v.abs()))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.1, 1.0, &mut rng(seed))
}

/// `Σ out ⊙ R` for fixed `R` drawn from `N(0,1)`, or `U(0.5,1.5)` when `positive`.
fn weighted(tape: &mut Tape, out: Var, seed: u64, positive: bool) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = if positive {
        Tensor::uniform(&shape, 0.5, 1.5, &mut rng(seed))
    } else {
        Tensor::randn(&shape, 1.0, &mut rng(seed))
    };
    let r = tape.constant(r);
    Ok(tape.dot(out, r)?)
}

struct Suite<'a> {
    checks: Vec<(String, Tensor, Objective<'a>)>,
}

impl<'a> Suite<'a> {
    fn add(&mut self, name: &str, x: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'a) {
        self.checks.push((name.to_string(), x, Box::new(f)));
    }
}

fn ops(s: &mut Suite<'_>) {
    let x = away_from_zero(&[3, 4, 2], 12);
    let y = away_from_zero(&[3, 4, 2], 13);
    type Binary = fn(&mut Tape, Var, Var) -> protodepth_tensor::Result<Var>;
    let binary: [(&str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    for (name, op) in binary {
        let yc = y.clone();
        s.add(&format!("{name} lhs"), x.clone(), move |tape, v| {
            let c = tape.constant(yc.clone());
            let o = op(tape, v, c)?;
            weighted(tape, o, 15, false)
        });
        let xc = x.clone();
        s.add(&format!("{name} rhs"), y.clone(), move |tape, v| {
            let c = tape.constant(xc.clone());
            let o = op(tape, c, v)?;
            weighted(tape, o, 16, false)
        });
    }
    type Unary = fn(&mut Tape, Var) -> protodepth_tensor::Result<Var>;
    let unary: [(&str, Unary); 18] = [
        ("scale", |t, a| Ok(t.scale(a, -1.7))),
        ("add_scalar", |t, a| Ok(t.add_scalar(a, 0.3))),
        ("rsub_scalar", |t, a| Ok(t.rsub_scalar(1.0, a))),
        ("abs", |t, a| Ok(t.abs(a))),
        ("exp", |t, a| Ok(t.exp(a))),
        ("leaky_relu", |t, a| Ok(t.leaky_relu(a, 0.1))),
        ("sigmoid", |t, a| Ok(t.sigmoid(a))),
        ("sqrt", |t, a| {
            let sq = t.mul(a, a)?;
            t.sqrt(sq)
        }),
        ("upsample2x", |t, a| t.upsample2x(a)),
        ("avg_pool3x3", |t, a| t.avg_pool3x3(a)),
        ("forward_diff x", |t, a| t.forward_diff(a, 1)),
        ("forward_diff y", |t, a| t.forward_diff(a, 0)),
        ("mean_last_axis", |t, a| t.mean_last_axis(a)),
        ("global_avg_pool", |t, a| t.global_avg_pool(a)),
        ("reshape", |t, a| t.reshape(a, &[12, 2])),
        ("mean", |t, a| Ok(t.mean(a))),
        ("l2_norm", |t, a| Ok(t.l2_norm(a))),
        ("concat_channels", |t, a| {
            let b = t.scale(a, 2.0);
            t.concat_channels(&[a, b, a])
        }),
    ];
    for (name, op) in unary {
        s.add(name, x.clone(), move |tape, v| {
            let o = op(tape, v)?;
            weighted(tape, o, 17, false)
        });
    }
    s.add("sum", x.clone(), |tape, v| Ok(tape.sum(v)));
    let ch = away_from_zero(&[2], 14);
    let xc = x.clone();
    s.add("add_channel", ch.clone(), move |tape, v| {
        let c = tape.constant(xc.clone());
        let o = tape.add_channel(c, v)?;
        weighted(tape, o, 18, false)
    });
    let xc = x.clone();
    s.add("mul_channel vector", ch.clone(), move |tape, v| {
        let c = tape.constant(xc.clone());
        let o = tape.mul_channel(c, v)?;
        weighted(tape, o, 19, false)
    });
    s.add("mul_channel input", x.clone(), move |tape, v| {
        let c = tape.constant(ch.clone());
        let o = tape.mul_channel(v, c)?;
        weighted(tape, o, 20, false)
    });
    s.add("transpose", away_from_zero(&[3, 5], 21), |tape, v| {
        let o = tape.transpose(v)?;
        weighted(tape, o, 22, false)
    });
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng(1));
    let b = Tensor::randn(&[3, 3], 1.0, &mut rng(2));
    let bc = b.clone();
    s.add("matmul lhs", a.clone(), move |tape, v| {
        let c = tape.constant(bc.clone());
        let o = tape.matmul(v, c)?;
        weighted(tape, o, 3, false)
    });
    s.add("matmul rhs", b, move |tape, v| {
        let c = tape.constant(a.clone());
        let o = tape.matmul(c, v)?;
        weighted(tape, o, 4, false)
    });
    s.add("dot", x.clone(), move |tape, v| {
        let c = tape.constant(y.clone());
        Ok(tape.dot(v, c)?)
    });
    let sx = Tensor::randn(&[4, 5], 0.5, &mut rng(9));
    let ramp = Tensor::new(vec![4, 5], (0..20).map(|i| ((i % 5) as f32).powi(3)).collect()).unwrap();
    s.add("softmax_rows", sx, move |tape, v| {
        let o = tape.softmax_rows(v)?;
        let r = tape.constant(ramp.clone());
        Ok(tape.dot(o, r)?)
    });
    let cx = positive(&[5, 5, 2], 5);
    let ck = positive(&[3, 3, 2, 3], 6);
    for stride in [1usize, 2] {
        let kc = ck.clone();
        s.add(&format!("conv2d input stride {stride}"), cx.clone(), move |tape, v| {
            let k = tape.constant(kc.clone());
            let o = tape.conv2d(v, k, stride, 1)?;
            weighted(tape, o, 7, true)
        });
        let xc = cx.clone();
        s.add(&format!("conv2d kernel stride {stride}"), ck.clone(), move |tape, v| {
            let x = tape.constant(xc.clone());
            let o = tape.conv2d(x, v, stride, 1)?;
            weighted(tape, o, 8, true)
        });
    }
}

/// 8×8 scene: textured images, a tilted plane at close range and a camera
/// motion large enough that the warp moves well over a pixel per metre.
fn scene() -> (Tensor, Tensor, Tensor, Pose, Intrinsics) {
    let (h, w) = (8usize, 8usize);
    let img = Tensor::uniform(&[h, w, 3], 0.05, 0.95, &mut rng(70));
    let img2 = Tensor::uniform(&[h, w, 3], 0.05, 0.95, &mut rng(71));
    let depth: Vec<f32> = (0..h * w).map(|i| 1.0 + 0.07 * (i % w) as f32 + 0.03 * (i / w) as f32).collect();
    let pose = Pose::from_axis_angle([0.1, 1.0, 0.0], 0.03, [0.3, -0.12, 0.1]).unwrap();
    let k = Intrinsics::new(7.0, 7.0, 3.5, 3.5).unwrap();
    (img, img2, Tensor::new(vec![h, w], depth).unwrap(), pose, k)
}

fn geometry_and_losses(s: &mut Suite<'_>) {
    let (src, target, depth, pose, k) = scene();
    let (src2, pose2) = (src.clone(), pose);
    s.add("warp_image wrt depth", depth.clone(), move |tape, d| {
        let w = warp_image(tape, &src2, d, &pose2, &k)?;
        weighted(tape, w.image, 30, false)
    });
    let t2 = target.clone();
    s.add("ssim lhs", src.clone(), move |tape, a| {
        let b = tape.constant(t2.clone());
        let o = ssim(tape, a, b)?;
        weighted(tape, o, 31, false)
    });
    let s2 = src.clone();
    s.add("ssim rhs", target.clone(), move |tape, b| {
        let a = tape.constant(s2.clone());
        let o = ssim(tape, a, b)?;
        weighted(tape, o, 32, true)
    });
    let weights = LossWeights::default();
    let (src3, t3) = (src.clone(), target.clone());
    s.add("photometric loss wrt depth", depth.clone(), move |tape, d| {
        let views = [warp_image(tape, &src3, d, &pose, &k)?, warp_image(tape, &src3, d, &pose.inverse(), &k)?];
        let tv = tape.constant(t3.clone());
        Ok(photometric_loss(tape, tv, &views, &weights)?.value)
    });
    let (sz, m) = sparse_inputs(&depth, 5);
    s.add("sparse loss", depth.map(|v| v + 0.3), move |tape, d| sparse_loss(tape, d, &sz, &m));
    let t4 = target.clone();
    let bumpy = Tensor::new(vec![8, 8], (0..64).map(|i| 1.0 + 0.37 * ((i * 7) % 11) as f32).collect()).unwrap();
    s.add("smoothness loss", bumpy, move |tape, d| smoothness_loss(tape, d, &t4));
    let sd = away_from_zero(&[6], 40);
    let others = vec![away_from_zero(&[6], 41), away_from_zero(&[6], 42)];
    s.add("descriptor loss", away_from_zero(&[6], 43), move |tape, r| descriptor_loss(tape, &sd, r, &others, None));
    // Every pixel observed and offset, so no coordinate's gradient cancels to zero.
    let (sz5, m5) = sparse_inputs(&depth, 1);
    s.add("total loss wrt depth", depth, move |tape, d| {
        let views = [warp_image(tape, &src, d, &pose, &k)?];
        let tv = tape.constant(target.clone());
        let terms = LossTerms {
            photometric: photometric_loss(tape, tv, &views, &weights)?.value,
            sparse: {
                let shifted = tape.add_scalar(d, 0.2);
                sparse_loss(tape, shifted, &sz5, &m5)?
            },
            smoothness: smoothness_loss(tape, d, &target)?,
            descriptor: None,
        };
        total_loss(tape, &terms, &weights, LossMode::Pretrain)
    });
}

/// Sparse depth observed at every `stride`-th pixel.
fn sparse_inputs(depth: &Tensor, stride: usize) -> (Tensor, Tensor) {
    let n = depth.len();
    let mask = Tensor::new(depth.shape().to_vec(), (0..n).map(|i| if i % stride == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let z = depth.zip_map(&mask, |d, m| d * m).unwrap();
    (z, mask)
}

fn adapter(s: &mut Suite<'_>) {
    let x = Tensor::randn(&[3, 3, 4], 2.0, &mut rng(50));
    let p = Tensor::randn(&[5, 4], 0.5, &mut rng(51));
    let w = Tensor::randn(&[4, 4], 0.5, &mut rng(52));
    let a = Tensor::uniform(&[4], 0.5, 1.5, &mut rng(53));
    let (p1, w1) = (p.clone(), w.clone());
    s.add("local_bias wrt features", x.clone(), move |tape, xv| {
        let pv = tape.constant(p1.clone());
        let wv = tape.constant(w1.clone());
        let k = project_keys(tape, pv, wv)?;
        let b = local_bias(tape, xv, pv, k)?;
        weighted(tape, b, 54, false)
    });
    // With stop-gradient keys only the value path reaches P, so check it with
    // the keys held fixed, then the key path separately without the detach.
    let (x2, p2) = (x.clone(), p.clone());
    s.add("local_bias wrt prototype values", p.clone(), move |tape, pv| {
        let xv = tape.constant(x2.clone());
        let k = tape.constant(p2.clone());
        let b = local_bias(tape, xv, pv, k)?;
        weighted(tape, b, 55, false)
    });
    let (x2, w2) = (x.clone(), w.clone());
    s.add("local_bias wrt prototypes through keys", p.clone(), move |tape, pv| {
        let xv = tape.constant(x2.clone());
        let wv = tape.constant(w2.clone());
        let k = tape.matmul(pv, wv)?;
        let b = local_bias(tape, xv, pv, k)?;
        weighted(tape, b, 55, false)
    });
    let (x3, p3) = (x.clone(), p.clone());
    s.add("local_bias wrt projection", w, move |tape, wv| {
        let xv = tape.constant(x3.clone());
        let pv = tape.constant(p3.clone());
        let k = project_keys(tape, pv, wv)?;
        let b = local_bias(tape, xv, pv, k)?;
        weighted(tape, b, 56, false)
    });
    s.add("adapt wrt global prototype", a, move |tape, av| {
        let xv = tape.constant(x.clone());
        let pv = tape.constant(p.clone());
        let k = tape.constant(Tensor::zeros(&[5, 4]));
        let o = adapt(tape, xv, Some(av), pv, k)?;
        weighted(tape, o, 57, false)
    });
}

/// Routes one tap through a prototype set whose P, keys or projection may be
/// the variable under test.
struct ProbeHook {
    tap: TapId,
    p: Var,
    keys: ProbeKeys,
}

enum ProbeKeys {
    Fixed(Var),
    Projected(Var),
}

impl TapHook for ProbeHook {
    fn apply(&mut self, tape: &mut Tape, tap: TapId, x: Var) -> Result<Var> {
        if tap != self.tap {
            return Ok(x);
        }
        let k = match self.keys {
            ProbeKeys::Fixed(k) => k,
            ProbeKeys::Projected(w) => project_keys(tape, self.p, w)?,
        };
        adapt(tape, x, None, self.p, k)
    }
}

fn tap_channels(tap: TapId) -> usize {
    tap_registry().iter().find(|t| t.id == tap).unwrap().channels
}

/// `base + Σ c_i·D_i` for fixed random directions `D_i` shaped like `base`.
/// Checking along a few directions keeps every derivative well above the
/// rounding floor of a full forward pass.
fn along_directions(tape: &mut Tape, c: Var, base: &Tensor, seed: u64) -> Result<Var> {
    let k = tape.value(c).len();
    let dirs = Tensor::randn(&[k, base.len()], 1.0, &mut rng(seed));
    let dirs = tape.constant(dirs);
    let c = tape.reshape(c, &[1, k])?;
    let offset = tape.matmul(c, dirs)?;
    let offset = tape.reshape(offset, base.shape())?;
    let b = tape.constant(base.clone());
    Ok(tape.add(b, offset)?)
}

type ProbeSample = (Tensor, Tensor, Pose, Intrinsics, Tensor, Tensor);

fn objective_on(tape: &mut Tape, net: &Backbone, hook: &mut ProbeHook, sample: &ProbeSample) -> Result<Var> {
    let (img, src, pose, k, sz, mask) = sample;
    let weights = LossWeights::default();
    let input = crate::backbone::DepthInput {
        image: img,
        sparse: sz,
        mask,
    };
    let out = net.forward(tape, &input, hook)?;
    let views = [warp_image(tape, src, out.depth, pose, k)?];
    let tv = tape.constant(img.clone());
    let terms = LossTerms {
        photometric: photometric_loss(tape, tv, &views, &weights)?.value,
        sparse: sparse_loss(tape, out.depth, sz, mask)?,
        smoothness: smoothness_loss(tape, out.depth, img)?,
        descriptor: None,
    };
    total_loss(tape, &terms, &weights, LossMode::AdaptIncremental)
}

fn full_objective(s: &mut Suite<'_>) {
    let mut net = Backbone::new(BackboneConfig::default(), 7).unwrap();
    net.freeze();
    let net = std::rc::Rc::new(net);
    let (img, src, depth, pose, k) = scene();
    // Dense targets below any prediction keep the sparse term's pull coherent.
    let mask = Tensor::ones(depth.shape());
    let sz = Tensor::full(depth.shape(), 0.1);
    let sample = std::rc::Rc::new((img, src, pose, k, sz, mask));
    let coefficients = Tensor::zeros(&[4]);

    let c = tap_channels(TapId::Bottleneck);
    let p = Tensor::randn(&[3, c], 0.5, &mut rng(60));
    let keys = Tensor::randn(&[3, c], 0.5, &mut rng(61));
    let (n1, s1) = (net.clone(), sample.clone());
    s.add("training objective wrt bottleneck prototypes", coefficients.clone(), move |tape, cv| {
        let pv = along_directions(tape, cv, &p, 67)?;
        let kv = tape.constant(keys.clone());
        let mut hook = ProbeHook {
            tap: TapId::Bottleneck,
            p: pv,
            keys: ProbeKeys::Fixed(kv),
        };
        objective_on(tape, &n1, &mut hook, &s1)
    });

    let c = tap_channels(TapId::ImgS1);
    let p = Tensor::randn(&[4, c], 0.5, &mut rng(62));
    let w = Tensor::randn(&[c, c], 0.5, &mut rng(63));
    s.add("training objective wrt image projection", coefficients, move |tape, cv| {
        let wv = along_directions(tape, cv, &w, 65)?;
        let pv = tape.constant(p.clone());
        let mut hook = ProbeHook {
            tap: TapId::ImgS1,
            p: pv,
            keys: ProbeKeys::Projected(wv),
        };
        objective_on(tape, &net, &mut hook, &sample)
    });
}

/// Runs every check and reports the worst relative error of each.
pub fn gradient_suite() -> Result<Vec<CheckOutcome>> {
    gradient_suite_with(GRAD_CHECK_EPS, |_| true)
}

/// Runs the checks whose names satisfy `filter`, with step `eps`.
pub fn gradient_suite_with(eps: f32, filter: impl Fn(&str) -> bool) -> Result<Vec<CheckOutcome>> {
    let mut suite = Suite { checks: Vec::new() };
    ops(&mut suite);
    geometry_and_losses(&mut suite);
    adapter(&mut suite);
    full_objective(&mut suite);
    let mut out = Vec::with_capacity(suite.checks.len());
    for (name, x, f) in suite.checks.iter().filter(|c| filter(&c.0)) {
        let report = grad_check(
            |tape, v| f(tape, v).map_err(|e| TensorError::Contract(e.to_string())),
            x,
            eps,
        )
        .map_err(|e| Error::Numeric(format!("{name}: {e}")))?;
        out.push(CheckOutcome {
            name: name.clone(),
            max_rel_error: report.max_rel_error,
            worst_index: report.worst_index,
            analytic: report.analytic.data()[report.worst_index] as f64,
            numeric: report.numeric[report.worst_index],
        });
    }
    Ok(out)
}
