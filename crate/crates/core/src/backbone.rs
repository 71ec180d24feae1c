//! Dual-encoder/decoder depth completion network with named latent taps.

use std::fs;
use std::path::Path;

use protodepth_tensor::{io as pdt, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Keeps the sigmoid head strictly inside the depth range even when saturated.
const OUTPUT_MARGIN: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapId {
    ImgS1,
    ImgS2,
    ImgS3,
    DepS1,
    DepS2,
    DepS3,
    Bottleneck,
}

impl TapId {
    pub const ALL: [TapId; 7] = [
        TapId::ImgS1,
        TapId::ImgS2,
        TapId::ImgS3,
        TapId::DepS1,
        TapId::DepS2,
        TapId::DepS3,
        TapId::Bottleneck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapId::ImgS1 => "img_s1",
            TapId::ImgS2 => "img_s2",
            TapId::ImgS3 => "img_s3",
            TapId::DepS1 => "dep_s1",
            TapId::DepS2 => "dep_s2",
            TapId::DepS3 => "dep_s3",
            TapId::Bottleneck => "bottleneck",
        }
    }

    pub fn from_name(name: &str) -> Option<TapId> {
        TapId::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Depth,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentTap {
    pub id: TapId,
    pub channels: usize,
    pub modality: Modality,
}

const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const BOTTLENECK_CHANNELS: usize = 64;

/// The seven adaptation points in forward order.
pub fn tap_registry() -> Vec<LatentTap> {
    let mut taps = Vec::with_capacity(7);
    for (ids, modality) in [
        ([TapId::ImgS1, TapId::ImgS2, TapId::ImgS3], Modality::Image),
        ([TapId::DepS1, TapId::DepS2, TapId::DepS3], Modality::Depth),
    ] {
        for (id, channels) in ids.into_iter().zip(STAGE_CHANNELS) {
            taps.push(LatentTap {
                id,
                channels,
                modality,
            });
        }
    }
    taps.push(LatentTap {
        id: TapId::Bottleneck,
        channels: BOTTLENECK_CHANNELS,
        modality: Modality::Fused,
    });
    taps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_min: f32,
    pub d_max: f32,
    pub leaky_slope: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_min: 0.2,
            d_max: 5.0,
            leaky_slope: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "backbone depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// k×k×cin×cout.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// Layer table: name, cin, cout, stride.
fn architecture() -> Vec<(String, usize, usize, usize)> {
    let mut layers = Vec::new();
    for (enc, cin) in [("img", 3), ("dep", 2)] {
        let mut c = cin;
        for (s, &cout) in STAGE_CHANNELS.iter().enumerate() {
            layers.push((format!("{enc}.s{}a", s + 1), c, cout, 2));
            layers.push((format!("{enc}.s{}b", s + 1), cout, cout, 1));
            c = cout;
        }
    }
    let b = BOTTLENECK_CHANNELS;
    layers.push(("fuse".into(), 2 * STAGE_CHANNELS[2], b, 1));
    for i in 1..=3 {
        layers.push((format!("bottleneck.b{i}"), b, b, 1));
    }
    layers.push(("dec.d2a".into(), b + 2 * STAGE_CHANNELS[1], 64, 1));
    layers.push(("dec.d2b".into(), 64, 32, 1));
    layers.push(("dec.d1a".into(), 32 + 2 * STAGE_CHANNELS[0], 32, 1));
    layers.push(("dec.d1b".into(), 32, 16, 1));
    layers.push(("dec.d0a".into(), 16, 16, 1));
    layers.push(("head".into(), 16, 1, 1));
    layers
}

/// Inputs of one forward pass.
#[derive(Clone, Copy)]
pub struct DepthInput<'a> {
    /// h×w×3 in [0, 1].
    pub image: &'a Tensor,
    /// h×w, zero where unmeasured.
    pub sparse: &'a Tensor,
    /// h×w of 0/1.
    pub mask: &'a Tensor,
}

/// Per-tap feature transform applied during a forward pass.
pub trait TapHook {
    fn apply(&mut self, tape: &mut Tape, tap: TapId, x: Var) -> Result<Var>;
}

/// The plain backbone.
pub struct NoAdapters;

impl TapHook for NoAdapters {
    fn apply(&mut self, _tape: &mut Tape, _tap: TapId, x: Var) -> Result<Var> {
        Ok(x)
    }
}

pub struct ForwardOutput {
    /// h×w depth inside (d_min, d_max).
    pub depth: Var,
    /// Fused features entering the bottleneck adapter.
    pub bottleneck: Var,
    /// Kernel and bias nodes, two per layer, in layer order.
    pub params: Vec<Var>,
}

struct Encoded {
    skips: [[Var; 3]; 2],
    bottleneck: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    seed: u64,
    layers: Vec<ConvLayer>,
    frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

impl Backbone {
    /// Kaiming-uniform (fan-in) kernels, zero biases.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::substream(seed, "backbone-init");
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        let layers = architecture()
            .into_iter()
            .map(|(name, cin, cout, stride)| {
                let fan_in = (9 * cin) as f32;
                let bound = gain * (3.0 / fan_in).sqrt();
                let data = (0..9 * cin * cout).map(|_| r.gen_range(-bound..bound)).collect();
                ConvLayer {
                    name,
                    kernel: Tensor::new(vec![3, 3, cin, cout], data).unwrap(),
                    bias: Tensor::zeros(&[cout]),
                    stride,
                }
            })
            .collect();
        Ok(Backbone {
            config,
            seed,
            layers,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let n: usize = self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum();
        if self.frozen {
            ParameterCount {
                trainable: 0,
                frozen: n,
            }
        } else {
            ParameterCount {
                trainable: n,
                frozen: 0,
            }
        }
    }

    /// Parameter tensors in the order of [`ForwardOutput::params`].
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(Error::domain("backbone", "parameters are frozen"));
        }
        Ok(self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect())
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            for t in [&l.kernel, &l.bias] {
                vars.push(if self.frozen {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                });
            }
        }
        vars
    }

    fn conv(&self, tape: &mut Tape, params: &[Var], layer: usize, x: Var, act: bool) -> Result<Var> {
        let l = &self.layers[layer];
        let y = tape.conv2d(x, params[2 * layer], l.stride, 1)?;
        let y = tape.add_channel(y, params[2 * layer + 1])?;
        Ok(if act {
            tape.leaky_relu(y, self.config.leaky_slope)
        } else {
            y
        })
    }

    fn check_input(input: &DepthInput<'_>) -> Result<(usize, usize)> {
        let (h, w, c) = input.image.hwc()?;
        if c != 3 {
            return Err(Error::domain("backbone", format!("image needs 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::domain(
                "backbone",
                format!("image extents {h}x{w} must be positive multiples of 8"),
            ));
        }
        for (name, t) in [("sparse depth", input.sparse), ("mask", input.mask)] {
            if t.shape() != [h, w] {
                return Err(Error::domain(
                    "backbone",
                    format!("{name} shape {:?} does not match image {h}x{w}", t.shape()),
                ));
            }
        }
        Ok((h, w))
    }

    fn encode(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: &DepthInput<'_>,
        hook: &mut dyn TapHook,
    ) -> Result<Encoded> {
        let (h, w) = Self::check_input(input)?;
        let image = tape.constant(input.image.clone());
        let mut zm = Vec::with_capacity(2 * h * w);
        for (&z, &m) in input.sparse.data().iter().zip(input.mask.data()) {
            zm.push(z);
            zm.push(m);
        }
        let depth_in = tape.constant(Tensor::new(vec![h, w, 2], zm)?);
        let taps = [
            [TapId::ImgS1, TapId::ImgS2, TapId::ImgS3],
            [TapId::DepS1, TapId::DepS2, TapId::DepS3],
        ];
        let mut skips = [[image; 3]; 2];
        for (e, mut x) in [image, depth_in].into_iter().enumerate() {
            for s in 0..3 {
                let first = 6 * e + 2 * s;
                x = self.conv(tape, params, first, x, true)?;
                x = self.conv(tape, params, first + 1, x, true)?;
                x = hook.apply(tape, taps[e][s], x)?;
                skips[e][s] = x;
            }
        }
        let cat = tape.concat_channels(&[skips[0][2], skips[1][2]])?;
        let mut x = self.conv(tape, params, 12, cat, true)?;
        for i in 13..15 {
            x = self.conv(tape, params, i, x, true)?;
        }
        // The tap sees signed pre-activation features; the decoder applies the nonlinearity.
        let x = self.conv(tape, params, 15, x, false)?;
        Ok(Encoded {
            skips,
            bottleneck: x,
        })
    }

    /// Full forward pass; `hook` sees each tap's features before they flow on.
    pub fn forward(&self, tape: &mut Tape, input: &DepthInput<'_>, hook: &mut dyn TapHook) -> Result<ForwardOutput> {
        let params = self.bind(tape);
        let enc = self.encode(tape, &params, input, hook)?;
        let b = hook.apply(tape, TapId::Bottleneck, enc.bottleneck)?;
        let b = tape.leaky_relu(b, self.config.leaky_slope);
        let [img, dep] = enc.skips;

        let x = tape.upsample2x(b)?;
        let x = tape.concat_channels(&[x, img[1], dep[1]])?;
        let x = self.conv(tape, &params, 16, x, true)?;
        let x = self.conv(tape, &params, 17, x, true)?;
        let x = tape.upsample2x(x)?;
        let x = tape.concat_channels(&[x, img[0], dep[0]])?;
        let x = self.conv(tape, &params, 18, x, true)?;
        let x = self.conv(tape, &params, 19, x, true)?;
        let x = tape.upsample2x(x)?;
        let x = self.conv(tape, &params, 20, x, true)?;
        let logit = self.conv(tape, &params, 21, x, false)?;
        let shape = tape.shape(logit).to_vec();
        let logit = tape.reshape(logit, &shape[..2])?;

        let s = tape.sigmoid(logit);
        let range = self.config.d_max - self.config.d_min;
        let s = tape.scale(s, (1.0 - 2.0 * OUTPUT_MARGIN) * range);
        let depth = tape.add_scalar(s, self.config.d_min + OUTPUT_MARGIN * range);
        Ok(ForwardOutput {
            depth,
            bottleneck: enc.bottleneck,
            params,
        })
    }

    /// Unadapted fused bottleneck features (h/8×w/8×c) as a plain tensor.
    pub fn bottleneck_features(&self, input: &DepthInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .layers
            .iter()
            .flat_map(|l| [l.kernel.clone(), l.bias.clone()])
            .map(|t| tape.constant(t))
            .collect();
        let enc = self.encode(&mut tape, &params, input, &mut NoAdapters)?;
        Ok(tape.value(enc.bottleneck).clone())
    }

    /// Depth prediction as a plain tensor.
    pub fn predict(&self, input: &DepthInput<'_>, hook: &mut dyn TapHook) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, hook)?;
        Ok(tape.value(out.depth).clone())
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for l in &self.layers {
            for (suffix, t) in [("weight", &l.kernel), ("bias", &l.bias)] {
                let file = format!("{}.{suffix}.pdt", l.name);
                pdt::save(dir.join(&file), t)?;
                entries.push(CheckpointEntry {
                    name: format!("{}.{suffix}", l.name),
                    shape: t.shape().to_vec(),
                    file,
                });
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            seed: self.seed,
            config_hash: config_hash.into(),
            frozen: self.frozen,
            backbone: self.config.clone(),
            parameters: entries,
        };
        crate::write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Loads a checkpoint and the config hash it was written under.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let manifest: CheckpointManifest = crate::read_json(&dir.join("manifest.json"))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Artifact(format!(
                "{}: unsupported checkpoint format {:?}",
                dir.display(),
                manifest.format
            )));
        }
        let mut net = Backbone::new(manifest.backbone.clone(), manifest.seed)?;
        let expected: Vec<String> = net
            .layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect();
        let found: Vec<&str> = manifest.parameters.iter().map(|e| e.name.as_str()).collect();
        if expected != found {
            return Err(Error::Artifact(format!("{}: layer list does not match the architecture", dir.display())));
        }
        for (slot, entry) in net
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .zip(&manifest.parameters)
        {
            let t = pdt::load(dir.join(&entry.file))?;
            if t.shape() != slot.shape() || t.shape() != entry.shape.as_slice() {
                return Err(Error::Artifact(format!(
                    "{}: {} has shape {:?}, expected {:?}",
                    dir.display(),
                    entry.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        net.frozen = manifest.frozen;
        Ok((net, manifest.config_hash))
    }
}

const CHECKPOINT_FORMAT: &str = "protodepth-checkpoint/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    seed: u64,
    config_hash: String,
    frozen: bool,
    backbone: BackboneConfig,
    parameters: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}
