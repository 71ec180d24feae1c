//! Per-domain, per-tap prototype sets that bias frozen latent features.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use protodepth_tensor::{io as pdt, Gradients, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{LatentTap, Modality, TapHook, TapId};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng::Rng;
use crate::router::DomainDescriptor;

pub type DomainId = u32;

/// `K = detach(P)·W`.
pub fn project_keys(tape: &mut Tape, p: Var, w: Var) -> Result<Var> {
    let p = tape.detach(p);
    Ok(tape.matmul(p, w)?)
}

/// Attention-weighted convex combination of prototype rows at every pixel.
pub fn local_bias(tape: &mut Tape, x: Var, p: Var, k: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::domain("local_bias", format!("features must be h×w×c, got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let q = tape.reshape(x, &[h * w, c])?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (c as f32).sqrt());
    let alpha = tape.softmax_rows(scores)?;
    let b = tape.matmul(alpha, p)?;
    Ok(tape.reshape(b, &[h, w, c])?)
}

/// `X̂ = A ⊙ X + local_bias(X, P, K)`; without `a` the product is skipped.
pub fn adapt(tape: &mut Tape, x: Var, a: Option<Var>, p: Var, k: Var) -> Result<Var> {
    let b = local_bias(tape, x, p, k)?;
    let scaled = match a {
        Some(a) => tape.mul_channel(x, a)?,
        None => x,
    };
    Ok(tape.add(scaled, b)?)
}

/// How the attention keys of a prototype set are produced.
pub trait KeyStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Initial key parameter for `n` prototypes of width `c`.
    fn init_param(&self, n: usize, c: usize) -> Tensor;
    fn keys(&self, tape: &mut Tape, p: Var, param: Var) -> Result<Var>;
}

/// Keys projected from the prototypes by a learned `W` (c×c).
pub struct ProjectedKeys {
    pub stop_grad: bool,
}

impl KeyStrategy for ProjectedKeys {
    fn name(&self) -> &'static str {
        if self.stop_grad {
            "projected"
        } else {
            "projected-no-stop-grad"
        }
    }

    fn init_param(&self, _n: usize, c: usize) -> Tensor {
        Tensor::zeros(&[c, c])
    }

    fn keys(&self, tape: &mut Tape, p: Var, w: Var) -> Result<Var> {
        if self.stop_grad {
            project_keys(tape, p, w)
        } else {
            Ok(tape.matmul(p, w)?)
        }
    }
}

/// Keys learned directly (N×c), unrelated to the prototypes.
pub struct FreeKeys;

impl KeyStrategy for FreeKeys {
    fn name(&self) -> &'static str {
        "free"
    }

    fn init_param(&self, n: usize, c: usize) -> Tensor {
        Tensor::zeros(&[n, c])
    }

    fn keys(&self, _tape: &mut Tape, _p: Var, k: Var) -> Result<Var> {
        Ok(k)
    }
}

pub fn key_strategies() -> Registry<dyn KeyStrategy> {
    let mut r: Registry<dyn KeyStrategy> = Registry::new("key strategy");
    r.register("projected", Arc::new(ProjectedKeys { stop_grad: true }));
    r.register("projected-no-stop-grad", Arc::new(ProjectedKeys { stop_grad: false }));
    r.register("free", Arc::new(FreeKeys));
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSizes {
    pub n_image: usize,
    pub n_depth: usize,
}

impl SetSizes {
    pub const INDOOR: SetSizes = SetSizes {
        n_image: 10,
        n_depth: 5,
    };
    pub const OUTDOOR: SetSizes = SetSizes {
        n_image: 25,
        n_depth: 10,
    };

    pub fn for_modality(&self, m: Modality) -> usize {
        match m {
            Modality::Image | Modality::Fused => self.n_image,
            Modality::Depth => self.n_depth,
        }
    }

    /// Parses `"10x5"`.
    pub fn parse(s: &str) -> Result<SetSizes> {
        let bad = || Error::Config(format!("set sizes must look like 10x5, got {s:?}"));
        let (a, b) = s.trim().split_once('x').ok_or_else(bad)?;
        let sizes = SetSizes {
            n_image: a.trim().parse().map_err(|_| bad())?,
            n_depth: b.trim().parse().map_err(|_| bad())?,
        };
        sizes.validate()?;
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_image == 0 || self.n_depth == 0 {
            return Err(Error::Config("prototype set sizes must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SetSizes {
    fn default() -> Self {
        SetSizes::INDOOR
    }
}

impl std::fmt::Display for SetSizes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.n_image, self.n_depth)
    }
}

/// Structural choices shared by every set in a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterOptions {
    pub sizes: SetSizes,
    pub key_strategy: String,
    pub use_global: bool,
    /// Spread of the initial prototypes.
    pub init_std: f32,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        AdapterOptions {
            sizes: SetSizes::INDOOR,
            key_strategy: "projected".into(),
            use_global: true,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub tap: TapId,
    pub domain: DomainId,
    /// Global multiplicative prototype, c.
    pub a: Tensor,
    /// Local prototypes, N×c.
    pub p: Tensor,
    /// Key parameter: c×c projection, or N×c free keys.
    pub w: Tensor,
}

impl PrototypeSet {
    pub fn n(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.p.shape()[1]
    }

    /// Prototypes come in sign-opposed pairs (plus a zero row when `n` is
    /// odd) so their uniform average is exactly zero. With zero-initialized
    /// keys every pixel attends uniformly, making the set an exact identity
    /// while still giving each prototype a distinct starting point.
    pub fn init(tap: &LatentTap, domain: DomainId, n: usize, options: &AdapterOptions, strategy: &dyn KeyStrategy, rng: &mut Rng) -> Result<Self> {
        let c = tap.channels;
        let normal = Normal::new(0.0f32, options.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut p = vec![0f32; n * c];
        for pair in 0..n / 2 {
            for ch in 0..c {
                let v = normal.sample(rng);
                p[2 * pair * c + ch] = v;
                p[(2 * pair + 1) * c + ch] = -v;
            }
        }
        Ok(PrototypeSet {
            tap: tap.id,
            domain,
            a: Tensor::ones(&[c]),
            p: Tensor::new(vec![n, c], p)?,
            w: strategy.init_param(n, c),
        })
    }

    pub fn parameter_count(&self, use_global: bool) -> usize {
        let a = if use_global { self.a.len() } else { 0 };
        a + self.p.len() + self.w.len()
    }
}

/// Tape handles for one bound set.
#[derive(Clone, Copy, Debug)]
pub struct BoundSet {
    pub tap: TapId,
    pub a: Option<Var>,
    pub p: Var,
    pub w: Var,
}

/// Gradients of one set's trainable tensors.
#[derive(Clone, Debug)]
pub struct SetGradients {
    pub tap: TapId,
    pub a: Option<Tensor>,
    pub p: Tensor,
    pub w: Tensor,
}

/// Applies one domain's sets during a forward pass.
pub struct BankHook<'a> {
    sets: BTreeMap<TapId, &'a PrototypeSet>,
    use_global: bool,
    trainable: bool,
    strategy: Arc<dyn KeyStrategy>,
    pub bound: Vec<BoundSet>,
}

impl BankHook<'_> {
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<SetGradients> {
        self.bound
            .iter()
            .map(|b| SetGradients {
                tap: b.tap,
                a: b.a.map(|a| grads.wrt_or_zeros(a, tape.shape(a))),
                p: grads.wrt_or_zeros(b.p, tape.shape(b.p)),
                w: grads.wrt_or_zeros(b.w, tape.shape(b.w)),
            })
            .collect()
    }
}

impl TapHook for BankHook<'_> {
    fn apply(&mut self, tape: &mut Tape, tap: TapId, x: Var) -> Result<Var> {
        let Some(set) = self.sets.get(&tap) else {
            return Ok(x);
        };
        let mut bind = |t: &Tensor| {
            if self.trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let a = self.use_global.then(|| bind(&set.a));
        let p = bind(&set.p);
        let w = bind(&set.w);
        self.bound.push(BoundSet { tap, a, p, w });
        let k = self.strategy.keys(tape, p, w)?;
        adapt(tape, x, a, p, k)
    }
}

#[derive(Clone)]
pub struct AdapterBank {
    options: AdapterOptions,
    strategy: Arc<dyn KeyStrategy>,
    taps: Vec<LatentTap>,
    sets: BTreeMap<DomainId, Vec<PrototypeSet>>,
    frozen: BTreeSet<DomainId>,
    descriptors: BTreeMap<DomainId, DomainDescriptor>,
}

impl AdapterBank {
    pub fn new(options: AdapterOptions, taps: Vec<LatentTap>) -> Result<Self> {
        options.sizes.validate()?;
        let strategy = key_strategies().get(&options.key_strategy)?;
        Ok(AdapterBank {
            options,
            strategy,
            taps,
            sets: BTreeMap::new(),
            frozen: BTreeSet::new(),
            descriptors: BTreeMap::new(),
        })
    }

    pub fn options(&self) -> &AdapterOptions {
        &self.options
    }

    pub fn taps(&self) -> &[LatentTap] {
        &self.taps
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.sets.keys().copied()
    }

    pub fn is_frozen(&self, domain: DomainId) -> bool {
        self.frozen.contains(&domain)
    }

    /// Allocates identity-initialized sets for `domain` and freezes all others.
    pub fn new_domain(&mut self, domain: DomainId, rng: &mut Rng) -> Result<()> {
        if self.sets.contains_key(&domain) {
            return Err(Error::domain("adapter bank", format!("domain {domain} already has prototype sets")));
        }
        let mut sets = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let n = self.options.sizes.for_modality(tap.modality);
            sets.push(PrototypeSet::init(tap, domain, n, &self.options, self.strategy.as_ref(), rng)?);
        }
        self.frozen.extend(self.sets.keys().copied());
        for d in self.descriptors.values_mut() {
            d.frozen = true;
        }
        self.sets.insert(domain, sets);
        Ok(())
    }

    pub fn freeze(&mut self, domain: DomainId) {
        if self.sets.contains_key(&domain) {
            self.frozen.insert(domain);
        }
        if let Some(d) = self.descriptors.get_mut(&domain) {
            d.frozen = true;
        }
    }

    pub fn sets(&self, domain: DomainId) -> Option<&[PrototypeSet]> {
        self.sets.get(&domain).map(|v| v.as_slice())
    }

    pub fn sets_mut(&mut self, domain: DomainId) -> Result<&mut [PrototypeSet]> {
        if self.frozen.contains(&domain) {
            return Err(Error::domain("adapter bank", format!("domain {domain} is frozen")));
        }
        self.sets
            .get_mut(&domain)
            .map(|v| v.as_mut_slice())
            .ok_or_else(|| Error::domain("adapter bank", format!("domain {domain} has no prototype sets")))
    }

    /// Hook applying `domain`'s sets; a domain without sets is the plain backbone.
    pub fn hook(&self, domain: DomainId, trainable: bool) -> Result<BankHook<'_>> {
        if trainable && self.frozen.contains(&domain) {
            return Err(Error::domain("adapter bank", format!("domain {domain} is frozen")));
        }
        let sets = self
            .sets
            .get(&domain)
            .map(|v| v.iter().map(|s| (s.tap, s)).collect())
            .unwrap_or_default();
        Ok(BankHook {
            sets,
            use_global: self.options.use_global,
            trainable,
            strategy: self.strategy.clone(),
            bound: Vec::new(),
        })
    }

    /// Trainable parameters added per domain.
    pub fn parameters_per_domain(&self) -> usize {
        let use_global = self.options.use_global;
        self.taps
            .iter()
            .map(|t| {
                let n = self.options.sizes.for_modality(t.modality);
                let c = t.channels;
                let a = if use_global { c } else { 0 };
                a + n * c + self.strategy.init_param(n, c).len()
            })
            .sum()
    }

    pub fn descriptors(&self) -> Vec<DomainDescriptor> {
        self.descriptors.values().cloned().collect()
    }

    pub fn descriptor(&self, domain: DomainId) -> Option<&DomainDescriptor> {
        self.descriptors.get(&domain)
    }

    pub fn set_descriptor(&mut self, d: DomainDescriptor) -> Result<()> {
        if let Some(old) = self.descriptors.get(&d.domain) {
            if old.frozen {
                return Err(Error::domain("adapter bank", format!("descriptor of domain {} is frozen", d.domain)));
            }
        }
        self.descriptors.insert(d.domain, d);
        Ok(())
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut domains = Vec::new();
        for (&domain, sets) in &self.sets {
            let mut entries = Vec::new();
            for s in sets {
                let stem = format!("d{domain}.{}", s.tap.name());
                let mut files = BTreeMap::new();
                for (key, t) in [("A", &s.a), ("P", &s.p), ("W", &s.w)] {
                    let file = format!("{stem}.{key}.pdt");
                    pdt::save(dir.join(&file), t)?;
                    files.insert(key.to_string(), file);
                }
                entries.push(SetEntry {
                    tap: s.tap,
                    n: s.n(),
                    files,
                });
            }
            domains.push(DomainEntry {
                domain,
                frozen: self.frozen.contains(&domain),
                sets: entries,
            });
        }
        let mut descriptors = Vec::new();
        for d in self.descriptors.values() {
            let file = format!("d{}.descriptor.pdt", d.domain);
            pdt::save(dir.join(&file), &d.r)?;
            descriptors.push(DescriptorEntry {
                domain: d.domain,
                frozen: d.frozen,
                file,
            });
        }
        let manifest = BankManifest {
            format: BANK_FORMAT.into(),
            config_hash: config_hash.into(),
            options: self.options.clone(),
            taps: self.taps.clone(),
            domains,
            descriptors,
        };
        crate::write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Loads a bank and the config hash it was written under.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let m: BankManifest = crate::read_json(&dir.join("manifest.json"))?;
        if m.format != BANK_FORMAT {
            return Err(Error::Artifact(format!("{}: unsupported bank format {:?}", dir.display(), m.format)));
        }
        let mut bank = AdapterBank::new(m.options, m.taps)?;
        for entry in m.domains {
            let mut sets = Vec::new();
            for s in entry.sets {
                let load = |key: &str| -> Result<Tensor> {
                    let file = s.files.get(key).ok_or_else(|| {
                        Error::Artifact(format!("{}: set {} lacks {key}", dir.display(), s.tap.name()))
                    })?;
                    Ok(pdt::load(dir.join(file))?)
                };
                let set = PrototypeSet {
                    tap: s.tap,
                    domain: entry.domain,
                    a: load("A")?,
                    p: load("P")?,
                    w: load("W")?,
                };
                if set.n() != s.n {
                    return Err(Error::Artifact(format!("{}: set size mismatch for {}", dir.display(), s.tap.name())));
                }
                sets.push(set);
            }
            if entry.frozen {
                bank.frozen.insert(entry.domain);
            }
            bank.sets.insert(entry.domain, sets);
        }
        for d in m.descriptors {
            let r = pdt::load(dir.join(&d.file))?;
            bank.descriptors.insert(
                d.domain,
                DomainDescriptor {
                    domain: d.domain,
                    r,
                    frozen: d.frozen,
                },
            );
        }
        Ok((bank, m.config_hash))
    }
}

const BANK_FORMAT: &str = "protodepth-bank/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankManifest {
    format: String,
    config_hash: String,
    options: AdapterOptions,
    taps: Vec<LatentTap>,
    domains: Vec<DomainEntry>,
    descriptors: Vec<DescriptorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainEntry {
    domain: DomainId,
    frozen: bool,
    sets: Vec<SetEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetEntry {
    tap: TapId,
    n: usize,
    files: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorEntry {
    domain: DomainId,
    frozen: bool,
    file: String,
}
