//! Domain descriptors and test-time prototype-set selection.

use std::sync::Arc;

use protodepth_tensor::{Tape, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::DomainId;
use crate::error::{Error, Result};
use crate::losses::{cosine, descriptor_loss};
use crate::registry::Registry;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDescriptor {
    pub domain: DomainId,
    pub r: Tensor,
    pub frozen: bool,
}

/// Per-channel spatial mean of h×w×c features.
pub fn sample_descriptor(features: &Tensor) -> Result<Tensor> {
    let (h, w, c) = features.hwc()?;
    let mut acc = vec![0f64; c];
    for px in features.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v as f64;
        }
    }
    let n = (h * w) as f64;
    Ok(Tensor::new(vec![c], acc.into_iter().map(|a| (a / n) as f32).collect())?)
}

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

fn normalized_mean(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::domain("descriptor", "no sample descriptors"))?;
    let c = first.len();
    let mut acc = vec![0f64; c];
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::domain("descriptor", "sample descriptors differ in length"));
        }
        for (a, &v) in acc.iter_mut().zip(s.data()) {
            *a += v as f64;
        }
    }
    let n = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Numeric("mean sample descriptor has zero norm".into()));
    }
    Ok(Tensor::new(vec![c], acc.iter().map(|a| (a / n) as f32).collect())?)
}

/// Domain whose descriptor has the highest cosine with `s`; ties go to the
/// lowest id.
pub fn select_domain(s: &Tensor, descriptors: &[DomainDescriptor]) -> Result<DomainId> {
    if descriptors.is_empty() {
        return Err(Error::domain("routing", "no domain descriptors"));
    }
    if norm(s) == 0.0 {
        return Err(Error::Numeric("sample descriptor has zero norm".into()));
    }
    let mut ordered: Vec<&DomainDescriptor> = descriptors.iter().collect();
    ordered.sort_by_key(|d| d.domain);
    let mut best: Option<(f64, DomainId)> = None;
    for d in ordered {
        let c = cosine(s, &d.r)?;
        if best.is_none_or(|(b, _)| c > b) {
            best = Some((c, d.domain));
        }
    }
    Ok(best.unwrap().1)
}

/// Frozen descriptor equal to the normalized mean of `samples`.
pub fn fit_initial_descriptor(domain: DomainId, samples: &[Tensor]) -> Result<DomainDescriptor> {
    Ok(DomainDescriptor {
        domain,
        r: normalized_mean(samples)?,
        frozen: true,
    })
}

/// Trainable descriptor started at the normalized mean of `first_batch`
/// plus Gaussian noise of spread `noise`.
pub fn init_descriptor(domain: DomainId, first_batch: &[Tensor], noise: f32, rng: &mut Rng) -> Result<DomainDescriptor> {
    let mut r = normalized_mean(first_batch)?;
    if noise > 0.0 {
        let normal = Normal::new(0.0f32, noise).map_err(|e| Error::Config(format!("descriptor noise: {e}")))?;
        for v in r.data_mut() {
            *v += normal.sample(rng);
        }
    }
    if norm(&r) == 0.0 {
        return Err(Error::Numeric("initial descriptor has zero norm".into()));
    }
    Ok(DomainDescriptor {
        domain,
        r,
        frozen: false,
    })
}

/// One plain gradient step of the descriptor loss on `r`; returns the loss
/// before the step.
pub fn train_descriptor_step(r: &mut DomainDescriptor, s: &Tensor, others: &[DomainDescriptor], lr: f32) -> Result<f64> {
    if r.frozen {
        return Err(Error::domain("descriptor", format!("descriptor of domain {} is frozen", r.domain)));
    }
    let mut tape = Tape::new();
    let rv = tape.leaf(r.r.clone());
    let others: Vec<Tensor> = others.iter().map(|o| o.r.clone()).collect();
    let loss = descriptor_loss(&mut tape, s, rv, &others, None)?;
    let value = tape.scalar_f64(loss);
    let grads = tape.backward(loss)?;
    let g = grads.wrt_or_zeros(rv, r.r.shape());
    let next = r.r.zip_map(&g, |v, g| v - lr * g)?;
    if norm(&next) == 0.0 || !next.is_finite() {
        return Err(Error::Numeric("descriptor step produced a degenerate vector".into()));
    }
    r.r = next;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Incremental,
    Agnostic,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Incremental => "incremental",
            EvalMode::Agnostic => "agnostic",
        }
    }

    pub fn parse(s: &str) -> Result<EvalMode> {
        match s {
            "incremental" => Ok(EvalMode::Incremental),
            "agnostic" => Ok(EvalMode::Agnostic),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected incremental or agnostic"))),
        }
    }
}

/// Picks the prototype set used for one evaluation sample.
pub trait DomainSelector: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, true_domain: DomainId, s: &Tensor, descriptors: &[DomainDescriptor]) -> Result<DomainId>;
}

/// Domain identity is given.
pub struct OracleSelector;

impl DomainSelector for OracleSelector {
    fn name(&self) -> &'static str {
        "incremental"
    }

    fn select(&self, true_domain: DomainId, _s: &Tensor, _d: &[DomainDescriptor]) -> Result<DomainId> {
        Ok(true_domain)
    }
}

/// Domain identity is inferred from the sample descriptor.
pub struct DescriptorSelector;

impl DomainSelector for DescriptorSelector {
    fn name(&self) -> &'static str {
        "agnostic"
    }

    fn select(&self, _true_domain: DomainId, s: &Tensor, descriptors: &[DomainDescriptor]) -> Result<DomainId> {
        select_domain(s, descriptors)
    }
}

pub fn selectors() -> Registry<dyn DomainSelector> {
    let mut r: Registry<dyn DomainSelector> = Registry::new("evaluation mode");
    r.register("incremental", Arc::new(OracleSelector));
    r.register("agnostic", Arc::new(DescriptorSelector));
    r
}
