//! Continual sequence: pretrain on the first dataset, freeze, then add one
//! prototype set per later dataset, evaluating every seen dataset after each
//! stage.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use protodepth_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, DomainId, SetSizes};
use crate::backbone::{tap_registry, Backbone, DepthInput, NoAdapters, TapHook};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geometry::warp_image;
use crate::losses::{descriptor_loss, error_metrics, photometric_loss, smoothness_loss, sparse_loss, total_loss, ErrorMetrics, LossMode, LossTerms, LossWeights};
use crate::metrics::{self, Table};
use crate::optim::Sgd;
use crate::report;
use crate::rng::{self, Rng};
use crate::router::{fit_initial_descriptor, init_descriptor, sample_descriptor, selectors, DomainDescriptor, EvalMode};
use crate::synth::{Dataset, Sample};

pub const LOG_FORMAT: &str = "protodepth-continual-log/1";
/// Metrics are reported in millimetres (and 1/km for inverse depth).
pub const REPORT_SCALE: f64 = 1000.0;

pub fn input(s: &Sample) -> DepthInput<'_> {
    DepthInput {
        image: &s.image,
        sparse: &s.sparse,
        mask: &s.mask,
    }
}

/// Unsupervised objective of one sample under `hook`. With `descriptor`
/// set, the descriptor term is added and the mode is agnostic adaptation.
pub struct Objective<'a> {
    pub weights: &'a LossWeights,
    pub mode: LossMode,
}

pub struct SampleLoss {
    pub total: Var,
    pub params: Vec<Var>,
}

pub struct DescriptorTerm<'a> {
    pub sample: &'a Tensor,
    pub r: Var,
    pub others: &'a [Tensor],
    pub w_jk: f32,
}

impl Objective<'_> {
    pub fn build(
        &self,
        tape: &mut Tape,
        net: &Backbone,
        sample: &Sample,
        hook: &mut dyn TapHook,
        descriptor: Option<DescriptorTerm<'_>>,
    ) -> Result<SampleLoss> {
        let out = net.forward(tape, &input(sample), hook)?;
        let views = [
            warp_image(tape, &sample.image_prev, out.depth, &sample.pose_prev, &sample.intrinsics)?,
            warp_image(tape, &sample.image_next, out.depth, &sample.pose_next, &sample.intrinsics)?,
        ];
        let target = tape.constant(sample.image.clone());
        let photometric = photometric_loss(tape, target, &views, self.weights)?.value;
        let sparse = sparse_loss(tape, out.depth, &sample.sparse, &sample.mask)?;
        let smoothness = smoothness_loss(tape, out.depth, &sample.image)?;
        let descriptor = match descriptor {
            Some(d) => Some(descriptor_loss(tape, d.sample, d.r, d.others, Some(d.w_jk))?),
            None => None,
        };
        let terms = LossTerms {
            photometric,
            sparse,
            smoothness,
            descriptor,
        };
        Ok(SampleLoss {
            total: total_loss(tape, &terms, self.weights, self.mode)?,
            params: out.params,
        })
    }
}

/// Endless reshuffled passes over `n` indices.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, rng: Rng) -> Self {
        Batches {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn mean_into(acc: &mut [Tensor], grads: Vec<Tensor>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.accumulate(&g);
    }
}

fn scale_all(ts: &mut [Tensor], s: f32) {
    for t in ts {
        for v in t.data_mut() {
            *v *= s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub dataset: String,
    pub steps: usize,
    /// Mean batch loss of the first and last steps.
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Trains a fresh backbone on `data` and freezes it.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Backbone, StageSummary)> {
    if data.train.is_empty() {
        return Err(Error::domain("pretrain", format!("dataset {} has no training samples", data.name())));
    }
    let mut net = Backbone::new(cfg.backbone.clone(), rng::derive_seed(cfg.seed, "backbone"))?;
    let sched = &cfg.sequence.pretrain;
    let mut opt = Sgd::new(cfg.sequence.momentum, cfg.sequence.grad_clip);
    let mut batches = Batches::new(data.train.len(), rng::substream(cfg.seed, "pretrain-batches"));
    let objective = Objective {
        weights: &cfg.loss,
        mode: LossMode::Pretrain,
    };
    let mut summary = StageSummary {
        stage: 1,
        dataset: data.name().into(),
        steps: sched.steps,
        first_loss: None,
        last_loss: None,
    };
    for _ in 0..sched.steps {
        let mut acc: Vec<Tensor> = net.params_mut()?.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut loss_sum = 0.0;
        let batch = batches.next(sched.batch_size);
        for &i in &batch {
            let mut tape = Tape::new();
            let l = objective.build(&mut tape, &net, &data.train[i], &mut NoAdapters, None)?;
            loss_sum += tape.scalar_f64(l.total);
            let g = tape.backward(l.total)?;
            mean_into(&mut acc, l.params.iter().map(|&p| g.wrt_or_zeros(p, tape.shape(p))).collect());
        }
        scale_all(&mut acc, 1.0 / batch.len() as f32);
        let lrs = vec![sched.lr; acc.len()];
        opt.step(&mut net.params_mut()?, &acc, &lrs)?;
        let mean = loss_sum / batch.len() as f64;
        summary.first_loss.get_or_insert(mean);
        summary.last_loss = Some(mean);
    }
    net.freeze();
    Ok((net, summary))
}

/// Sample descriptors of a dataset's splits under a frozen backbone.
pub struct DatasetDescriptors {
    pub train: Vec<Tensor>,
    pub eval: Vec<Tensor>,
}

pub fn describe(net: &Backbone, data: &Dataset) -> Result<DatasetDescriptors> {
    let one = |s: &Sample| sample_descriptor(&net.bottleneck_features(&input(s))?);
    Ok(DatasetDescriptors {
        train: data.train.iter().map(one).collect::<Result<_>>()?,
        eval: data.eval.iter().map(one).collect::<Result<_>>()?,
    })
}

/// Trains the sets (and, when `agnostic`, the descriptor) of `domain`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_stage(
    cfg: &ExperimentConfig,
    net: &Backbone,
    bank: &mut AdapterBank,
    domain: DomainId,
    data: &Dataset,
    descriptors: &DatasetDescriptors,
    agnostic: bool,
) -> Result<StageSummary> {
    if data.train.is_empty() {
        return Err(Error::domain("adapt", format!("dataset {} has no training samples", data.name())));
    }
    let sched = &cfg.sequence.adapt;
    let mut batches = Batches::new(data.train.len(), rng::substream(cfg.seed, &format!("adapt-batches-{domain}")));
    bank.new_domain(domain, &mut rng::substream(cfg.seed, &format!("prototypes-{domain}")))?;

    let mut batch = batches.next(sched.batch_size);
    let mut r = if agnostic {
        let first: Vec<Tensor> = batch.iter().map(|&i| descriptors.train[i].clone()).collect();
        let d = init_descriptor(domain, &first, cfg.sequence.descriptor.init_noise, &mut rng::substream(cfg.seed, &format!("descriptor-{domain}")))?;
        Some(d)
    } else {
        None
    };
    let others: Vec<Tensor> = bank.descriptors().into_iter().filter(|d| d.domain != domain).map(|d| d.r).collect();

    let objective = Objective {
        weights: &cfg.loss,
        mode: if agnostic { LossMode::AdaptAgnostic } else { LossMode::AdaptIncremental },
    };
    let mut set_opt = Sgd::new(cfg.sequence.momentum, cfg.sequence.grad_clip);
    let mut r_opt = Sgd::new(cfg.sequence.momentum, None);
    let mut summary = StageSummary {
        stage: domain as usize,
        dataset: data.name().into(),
        steps: sched.steps,
        first_loss: None,
        last_loss: None,
    };
    for step in 0..sched.steps {
        if step > 0 {
            batch = batches.next(sched.batch_size);
        }
        let mut acc: Option<Vec<Tensor>> = None;
        let mut r_acc = r.as_ref().map(|d| Tensor::zeros(d.r.shape()));
        let mut loss_sum = 0.0;
        for &i in &batch {
            let mut tape = Tape::new();
            let r_var = r.as_ref().map(|d| tape.leaf(d.r.clone()));
            let mut hook = bank.hook(domain, true)?;
            let term = r_var.map(|rv| DescriptorTerm {
                sample: &descriptors.train[i],
                r: rv,
                others: &others,
                w_jk: cfg.sequence.descriptor.repulsion_norm * others.len().max(1) as f32,
            });
            let l = objective.build(&mut tape, net, &data.train[i], &mut hook, term)?;
            loss_sum += tape.scalar_f64(l.total);
            let g = tape.backward(l.total)?;
            let flat: Vec<Tensor> = hook
                .gradients(&tape, &g)
                .into_iter()
                .flat_map(|s| s.a.into_iter().chain([s.p, s.w]))
                .collect();
            match &mut acc {
                Some(a) => mean_into(a, flat),
                None => acc = Some(flat),
            }
            if let (Some(ra), Some(rv)) = (&mut r_acc, r_var) {
                ra.accumulate(&g.wrt_or_zeros(rv, tape.shape(rv)));
            }
        }
        let inv = 1.0 / batch.len() as f32;
        let mut acc = acc.expect("non-empty batch");
        scale_all(&mut acc, inv);
        let use_global = bank.options().use_global;
        let sets = bank.sets_mut(domain)?;
        let mut params: Vec<&mut Tensor> = Vec::new();
        for s in sets.iter_mut() {
            if use_global {
                params.push(&mut s.a);
            }
            params.push(&mut s.p);
            params.push(&mut s.w);
        }
        let lrs = vec![sched.lr; params.len()];
        set_opt.step(&mut params, &acc, &lrs)?;
        if let (Some(d), Some(mut ra)) = (&mut r, r_acc) {
            scale_all(std::slice::from_mut(&mut ra), inv);
            r_opt.step(&mut [&mut d.r], &[ra], &[cfg.sequence.descriptor.lr])?;
        }
        let mean = loss_sum / batch.len() as f64;
        summary.first_loss.get_or_insert(mean);
        summary.last_loss = Some(mean);
    }
    if let Some(d) = r {
        bank.set_descriptor(d)?;
    }
    bank.freeze(domain);
    Ok(summary)
}

/// Metrics of one dataset under one mode.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Reported units (millimetres).
    pub metrics: ErrorMetrics,
    /// Domain chosen for each eval sample.
    pub routes: Vec<DomainId>,
    pub routing_accuracy: f64,
}

/// Evaluates the held-out split of `data`, whose true domain is `domain`.
pub fn evaluate(
    net: &Backbone,
    bank: &AdapterBank,
    data: &Dataset,
    eval_descriptors: &[Tensor],
    domain: DomainId,
    mode: EvalMode,
    range: [f32; 2],
) -> Result<Evaluation> {
    if data.eval.is_empty() {
        return Err(Error::domain("evaluate", format!("dataset {} has no eval samples", data.name())));
    }
    if domain > 1 && bank.sets(domain).is_none() && mode == EvalMode::Incremental {
        return Err(Error::domain("evaluate", format!("domain {domain} has not been trained")));
    }
    let selector = selectors().get(mode.name())?;
    let descriptors: Vec<DomainDescriptor> = bank.descriptors();
    let mut per_sample = Vec::with_capacity(data.eval.len());
    let mut routes = Vec::with_capacity(data.eval.len());
    for (s, desc) in data.eval.iter().zip(eval_descriptors) {
        let chosen = selector.select(domain, desc, &descriptors)?;
        let mut hook = bank.hook(chosen, false)?;
        let pred = net.predict(&input(s), &mut hook)?;
        per_sample.push(error_metrics(&pred, &s.gt, range)?);
        routes.push(chosen);
    }
    let correct = routes.iter().filter(|&&d| d == domain).count();
    Ok(Evaluation {
        metrics: ErrorMetrics::mean(&per_sample)?.scaled(REPORT_SCALE),
        routing_accuracy: correct as f64 / routes.len() as f64,
        routes,
    })
}

/// The frozen backbone without any prototype set, in reported units.
pub fn evaluate_plain(net: &Backbone, data: &Dataset, range: [f32; 2]) -> Result<ErrorMetrics> {
    if data.eval.is_empty() {
        return Err(Error::domain("evaluate", format!("dataset {} has no eval samples", data.name())));
    }
    let per_sample = data
        .eval
        .iter()
        .map(|s| error_metrics(&net.predict(&input(s), &mut NoAdapters)?, &s.gt, range))
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorMetrics::mean(&per_sample)?.scaled(REPORT_SCALE))
}

/// `cells[j][k]`, filled for `j ≤ k`.
pub type MetricMatrix = Vec<Vec<Option<ErrorMetrics>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub backbone: usize,
    pub prototypes_per_domain: usize,
    pub set_sizes: SetSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualLog {
    pub format: String,
    pub config_hash: String,
    pub datasets: Vec<String>,
    pub units: String,
    pub parameters: ParameterSummary,
    pub stages: Vec<StageSummary>,
    /// Frozen backbone without adapters, per dataset.
    pub unadapted: Vec<ErrorMetrics>,
    pub incremental: Option<MetricMatrix>,
    pub agnostic: Option<MetricMatrix>,
    pub routing_accuracy: Option<Vec<Vec<Option<f64>>>>,
}

impl ContinualLog {
    pub fn matrix(&self, mode: EvalMode) -> Option<&MetricMatrix> {
        match mode {
            EvalMode::Incremental => self.incremental.as_ref(),
            EvalMode::Agnostic => self.agnostic.as_ref(),
        }
    }

    pub fn modes(&self) -> Vec<EvalMode> {
        [EvalMode::Incremental, EvalMode::Agnostic]
            .into_iter()
            .filter(|&m| self.matrix(m).is_some())
            .collect()
    }

    /// One metric of one mode as a plain table.
    pub fn table(&self, mode: EvalMode, metric: &str) -> Result<Table> {
        let m = self
            .matrix(mode)
            .ok_or_else(|| Error::domain("continual log", format!("{} mode was not evaluated", mode.name())))?;
        m.iter()
            .map(|row| {
                row.iter()
                    .map(|cell| match cell {
                        Some(e) => e
                            .get(metric)
                            .map(Some)
                            .ok_or_else(|| Error::domain("continual log", format!("unknown metric {metric:?}"))),
                        None => Ok(None),
                    })
                    .collect()
            })
            .collect()
    }

    /// Rows of (mode, metric, forgetting %, performance, SPTO).
    pub fn summary(&self) -> Result<Vec<SummaryRow>> {
        let mut rows = Vec::new();
        for mode in self.modes() {
            for metric in ErrorMetrics::NAMES {
                let t = self.table(mode, metric)?;
                rows.push(SummaryRow {
                    mode,
                    metric,
                    average_forgetting: metrics::average_forgetting(&t)?,
                    average_performance: metrics::average_performance(&t)?,
                    spto: metrics::spto(&t)?,
                });
            }
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub mode: EvalMode,
    pub metric: &'static str,
    pub average_forgetting: f64,
    pub average_performance: f64,
    pub spto: f64,
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub log: ContinualLog,
    pub backbone: Backbone,
    pub bank: AdapterBank,
}

struct Sidecar(Option<fs::File>);

impl Sidecar {
    fn open(path: &Path) -> Self {
        Sidecar(fs::OpenOptions::new().create(true).append(true).open(path).ok())
    }

    fn note(&mut self, msg: &str) {
        if let Some(f) = &mut self.0 {
            let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            let _ = writeln!(f, "{t:.3} {msg}");
        }
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    cfg.sequence.datasets.iter().map(|p| Dataset::load(p)).collect()
}

/// Runs the full sequence and writes all artifacts into `cfg.output_dir`.
pub fn run_sequence(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut side = Sidecar::open(&cfg.output_dir.join("run.log"));
    side.note("pretrain start");
    let (net, summary) = pretrain(cfg, &datasets[0]).map_err(|e| stage_error(1, &datasets[0], e))?;
    side.note("pretrain end");
    run_from_pretrained(cfg, &datasets, net, summary, &mut side)
}

/// Runs the sequence from an already pretrained backbone.
pub fn run_with_backbone(cfg: &ExperimentConfig, datasets: &[Dataset], net: Backbone, summary: StageSummary) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut side = Sidecar::open(&cfg.output_dir.join("run.log"));
    run_from_pretrained(cfg, datasets, net, summary, &mut side)
}

fn stage_error(stage: usize, data: &Dataset, e: Error) -> Error {
    Error::Stage {
        stage,
        dataset: data.name().into(),
        source: Box::new(e),
    }
}

fn run_from_pretrained(cfg: &ExperimentConfig, datasets: &[Dataset], mut net: Backbone, pre: StageSummary, side: &mut Sidecar) -> Result<RunOutcome> {
    net.freeze();
    let hash = cfg.hash();
    let t = datasets.len();
    let range = cfg.eval_range();
    let modes: Vec<EvalMode> = [
        (EvalMode::Incremental, cfg.sequence.modes.incremental),
        (EvalMode::Agnostic, cfg.sequence.modes.agnostic),
    ]
    .into_iter()
    .filter_map(|(m, on)| on.then_some(m))
    .collect();
    let agnostic = cfg.sequence.modes.agnostic;

    let descs: Vec<DatasetDescriptors> = datasets.iter().map(|d| describe(&net, d)).collect::<Result<_>>()?;
    let mut bank = AdapterBank::new(cfg.adapter_options(), tap_registry())?;
    if agnostic {
        let mut idx: Vec<usize> = (0..descs[0].train.len()).collect();
        idx.shuffle(&mut rng::substream(cfg.seed, "descriptor-fit"));
        idx.truncate(cfg.sequence.descriptor.fit_subset);
        let subset: Vec<Tensor> = idx.iter().map(|&i| descs[0].train[i].clone()).collect();
        bank.set_descriptor(fit_initial_descriptor(1, &subset)?)?;
    }

    let mut log = ContinualLog {
        format: LOG_FORMAT.into(),
        config_hash: hash.clone(),
        datasets: datasets.iter().map(|d| d.name().to_string()).collect(),
        units: "mm".into(),
        parameters: ParameterSummary {
            backbone: net.parameter_count().total(),
            prototypes_per_domain: bank.parameters_per_domain(),
            set_sizes: cfg.set_sizes,
        },
        stages: vec![pre],
        unadapted: Vec::with_capacity(t),
        incremental: cfg.sequence.modes.incremental.then(|| vec![vec![None; t]; t]),
        agnostic: agnostic.then(|| vec![vec![None; t]; t]),
        routing_accuracy: agnostic.then(|| vec![vec![None; t]; t]),
    };
    for d in datasets {
        log.unadapted.push(evaluate_plain(&net, d, range)?);
    }

    for k in 0..t {
        let domain = (k + 1) as DomainId;
        if k > 0 {
            side.note(&format!("stage {} start", k + 1));
            let res = adapt_stage(cfg, &net, &mut bank, domain, &datasets[k], &descs[k], agnostic);
            match res {
                Ok(s) => log.stages.push(s),
                Err(e) => {
                    dump_abort(&cfg.output_dir, &hash, &log, &bank, k + 1, &e);
                    return Err(stage_error(k + 1, &datasets[k], e));
                }
            }
            side.note(&format!("stage {} end", k + 1));
        }
        for j in 0..=k {
            for &mode in &modes {
                let e = evaluate(&net, &bank, &datasets[j], &descs[j].eval, (j + 1) as DomainId, mode, range)
                    .map_err(|e| stage_error(k + 1, &datasets[k], e))?;
                let cells = match mode {
                    EvalMode::Incremental => log.incremental.as_mut(),
                    EvalMode::Agnostic => log.agnostic.as_mut(),
                };
                cells.expect("mode enabled")[j][k] = Some(e.metrics);
                if mode == EvalMode::Agnostic {
                    log.routing_accuracy.as_mut().expect("agnostic enabled")[j][k] = Some(e.routing_accuracy);
                }
            }
        }
    }

    write_artifacts(&cfg.output_dir, cfg, &log, &net, &bank)?;
    side.note("artifacts written");
    Ok(RunOutcome {
        run_dir: cfg.output_dir.clone(),
        log,
        backbone: net,
        bank,
    })
}

fn dump_abort(dir: &Path, hash: &str, log: &ContinualLog, bank: &AdapterBank, stage: usize, e: &Error) {
    let abort = dir.join("abort");
    let _ = fs::create_dir_all(&abort);
    let _ = fs::write(abort.join("error.txt"), format!("stage {stage}: {e}\n"));
    let _ = crate::write_json(&abort.join("partial_log.json"), log);
    let _ = bank.save(&abort.join("bank"), hash);
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "continual_log.json";
pub const REPORT_FILE: &str = "metrics_report.csv";
pub const CHART_FILE: &str = "trajectories.svg";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    config_hash: String,
    config: ExperimentConfig,
}

pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, log: &ContinualLog, net: &Backbone, bank: &AdapterBank) -> Result<()> {
    let hash = cfg.hash();
    crate::write_json(
        &dir.join(CONFIG_FILE),
        &StoredConfig {
            config_hash: hash.clone(),
            config: cfg.clone(),
        },
    )?;
    crate::write_json(&dir.join(LOG_FILE), log)?;
    let csv = report::summary_csv(log)?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(path, e))?;
    let path = dir.join(CHART_FILE);
    fs::write(&path, report::trajectory_svg(log)).map_err(|e| Error::io(path, e))?;
    net.save(&dir.join("backbone"), &hash)?;
    bank.save(&dir.join("bank"), &hash)
}

/// A finished run read back from disk, with every artifact's hash checked.
pub struct StoredRun {
    pub config: ExperimentConfig,
    pub hash: String,
    pub log: ContinualLog,
}

impl StoredRun {
    pub fn load(dir: &Path) -> Result<StoredRun> {
        let stored: StoredConfig = crate::read_json(&dir.join(CONFIG_FILE))?;
        let log: ContinualLog = crate::read_json(&dir.join(LOG_FILE))?;
        if log.format != LOG_FORMAT {
            return Err(Error::Artifact(format!("unsupported log format {:?}", log.format)));
        }
        let hash = stored.config.hash();
        if hash != stored.config_hash {
            return Err(Error::Artifact(format!("{} was edited after the run (hash mismatch)", CONFIG_FILE)));
        }
        if log.config_hash != hash {
            return Err(Error::Artifact(format!(
                "{LOG_FILE} has config hash {} but {CONFIG_FILE} has {hash}",
                log.config_hash
            )));
        }
        Ok(StoredRun {
            config: stored.config,
            hash,
            log,
        })
    }

    /// The trained backbone and bank, checked against the run's hash.
    pub fn models(&self, dir: &Path) -> Result<(Backbone, AdapterBank)> {
        let (net, h1) = Backbone::load(&dir.join("backbone"))?;
        let (bank, h2) = AdapterBank::load(&dir.join("bank"))?;
        for (what, h) in [("backbone", h1), ("bank", h2)] {
            if h != self.hash {
                return Err(Error::Artifact(format!("{what} has config hash {h} but the run has {}", self.hash)));
            }
        }
        Ok((net, bank))
    }
}

/// One row of a set-size sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `None` for the unadapted backbone.
    pub sizes: Option<SetSizes>,
    pub prototype_parameters: usize,
    pub dataset: String,
    pub metrics: ErrorMetrics,
}

/// Pretrains once, then repeats the adaptation stages for each set size.
/// Each run lands in `<output_dir>/sizes_<n_image>x<n_depth>`.
pub fn run_sweep(cfg: &ExperimentConfig, grid: &[SetSizes]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let datasets = load_datasets(cfg)?;
    let (net, pre) = pretrain(cfg, &datasets[0]).map_err(|e| stage_error(1, &datasets[0], e))?;
    let mut rows = Vec::new();
    for (i, &sizes) in grid.iter().enumerate() {
        let mut c = cfg.clone();
        c.set_sizes = sizes;
        c.output_dir = cfg.output_dir.join(format!("sizes_{sizes}"));
        let out = run_with_backbone(&c, &datasets, net.clone(), pre.clone())?;
        let inc = out
            .log
            .incremental
            .as_ref()
            .ok_or_else(|| Error::Config("sweep needs incremental evaluation".into()))?;
        if i == 0 {
            for (j, name) in out.log.datasets.iter().enumerate().skip(1) {
                rows.push(SweepRow {
                    sizes: None,
                    prototype_parameters: 0,
                    dataset: name.clone(),
                    metrics: out.log.unadapted[j],
                });
            }
        }
        for (j, name) in out.log.datasets.iter().enumerate().skip(1) {
            rows.push(SweepRow {
                sizes: Some(sizes),
                prototype_parameters: out.log.parameters.prototypes_per_domain,
                dataset: name.clone(),
                metrics: inc[j][j].expect("complete log"),
            });
        }
    }
    let path = cfg.output_dir.join("sweep.csv");
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    fs::write(&path, report::sweep_csv(&rows)).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}
