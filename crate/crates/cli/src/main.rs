use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protodepth_core::adapter::SetSizes;
use protodepth_core::config::ExperimentConfig;
use protodepth_core::harness::{self, StoredRun};
use protodepth_core::router::{select_domain, EvalMode};
use protodepth_core::synth::{generate_domain, make_shifted_family, Dataset, DomainSpec, ShiftProfile};
use protodepth_core::{diagnostics, report, Error};
use serde::Deserialize;

/// Environment variable that replaces the parent of a config's output directory.
const OUT_ENV: &str = "PROTO_OUT";

#[derive(Parser)]
#[command(name = "protodepth", version, about = "Continual depth completion with per-domain prototype sets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset (or a shifted family of them) to disk.
    GenData {
        /// Domain spec JSON, or a family file `{"base": ..., "domains": N, "shift": {...}}`.
        /// `indoor` and `outdoor` name the built-in profiles.
        #[arg(long)]
        spec: String,
        /// Output directory. A family writes one subdirectory per domain.
        #[arg(long)]
        out: PathBuf,
        /// Samples per dataset.
        #[arg(long)]
        n: usize,
        /// Seed for the built-in profiles.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain, adapt over the sequence and write every artifact.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-evaluate a finished run in one mode and print CSV.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// incremental or agnostic
        #[arg(long)]
        mode: String,
    },
    /// Print forgetting, performance and SPTO of a finished run as CSV.
    Metrics {
        #[arg(long)]
        run: PathBuf,
    },
    /// Repeat the adaptation stages over a grid of values from one pretrain.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Only `set_sizes` is supported.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. `1x1,10x5`.
        #[arg(long)]
        values: String,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck,
    /// Dump the sample descriptors of a dataset as CSV.
    ExportDescriptors {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    base: SpecSource,
    domains: usize,
    #[serde(default)]
    shift: ShiftProfile,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecSource {
    Profile(String),
    Spec(Box<DomainSpec>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Family(FamilyFile),
    Single(Box<DomainSpec>),
}

fn builtin(name: &str, seed: u64) -> Result<DomainSpec, Error> {
    match name {
        "indoor" => Ok(DomainSpec::indoor_like(seed)),
        "outdoor" => Ok(DomainSpec::outdoor_like(seed)),
        other => Err(Error::Config(format!("unknown profile {other:?} (expected indoor or outdoor)"))),
    }
}

fn read_spec(spec: &str, seed: u64) -> Result<Vec<DomainSpec>, Error> {
    if matches!(spec, "indoor" | "outdoor") && !Path::new(spec).exists() {
        return Ok(vec![builtin(spec, seed)?]);
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let file: SpecFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: not a domain or family spec: {e}", path.display())))?;
    match file {
        SpecFile::Single(s) => Ok(vec![*s]),
        SpecFile::Family(f) => {
            let base = match f.base {
                SpecSource::Profile(p) => builtin(&p, seed)?,
                SpecSource::Spec(s) => *s,
            };
            base.validate()?;
            make_shifted_family(&base, f.domains, &f.shift)
        }
    }
}

fn gen_data(spec: &str, out: &Path, n: usize, seed: u64) -> Result<(), Error> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let specs = read_spec(spec, seed)?;
    for s in &specs {
        s.validate()?;
    }
    let family = specs.len() > 1;
    for s in &specs {
        let dir = if family { out.join(&s.name) } else { out.to_path_buf() };
        println!("{}", generate_domain(s, n, &dir)?.display());
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(root) = std::env::var_os(OUT_ENV) {
        let leaf = cfg.output_dir.file_name().map(PathBuf::from).unwrap_or_else(|| "protodepth-run".into());
        cfg.output_dir = PathBuf::from(root).join(leaf);
    }
    Ok(cfg)
}

fn run(config: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let out = harness::run_sequence(&cfg)?;
    print!("{}", report::summary_csv(&out.log)?);
    eprintln!("artifacts in {}", out.run_dir.display());
    Ok(())
}

fn eval(dir: &Path, mode: &str) -> Result<(), Error> {
    let mode = EvalMode::parse(mode)?;
    let stored = StoredRun::load(dir)?;
    let (net, bank) = stored.models(dir)?;
    let datasets = harness::load_datasets(&stored.config)?;
    let range = stored.config.eval_range();
    let mut out = String::from("dataset,domain,mae,rmse,imae,irmse,routing_accuracy\n");
    for (j, data) in datasets.iter().enumerate() {
        let d = harness::describe(&net, data)?;
        let e = harness::evaluate(&net, &bank, data, &d.eval, (j + 1) as u32, mode, range)?;
        let m = e.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            data.name(),
            j + 1,
            m.mae,
            m.rmse,
            m.imae,
            m.irmse,
            e.routing_accuracy
        )
        .unwrap();
    }
    print!("{out}");
    Ok(())
}

fn metrics(dir: &Path) -> Result<(), Error> {
    let stored = StoredRun::load(dir)?;
    // refuse runs whose saved models came from a different config
    stored.models(dir)?;
    print!("{}", report::summary_csv(&stored.log)?);
    Ok(())
}

fn sweep(config: &Path, param: &str, values: &str) -> Result<(), Error> {
    if param != "set_sizes" {
        return Err(Error::Config(format!("cannot sweep {param:?}; only set_sizes is supported")));
    }
    let grid = values
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| SetSizes::parse(v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = load_config(config)?;
    let rows = harness::run_sweep(&cfg, &grid)?;
    print!("{}", report::sweep_csv(&rows));
    Ok(())
}

fn gradcheck() -> Result<bool, Error> {
    let outcomes = diagnostics::gradient_suite()?;
    let mut ok = true;
    for o in &outcomes {
        println!("{} {} rel {:.3e}", if o.passed() { "ok  " } else { "FAIL" }, o.name, o.max_rel_error);
        ok &= o.passed();
    }
    println!("{} of {} checks passed", outcomes.iter().filter(|o| o.passed()).count(), outcomes.len());
    Ok(ok)
}

fn export_descriptors(dir: &Path, data: &Path, out: Option<&Path>) -> Result<(), Error> {
    let stored = StoredRun::load(dir)?;
    let (net, bank) = stored.models(dir)?;
    let data = Dataset::load(data)?;
    let d = harness::describe(&net, &data)?;
    let known = bank.descriptors();
    let width = d.train.first().or(d.eval.first()).map_or(0, |t| t.len());
    let mut csv = String::from("split,index,routed");
    for c in 0..width {
        write!(csv, ",s{c}").unwrap();
    }
    csv.push('\n');
    for (split, set) in [("train", &d.train), ("eval", &d.eval)] {
        for (i, s) in set.iter().enumerate() {
            let routed = if known.is_empty() { String::new() } else { select_domain(s, &known)?.to_string() };
            write!(csv, "{split},{i},{routed}").unwrap();
            for v in s.data() {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
    }
    match out {
        Some(p) => fs::write(p, csv).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        }),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        4
    } else if e.is_io() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData { spec, out, n, seed } => gen_data(spec, out, *n, *seed),
        Cmd::Run { config } => run(config),
        Cmd::Eval { run, mode } => eval(run, mode),
        Cmd::Metrics { run } => metrics(run),
        Cmd::Sweep { config, param, values } => sweep(config, param, values),
        Cmd::Gradcheck => match gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(4),
            Err(e) => Err(e),
        },
        Cmd::ExportDescriptors { run, data, out } => export_descriptors(run, data, out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
