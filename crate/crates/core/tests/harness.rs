use std::fs;
use std::path::{Path, PathBuf};

use protodepth_core::adapter::AdapterBank;
use protodepth_core::backbone::tap_registry;
use protodepth_core::config::ExperimentConfig;
use protodepth_core::harness::{self, run_sequence, StoredRun, CONFIG_FILE, LOG_FILE};
use protodepth_core::synth::{generate_domain, make_shifted_family, Dataset, DomainSpec, ShiftProfile};
use protodepth_core::Error;

fn small_base() -> DomainSpec {
    let mut s = DomainSpec::indoor_like(21);
    s.height = 32;
    s.width = 48;
    s.intrinsics = s.intrinsics.with_focal_scale(0.5).unwrap();
    s.intrinsics.cx = 23.5;
    s.intrinsics.cy = 15.5;
    s
}

fn family(dir: &Path, n_domains: usize, n: usize) -> Vec<PathBuf> {
    make_shifted_family(&small_base(), n_domains, &ShiftProfile::default())
        .unwrap()
        .iter()
        .map(|s| generate_domain(s, n, &dir.join(&s.name)).unwrap().parent().unwrap().to_path_buf())
        .collect()
}

fn config(datasets: &[PathBuf], out: &Path, pre: usize, adapt: usize) -> ExperimentConfig {
    let v = serde_json::json!({
        "seed": 9,
        "output_dir": out,
        "sequence": {
            "datasets": datasets,
            "pretrain": {"steps": pre, "batch_size": 2, "lr": 0.02},
            "adapt": {"steps": adapt, "batch_size": 2, "lr": 0.05},
            "grad_clip": 1.0
        }
    });
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn log_is_complete_and_incremental_rows_never_change() {
    let dir = tempfile::tempdir().unwrap();
    let data = family(dir.path(), 3, 5);
    let out = run_sequence(&config(&data, &dir.path().join("run"), 2, 2)).unwrap();
    let log = &out.log;
    assert_eq!(log.stages.len(), 3);
    assert_eq!(log.datasets, vec!["indoor-1", "indoor-2", "indoor-3"]);
    for m in [log.incremental.as_ref().unwrap(), log.agnostic.as_ref().unwrap()] {
        for (j, row) in m.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                assert_eq!(cell.is_some(), j <= k, "cell {j},{k}");
            }
        }
    }
    let inc = log.incremental.as_ref().unwrap();
    for row in inc {
        let first = row.iter().flatten().next().unwrap();
        assert!(row.iter().flatten().all(|c| c == first));
    }
    for row in log.routing_accuracy.as_ref().unwrap() {
        assert!(row.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
    }
    assert_eq!(log.parameters.backbone, 446_401);
    for r in log.summary().unwrap().iter().filter(|r| r.mode.name() == "incremental") {
        assert_eq!(r.average_forgetting, 0.0);
    }
}

#[test]
fn zero_adaptation_steps_keep_the_unadapted_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = family(dir.path(), 2, 4);
    let out = run_sequence(&config(&data, &dir.path().join("run"), 1, 0)).unwrap();
    let log = &out.log;
    for m in [log.incremental.as_ref().unwrap(), log.agnostic.as_ref().unwrap()] {
        assert_eq!(m[0][1], m[0][0]);
        assert_eq!(m[0][0], Some(log.unadapted[0]));
        assert_eq!(m[1][1], Some(log.unadapted[1]));
    }
}

#[test]
fn adaptation_leaves_the_backbone_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let paths = family(dir.path(), 2, 4);
    let cfg = config(&paths, &dir.path().join("run"), 1, 3);
    let data: Vec<Dataset> = paths.iter().map(|p| Dataset::load(p).unwrap()).collect();
    let (net, _) = harness::pretrain(&cfg, &data[0]).unwrap();
    assert!(net.is_frozen());
    let before = net.layers().to_vec();
    let mut bank = AdapterBank::new(cfg.adapter_options(), tap_registry()).unwrap();
    let descs = harness::describe(&net, &data[1]).unwrap();
    let s = harness::adapt_stage(&cfg, &net, &mut bank, 2, &data[1], &descs, false).unwrap();
    assert_eq!(s.steps, 3);
    assert!(s.first_loss.unwrap().is_finite());
    assert_eq!(net.layers(), &before[..]);
    assert!(bank.is_frozen(2));
    // a trained, frozen domain cannot be retrained
    assert!(harness::adapt_stage(&cfg, &net, &mut bank, 2, &data[1], &descs, false).is_err());
}

#[test]
fn artifacts_round_trip_and_detect_edits() {
    let dir = tempfile::tempdir().unwrap();
    let data = family(dir.path(), 2, 4);
    let run_dir = dir.path().join("run");
    let out = run_sequence(&config(&data, &run_dir, 1, 1)).unwrap();
    let stored = StoredRun::load(&run_dir).unwrap();
    assert_eq!(stored.log, out.log);
    let (net, bank) = stored.models(&run_dir).unwrap();
    assert_eq!(net.layers(), out.backbone.layers());
    assert_eq!(bank.descriptors(), out.bank.descriptors());
    assert!(run_dir.join("run.log").exists());

    let path = run_dir.join(CONFIG_FILE);
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    v["config"]["seed"] = 10.into();
    fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(StoredRun::load(&run_dir), Err(Error::Artifact(_))));
}

#[test]
fn identical_configs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = family(dir.path(), 2, 4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_sequence(&config(&data, &a, 2, 2)).unwrap();
    run_sequence(&config(&data, &b, 2, 2)).unwrap();
    assert_eq!(fs::read(a.join(LOG_FILE)).unwrap(), fs::read(b.join(LOG_FILE)).unwrap());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![dir.path().join("nope-1"), dir.path().join("nope-2")];
    let err = run_sequence(&config(&data, &dir.path().join("run"), 1, 1)).err().unwrap();
    assert!(err.is_io(), "{err}");
}
