use std::fs;
use std::path::Path;

use protodepth_core::geometry::warp_image;
use protodepth_core::synth::{
    generate_domain, make_shifted_family, render_sample, Dataset, DatasetManifest, DomainSpec, ShiftProfile, Split,
};
use protodepth_core::tensor::Tape;
use protodepth_core::{read_json, write_json};

fn small(seed: u64) -> DomainSpec {
    let mut s = DomainSpec::indoor_like(seed);
    s.height = 32;
    s.width = 48;
    s.intrinsics = s.intrinsics.with_focal_scale(0.5).unwrap();
    s.intrinsics.cx = 23.5;
    s.intrinsics.cy = 15.5;
    s
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small(3);
    generate_domain(&spec, 5, a.path()).unwrap();
    generate_domain(&spec, 5, b.path()).unwrap();
    let fa = files_under(a.path());
    assert_eq!(fa.len(), 1 + 5 * 6);
    assert_eq!(fa, files_under(b.path()));
}

#[test]
fn default_indoor_dataset_loads() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainSpec::indoor_like(1);
    let manifest = generate_domain(&spec, 8, dir.path()).unwrap();
    let data = Dataset::load(&manifest).unwrap();
    assert_eq!(data.train.len() + data.eval.len(), 8);
    assert_eq!(data.eval.len(), spec.eval_count(8));
    assert!(!data.eval.is_empty());
    let direct = render_sample(&spec, Split::Eval, 0).unwrap();
    assert_eq!(data.eval[0], direct);
    assert_eq!(Dataset::load(dir.path()).unwrap().manifest, data.manifest);
}

#[test]
fn degenerate_requests_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_domain(&small(1), 0, dir.path()).is_err());
    let mut s = small(1);
    s.sparse_density = 0.2;
    assert!(s.validate().is_err());
    s = small(1);
    s.scene.depth_range = [0.0, 5.0];
    assert!(s.validate().is_err());
    s = small(1);
    s.width = 50;
    assert!(s.validate().is_err());
}

#[test]
fn loader_rejects_unknown_versions_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = generate_domain(&small(2), 2, dir.path()).unwrap();
    let mut m: DatasetManifest = read_json(&path).unwrap();
    m.format_version = 99;
    write_json(&path, &m).unwrap();
    assert!(Dataset::load(&path).is_err());
    m.format_version = 1;
    write_json(&path, &m).unwrap();
    assert!(Dataset::load(&path).is_ok());
    fs::remove_file(dir.path().join(&m.samples[0].files["gt"])).unwrap();
    assert!(Dataset::load(&path).is_err());
}

#[test]
fn sparse_depth_is_exact_and_ground_truth_in_range() {
    let spec = small(4);
    let mut points = 0usize;
    let mut pixels = 0usize;
    for i in 0..40 {
        let s = render_sample(&spec, Split::Train, i).unwrap();
        let [lo, hi] = spec.scene.depth_range;
        assert!(s.gt.data().iter().all(|&d| d >= lo && d <= hi));
        for ((&z, &m), &g) in s.sparse.data().iter().zip(s.mask.data()).zip(s.gt.data()) {
            if m > 0.0 {
                assert_eq!(z, g);
                points += 1;
            } else {
                assert_eq!(z, 0.0);
            }
        }
        pixels += s.gt.len();
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    let density = points as f64 / pixels as f64;
    assert!((density / spec.sparse_density - 1.0).abs() < 0.1, "density {density}");
}

#[test]
fn outdoor_profile_density() {
    let spec = DomainSpec::outdoor_like(9);
    let s = render_sample(&spec, Split::Train, 0).unwrap();
    let d = s.mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / s.mask.len() as f64;
    assert!((d / 0.05 - 1.0).abs() < 0.1);
}

#[test]
fn frames_are_photometrically_consistent() {
    for spec in [DomainSpec::indoor_like(6), DomainSpec::outdoor_like(6)] {
        for i in 0..4 {
            let s = render_sample(&spec, Split::Train, i).unwrap();
            for (src, pose) in [(&s.image_next, &s.pose_next), (&s.image_prev, &s.pose_prev)] {
                let mut tape = Tape::new();
                let depth = tape.constant(s.gt.clone());
                let warped = warp_image(&mut tape, src, depth, pose, &s.intrinsics).unwrap();
                let out = tape.value(warped.image).data();
                let (h, w) = (spec.height, spec.width);
                let (mut sum, mut n) = (0.0f64, 0usize);
                for y in 2..h - 2 {
                    for x in 2..w - 2 {
                        let p = y * w + x;
                        if warped.validity.data()[p] == 0.0 {
                            continue;
                        }
                        for c in 0..3 {
                            sum += (out[p * 3 + c] - s.image.data()[p * 3 + c]).abs() as f64;
                        }
                        n += 3;
                    }
                }
                assert!(n > h * w, "too few valid pixels");
                assert!(sum / (n as f64) < 0.02, "{} sample {i}: {}", spec.name, sum / n as f64);
            }
        }
    }
}

#[test]
fn zero_gap_family_differs_only_in_identity() {
    let base = DomainSpec::indoor_like(7);
    let shift = ShiftProfile {
        gap: 0.0,
        ..ShiftProfile::default()
    };
    let family = make_shifted_family(&base, 4, &shift).unwrap();
    let seeds: std::collections::BTreeSet<u64> = family.iter().map(|s| s.seed).collect();
    assert_eq!(seeds.len(), 4);
    for s in family {
        let mut s = s.clone();
        s.seed = base.seed;
        s.name = base.name.clone();
        assert_eq!(s, base);
    }
}

#[test]
fn gap_scales_every_factor() {
    let base = DomainSpec::indoor_like(8);
    let shift = ShiftProfile {
        gap: 2.0,
        hue_step_deg: 30.0,
        brightness: vec![1.0, 0.9],
        contrast: vec![1.0, 0.5, 2.0],
        texture_frequency: vec![],
        focal: vec![1.0, 0.8],
        room_scale: vec![1.0, 0.9],
    };
    let f = make_shifted_family(&base, 3, &shift).unwrap();
    assert_eq!(f[0].appearance, base.appearance);
    assert_eq!(f[0].intrinsics, base.intrinsics);
    let a = &f[1].appearance;
    assert!((a.brightness - 0.81).abs() < 1e-6);
    assert!((a.contrast - 0.25).abs() < 1e-6);
    assert_eq!(a.hue_shift_deg, 60.0);
    assert_eq!(a.texture_frequency, base.appearance.texture_frequency);
    assert!((f[1].intrinsics.fx - base.intrinsics.fx * 0.64).abs() < 1e-3);
    assert_eq!(f[1].intrinsics.cx, base.intrinsics.cx);
    let wall = f[1].scene.wall_depth;
    assert!((wall[1] - base.scene.wall_depth[1] * 0.81).abs() < 1e-5);
    assert_eq!(f[1].scene.depth_range, base.scene.depth_range);
    assert_eq!(f[1].scene.box_count, base.scene.box_count);
    assert!((f[2].appearance.contrast - 4.0).abs() < 1e-6);
    assert_eq!(f[2].appearance.hue_shift_deg, 120.0);

    assert!(make_shifted_family(&base, 1, &shift).is_err());
    let bad = ShiftProfile {
        contrast: vec![1.0, -1.0],
        ..ShiftProfile::default()
    };
    assert!(make_shifted_family(&base, 3, &bad).is_err());
}
