//! Command-line behaviour: exit codes, hash gating, provenance and ingest.

use std::path::{Path, PathBuf};
use std::process::Command;

use longreg::geometry::{se3_exp, Grid, RigidLog, Svf};
use longreg::graph::{EdgeKind, Manifest};
use longreg::phantom::{generate_phantom, PhantomSpec, RegistrationMode};
use longreg::volume_io::{write_volume, LoadedVolume};
use longreg_cli::pipeline::{input_hashes, PROVENANCE_FILE, TIMING_FILE};
use longreg_cli::{ingest_external_registrations, run_pipeline, RunOptions, Stage, StageStatus};
use nalgebra::Vector3;
use proptest::prelude::*;
use tempfile::TempDir;

fn phantom(registrations: RegistrationMode) -> (TempDir, PathBuf) {
    phantom_from(PhantomSpec {
        shape: [12, 12, 12],
        timepoints: 3,
        registrations,
        ..PhantomSpec::default()
    })
}

fn phantom_from(spec: PhantomSpec) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    generate_phantom(&spec).unwrap().write(dir.path()).unwrap();
    let m = dir.path().join("manifest.json");
    (dir, m)
}

fn longreg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_longreg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_run_exits_zero_with_expected_outputs() {
    let (dir, m) = phantom(RegistrationMode::Additive);
    let out = dir.path().join("out");
    let o = longreg(&["run", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "rigid-solve/latent_rigids.json",
        "rigid-solve/latent_tp1.rigid.txt",
        "svf-solve/latent_tp2.svf.nii.gz",
        "template/template_intensity.nii.gz",
        "template/template_seg.nii.gz",
        "trajectory/slope.svf.nii.gz",
        "segment/seg_tp0.nii.gz",
        "stats/jacobian_1y.nii.gz",
        "stats/volumes.json",
        PROVENANCE_FILE,
        TIMING_FILE,
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn missing_file_exits_2_naming_the_path() {
    let (dir, m) = phantom(RegistrationMode::Additive);
    std::fs::remove_file(dir.path().join("tp1.nii.gz")).unwrap();
    let o = longreg(&["run", "--manifest", s(&m), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tp1.nii.gz"));
}

#[test]
fn rigid_solve_without_registrations_exits_2() {
    let (dir, m) = phantom(RegistrationMode::None);
    let out = dir.path().join("out");
    let o = longreg(&["run", "--manifest", s(&m), "--out", s(&out), "--stages", "rigid-solve"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rigid-solve") && err.contains("rigid registrations"), "{err}");
}

#[test]
fn validate_reports_missing_baseline() {
    let (dir, m) = phantom(RegistrationMode::Additive);
    let mut man = Manifest::load(&m).unwrap();
    for t in &mut man.timepoints {
        t.time_years += 1.0;
    }
    let bad = dir.path().join("bad.json");
    man.save(&bad).unwrap();
    let o = longreg(&["validate", "--manifest", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("time_years = 0"));
    assert_eq!(longreg(&["validate", "--manifest", s(&m)]).status.code(), Some(0));
}

#[test]
fn non_finite_observation_is_a_solver_failure() {
    let (dir, m) = phantom(RegistrationMode::Additive);
    let mut man = Manifest::load(&m).unwrap();
    let edge = man.edges(EdgeKind::Svf)[0].path.clone();
    let path = man.resolve(&edge);
    let v = longreg::volume_io::read_svf(&path).unwrap();
    let mut f = v.into_field();
    f.values_mut()[5] = Vector3::new(f64::NAN, 0.0, 0.0);
    write_volume(&LoadedVolume::Svf(Svf::new(f)), &path).unwrap();
    man.settings.mask_policy = longreg::graph::MaskPolicy::All;
    man.save(&m).unwrap();
    let out = dir.path().join("out");
    let o = longreg(&["solve", "--mode", "svf", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

fn statuses(p: &longreg_cli::Provenance) -> Vec<(String, StageStatus)> {
    p.stages.iter().map(|(k, r)| (k.clone(), r.status)).collect()
}

#[test]
fn completed_stages_are_hash_gated() {
    let (dir, m) = phantom(RegistrationMode::Additive);
    let out = dir.path().join("out");
    let opts = RunOptions::default();
    let first = run_pipeline(&m, &opts, &out).unwrap();
    assert!(statuses(&first).iter().all(|(_, s)| *s != StageStatus::Cached));
    let stamp = std::fs::metadata(out.join("template/template_intensity.nii.gz"))
        .unwrap()
        .modified()
        .unwrap();

    let second = run_pipeline(&m, &opts, &out).unwrap();
    for (name, st) in statuses(&second) {
        let expect = if name.ends_with("-register") { StageStatus::Supplied } else { StageStatus::Cached };
        assert_eq!(st, expect, "{name}");
    }
    for (name, rec) in &second.stages {
        assert_eq!(rec.input_hash, first.stages[name].input_hash);
        assert_eq!(rec.outputs, first.stages[name].outputs);
    }
    let again = std::fs::metadata(out.join("template/template_intensity.nii.gz"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(stamp, again);

    let forced = run_pipeline(&m, &RunOptions { force: true, ..RunOptions::default() }, &out).unwrap();
    assert_eq!(forced.stages["template"].status, StageStatus::Ran);
    assert_eq!(forced.stages["template"].outputs, first.stages["template"].outputs);
}

#[test]
fn changed_input_reruns_dependent_stages() {
    let (dir, m) = phantom(RegistrationMode::Additive);
    let out = dir.path().join("out");
    let opts = RunOptions {
        stages: vec![Stage::RigidSolve, Stage::Grid, Stage::SvfSolve],
        ..RunOptions::default()
    };
    let first = run_pipeline(&m, &opts, &out).unwrap();
    // rewrite one rigid observation with a slightly different translation
    let man = Manifest::load(&m).unwrap();
    let path = man.resolve(&man.edges(EdgeKind::Rigid)[0].path);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split_whitespace().map(|x| x.parse().unwrap()).collect())
        .collect();
    rows[0][3] += 0.25;
    let edited: String = rows
        .iter()
        .map(|r| r.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    std::fs::write(&path, edited).unwrap();

    let second = run_pipeline(&m, &opts, &out).unwrap();
    assert_ne!(first.inputs, second.inputs);
    for st in ["rigid-solve", "grid", "svf-solve"] {
        assert_eq!(second.stages[st].status, StageStatus::Ran, "{st}");
        assert_ne!(second.stages[st].input_hash, first.stages[st].input_hash, "{st}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn input_hashes_change_iff_bytes_change(
        contents in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..64), 1..4),
        which in any::<prop::sample::Index>(),
        at in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut nodes = Vec::new();
        for (i, c) in contents.iter().enumerate() {
            let name = format!("f{i}.bin");
            std::fs::write(dir.path().join(&name), c).unwrap();
            nodes.push(longreg::graph::TimepointNode {
                id: format!("t{i}"),
                time_years: i as f64,
                image: name.into(),
                labels: None,
                mask: None,
            });
        }
        let mut m = Manifest::new("s", nodes);
        m.base_dir = dir.path().to_path_buf();
        let before = input_hashes(&m).unwrap();

        // identical rewrite
        let i = which.index(contents.len());
        std::fs::write(dir.path().join(format!("f{i}.bin")), &contents[i]).unwrap();
        prop_assert_eq!(&input_hashes(&m).unwrap(), &before);

        let mut changed = contents[i].clone();
        let j = at.index(changed.len());
        changed[j] ^= flip;
        std::fs::write(dir.path().join(format!("f{i}.bin")), &changed).unwrap();
        let after = input_hashes(&m).unwrap();
        for (k, (key, h)) in before.iter().enumerate() {
            prop_assert_eq!(h != &after[key], k == i);
        }
    }
}

fn svf_file(dir: &Path, name: &str, grid: &Grid) {
    let v = Svf::from_fn(grid.clone(), |[i, _, _]| Vector3::new(i as f64 * 0.01, 0.0, 0.0));
    write_volume(&LoadedVolume::Svf(v), dir.join(name)).unwrap();
}

fn bare_manifest(dir: &Path) -> Manifest {
    let nodes = ["a", "b", "c"]
        .iter()
        .enumerate()
        .map(|(i, id)| longreg::graph::TimepointNode {
            id: id.to_string(),
            time_years: i as f64,
            image: format!("{id}.nii.gz").into(),
            labels: None,
            mask: None,
        })
        .collect();
    let mut m = Manifest::new("s", nodes);
    m.base_dir = dir.to_path_buf();
    m
}

#[test]
fn ingest_adds_valid_svfs() {
    let dir = tempfile::tempdir().unwrap();
    let regs = dir.path().join("regs");
    std::fs::create_dir(&regs).unwrap();
    let g = Grid::identity([4, 4, 4]);
    for n in ["a_b.svf.nii.gz", "b_c.svf.nii.gz", "a_c.svf.nii.gz"] {
        svf_file(&regs, n, &g);
    }
    std::fs::write(regs.join("README.txt"), "notes").unwrap();
    let m = ingest_external_registrations(&regs, &bare_manifest(dir.path())).unwrap();
    let svf = m.edges(EdgeKind::Svf);
    assert_eq!(svf.len(), 3);
    assert_eq!(svf[0].ref_id, "a");
    assert_eq!(svf[0].target_id, "b");
    assert_eq!(svf[0].path, Path::new("regs/a_b.svf.nii.gz"));
    assert!(longreg::graph::build_incidence(&m, EdgeKind::Svf).is_ok());
}

#[test]
fn ingest_rejects_mixed_grids() {
    let dir = tempfile::tempdir().unwrap();
    svf_file(dir.path(), "a_b.svf.nii.gz", &Grid::identity([4, 4, 4]));
    svf_file(dir.path(), "b_c.svf.nii.gz", &Grid::identity([5, 4, 4]));
    svf_file(dir.path(), "a_c.svf.nii.gz", &Grid::identity([4, 4, 4]));
    let err = ingest_external_registrations(dir.path(), &bare_manifest(dir.path())).unwrap_err();
    match err {
        longreg::Error::GridMismatch(msg) => {
            assert!(msg.contains("b_c.svf.nii.gz"), "{msg}");
            assert!(!msg.starts_with("a_c"), "{msg}");
        }
        e => panic!("{e}"),
    }
}

#[test]
fn ingest_rejects_duplicates_and_bad_names() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::identity([4, 4, 4]);
    svf_file(dir.path(), "a_b.svf.nii.gz", &g);
    svf_file(dir.path(), "b_a.svf.nii.gz", &g);
    assert!(matches!(
        ingest_external_registrations(dir.path(), &bare_manifest(dir.path())),
        Err(longreg::Error::DuplicateEdge(..))
    ));

    let other = tempfile::tempdir().unwrap();
    svf_file(other.path(), "a-b.svf.nii.gz", &g);
    assert!(matches!(
        ingest_external_registrations(other.path(), &bare_manifest(dir.path())),
        Err(longreg::Error::NamingConvention(n)) if n == "a-b.svf.nii.gz"
    ));
}

#[test]
fn ingest_subcommand_updates_manifest() {
    let (dir, m) = phantom(RegistrationMode::None);
    let regs = dir.path().join("external");
    std::fs::create_dir(&regs).unwrap();
    let truth = dir.path().join("truth");
    let g = longreg::volume_io::read_svf(truth.join("latent_tp0.svf.nii.gz")).unwrap().grid().clone();
    for n in ["tp0_tp1.svf.nii.gz", "tp1_tp2.svf.nii.gz"] {
        svf_file(&regs, n, &g);
    }
    let o = longreg(&["ingest", "--manifest", s(&m), "--dir", s(&regs)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Manifest::load(&m).unwrap().edges(EdgeKind::Svf).len(), 2);
}

#[test]
fn registrations_computed_from_images_recover_rigids() {
    // no latent deformation, so label centroids move rigidly
    let (dir, m) = phantom_from(PhantomSpec {
        shape: [16, 16, 16],
        timepoints: 3,
        svf_magnitude: 0.0,
        registrations: RegistrationMode::None,
        ..PhantomSpec::default()
    });
    let out = dir.path().join("out");
    let opts = RunOptions {
        nonlinear: longreg::registration::NonlinearParams {
            iterations: 30,
            levels: 2,
            ..Default::default()
        },
        ..RunOptions::default()
    };
    let prov = run_pipeline(&m, &opts, &out).unwrap();
    assert_eq!(prov.stages["rigid-register"].status, StageStatus::Ran);
    assert_eq!(prov.stages["nonlinear-register"].status, StageStatus::Ran);
    assert!(out.join("segment/seg_tp2.nii.gz").exists());

    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth/truth.json")).unwrap()).unwrap();
    let solved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("rigid-solve/latent_rigids.json")).unwrap()).unwrap();
    // compare where the two transforms send points spread over the anatomy
    let arr = |v: &serde_json::Value| -> Vec<f64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let mut worst: f64 = 0.0;
    for n in 0..3 {
        let t = &truth["latent_rigids"][n];
        let (r, tr) = (arr(&t["rotation"]), arr(&t["translation"]));
        let exact = se3_exp(&RigidLog::new(Vector3::new(r[0], r[1], r[2]), Vector3::new(tr[0], tr[1], tr[2])));
        let got = arr(&solved["latent"][n]);
        let solved = se3_exp(&RigidLog::from_array([got[0], got[1], got[2], got[3], got[4], got[5]]));
        for corner in 0..8 {
            let p = Vector3::from_fn(|a, _| if corner >> a & 1 == 1 { 5.0 } else { -5.0 });
            worst = worst.max((exact.apply(&p) - solved.apply(&p)).norm());
        }
    }
    assert!(worst < 0.5, "recovered rigids displace anatomy by up to {worst} mm");
}
