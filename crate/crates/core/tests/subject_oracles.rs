//! Template, trajectory, fusion and phantom checks against ground truth
//! computed independently of the code under test.

use longreg::geometry::{
    compose_displacements, jacobian_determinant, se3_exp, svf_exp, Direction, DisplacementField,
    Grid, RigidLog, Svf,
};
use longreg::graph::{IncidenceMatrix, TimepointData};
use longreg::inference::{solve_rigid_graph, solve_svf_graph};
use longreg::longseg::{longitudinal_segment, FusionConfig};
use longreg::phantom::{generate_phantom, labels, laplace, Anatomy, Phantom, PhantomSpec};
use longreg::registration::{register_nonlinear_ssd, NonlinearParams};
use longreg::template::{build_template, define_subject_grid, template_to_timepoint};
use longreg::trajectory::{
    evaluate_trajectory, fit_trajectory, predict_image, transport_by_deformation, transport_svf,
    FitMethod, TrajectoryModel,
};
use longreg::volume_io::{resample_image, LabelVolume, MaskVolume, Volume};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mae(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let (s, n) = a
        .iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), ((x, y), _)| (s + (x - y).abs(), n + 1));
    s / n as f64
}

fn interior(g: &Grid, margin: usize) -> Vec<bool> {
    (0..g.len()).map(|i| g.boundary_distance(i) >= margin).collect()
}

#[test]
fn median_template_beats_every_timepoint() {
    let spec = PhantomSpec {
        shape: [32, 32, 32],
        timepoints: 7,
        image_noise: 5.0,
        seed: 41,
        ..PhantomSpec::default()
    };
    let mut p = generate_phantom(&spec).unwrap();
    // timepoint 3 fully corrupted
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let junk: Vec<f64> = (0..p.grid.len()).map(|_| rng.random_range(0.0..250.0)).collect();
    p.timepoints[3].image = Volume::new(p.grid.clone(), junk).unwrap();

    let t = build_template(&p.timepoints, &p.latent_rigids, Some(&p.latent_svfs), &p.grid).unwrap();
    let mask = interior(&p.grid, 3);
    let clean = p.template.data();
    let fused = mae(t.intensity.data(), clean, &mask);
    for (tp, (r, v)) in p.timepoints.iter().zip(p.latent_rigids.iter().zip(&p.latent_svfs)) {
        let fwd = svf_exp(v, Direction::Forward).unwrap();
        let moved = resample_image(&tp.image, &p.grid, &template_to_timepoint(r, Some(&fwd)), 0.0).unwrap();
        let single = mae(moved.data(), clean, &mask);
        assert!(fused < single, "{}: template {fused} vs {single}", tp.id);
    }
}

fn permuted(p: &Phantom, order: &[usize]) -> (Vec<TimepointData>, Vec<RigidLog>, Vec<Svf>) {
    (
        order.iter().map(|&i| p.timepoints[i].clone()).collect(),
        order.iter().map(|&i| p.latent_rigids[i]).collect(),
        order.iter().map(|&i| p.latent_svfs[i].clone()).collect(),
    )
}

#[test]
fn template_is_order_invariant() {
    let p = generate_phantom(&PhantomSpec { shape: [16, 16, 16], timepoints: 4, image_noise: 3.0, seed: 5, ..PhantomSpec::default() }).unwrap();
    let grids: Vec<&Grid> = p.timepoints.iter().map(|t| t.image.grid()).collect();
    let g1 = define_subject_grid(&grids, &p.latent_rigids).unwrap();
    let a = build_template(&p.timepoints, &p.latent_rigids, Some(&p.latent_svfs), &p.grid).unwrap();
    let (tps, rig, svf) = permuted(&p, &[2, 0, 3, 1]);
    let grids: Vec<&Grid> = tps.iter().map(|t| t.image.grid()).collect();
    assert_eq!(define_subject_grid(&grids, &rig).unwrap(), g1);
    let b = build_template(&tps, &rig, Some(&svf), &p.grid).unwrap();
    assert_eq!(a.intensity, b.intensity);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.segmentation, b.segmentation);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn median_ignores_one_corrupted_timepoint(
        shared in prop::collection::vec(0.0f64..100.0, 8),
        junk in prop::collection::vec(-1e3f64..1e3, 8),
        n in 3usize..7,
        bad in 0usize..7,
    ) {
        let g = Grid::identity([2, 2, 2]);
        let tps: Vec<TimepointData> = (0..n)
            .map(|i| TimepointData {
                id: format!("t{i}"),
                time_years: i as f64,
                image: Volume::new(g.clone(), if i == bad % n { junk.clone() } else { shared.clone() }).unwrap(),
                labels: None,
                mask: None,
            })
            .collect();
        let t = build_template(&tps, &vec![RigidLog::zero(); n], None, &g).unwrap();
        prop_assert_eq!(t.intensity.data(), &shared[..]);
    }

    #[test]
    fn template_mask_is_convex_combination(masks in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 8), 1..6)) {
        let g = Grid::identity([2, 2, 2]);
        let tps: Vec<TimepointData> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| TimepointData {
                id: format!("t{i}"),
                time_years: 0.0,
                image: Volume::zeros(g.clone()),
                labels: None,
                mask: Some(MaskVolume::new(g.clone(), m.clone()).unwrap()),
            })
            .collect();
        let t = build_template(&tps, &vec![RigidLog::zero(); tps.len()], None, &g).unwrap();
        for v in 0..8 {
            let lo = masks.iter().map(|m| m[v]).fold(f64::INFINITY, f64::min);
            let hi = masks.iter().map(|m| m[v]).fold(f64::NEG_INFINITY, f64::max);
            let x = t.mask.probabilities()[v];
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }
}

fn smooth(grid: &Grid, seed: u64, amp: f64) -> Svf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..6).map(|_| rng.random_range(-amp..amp)).collect();
    Svf::from_fn(grid.clone(), move |[i, j, k]| {
        let (x, y, z) = (i as f64 / 5.0, j as f64 / 4.0, k as f64 / 6.0);
        Vector3::new(c[0] * (x + y).sin(), c[1] * (y - z).cos() + c[2] * x.sin(), c[3] * z.sin() + c[4] * (x * y).cos() + c[5])
    })
}

#[test]
fn linear_series_recovered_exactly() {
    let g = Grid::identity([10, 9, 8]);
    let c = smooth(&g, 1, 2.0);
    let v = smooth(&g, 2, 1.0);
    let times = [0.0, 0.35, 1.1, 2.9, 3.05];
    let series: Vec<Svf> = times
        .iter()
        .map(|&t| Svf::from_fn(g.clone(), |[i, j, k]| {
            let n = g.index(i, j, k);
            c.values()[n] + v.values()[n] * t
        }))
        .collect();
    let m = fit_trajectory(&series, &times, FitMethod::LeastSquares).unwrap();
    for n in 0..g.len() {
        assert!((m.slope.values()[n] - v.values()[n]).amax() < 1e-10);
        assert!((m.intercept.values()[n] - c.values()[n]).amax() < 1e-10);
        assert!(m.residual.data()[n] <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn trajectory_is_a_one_parameter_subgroup(seed in 0u64..1000, t1 in -1.5f64..1.5, t2 in -1.5f64..1.5) {
        let g = Grid::identity([20, 20, 20]);
        let slope = smooth(&g, seed, 0.6);
        let m = TrajectoryModel { intercept: Svf::zeros(g.clone()), slope, residual: Volume::zeros(g.clone()) };
        let whole = evaluate_trajectory(&m, t1 + t2, Direction::Forward).unwrap();
        let a = evaluate_trajectory(&m, t1, Direction::Forward).unwrap();
        let b = evaluate_trajectory(&m, t2, Direction::Forward).unwrap();
        let parts = compose_displacements(&a, &b).unwrap();
        for n in 0..g.len() {
            if g.boundary_distance(n) >= 4 {
                prop_assert!((whole.values()[n] - parts.values()[n]).norm() < 0.1);
            }
        }
    }
}

#[test]
fn transport_matches_linear_pushforward() {
    let g = Grid::identity([21, 21, 21]);
    let c = Vector3::repeat(10.0);
    let a = Matrix3::new(0.1, -0.2, 0.05, 0.0, 0.3, 0.1, -0.1, 0.02, 0.2);
    let b = Vector3::new(0.5, -1.0, 0.25);
    let v = Svf::from_fn(g.clone(), |[i, j, k]| a * Vector3::new(i as f64, j as f64, k as f64) + b);
    // subject -> population is x -> c + 1.2 (x - c); its inverse pulls back
    let psi = DisplacementField::from_fn(g.clone(), |[i, j, k]| (Vector3::new(i as f64, j as f64, k as f64) - c) * (1.0 / 1.2 - 1.0));
    let out = transport_by_deformation(&v, &psi).unwrap();
    for n in 0..g.len() {
        let [i, j, k] = g.coords(n);
        let y = Vector3::new(i as f64, j as f64, k as f64);
        let back = c + (y - c) / 1.2;
        let expect = 1.2 * (a * back + b);
        assert!((out.values()[n] - expect).norm() < 1e-9, "{n}");
    }
    // same through the velocity parameterisation of the warp
    let warp = Svf::from_fn(g.clone(), |[i, j, k]| (Vector3::new(i as f64, j as f64, k as f64) - c) * -(1.2f64).ln());
    let out = transport_svf(&v, &warp, &g).unwrap();
    for n in 0..g.len() {
        if g.boundary_distance(n) >= 3 {
            let [i, j, k] = g.coords(n);
            let back = c + (Vector3::new(i as f64, j as f64, k as f64) - c) / 1.2;
            assert!((out.values()[n] - 1.2 * (a * back + b)).norm() < 0.05);
        }
    }
}

#[test]
fn transport_of_translation_keeps_vectors() {
    let g = Grid::axis_aligned([8, 8, 8], 2.0, Vector3::zeros()).unwrap();
    let v = smooth(&g, 9, 1.0);
    let warp = Svf::from_fn(g.clone(), |_| Vector3::new(0.0, 0.0, 0.0));
    let out = transport_svf(&v, &warp, &g).unwrap();
    for (x, y) in out.values().iter().zip(v.values()) {
        assert!((x - y).norm() < 1e-6);
    }
}

fn atrophy_phantom() -> Phantom {
    generate_phantom(&PhantomSpec {
        shape: [32, 32, 32],
        timepoints: 2,
        rigid_rotation: 0.0,
        rigid_translation: 0.0,
        svf_magnitude: 0.0,
        atrophy: 1.0,
        seed: 3,
        ..PhantomSpec::default()
    })
    .unwrap()
}

#[test]
fn prediction_beats_static_template() {
    let p = atrophy_phantom();
    let model = TrajectoryModel {
        intercept: Svf::zeros(p.grid.clone()),
        slope: p.trend.clone(),
        residual: Volume::zeros(p.grid.clone()),
    };
    let t = 2.0;
    // held-out image sampled from the continuous anatomy
    let anatomy = Anatomy::for_extent(Vector3::repeat(31.0));
    let back = svf_exp(&p.trend.scaled(t), Direction::Inverse).unwrap();
    let truth: Vec<f64> = (0..p.grid.len())
        .map(|n| {
            let [i, j, k] = p.grid.coords(n);
            let q = back.map_voxel(&Vector3::new(i as f64, j as f64, k as f64));
            anatomy.intensity(&p.grid.voxel_to_world(&q))
        })
        .collect();
    let predicted = predict_image(&p.template, &model, t).unwrap();
    let mask: Vec<bool> = p.template_labels.labels().iter().map(|&l| l > 0).collect();
    let err_pred = mae(predicted.data(), &truth, &mask);
    let err_static = mae(p.template.data(), &truth, &mask);
    assert!(err_pred < 0.5 * err_static, "{err_pred} vs {err_static}");
    let at_zero = predict_image(&p.template, &model, 0.0).unwrap();
    assert!(at_zero.data().iter().zip(p.template.data()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn ventricle_volume_grows_monotonically() {
    let p = atrophy_phantom();
    let model = TrajectoryModel {
        intercept: Svf::zeros(p.grid.clone()),
        slope: p.trend.clone(),
        residual: Volume::zeros(p.grid.clone()),
    };
    let region: Vec<bool> = p.template_labels.labels().iter().map(|&l| l == labels::VENTRICLE).collect();
    let mut last = f64::NEG_INFINITY;
    for step in -2..=10 {
        let t = step as f64 * 0.5;
        let d = evaluate_trajectory(&model, t, Direction::Forward).unwrap();
        let jac = jacobian_determinant(&d);
        let vol: f64 = jac.data().iter().zip(&region).filter(|(_, r)| **r).map(|(j, _)| j).sum();
        assert!(vol > last, "t = {t}: {vol} <= {last}");
        last = vol;
    }
}

fn toy_timepoints(seed: u64, n: usize) -> Vec<TimepointData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::identity([4, 4, 4]);
    (0..n)
        .map(|i| TimepointData {
            id: format!("t{i}"),
            time_years: i as f64,
            image: Volume::new(g.clone(), (0..64).map(|_| rng.random_range(95.0..115.0)).collect()).unwrap(),
            labels: Some(LabelVolume::from_labels(g.clone(), (0..64).map(|_| rng.random_range(0..4)).collect()).unwrap()),
            mask: None,
        })
        .collect()
}

/// Weighted vote written out directly from its definition.
fn vote_oracle(tps: &[TimepointData], reference: usize, sigma: f64) -> Vec<i32> {
    let r = tps[reference].image.data();
    (0..64)
        .map(|v| {
            let mut score = [0.0f64; 4];
            for (n, tp) in tps.iter().enumerate() {
                let w = if n == reference {
                    1.0
                } else {
                    let d = r[v] - tp.image.data()[v];
                    (-d * d / (2.0 * sigma * sigma)).exp()
                };
                score[tp.labels.as_ref().unwrap().labels()[v] as usize] += w;
            }
            let mut best = 0;
            for l in 1..4 {
                if score[l] > score[best] {
                    best = l;
                }
            }
            best as i32
        })
        .collect()
}

#[test]
fn fusion_matches_hand_vote() {
    for seed in 0..20 {
        let tps = toy_timepoints(seed, 4);
        let r = longitudinal_segment(&tps, &[RigidLog::zero(); 4], None, 1, &FusionConfig::default()).unwrap();
        assert_eq!(r.labels.labels(), &vote_oracle(&tps, 1, 3.0)[..]);
    }
}

#[test]
fn huge_sigma_is_majority_vote() {
    for seed in 0..20 {
        let tps = toy_timepoints(100 + seed, 5);
        let cfg = FusionConfig { sigma: 1e6, ..FusionConfig::default() };
        let r = longitudinal_segment(&tps, &[RigidLog::zero(); 5], None, 0, &cfg).unwrap();
        let majority: Vec<i32> = (0..64)
            .map(|v| {
                let mut count = [0usize; 4];
                for tp in &tps {
                    count[tp.labels.as_ref().unwrap().labels()[v] as usize] += 1;
                }
                (0..4).fold(0, |b, l| if count[l] > count[b] { l } else { b }) as i32
            })
            .collect();
        assert_eq!(r.labels.labels(), &majority[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fusion_properties(seed in 0u64..10_000, rot in 1usize..3) {
        let tps = toy_timepoints(seed, 4);
        let cfg = FusionConfig::default();
        let base = longitudinal_segment(&tps, &[RigidLog::zero(); 4], None, 0, &cfg).unwrap();
        let mut others = tps[1..].to_vec();
        others.rotate_left(rot);
        let mut perm = vec![tps[0].clone()];
        perm.extend(others);
        let again = longitudinal_segment(&perm, &[RigidLog::zero(); 4], None, 0, &cfg).unwrap();
        prop_assert_eq!(base.labels.labels(), again.labels.labels());
        let union: Vec<i32> = (0..4).collect();
        prop_assert!(base.labels.labels().iter().all(|l| union.contains(l)));
        for v in 0..64 {
            let first = tps[0].labels.as_ref().unwrap().labels()[v];
            if tps.iter().all(|t| t.labels.as_ref().unwrap().labels()[v] == first) {
                prop_assert_eq!(base.labels.labels()[v], first);
            }
        }
    }
}

#[test]
fn fusion_follows_latent_rigids() {
    // timepoint 1 is timepoint 0 shifted by 2 voxels; its labels must land
    // back on the reference's
    let g = Grid::identity([12, 12, 12]);
    let labels0: Vec<i32> = (0..g.len()).map(|n| if g.coords(n)[0] < 6 { 1 } else { 2 }).collect();
    let image0: Vec<f64> = labels0.iter().map(|&l| 50.0 * l as f64).collect();
    let shift = |n: usize| {
        let [i, j, k] = g.coords(n);
        if i >= 2 { g.index(i - 2, j, k) } else { g.index(0, j, k) }
    };
    let labels1: Vec<i32> = (0..g.len()).map(|n| labels0[shift(n)]).collect();
    let image1: Vec<f64> = (0..g.len()).map(|n| image0[shift(n)]).collect();
    let mk = |id: &str, im: Vec<f64>, l: Vec<i32>| TimepointData {
        id: id.into(),
        time_years: 0.0,
        image: Volume::new(g.clone(), im).unwrap(),
        labels: Some(LabelVolume::from_labels(g.clone(), l).unwrap()),
        mask: None,
    };
    let tps = vec![mk("a", image0, labels0.clone()), mk("b", image1, labels1)];
    let rigids = [RigidLog::new(Vector3::zeros(), Vector3::new(-1.0, 0.0, 0.0)), RigidLog::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0))];
    let cfg = FusionConfig { include_self: false, ..FusionConfig::default() };
    let r = longitudinal_segment(&tps, &rigids, None, 0, &cfg).unwrap();
    for n in 0..g.len() {
        if g.coords(n)[0] < 10 {
            assert_eq!(r.labels.labels()[n], labels0[n]);
        }
    }
    assert_eq!(se3_exp(&rigids[1]).apply(&Vector3::zeros()).x, 1.0);
}

#[test]
fn noiseless_phantom_graph_is_recovered() {
    let p = generate_phantom(&PhantomSpec { shape: [8, 8, 8], timepoints: 4, svf_magnitude: 1.5, svf_sigma: 1.5, seed: 12, ..PhantomSpec::default() }).unwrap();
    assert_eq!(p.pairs.len(), 6);
    let w = IncidenceMatrix::from_pairs(4, p.pairs.clone()).unwrap();
    let rig = solve_rigid_graph(&p.rigid_observed, &w, 1.0).unwrap();
    for (a, b) in rig.latent.iter().zip(&p.latent_rigids) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-8);
        }
    }
    let s = solve_svf_graph(&p.svf_observed, &w, None, 1.0).unwrap();
    for (a, b) in s.latent.iter().zip(&p.latent_svfs) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).amax() < 1e-6);
        }
    }
}

#[test]
fn laplace_sampler_matches_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = 1.7;
    let mut xs: Vec<f64> = (0..100_000).map(|_| laplace(&mut rng, b)).collect();
    let scale = xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64;
    assert!((scale / b - 1.0).abs() < 0.05);
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| if x < 0.0 { 0.5 * (x / b).exp() } else { 1.0 - 0.5 * (-x / b).exp() };
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (cdf(x) - i as f64 / n).abs().max((cdf(x) - (i + 1) as f64 / n).abs()))
        .fold(0.0, f64::max);
    // 1% critical value at n = 1e5
    assert!(d < 1.63 / n.sqrt(), "{d}");
}

#[test]
fn nonlinear_registration_never_worsens_ssd() {
    for seed in 0..3 {
        let p = generate_phantom(&PhantomSpec { shape: [16, 16, 16], timepoints: 2, rigid_rotation: 0.0, rigid_translation: 0.0, svf_magnitude: 1.5, image_noise: 2.0, seed, ..PhantomSpec::default() }).unwrap();
        let params = NonlinearParams { iterations: 20, ..NonlinearParams::default() };
        let (_, rep) = register_nonlinear_ssd(&p.timepoints[0].image, &p.timepoints[1].image, &params).unwrap();
        assert!(rep.final_ssd <= rep.initial_ssd);
    }
}
