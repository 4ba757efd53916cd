//! Synthetic longitudinal subjects with known latent transforms.
//!
//! A procedural "brain" (ellipsoids with ventricles and a few labelled
//! nuclei) is the template. Each timepoint is the template pulled through
//! the inverse of a random latent transform, plus Laplace noise.
//! Pairwise observations are built additively in the log domain so that
//! graph inference has an exact target.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::smooth::smooth_vectors;
use crate::geometry::{se3_exp, svf_exp, Direction, Grid, RigidLog, Svf, VectorField};
use crate::graph::{
    EdgeKind, EdgePolicy, Manifest, ObservationEdge, Settings, TimepointData, TimepointNode,
};
use crate::volume_io::{
    write_rigid, write_volume, LabelTable, LabelVolume, LoadedVolume, MaskVolume, Volume,
};

/// How pairwise registrations are provided with a phantom.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    /// Latent differences plus Laplace noise, written as edge files.
    #[default]
    Additive,
    /// No edge files; the pipeline registers the images itself.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Isotropic voxel size, mm.
    pub spacing: f64,
    pub timepoints: usize,
    /// Years from baseline; evenly spaced one year apart when absent.
    pub times: Option<Vec<f64>>,
    /// Half-width of the uniform rotation draw per axis, radians.
    pub rigid_rotation: f64,
    /// Half-width of the uniform translation draw per axis, mm.
    pub rigid_translation: f64,
    /// Gaussian smoothing of the latent velocity noise, voxels.
    pub svf_sigma: f64,
    /// Largest latent velocity norm, voxels.
    pub svf_magnitude: f64,
    /// Ventricle expansion velocity per year, voxels.
    pub atrophy: f64,
    /// Laplace scale of image noise.
    pub image_noise: f64,
    /// Laplace scale of log-domain observation noise.
    pub registration_noise: f64,
    pub edges: EdgePolicy,
    pub registrations: RegistrationMode,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            spacing: 1.0,
            timepoints: 4,
            times: None,
            rigid_rotation: 0.05,
            rigid_translation: 2.0,
            svf_sigma: 3.0,
            svf_magnitude: 1.0,
            atrophy: 0.0,
            image_noise: 0.0,
            registration_noise: 0.0,
            edges: EdgePolicy::All,
            registrations: RegistrationMode::Additive,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn times(&self) -> Vec<f64> {
        self.times
            .clone()
            .unwrap_or_else(|| (0..self.timepoints).map(|n| n as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(m));
        if self.shape.iter().any(|&s| s < 2) {
            return bad(format!("phantom shape {:?} is too small", self.shape));
        }
        if self.timepoints == 0 {
            return bad("phantom needs at least one timepoint".into());
        }
        if self.times().len() != self.timepoints {
            return bad(format!("{} times for {} timepoints", self.times().len(), self.timepoints));
        }
        let scales = [
            self.spacing,
            self.rigid_rotation,
            self.rigid_translation,
            self.svf_sigma,
            self.svf_magnitude,
            self.atrophy,
            self.image_noise,
            self.registration_noise,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.spacing == 0.0 {
            return bad("phantom magnitudes must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Grid shared by the template and every timepoint, centred on the
    /// world origin.
    pub fn grid(&self) -> Result<Grid> {
        let origin = Vector3::from_fn(|a, _| -0.5 * (self.shape[a] - 1) as f64 * self.spacing);
        Grid::axis_aligned(self.shape, self.spacing, origin)
    }
}

/// Label ids of the procedural anatomy.
pub mod labels {
    pub const GREY: i32 = 1;
    pub const WHITE: i32 = 2;
    pub const VENTRICLE: i32 = 3;
    pub const LEFT_NUCLEUS: i32 = 4;
    pub const RIGHT_NUCLEUS: i32 = 5;
    pub const ANTERIOR: i32 = 6;
}

struct Ellipsoid {
    centre: Vector3<f64>,
    radii: Vector3<f64>,
    label: i32,
    intensity: f64,
}

impl Ellipsoid {
    /// Approximate signed distance in mm, negative inside.
    fn distance(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.centre).component_div(&self.radii);
        (q.norm() - 1.0) * self.radii.min()
    }
}

/// Procedural anatomy in world mm, centred on the origin.
pub struct Anatomy {
    layers: Vec<Ellipsoid>,
    edge: f64,
}

impl Anatomy {
    pub fn for_extent(extent: Vector3<f64>) -> Self {
        let e = |x: f64, y: f64, z: f64| Vector3::new(x * extent.x, y * extent.y, z * extent.z);
        let layer = |centre, radii, label, intensity| Ellipsoid {
            centre,
            radii,
            label,
            intensity,
        };
        use labels::*;
        Self {
            layers: vec![
                layer(e(0.0, 0.0, 0.0), e(0.36, 0.40, 0.34), GREY, 75.0),
                layer(e(0.0, 0.0, 0.0), e(0.28, 0.32, 0.26), WHITE, 110.0),
                layer(e(-0.15, -0.06, -0.06), e(0.07, 0.07, 0.07), LEFT_NUCLEUS, 92.0),
                layer(e(0.15, -0.06, -0.06), e(0.07, 0.07, 0.07), RIGHT_NUCLEUS, 88.0),
                layer(e(0.0, 0.22, -0.08), e(0.08, 0.06, 0.06), ANTERIOR, 60.0),
                layer(e(0.0, 0.02, 0.06), e(0.09, 0.14, 0.07), VENTRICLE, 25.0),
            ],
            edge: 0.6,
        }
    }

    pub fn intensity(&self, p: &Vector3<f64>) -> f64 {
        self.layers.iter().fold(0.0, |v, l| {
            let s = 1.0 / (1.0 + (l.distance(p) / self.edge).exp());
            v + s * (l.intensity - v)
        })
    }

    pub fn label(&self, p: &Vector3<f64>) -> i32 {
        self.layers
            .iter()
            .rev()
            .find(|l| l.distance(p) < 0.0)
            .map_or(0, |l| l.label)
    }

    pub fn ventricle_centre(&self) -> Vector3<f64> {
        self.layers[5].centre
    }

    pub fn ventricle_radius(&self) -> f64 {
        self.layers[5].radii.max()
    }

    pub fn table() -> LabelTable {
        use labels::*;
        LabelTable::new([
            (GREY, "grey_matter".to_string()),
            (WHITE, "white_matter".to_string()),
            (VENTRICLE, "ventricles".to_string()),
            (LEFT_NUCLEUS, "left_nucleus".to_string()),
            (RIGHT_NUCLEUS, "right_nucleus".to_string()),
            (ANTERIOR, "anterior_body".to_string()),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub grid: Grid,
    pub template: Volume,
    pub template_labels: LabelVolume,
    pub latent_rigids: Vec<RigidLog>,
    pub latent_svfs: Vec<Svf>,
    /// Velocity per year contained in the latent fields.
    pub trend: Svf,
    pub timepoints: Vec<TimepointData>,
    pub pairs: Vec<(usize, usize)>,
    pub rigid_exact: Vec<RigidLog>,
    pub rigid_observed: Vec<RigidLog>,
    pub svf_exact: Vec<Svf>,
    pub svf_observed: Vec<Svf>,
}

/// Laplace(0, b) by inversion of a uniform draw.
pub fn laplace(rng: &mut impl Rng, b: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u.abs() < 0.5 {
            return -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Subtracts the mean, then sets the last entry to minus the running sum
/// of the others so the left-to-right total is exactly zero.
fn recentre(values: &mut [f64]) {
    let n = values.len();
    if n == 0 {
        return;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    let head: f64 = values[..n - 1].iter().sum();
    values[n - 1] = -head;
}

fn taper(shape: [usize; 3], c: [usize; 3]) -> f64 {
    (0..3)
        .map(|a| (std::f64::consts::PI * (c[a] + 1) as f64 / (shape[a] + 1) as f64).sin())
        .product()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let shape = grid.shape();
    let n = spec.timepoints;
    let times = spec.times();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let extent = Vector3::from_fn(|a, _| (shape[a] - 1) as f64 * spec.spacing);
    let anatomy = Anatomy::for_extent(extent);
    let world = |c: [usize; 3]| grid.voxel_to_world(&Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64));
    let template = Volume::from_fn(grid.clone(), |c| anatomy.intensity(&world(c)));
    let template_labels = LabelVolume::new(
        grid.clone(),
        (0..grid.len()).map(|i| anatomy.label(&world(grid.coords(i)))).collect(),
        Anatomy::table(),
    )?;

    // latent rigids
    let mut rig: Vec<[f64; 6]> = (0..n)
        .map(|_| {
            let mut v = [0.0; 6];
            for (j, x) in v.iter_mut().enumerate() {
                let s = if j < 3 { spec.rigid_rotation } else { spec.rigid_translation };
                *x = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            }
            v
        })
        .collect();
    for j in 0..6 {
        let mut col: Vec<f64> = rig.iter().map(|v| v[j]).collect();
        recentre(&mut col);
        rig.iter_mut().zip(col).for_each(|(v, c)| v[j] = c);
    }
    let latent_rigids: Vec<RigidLog> = rig.iter().map(|v| RigidLog::from_array(*v)).collect();

    // latent velocity fields: smoothed tapered noise plus a ventricle trend
    let centre_vox = grid.world_to_voxel(&anatomy.ventricle_centre());
    let rho = 1.5 * anatomy.ventricle_radius() / spec.spacing;
    let trend = Svf::from_fn(grid.clone(), |c| {
        let d = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) - centre_vox;
        d * (spec.atrophy / rho) * (-d.norm_squared() / (2.0 * rho * rho)).exp()
    });
    let tbar = times.iter().sum::<f64>() / n as f64;
    let mut raw: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(n);
    for &t in &times {
        let noise: Vec<Vector3<f64>> = (0..grid.len())
            .map(|_| Vector3::from_fn(|_, _| rng.random::<f64>() - 0.5))
            .collect();
        let mut field = smooth_vectors(&noise, shape, spec.svf_sigma);
        for (i, v) in field.iter_mut().enumerate() {
            *v *= taper(shape, grid.coords(i));
        }
        let peak = field.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let scale = if peak > 0.0 { spec.svf_magnitude / peak } else { 0.0 };
        for (v, tr) in field.iter_mut().zip(trend.values()) {
            *v = *v * scale + tr * (t - tbar);
        }
        raw.push(field);
    }
    let mut col = vec![0.0; n];
    for i in 0..grid.len() {
        for a in 0..3 {
            for (slot, f) in col.iter_mut().zip(&raw) {
                *slot = f[i][a];
            }
            recentre(&mut col);
            for (f, v) in raw.iter_mut().zip(&col) {
                f[i][a] = *v;
            }
        }
    }
    let latent_svfs: Vec<Svf> = raw
        .into_iter()
        .map(|f| VectorField::new(grid.clone(), f).map(Svf::new))
        .collect::<Result<_>>()?;

    // observed images
    let mut timepoints = Vec::with_capacity(n);
    for (k, (log, svf)) in latent_rigids.iter().zip(&latent_svfs).enumerate() {
        let back = svf_exp(svf, Direction::Inverse)?;
        let rigid_inv = se3_exp(log).inverse();
        let source: Vec<Vector3<f64>> = (0..grid.len())
            .map(|i| {
                let p = rigid_inv.apply(&world(grid.coords(i)));
                grid.voxel_to_world(&back.map_voxel(&grid.world_to_voxel(&p)))
            })
            .collect();
        let clean: Vec<f64> = source.iter().map(|p| anatomy.intensity(p)).collect();
        let image: Vec<f64> = clean
            .iter()
            .map(|v| v + laplace(&mut rng, spec.image_noise))
            .collect();
        let lab: Vec<i32> = source.iter().map(|p| anatomy.label(p)).collect();
        let inside: Vec<bool> = lab.iter().map(|&l| l > 0).collect();
        timepoints.push(TimepointData {
            id: format!("tp{k}"),
            time_years: times[k],
            image: Volume::new(grid.clone(), image)?,
            labels: Some(LabelVolume::new(grid.clone(), lab, Anatomy::table())?),
            mask: Some(MaskVolume::from_binary(grid.clone(), &inside)?),
        });
    }

    // pairwise observations
    let pairs = spec.edges.pairs(n);
    let mut rigid_exact = Vec::with_capacity(pairs.len());
    let mut rigid_observed = Vec::with_capacity(pairs.len());
    let mut svf_exact = Vec::with_capacity(pairs.len());
    let mut svf_observed = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let exact = latent_rigids[b] - latent_rigids[a];
        let mut noisy = exact.to_array();
        noisy
            .iter_mut()
            .for_each(|v| *v += laplace(&mut rng, spec.registration_noise));
        rigid_exact.push(exact);
        rigid_observed.push(RigidLog::from_array(noisy));

        let diff: Vec<Vector3<f64>> = latent_svfs[b]
            .values()
            .iter()
            .zip(latent_svfs[a].values())
            .map(|(x, y)| x - y)
            .collect();
        let noisy: Vec<Vector3<f64>> = diff
            .iter()
            .map(|d| d + Vector3::from_fn(|_, _| laplace(&mut rng, spec.registration_noise)))
            .collect();
        svf_exact.push(Svf::new(VectorField::new(grid.clone(), diff)?));
        svf_observed.push(Svf::new(VectorField::new(grid.clone(), noisy)?));
    }

    Ok(Phantom {
        spec: spec.clone(),
        grid,
        template,
        template_labels,
        latent_rigids,
        latent_svfs,
        trend,
        timepoints,
        pairs,
        rigid_exact,
        rigid_observed,
        svf_exact,
        svf_observed,
    })
}

/// Ground truth written next to a phantom manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub spec: PhantomSpec,
    pub ids: Vec<String>,
    pub latent_rigids: Vec<RigidLog>,
    pub latent_svfs: Vec<String>,
    pub template: String,
    pub template_labels: String,
    pub trend: String,
}

impl Phantom {
    /// Writes volumes, edge files (unless registrations are disabled), a
    /// `truth/` directory and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let io = |e| Error::io(dir, e);
        std::fs::create_dir_all(dir.join("truth")).map_err(io)?;
        std::fs::create_dir_all(dir.join("registrations")).map_err(io)?;
        let mut nodes = Vec::new();
        for tp in &self.timepoints {
            let image = format!("{}.nii.gz", tp.id);
            let labels = format!("{}_seg.nii.gz", tp.id);
            let mask = format!("{}_mask.nii.gz", tp.id);
            write_volume(&LoadedVolume::Image(tp.image.clone()), dir.join(&image))?;
            if let Some(l) = &tp.labels {
                write_volume(&LoadedVolume::Labels(l.clone()), dir.join(&labels))?;
            }
            if let Some(m) = &tp.mask {
                write_volume(&LoadedVolume::Mask(m.clone()), dir.join(&mask))?;
            }
            nodes.push(TimepointNode {
                id: tp.id.clone(),
                time_years: tp.time_years,
                image: image.into(),
                labels: tp.labels.as_ref().map(|_| labels.into()),
                mask: tp.mask.as_ref().map(|_| mask.into()),
            });
        }
        let mut manifest = Manifest::new(format!("phantom{}", self.spec.seed), nodes);
        manifest.base_dir = dir.to_path_buf();
        manifest.settings = Settings {
            seed: self.spec.seed,
            edges: self.spec.edges,
            ..Settings::default()
        };
        if self.spec.registrations == RegistrationMode::Additive {
            for (k, &(a, b)) in self.pairs.iter().enumerate() {
                let (ra, rb) = (&self.timepoints[a].id, &self.timepoints[b].id);
                let rigid = format!("registrations/{ra}_{rb}.rigid.txt");
                let svf = format!("registrations/{ra}_{rb}.svf.nii.gz");
                write_rigid(&se3_exp(&self.rigid_observed[k]), dir.join(&rigid))?;
                write_volume(&LoadedVolume::Svf(self.svf_observed[k].clone()), dir.join(&svf))?;
                for (kind, path) in [(EdgeKind::Rigid, rigid), (EdgeKind::Svf, svf)] {
                    manifest.registrations.push(ObservationEdge {
                        ref_id: ra.clone(),
                        target_id: rb.clone(),
                        kind,
                        path: path.into(),
                    });
                }
            }
        }
        let mut svf_paths = Vec::new();
        for (tp, v) in self.timepoints.iter().zip(&self.latent_svfs) {
            let p = format!("truth/latent_{}.svf.nii.gz", tp.id);
            write_volume(&LoadedVolume::Svf(v.clone()), dir.join(&p))?;
            svf_paths.push(p);
        }
        write_volume(&LoadedVolume::Image(self.template.clone()), dir.join("truth/template.nii.gz"))?;
        write_volume(
            &LoadedVolume::Labels(self.template_labels.clone()),
            dir.join("truth/template_seg.nii.gz"),
        )?;
        write_volume(&LoadedVolume::Svf(self.trend.clone()), dir.join("truth/trend.svf.nii.gz"))?;
        let truth = PhantomTruth {
            spec: self.spec.clone(),
            ids: self.timepoints.iter().map(|t| t.id.clone()).collect(),
            latent_rigids: self.latent_rigids.clone(),
            latent_svfs: svf_paths,
            template: "truth/template.nii.gz".into(),
            template_labels: "truth/template_seg.nii.gz".into(),
            trend: "truth/trend.svf.nii.gz".into(),
        };
        let path = dir.join("truth/truth.json");
        let text = serde_json::to_string_pretty(&truth).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
