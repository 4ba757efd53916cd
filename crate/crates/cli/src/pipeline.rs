//! Stage runner. Stages talk to each other only through files under
//! `out/<stage>/`; each stage directory carries a `.stage_hash` of
//! everything it was computed from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use longreg::geometry::{
    jacobian_determinant, se3_exp, se3_log, svf_exp, Direction, Grid, GridSpec, RigidLog, Svf,
};
use longreg::graph::{
    build_incidence, load_timepoints, validate_manifest, EdgeKind, IncidenceMatrix, Manifest,
    MaskPolicy, ObservationEdge, Settings, TimepointData,
};
use longreg::inference::{dilate_mask, solve_rigid_graph, solve_svf_graph, MASK_DILATION};
use longreg::longseg::{longitudinal_segment, FusionConfig};
use longreg::registration::{
    centroids, procrustes_rigid, register_nonlinear_ssd, shared_labels, symmetrize_svf,
    NonlinearParams,
};
use longreg::stats::aspc;
use longreg::template::{build_template, define_subject_grid, template_to_timepoint, timepoint_mask};
use longreg::trajectory::{fit_trajectory, FitMethod};
use longreg::volume_io::{
    read_labels, read_rigid, read_svf, resample_image, resample_mask, write_rigid, write_volume,
    LabelVolume, LoadedVolume, MaskVolume, Volume,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{PipelineError, Result};
use crate::hashing::{sha256_bytes, sha256_file, InputHasher};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const HASH_FILE: &str = ".stage_hash";
pub const PROVENANCE_FILE: &str = "provenance.json";
/// Wall-clock measurements live here so that every other output is a pure
/// function of the inputs.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    RigidRegister,
    RigidSolve,
    Grid,
    NonlinearRegister,
    SvfSolve,
    Template,
    Trajectory,
    Segment,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::RigidRegister,
        Stage::RigidSolve,
        Stage::Grid,
        Stage::NonlinearRegister,
        Stage::SvfSolve,
        Stage::Template,
        Stage::Trajectory,
        Stage::Segment,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::RigidRegister => "rigid-register",
            Stage::RigidSolve => "rigid-solve",
            Stage::Grid => "grid",
            Stage::NonlinearRegister => "nonlinear-register",
            Stage::SvfSolve => "svf-solve",
            Stage::Template => "template",
            Stage::Trajectory => "trajectory",
            Stage::Segment => "segment",
            Stage::Stats => "stats",
        }
    }

    fn needs_images(self) -> bool {
        !matches!(self, Stage::RigidSolve | Stage::Trajectory)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
                format!("unknown stage '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Comma-separated stage names, or `all`.
pub fn parse_stages(s: &str) -> std::result::Result<Vec<Stage>, String> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut v = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<Vec<Stage>, _>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Empty runs every stage.
    pub stages: Vec<Stage>,
    pub force: bool,
    /// Overrides `settings.workers`; 0 means one per core.
    pub workers: Option<usize>,
    /// Segment this timepoint only, instead of every labelled one.
    pub segment_reference: Option<String>,
    pub write_scores: bool,
    pub nonlinear: NonlinearParams,
    pub trajectory_method: FitMethod,
    pub log_jacobian: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stages: Vec::new(),
            force: false,
            workers: None,
            segment_reference: None,
            write_scores: false,
            nonlinear: NonlinearParams::default(),
            trajectory_method: FitMethod::default(),
            log_jacobian: false,
        }
    }
}

impl RunOptions {
    /// The options that can change stage outputs.
    fn fingerprint(&self) -> String {
        format!(
            "{:?}|{}|{:?}|{:?}|{}",
            self.segment_reference,
            self.write_scores,
            self.nonlinear,
            self.trajectory_method,
            self.log_jacobian
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    /// Outputs come from the manifest; nothing was computed.
    Supplied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub input_hash: String,
    /// SHA-256 of every file the stage wrote, by name.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub subject: String,
    pub manifest_sha256: String,
    pub settings: Settings,
    /// SHA-256 of every file the manifest references, keyed as written there.
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| longreg::Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| longreg::Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?)
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    longreg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

/// SHA-256 of every file the manifest points at.
pub fn input_hashes(manifest: &Manifest) -> Result<BTreeMap<String, String>> {
    let mut paths: Vec<&PathBuf> = Vec::new();
    for t in &manifest.timepoints {
        paths.push(&t.image);
        paths.extend(t.labels.iter());
        paths.extend(t.mask.iter());
    }
    paths.extend(manifest.registrations.iter().map(|e| &e.path));
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), sha256_file(&manifest.resolve(p))?);
    }
    Ok(out)
}

/// Digests of the files in a stage directory, excluding the gate file.
pub fn dir_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(out);
    };
    for e in entries {
        let e = e.map_err(|err| io_err(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name == HASH_FILE || !e.path().is_file() {
            continue;
        }
        out.insert(name, sha256_file(&e.path())?);
    }
    Ok(out)
}

/// Validates the manifest, then runs the requested stages in pipeline
/// order on a worker pool of the configured size.
pub fn run_pipeline(manifest_path: &Path, options: &RunOptions, out: &Path) -> Result<Provenance> {
    let manifest = Manifest::load(manifest_path)?;
    let report = validate_manifest(&manifest, true);
    for w in report.warnings() {
        log::warn!("{}", w.message);
    }
    if !report.is_ok() {
        return Err(PipelineError::Validation(
            report.errors().map(|i| i.message.clone()).collect(),
        ));
    }
    let workers = options.workers.unwrap_or(manifest.settings.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| run_stages(&manifest, manifest_path, options, out))
}

struct Ctx<'a> {
    manifest: &'a Manifest,
    out: &'a Path,
    options: &'a RunOptions,
    timepoints: Vec<TimepointData>,
}

fn run_stages(manifest: &Manifest, manifest_path: &Path, options: &RunOptions, out: &Path) -> Result<Provenance> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut stages = if options.stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        options.stages.clone()
    };
    stages.sort();
    stages.dedup();

    let inputs = input_hashes(manifest)?;
    let timepoints = if stages.iter().any(|s| s.needs_images()) {
        load_timepoints(manifest)?
    } else {
        Vec::new()
    };
    let ctx = Ctx {
        manifest,
        out,
        options,
        timepoints,
    };

    let prov_path = out.join(PROVENANCE_FILE);
    let mut prov = read_json::<Provenance>(&prov_path)
        .ok()
        .filter(|p| p.subject == manifest.subject)
        .map(|p| p.stages)
        .unwrap_or_default();
    let timing_path = out.join(TIMING_FILE);
    let mut timing: BTreeMap<String, Value> = read_json(&timing_path).unwrap_or_default();

    let mut provenance = Provenance {
        tool: "longreg".into(),
        version: VERSION.into(),
        subject: manifest.subject.clone(),
        manifest_sha256: sha256_file(manifest_path)?,
        settings: manifest.settings.clone(),
        inputs,
        stages: BTreeMap::new(),
    };
    for stage in stages {
        log::info!("stage {stage}");
        let start = Instant::now();
        let (record, extra) = run_stage(&ctx, stage, &provenance.inputs)?;
        let mut t = json!({ "seconds": start.elapsed().as_secs_f64(), "status": record.status });
        if let Some(extra) = extra {
            t["detail"] = extra;
        }
        timing.insert(stage.name().into(), t);
        prov.insert(stage.name().into(), record);
        provenance.stages = prov.clone();
        write_json(&prov_path, &provenance)?;
        write_json(&timing_path, &timing)?;
    }
    Ok(provenance)
}

fn supplied(ctx: &Ctx, stage: Stage) -> bool {
    match stage {
        Stage::RigidRegister => !ctx.manifest.edges(EdgeKind::Rigid).is_empty(),
        Stage::NonlinearRegister => !ctx.manifest.edges(EdgeKind::Svf).is_empty(),
        _ => false,
    }
}

fn stage_hash(ctx: &Ctx, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<String> {
    let mut h = InputHasher::new();
    h.field("stage", stage.name().as_bytes());
    h.field("version", VERSION.as_bytes());
    let manifest_json = serde_json::to_vec(ctx.manifest).expect("manifest serialises");
    h.field("manifest", &manifest_json);
    for (p, d) in inputs {
        h.field(p, d.as_bytes());
    }
    for earlier in Stage::ALL.into_iter().filter(|s| *s < stage) {
        for (name, d) in dir_digests(&ctx.out.join(earlier.name()))? {
            h.field(&format!("{earlier}/{name}"), d.as_bytes());
        }
    }
    h.field("options", ctx.options.fingerprint().as_bytes());
    Ok(h.finish())
}

fn run_stage(
    ctx: &Ctx,
    stage: Stage,
    inputs: &BTreeMap<String, String>,
) -> Result<(StageRecord, Option<Value>)> {
    if supplied(ctx, stage) {
        log::info!("{stage}: registrations supplied by the manifest");
        let record = StageRecord {
            status: StageStatus::Supplied,
            input_hash: sha256_bytes(&serde_json::to_vec(&ctx.manifest.registrations).expect("edges serialise")),
            outputs: BTreeMap::new(),
        };
        return Ok((record, None));
    }
    let hash = stage_hash(ctx, stage, inputs)?;
    let dir = ctx.out.join(stage.name());
    let gate = dir.join(HASH_FILE);
    let cached = !ctx.options.force && std::fs::read_to_string(&gate).is_ok_and(|h| h.trim() == hash);
    let mut extra = None;
    let status = if cached {
        log::info!("{stage}: inputs unchanged, skipping");
        StageStatus::Cached
    } else {
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        extra = match stage {
            Stage::RigidRegister => rigid_register(ctx, &dir)?,
            Stage::RigidSolve => rigid_solve(ctx, &dir)?,
            Stage::Grid => grid(ctx, &dir)?,
            Stage::NonlinearRegister => nonlinear_register(ctx, &dir)?,
            Stage::SvfSolve => svf_solve(ctx, &dir)?,
            Stage::Template => template(ctx, &dir)?,
            Stage::Trajectory => trajectory(ctx, &dir)?,
            Stage::Segment => segment(ctx, &dir)?,
            Stage::Stats => stats(ctx, &dir)?,
        };
        std::fs::write(&gate, format!("{hash}\n")).map_err(|e| io_err(&gate, e))?;
        StageStatus::Ran
    };
    let record = StageRecord {
        status,
        input_hash: hash,
        outputs: dir_digests(&dir)?,
    };
    Ok((record, extra))
}

type StageOutput = Result<Option<Value>>;

fn missing(stage: Stage, what: &str) -> PipelineError {
    PipelineError::Dependency {
        stage: stage.name().into(),
        missing: what.into(),
    }
}

fn write(path: PathBuf, v: LoadedVolume) -> Result<()> {
    write_volume(&v, path)?;
    Ok(())
}

/// Observation edges of `kind` with resolved paths: the manifest's own,
/// else those written by the registration stage.
fn effective_edges(ctx: &Ctx, kind: EdgeKind) -> Result<Option<Vec<ObservationEdge>>> {
    let listed = ctx.manifest.edges(kind);
    if !listed.is_empty() {
        return Ok(Some(
            listed
                .into_iter()
                .map(|e| ObservationEdge {
                    path: ctx.manifest.resolve(&e.path),
                    ..e.clone()
                })
                .collect(),
        ));
    }
    let dir = ctx.out.join(match kind {
        EdgeKind::Rigid => Stage::RigidRegister.name(),
        EdgeKind::Svf => Stage::NonlinearRegister.name(),
    });
    let path = dir.join("edges.json");
    if !path.exists() {
        return Ok(None);
    }
    let edges: Vec<ObservationEdge> = read_json(&path)?;
    Ok(Some(
        edges
            .into_iter()
            .map(|e| ObservationEdge {
                path: dir.join(&e.path),
                ..e
            })
            .collect(),
    ))
}

fn incidence(ctx: &Ctx, edges: &[ObservationEdge], kind: EdgeKind) -> Result<IncidenceMatrix> {
    let mut m = ctx.manifest.clone();
    m.registrations = edges.to_vec();
    Ok(build_incidence(&m, kind)?)
}

#[derive(Serialize, Deserialize)]
struct LatentRigids {
    ids: Vec<String>,
    /// Rotation vector then translation, per timepoint.
    latent: Vec<[f64; 6]>,
    objective: [f64; 6],
    pivots: usize,
}

fn latent_rigids(ctx: &Ctx, stage: Stage) -> Result<Vec<RigidLog>> {
    let path = ctx.out.join(Stage::RigidSolve.name()).join("latent_rigids.json");
    if !path.exists() {
        return Err(missing(stage, "latent rigid transforms (run rigid-solve first)"));
    }
    let l: LatentRigids = read_json(&path)?;
    if l.ids != ctx.manifest.node_ids() {
        return Err(missing(stage, "latent rigid transforms for the current timepoints (re-run rigid-solve)"));
    }
    Ok(l.latent.into_iter().map(RigidLog::from_array).collect())
}

fn svf_path(ctx: &Ctx, id: &str) -> PathBuf {
    ctx.out.join(Stage::SvfSolve.name()).join(format!("latent_{id}.svf.nii.gz"))
}

fn latent_svfs(ctx: &Ctx) -> Result<Option<Vec<Svf>>> {
    let ids = ctx.manifest.node_ids();
    if !ids.iter().all(|id| svf_path(ctx, id).exists()) {
        return Ok(None);
    }
    Ok(Some(
        ids.iter()
            .map(|id| read_svf(svf_path(ctx, id)))
            .collect::<longreg::Result<_>>()?,
    ))
}

fn subject_grid(ctx: &Ctx, stage: Stage) -> Result<Grid> {
    let path = ctx.out.join(Stage::Grid.name()).join("grid.json");
    if !path.exists() {
        return Err(missing(stage, "the subject grid (run grid first)"));
    }
    let spec: GridSpec = read_json(&path)?;
    Ok(Grid::try_from(&spec)?)
}

fn rigid_register(ctx: &Ctx, dir: &Path) -> StageOutput {
    let tps = &ctx.timepoints;
    let unlabelled: Vec<&str> = tps
        .iter()
        .filter(|t| t.labels.is_none())
        .map(|t| t.id.as_str())
        .collect();
    if !unlabelled.is_empty() {
        return Err(missing(
            Stage::RigidRegister,
            &format!(
                "label maps for {} (rigid registration aligns label centroids) or rigid edges in the manifest",
                unlabelled.join(", ")
            ),
        ));
    }
    let mut edges = Vec::new();
    for (a, b) in ctx.manifest.settings.edges.pairs(tps.len()) {
        let la = tps[a].labels.as_ref().expect("checked");
        let lb = tps[b].labels.as_ref().expect("checked");
        let shared = shared_labels(la, lb);
        let (rigid, _) = procrustes_rigid(&centroids(la, &shared)?, &centroids(lb, &shared)?)?;
        let name = format!("{}_{}.rigid.txt", tps[a].id, tps[b].id);
        write_rigid(&rigid, dir.join(&name))?;
        edges.push(ObservationEdge {
            ref_id: tps[a].id.clone(),
            target_id: tps[b].id.clone(),
            kind: EdgeKind::Rigid,
            path: name.into(),
        });
    }
    write_json(&dir.join("edges.json"), &edges)?;
    Ok(None)
}

fn rigid_solve(ctx: &Ctx, dir: &Path) -> StageOutput {
    let edges = effective_edges(ctx, EdgeKind::Rigid)?.ok_or_else(|| {
        missing(
            Stage::RigidSolve,
            "rigid registrations: the manifest lists no rigid edges and rigid-register has not run",
        )
    })?;
    let w = incidence(ctx, &edges, EdgeKind::Rigid)?;
    let obs = edges
        .iter()
        .map(|e| read_rigid(&e.path).and_then(|r| se3_log(&r)))
        .collect::<longreg::Result<Vec<_>>>()?;
    let sol = solve_rigid_graph(&obs, &w, ctx.manifest.settings.ratio)?;
    let ids = ctx.manifest.node_ids();
    for (id, l) in ids.iter().zip(&sol.latent) {
        write_rigid(&se3_exp(l), dir.join(format!("latent_{id}.rigid.txt")))?;
    }
    let record = LatentRigids {
        ids,
        latent: sol.latent.iter().map(RigidLog::to_array).collect(),
        objective: sol.objective,
        pivots: sol.pivots,
    };
    write_json(&dir.join("latent_rigids.json"), &record)?;
    Ok(None)
}

fn grid(ctx: &Ctx, dir: &Path) -> StageOutput {
    let svfs = ctx.manifest.edges(EdgeKind::Svf);
    let grid = if let Some(first) = svfs.first() {
        // supplied observations fix the grid everything else lives on
        let g = read_svf(ctx.manifest.resolve(&first.path))?.grid().clone();
        for e in &svfs[1..] {
            g.ensure_matches(
                read_svf(ctx.manifest.resolve(&e.path))?.grid(),
                &e.path.display().to_string(),
            )?;
        }
        g
    } else {
        let rigids = latent_rigids(ctx, Stage::Grid)?;
        let fovs: Vec<&Grid> = ctx.timepoints.iter().map(|t| t.image.grid()).collect();
        define_subject_grid(&fovs, &rigids)?
    };
    write_json(&dir.join("grid.json"), &GridSpec::from(&grid))?;
    Ok(None)
}

fn nonlinear_register(ctx: &Ctx, dir: &Path) -> StageOutput {
    let grid = subject_grid(ctx, Stage::NonlinearRegister)?;
    let rigids = latent_rigids(ctx, Stage::NonlinearRegister)?;
    let tps = &ctx.timepoints;
    let images = tps
        .iter()
        .zip(&rigids)
        .map(|(tp, r)| resample_image(&tp.image, &grid, &template_to_timepoint(r, None), 0.0))
        .collect::<longreg::Result<Vec<Volume>>>()?;
    let params = &ctx.options.nonlinear;
    let mut edges = Vec::new();
    let mut report = Vec::new();
    for (a, b) in ctx.manifest.settings.edges.pairs(tps.len()) {
        let (fwd, rf) = register_nonlinear_ssd(&images[a], &images[b], params)?;
        let (bwd, rb) = register_nonlinear_ssd(&images[b], &images[a], params)?;
        let v = symmetrize_svf(&fwd, &bwd)?;
        let name = format!("{}_{}.svf.nii.gz", tps[a].id, tps[b].id);
        write(dir.join(&name), LoadedVolume::Svf(v))?;
        log::info!(
            "{} -> {}: ssd {:.4e} -> {:.4e}",
            tps[a].id,
            tps[b].id,
            rf.initial_ssd,
            rf.final_ssd
        );
        report.push(json!({
            "ref": tps[a].id, "target": tps[b].id,
            "forward": { "initial_ssd": rf.initial_ssd, "final_ssd": rf.final_ssd },
            "backward": { "initial_ssd": rb.initial_ssd, "final_ssd": rb.final_ssd },
        }));
        edges.push(ObservationEdge {
            ref_id: tps[a].id.clone(),
            target_id: tps[b].id.clone(),
            kind: EdgeKind::Svf,
            path: name.into(),
        });
    }
    write_json(&dir.join("edges.json"), &edges)?;
    write_json(&dir.join("registration.json"), &report)?;
    Ok(None)
}

/// Voxels the SVF solve visits, per the manifest's mask policy.
fn solve_mask(ctx: &Ctx, grid: &Grid) -> Result<Option<Vec<bool>>> {
    if ctx.manifest.settings.mask_policy == MaskPolicy::All {
        return Ok(None);
    }
    let tps = &ctx.timepoints;
    if tps.iter().all(|t| t.mask.is_none() && t.labels.is_none()) {
        return Ok(None);
    }
    let rigids = latent_rigids(ctx, Stage::SvfSolve)?;
    let mut union = vec![false; grid.len()];
    for (tp, r) in tps.iter().zip(&rigids) {
        if tp.mask.is_none() && tp.labels.is_none() {
            continue;
        }
        let m = resample_mask(&timepoint_mask(tp)?, grid, &template_to_timepoint(r, None))?;
        for (u, p) in union.iter_mut().zip(m.probabilities()) {
            *u |= *p >= 0.5;
        }
    }
    Ok(Some(dilate_mask(&union, grid.shape(), MASK_DILATION)))
}

fn svf_solve(ctx: &Ctx, dir: &Path) -> StageOutput {
    let edges = effective_edges(ctx, EdgeKind::Svf)?.ok_or_else(|| {
        missing(
            Stage::SvfSolve,
            "SVF registrations: the manifest lists no svf edges and nonlinear-register has not run",
        )
    })?;
    let w = incidence(ctx, &edges, EdgeKind::Svf)?;
    let obs = edges
        .iter()
        .map(|e| read_svf(&e.path))
        .collect::<longreg::Result<Vec<Svf>>>()?;
    let grid = obs[0].grid().clone();
    let mask = solve_mask(ctx, &grid)?;
    if let Some(m) = &mask {
        write(dir.join("mask.nii.gz"), LoadedVolume::Mask(MaskVolume::from_binary(grid.clone(), m)?))?;
    }
    let sol = solve_svf_graph(&obs, &w, mask.as_deref(), ctx.manifest.settings.ratio)?;
    for (id, v) in ctx.manifest.node_ids().iter().zip(sol.latent) {
        write(svf_path(ctx, id), LoadedVolume::Svf(v))?;
    }
    let mut stats = serde_json::to_value(&sol.stats).expect("stats serialise");
    let timing = stats.as_object_mut().and_then(|o| o.remove("timing"));
    write_json(&dir.join("solve.json"), &stats)?;
    Ok(timing.map(|t| json!({ "per_voxel_us": t })))
}

fn template(ctx: &Ctx, dir: &Path) -> StageOutput {
    let grid = subject_grid(ctx, Stage::Template)?;
    let rigids = latent_rigids(ctx, Stage::Template)?;
    let svfs = latent_svfs(ctx)?;
    let t = build_template(&ctx.timepoints, &rigids, svfs.as_deref(), &grid)?;
    write(dir.join("template_intensity.nii.gz"), LoadedVolume::Image(t.intensity))?;
    write(dir.join("template_mask.nii.gz"), LoadedVolume::Mask(t.mask))?;
    if let Some(seg) = t.segmentation {
        write(dir.join("template_seg.nii.gz"), LoadedVolume::Labels(seg))?;
    }
    let chains: Vec<Value> = ctx
        .timepoints
        .iter()
        .zip(&rigids)
        .map(|(tp, r)| {
            json!({
                "id": tp.id,
                "rigid": r.to_array(),
                "svf": svfs.as_ref().map(|_| format!("{}/latent_{}.svf.nii.gz", Stage::SvfSolve, tp.id)),
            })
        })
        .collect();
    write_json(
        &dir.join("template.json"),
        &json!({ "grid": GridSpec::from(&grid), "timepoints": chains }),
    )?;
    Ok(None)
}

fn method_name(m: FitMethod) -> &'static str {
    match m {
        FitMethod::LeastSquares => "least-squares",
        FitMethod::LeastAbsolute => "least-absolute",
    }
}

fn trajectory(ctx: &Ctx, dir: &Path) -> StageOutput {
    let svfs = latent_svfs(ctx)?
        .ok_or_else(|| missing(Stage::Trajectory, "latent SVFs (run svf-solve first)"))?;
    let times = ctx.manifest.times();
    let model = fit_trajectory(&svfs, &times, ctx.options.trajectory_method)?;
    write(dir.join("intercept.svf.nii.gz"), LoadedVolume::Svf(model.intercept))?;
    write(dir.join("slope.svf.nii.gz"), LoadedVolume::Svf(model.slope))?;
    write(dir.join("residual.nii.gz"), LoadedVolume::Image(model.residual))?;
    write_json(
        &dir.join("trajectory.json"),
        &json!({ "method": method_name(ctx.options.trajectory_method), "times": times }),
    )?;
    Ok(None)
}

fn segment(ctx: &Ctx, dir: &Path) -> StageOutput {
    let rigids = latent_rigids(ctx, Stage::Segment)?;
    let svfs = latent_svfs(ctx)?;
    let tps = &ctx.timepoints;
    let refs: Vec<usize> = match &ctx.options.segment_reference {
        Some(id) => vec![ctx
            .manifest
            .node_index(id)
            .ok_or_else(|| longreg::Error::UnknownNode(id.clone()))?],
        None => (0..tps.len()).filter(|&i| tps[i].labels.is_some()).collect(),
    };
    if refs.is_empty() {
        return Err(missing(Stage::Segment, "a label map on at least one timepoint"));
    }
    let config = FusionConfig {
        sigma: ctx.manifest.settings.fusion_sigma,
        ..FusionConfig::default()
    };
    let mut summary = Vec::new();
    for r in refs {
        let id = &tps[r].id;
        let res = longitudinal_segment(tps, &rigids, svfs.as_deref(), r, &config)?;
        for s in &res.skipped {
            log::warn!("segment {id}: timepoint {s} has no label map and does not vote");
        }
        write(dir.join(format!("seg_{id}.nii.gz")), LoadedVolume::Labels(res.labels))?;
        if ctx.options.write_scores {
            for (l, score) in res.ids.iter().zip(res.scores) {
                write(dir.join(format!("scores_{id}_label{l}.nii.gz")), LoadedVolume::Image(score))?;
            }
        }
        summary.push(json!({ "reference": id, "labels": res.ids, "skipped": res.skipped }));
    }
    write_json(&dir.join("segment.json"), &summary)?;
    Ok(None)
}

/// Volume in mm³ of every non-background label.
pub fn label_volumes(labels: &LabelVolume) -> BTreeMap<i32, f64> {
    let voxel = labels.grid().linear().determinant().abs();
    let mut counts = BTreeMap::new();
    for &l in labels.labels() {
        if l != 0 {
            *counts.entry(l).or_insert(0usize) += 1;
        }
    }
    counts.into_iter().map(|(l, n)| (l, n as f64 * voxel)).collect()
}

fn stats(ctx: &Ctx, dir: &Path) -> StageOutput {
    let slope = ctx.out.join(Stage::Trajectory.name()).join("slope.svf.nii.gz");
    let mut produced = false;
    if slope.exists() {
        let phi = svf_exp(&read_svf(&slope)?, Direction::Forward)?;
        let mut jac = jacobian_determinant(&phi);
        let name = if ctx.options.log_jacobian {
            jac.data_mut().iter_mut().for_each(|j| *j = j.ln());
            "log_jacobian_1y.nii.gz"
        } else {
            "jacobian_1y.nii.gz"
        };
        write(dir.join(name), LoadedVolume::Image(jac))?;
        produced = true;
    }

    let seg_dir = ctx.out.join(Stage::Segment.name());
    let mut rows = Vec::new();
    for tp in &ctx.timepoints {
        let fused = seg_dir.join(format!("seg_{}.nii.gz", tp.id));
        let (labels, source) = if fused.exists() {
            (read_labels(&fused)?, "segment")
        } else if let Some(l) = &tp.labels {
            (l.clone(), "manifest")
        } else {
            continue;
        };
        rows.push((tp.id.clone(), tp.time_years, source, label_volumes(&labels)));
    }
    if !rows.is_empty() {
        rows.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (first, last) = (&rows[0].3, &rows[rows.len() - 1].3);
        let mut change = BTreeMap::new();
        if rows.len() > 1 {
            for (l, v1) in first {
                if let Some(v2) = last.get(l) {
                    change.insert(*l, aspc(*v1, *v2)?);
                }
            }
        }
        let table: Vec<Value> = rows
            .iter()
            .map(|(id, t, source, v)| json!({ "id": id, "time_years": t, "source": source, "volumes_mm3": v }))
            .collect();
        write_json(&dir.join("volumes.json"), &json!({ "timepoints": table, "aspc_first_last": change }))?;
        produced = true;
    }
    if !produced {
        return Err(missing(Stage::Stats, "a trajectory slope or label maps"));
    }
    Ok(None)
}
