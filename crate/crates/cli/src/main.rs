use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use longreg::geometry::Direction;
use longreg::graph::{validate_manifest, Manifest};
use longreg::phantom::{generate_phantom, PhantomSpec, RegistrationMode};
use longreg::registration::{
    centroids, procrustes_rigid, register_nonlinear_ssd, shared_labels, symmetrize_svf,
    NonlinearParams,
};
use longreg::stats::{
    aspc, fdr_bh, hotelling_t2, sample_size, sample_size_reduction, voxelwise_ttest, StudyDesign,
};
use longreg::trajectory::{
    evaluate_trajectory, fit_trajectory, predict_image, transport_svf, FitMethod, TrajectoryModel,
};
use longreg::volume_io::{
    read_image, read_labels, read_mask, read_svf, write_rigid, write_volume, LoadedVolume,
    MaskVolume, Volume,
};
use longreg_cli::pipeline::read_json;
use longreg_cli::{ingest_external_registrations, parse_stages, run_pipeline, PipelineError, RunOptions, Stage};
use serde_json::json;

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Parser)]
#[command(name = "longreg", version, about = "Log-domain longitudinal registration of one subject's scans")]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = "LONGREG_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rigid transform taking one label map's centroids onto another's.
    RigidRegister {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Output `.rigid.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// SVF registering `target` onto `reference` (both on one grid).
    NonlinearRegister {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the backward registration and its symmetrisation.
        #[arg(long)]
        asymmetric: bool,
        #[command(flatten)]
        nonlinear: NonlinearArgs,
    },
    /// Latent transforms from a manifest's observations.
    Solve {
        #[arg(long, value_enum)]
        mode: SolveMode,
        #[command(flatten)]
        run: ManifestArgs,
    },
    /// Subject template grid.
    Grid {
        #[command(flatten)]
        run: ManifestArgs,
    },
    /// Median subject template.
    Template {
        #[command(flatten)]
        run: ManifestArgs,
    },
    /// Longitudinal label fusion.
    Segment {
        #[command(flatten)]
        run: ManifestArgs,
        #[arg(long, conflicts_with = "all")]
        reference: Option<String>,
        /// Segment every labelled timepoint (the default).
        #[arg(long)]
        all: bool,
        /// Also write the per-label vote scores.
        #[arg(long)]
        scores: bool,
    },
    #[command(subcommand)]
    /// Linear trajectory models over latent SVFs
    Trajectory(TrajectoryCmd),
    #[command(subcommand)]
    /// Group statistics and study design
    Stats(StatsCmd),
    /// Synthetic subject with known latent transforms.
    Phantom {
        /// JSON phantom description; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        registrations: Option<Registrations>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Add externally computed registrations to a manifest.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        /// Where to write the updated manifest; in place by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a manifest and the files it references.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run pipeline stages in order.
    Run {
        #[command(flatten)]
        run: ManifestArgs,
        /// Comma-separated stage names, or `all`.
        #[arg(long, value_parser = parse_stage_list)]
        stages: Option<StageList>,
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        scores: bool,
        /// Write log Jacobians in the stats stage.
        #[arg(long)]
        log: bool,
        #[arg(long, value_enum, default_value = "least-squares")]
        method: Method,
        #[command(flatten)]
        nonlinear: NonlinearArgs,
    },
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Recompute even when the stage inputs are unchanged.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct NonlinearArgs {
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Smoothing of each update, voxels.
    #[arg(long, default_value_t = 2.0)]
    update_sigma: f64,
    /// Smoothing of the accumulated field, voxels.
    #[arg(long, default_value_t = 1.0)]
    field_sigma: f64,
}

impl NonlinearArgs {
    fn params(&self) -> NonlinearParams {
        NonlinearParams {
            iterations: self.iterations,
            levels: self.levels,
            update_sigma: self.update_sigma,
            field_sigma: self.field_sigma,
            ..NonlinearParams::default()
        }
    }
}

#[derive(Clone)]
struct StageList(Vec<Stage>);

fn parse_stage_list(s: &str) -> std::result::Result<StageList, String> {
    parse_stages(s).map(StageList)
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMode {
    Rigid,
    Svf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Registrations {
    Additive,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    LeastSquares,
    LeastAbsolute,
}

impl From<Method> for FitMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::LeastSquares => FitMethod::LeastSquares,
            Method::LeastAbsolute => FitMethod::LeastAbsolute,
        }
    }
}

#[derive(Subcommand)]
enum TrajectoryCmd {
    /// Fit intercept and slope to latent SVFs.
    Fit {
        #[arg(long, num_args = 2.., required = true)]
        svf: Vec<PathBuf>,
        /// Years from baseline, one per SVF.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        times: Vec<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "least-squares")]
        method: Method,
    },
    /// Displacement field of the fitted trajectory at time `t`.
    Evaluate {
        /// Directory written by `trajectory fit`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long)]
        inverse: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Template intensity moved along the trajectory to time `t`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Carry a subject SVF into population space.
    Transport {
        #[arg(long)]
        svf: PathBuf,
        /// Population-grid SVF whose exponential maps population to subject.
        #[arg(long)]
        warp: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Voxelwise Welch t-test between two groups of scalar maps.
    Ttest {
        #[arg(long, num_args = 2.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 2.., required = true)]
        b: Vec<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelwise Hotelling T² between two groups of vector fields.
    Hotelling {
        #[arg(long, num_args = 4.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 4.., required = true)]
        b: Vec<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benjamini-Hochberg threshold of a p-value map.
    Fdr {
        #[arg(long)]
        pvals: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        q: f64,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Significance mask to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Absolute symmetrised percent change between two volumes.
    Aspc {
        #[arg(long)]
        v1: f64,
        #[arg(long)]
        v2: f64,
    },
    /// Subjects per arm for a slope trial.
    Samplesize {
        /// JSON with alpha, power, effect, timepoints, time_variance.
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
    },
    /// Sample size of method A as a percentage of method B's.
    Reduction {
        #[arg(long)]
        sigma_a: f64,
        #[arg(long, default_value_t = 0.0)]
        rho_a: f64,
        #[arg(long)]
        sigma_b: f64,
        #[arg(long, default_value_t = 0.0)]
        rho_b: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn mask_arg(path: &Option<PathBuf>) -> Result<Option<Vec<bool>>> {
    Ok(match path {
        Some(p) => Some(read_mask(p)?.binary(0.5)),
        None => None,
    })
}

fn stage_run(run: &ManifestArgs, stages: Vec<Stage>, workers: Option<usize>) -> RunOptions {
    RunOptions {
        stages,
        force: run.force,
        workers,
        ..RunOptions::default()
    }
}

fn run_and_report(run: &ManifestArgs, options: &RunOptions) -> Result<()> {
    let prov = run_pipeline(&run.manifest, options, &run.out)?;
    for (stage, rec) in &prov.stages {
        if options.stages.is_empty() || options.stages.iter().any(|s| s.name() == stage) {
            println!("{stage}: {:?}", rec.status);
        }
    }
    Ok(())
}

fn load_model(dir: &Path) -> Result<TrajectoryModel> {
    Ok(TrajectoryModel {
        intercept: read_svf(dir.join("intercept.svf.nii.gz"))?,
        slope: read_svf(dir.join("slope.svf.nii.gz"))?,
        residual: read_image(dir.join("residual.nii.gz"))?,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        PipelineError::Core(longreg::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn execute(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::RigidRegister { reference, target, out } => {
            let (a, b) = (read_labels(&reference)?, read_labels(&target)?);
            let shared = shared_labels(&a, &b);
            let (rigid, log) = procrustes_rigid(&centroids(&a, &shared)?, &centroids(&b, &shared)?)?;
            write_rigid(&rigid, &out)?;
            print_json(&json!({ "labels": shared, "log": log.to_array() }));
        }
        Command::NonlinearRegister { reference, target, out, asymmetric, nonlinear } => {
            let (a, b) = (read_image(&reference)?, read_image(&target)?);
            let params = nonlinear.params();
            let (fwd, report) = register_nonlinear_ssd(&a, &b, &params)?;
            let v = if asymmetric {
                fwd
            } else {
                symmetrize_svf(&fwd, &register_nonlinear_ssd(&b, &a, &params)?.0)?
            };
            write_volume(&LoadedVolume::Svf(v), &out)?;
            print_json(&json!({ "initial_ssd": report.initial_ssd, "final_ssd": report.final_ssd }));
        }
        Command::Solve { mode, run } => {
            let stage = match mode {
                SolveMode::Rigid => Stage::RigidSolve,
                SolveMode::Svf => Stage::SvfSolve,
            };
            run_and_report(&run, &stage_run(&run, vec![stage], workers))?;
        }
        Command::Grid { run } => run_and_report(&run, &stage_run(&run, vec![Stage::Grid], workers))?,
        Command::Template { run } => {
            run_and_report(&run, &stage_run(&run, vec![Stage::Template], workers))?
        }
        Command::Segment { run, reference, all: _, scores } => {
            let options = RunOptions {
                segment_reference: reference,
                write_scores: scores,
                ..stage_run(&run, vec![Stage::Segment], workers)
            };
            run_and_report(&run, &options)?;
        }
        Command::Run { run, stages, reference, scores, log, method, nonlinear } => {
            let options = RunOptions {
                segment_reference: reference,
                write_scores: scores,
                log_jacobian: log,
                trajectory_method: method.into(),
                nonlinear: nonlinear.params(),
                ..stage_run(&run, stages.map(|s| s.0).unwrap_or_default(), workers)
            };
            run_and_report(&run, &options)?;
        }
        Command::Trajectory(cmd) => trajectory(cmd)?,
        Command::Stats(cmd) => stats(cmd)?,
        Command::Phantom { spec, out, registrations, seed } => {
            let mut spec: PhantomSpec = match spec {
                Some(p) => read_json(&p)?,
                None => PhantomSpec::default(),
            };
            if let Some(r) = registrations {
                spec.registrations = match r {
                    Registrations::Additive => RegistrationMode::Additive,
                    Registrations::None => RegistrationMode::None,
                };
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let manifest = generate_phantom(&spec)?.write(&out)?;
            println!(
                "{} timepoints, {} registrations -> {}",
                manifest.timepoints.len(),
                manifest.registrations.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Ingest { manifest, dir, out } => {
            let m = Manifest::load(&manifest)?;
            let before = m.registrations.len();
            let updated = ingest_external_registrations(&dir, &m)?;
            updated.save(out.as_ref().unwrap_or(&manifest))?;
            println!("added {} edges", updated.registrations.len() - before);
        }
        Command::Validate { manifest } => {
            let m = Manifest::load(&manifest)?;
            let report = validate_manifest(&m, true);
            for w in report.warnings() {
                log::warn!("{}", w.message);
            }
            if !report.is_ok() {
                return Err(PipelineError::Validation(
                    report.errors().map(|i| i.message.clone()).collect(),
                ));
            }
            println!("ok: {} timepoints, {} registrations", m.timepoints.len(), m.registrations.len());
        }
    }
    Ok(())
}

fn trajectory(cmd: TrajectoryCmd) -> Result<()> {
    match cmd {
        TrajectoryCmd::Fit { svf, times, out, method } => {
            let svfs = svf.iter().map(read_svf).collect::<longreg::Result<Vec<_>>>()?;
            let model = fit_trajectory(&svfs, &times, method.into())?;
            ensure_dir(&out)?;
            write_volume(&LoadedVolume::Svf(model.intercept), out.join("intercept.svf.nii.gz"))?;
            write_volume(&LoadedVolume::Svf(model.slope), out.join("slope.svf.nii.gz"))?;
            write_volume(&LoadedVolume::Image(model.residual), out.join("residual.nii.gz"))?;
        }
        TrajectoryCmd::Evaluate { model, t, inverse, out } => {
            let dir = if inverse { Direction::Inverse } else { Direction::Forward };
            let phi = evaluate_trajectory(&load_model(&model)?, t, dir)?;
            write_volume(&LoadedVolume::Displacement(phi), &out)?;
        }
        TrajectoryCmd::Predict { model, template, t, out } => {
            let img = predict_image(&read_image(&template)?, &load_model(&model)?, t)?;
            write_volume(&LoadedVolume::Image(img), &out)?;
        }
        TrajectoryCmd::Transport { svf, warp, out } => {
            let w = read_svf(&warp)?;
            let moved = transport_svf(&read_svf(&svf)?, &w, w.grid())?;
            write_volume(&LoadedVolume::Svf(moved), &out)?;
        }
    }
    Ok(())
}

fn stats(cmd: StatsCmd) -> Result<()> {
    match cmd {
        StatsCmd::Ttest { a, b, mask, out } => {
            let load = |ps: &[PathBuf]| ps.iter().map(read_image).collect::<longreg::Result<Vec<Volume>>>();
            let maps = voxelwise_ttest(&load(&a)?, &load(&b)?, mask_arg(&mask)?.as_deref())?;
            ensure_dir(&out)?;
            write_volume(&LoadedVolume::Image(maps.t), out.join("t.nii.gz"))?;
            write_volume(&LoadedVolume::Image(maps.p), out.join("p.nii.gz"))?;
            write_volume(&LoadedVolume::Image(maps.df), out.join("df.nii.gz"))?;
        }
        StatsCmd::Hotelling { a, b, mask, out } => {
            let load = |ps: &[PathBuf]| {
                ps.iter()
                    .map(|p| read_svf(p).map(|v| v.into_field()))
                    .collect::<longreg::Result<Vec<_>>>()
            };
            let maps = hotelling_t2(&load(&a)?, &load(&b)?, mask_arg(&mask)?.as_deref())?;
            ensure_dir(&out)?;
            let grid = maps.t2.grid().clone();
            write_volume(&LoadedVolume::Image(maps.t2), out.join("t2.nii.gz"))?;
            write_volume(&LoadedVolume::Image(maps.p), out.join("p.nii.gz"))?;
            let singular = MaskVolume::from_binary(grid, &maps.singular)?;
            write_volume(&LoadedVolume::Mask(singular), out.join("singular.nii.gz"))?;
        }
        StatsCmd::Fdr { pvals, q, mask, out } => {
            let p = read_image(&pvals)?;
            let inside = mask_arg(&mask)?;
            let values: Vec<f64> = match &inside {
                Some(m) => p.data().iter().zip(m).map(|(v, &i)| if i { *v } else { f64::NAN }).collect(),
                None => p.data().to_vec(),
            };
            let res = fdr_bh(&values, q);
            let count = res.significant.iter().filter(|s| **s).count();
            if let Some(o) = out {
                let m = MaskVolume::from_binary(p.grid().clone(), &res.significant)?;
                write_volume(&LoadedVolume::Mask(m), &o)?;
            }
            print_json(&json!({ "q": q, "threshold": res.threshold, "significant": count }));
        }
        StatsCmd::Aspc { v1, v2 } => print_json(&json!({ "aspc": aspc(v1, v2)? })),
        StatsCmd::Samplesize { design, sigma, rho } => {
            let d: StudyDesign = read_json(&design)?;
            let n = sample_size(&d, sigma, rho)?;
            print_json(&json!({ "raw": n.raw, "subjects_per_arm": n.subjects }));
        }
        StatsCmd::Reduction { sigma_a, rho_a, sigma_b, rho_b } => {
            print_json(&json!({ "percent": sample_size_reduction(sigma_a, rho_a, sigma_b, rho_b)? }))
        }
    }
    Ok(())
}
