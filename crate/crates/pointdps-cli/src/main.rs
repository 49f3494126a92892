//! Command-line workflows: train a denoiser, simulate observations,
//! reconstruct clouds (guided sampling or the gradient-descent baseline),
//! sample unconditionally, and evaluate results.
//!
//! Every run writes its outputs plus a manifest recording the command, the
//! full flag snapshot, the seed, timing, and output paths. All commands are
//! byte-reproducible for a fixed seed regardless of the thread count.

use clap::{Parser, Subcommand, ValueEnum};
use pointdps::data::{
    atoms_to_cloud, fit_gmm, parse_pdb, simulate_observations, synth_dataset, ObservationPlan,
    SynthKind,
};
use pointdps::diffusion::{
    default_phases, load_model, save_model, timesteps, Augmentation, Denoiser, DiffusionConfig,
};
use pointdps::error::{read_file, write_atomic};
use pointdps::eval::{
    chamfer, emd, evaluate_model, generation_metrics, rmsd_subsampled,
};
use pointdps::geom::{format_xyz, load_xyz3, Cloud3};
use pointdps::likelihood::{observations_from_json, observations_to_json, ObservationSet};
use pointdps::net::NetArch;
use pointdps::rng::RandomSource;
use pointdps::sampler::{
    ml_reconstruct, sample_batch, sample_batch_with, BetaRule, GuidedScoreContext, Method,
    SampleResult, Schedule,
};
use pointdps::{Error, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "pointdps", version, about = "Point cloud reconstruction from projections, coarse models and subunits")]
struct Cli {
    /// Worker threads (falls back to POINTDPS_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoising network on a dataset of clouds.
    Train(TrainArgs),
    /// Build synthetic observations of a known cloud.
    Simulate(SimulateArgs),
    /// Guided reverse-diffusion reconstruction from observations.
    Reconstruct(ReconstructArgs),
    /// Gradient-descent baseline reconstruction (no prior).
    Ml(MlArgs),
    /// Score reconstructed clouds against a target.
    Evaluate(EvaluateArgs),
    /// Unconditional samples from a trained model.
    Sample(SampleArgs),
    /// Coarse-grain a cloud to mixture means.
    FitGmm(FitGmmArgs),
    /// Extract heavy atoms from a PDB file as an xyz cloud.
    ParsePdb(ParsePdbArgs),
    /// Set-level generation metrics (1-NNA, COV, MMD).
    Genmetrics(GenmetricsArgs),
    /// Compare integration schemes at matched evaluation budgets.
    Ablate(AblateArgs),
}

#[derive(clap::Args, Serialize)]
struct TrainArgs {
    /// "synth:<blobs|chairs|helices|lshapes>" or a directory of .xyz clouds.
    #[arg(long)]
    dataset: String,
    /// Clouds to generate for synth datasets.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Points per cloud for synth datasets.
    #[arg(long, default_value_t = 64)]
    points: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    embed: usize,
    #[arg(long, value_enum, default_value_t = AugmentArg::Orthogonal)]
    augment: AugmentArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AugmentArg {
    None,
    Orthogonal,
    Proper,
}

impl From<AugmentArg> for Augmentation {
    fn from(a: AugmentArg) -> Self {
        match a {
            AugmentArg::None => Augmentation::None,
            AugmentArg::Orthogonal => Augmentation::Orthogonal,
            AugmentArg::Proper => Augmentation::Proper,
        }
    }
}

#[derive(clap::Args, Serialize)]
struct SimulateArgs {
    /// Ground-truth cloud (.xyz).
    #[arg(long, conflicts_with = "pdb", required_unless_present = "pdb")]
    cloud: Option<PathBuf>,
    /// Ground-truth structure (.pdb); heavy atoms become the cloud.
    #[arg(long)]
    pdb: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    projections: usize,
    /// Points per projection.
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Coarse observation size (mixture means).
    #[arg(long)]
    coarse: Option<usize>,
    /// Approximate subunit size.
    #[arg(long)]
    subunit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    /// Model cloud size (observations upsample to this).
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    tmax: f64,
    #[arg(long, default_value_t = 0.002)]
    tmin: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Noise control, e.g. "0", "1/t", "1/t@0.15".
    #[arg(long, default_value = "1/t@0.15")]
    beta: BetaRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct MlArgs {
    #[arg(long)]
    obs: PathBuf,
    /// Model cloud size (observations upsample to this).
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct EvaluateArgs {
    /// Reconstructed clouds (.xyz), one entry per sample.
    #[arg(long, num_args = 1.., required = true)]
    model_clouds: Vec<PathBuf>,
    /// Target structure; enables gyration scaling and rigid alignment.
    #[arg(long, conflicts_with = "target_cloud", required_unless_present = "target_cloud")]
    pdb: Option<PathBuf>,
    /// Target cloud for direct (already aligned) comparison.
    #[arg(long)]
    target_cloud: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::All)]
    metric: MetricArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Cd,
    Emd,
    Rmsd,
    All,
}

#[derive(clap::Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 64)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    #[arg(long, default_value_t = 80.0)]
    tmax: f64,
    #[arg(long, default_value_t = 0.002)]
    tmin: f64,
    #[arg(long, default_value = "1/t@0.15")]
    beta: BetaRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct FitGmmArgs {
    /// Input cloud (.xyz) or structure (.pdb).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Means are written here as .xyz.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct ParsePdbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct GenmetricsArgs {
    #[arg(long, num_args = 1.., required = true)]
    samples: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    refs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    /// Model cloud size.
    #[arg(long)]
    points: usize,
    /// Ground truth for the error measurements (.xyz).
    #[arg(long)]
    target: PathBuf,
    /// Steps for the corrected scheme; the Euler schemes get 2*steps-1 so
    /// all three spend the same number of score evaluations.
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value = "1/t@0.15")]
    beta: BetaRule,
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    tmax: f64,
    #[arg(long, default_value_t = 0.002)]
    tmin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    elapsed_ms: u128,
    #[serde(skip_serializing_if = "Option::is_none")]
    nfe_per_sample: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    energies: Option<Vec<f64>>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &'static str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command,
            config,
            seed,
            elapsed_ms: 0,
            nfe_per_sample: None,
            energies: None,
            outputs: Vec::new(),
        }
    }

    fn write(mut self, path: &Path, started: Instant) -> Result<()> {
        self.elapsed_ms = started.elapsed().as_millis();
        let text = serde_json::to_string_pretty(&self).expect("manifest serialization");
        write_atomic(path, text.as_bytes())
    }
}

fn config_of<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("flag serialization")
}

/// Manifest path for a single-file output: the output path plus a
/// ".manifest.json" suffix on the file name.
fn manifest_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.push_str(".manifest.json");
    out.with_file_name(name)
}

fn load_cloud_or_pdb(path: &Path) -> Result<Cloud3> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pdb")) {
        atoms_to_cloud(&parse_pdb(&read_file(path)?)?)
    } else {
        load_xyz3(path)
    }
}

fn load_observations(path: &Path, n_model: usize) -> Result<ObservationSet> {
    observations_from_json(&read_file(path)?, n_model)
}

fn schedule_from(steps: usize, tmin: f64, tmax: f64, rho: f64, beta: BetaRule) -> Result<Schedule> {
    let cfg = DiffusionConfig {
        t_min: tmin,
        t_max: tmax,
        rho,
        ..DiffusionConfig::default()
    };
    Schedule::new(timesteps(steps, &cfg)?, beta)
}

/// Write one cloud per sample into `dir` as sample_<k>.xyz; returns the file
/// names in chain order.
fn write_samples(dir: &Path, clouds: &[Cloud3]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut names = Vec::with_capacity(clouds.len());
    for (k, cloud) in clouds.iter().enumerate() {
        let name = format!("sample_{k:03}.xyz");
        write_atomic(dir.join(&name), format_xyz(cloud).as_bytes())?;
        names.push(name);
    }
    Ok(names)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut rng = RandomSource::new(args.seed);
    let dataset: Vec<Cloud3> = if let Some(kind) = args.dataset.strip_prefix("synth:") {
        let kind: SynthKind = kind.parse()?;
        synth_dataset(kind, args.count, args.points, &mut rng)?
    } else {
        let dir = Path::new(&args.dataset);
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Io { path: dir.into(), source: e })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no .xyz clouds in {}",
                dir.display()
            )));
        }
        paths.iter().map(load_xyz3).collect::<Result<_>>()?
    };
    let arch = NetArch::new(args.hidden, args.layers, args.embed)?;
    let cfg = DiffusionConfig::default();
    let phases = default_phases(args.epochs, args.batch, args.lr);
    let result = pointdps::diffusion::train(
        &dataset,
        arch,
        &cfg,
        &phases,
        args.augment.into(),
        &mut rng,
    )?;
    let meta = serde_json::json!({
        "flags": config_of(&args),
        "epoch_losses": result.epoch_losses,
    });
    save_model(&result.net, &meta, &args.out)?;
    let mut manifest = RunManifest::new("train", config_of(&args), args.seed);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    if let Some(loss) = result.epoch_losses.last() {
        println!("trained {} epochs, final loss {loss:.4}", args.epochs);
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let source = args.cloud.as_deref().or(args.pdb.as_deref()).expect("clap enforces one");
    let cloud = load_cloud_or_pdb(source)?;
    let plan = ObservationPlan {
        n_projections: args.projections,
        points_per_projection: args.points,
        coarse_points: args.coarse,
        subunit_size: args.subunit,
    };
    let mut rng = RandomSource::new(args.seed);
    let set = simulate_observations(&cloud, &plan, &mut rng)?;
    write_atomic(&args.out, observations_to_json(&set).as_bytes())?;
    let mut manifest = RunManifest::new("simulate", config_of(&args), args.seed);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    println!("wrote {} observations of a {}-point cloud", set.len(), cloud.len());
    Ok(())
}

fn run_reconstruct(args: ReconstructArgs) -> Result<()> {
    let started = Instant::now();
    let (net, _) = load_model(&args.model)?;
    let denoiser = Denoiser::Net(net);
    let obs = load_observations(&args.obs, args.points)?;
    let sched = schedule_from(args.steps, args.tmin, args.tmax, args.rho, args.beta)?;
    let ctx = GuidedScoreContext::guided(&denoiser, &obs, args.alpha)?;
    let results = sample_batch(&ctx, args.points, &sched, args.seed, args.samples)?;
    let clouds: Vec<Cloud3> = results.iter().map(|r| r.cloud.clone()).collect();
    let names = write_samples(&args.out_dir, &clouds)?;
    let mut manifest = RunManifest::new("reconstruct", config_of(&args), args.seed);
    manifest.nfe_per_sample = results.first().map(|r| r.nfe);
    manifest.outputs = names;
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    println!(
        "reconstructed {} clouds ({} score evaluations each)",
        results.len(),
        results.first().map_or(0, |r| r.nfe)
    );
    Ok(())
}

fn run_ml(args: MlArgs) -> Result<()> {
    use rayon::prelude::*;
    let started = Instant::now();
    let obs = load_observations(&args.obs, args.points)?;
    let results: Vec<_> = (0..args.samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = RandomSource::with_stream(args.seed, k as u64);
            ml_reconstruct(&obs, args.points, args.steps, args.lr, &mut rng)
        })
        .collect::<Result<_>>()?;
    let clouds: Vec<Cloud3> = results.iter().map(|r| r.cloud.clone()).collect();
    let names = write_samples(&args.out_dir, &clouds)?;
    let mut manifest = RunManifest::new("ml", config_of(&args), args.seed);
    manifest.energies = Some(results.iter().map(|r| r.energy).collect());
    manifest.outputs = names;
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    println!("descent finished; best energy {:.6}", results.iter().map(|r| r.energy).fold(f64::INFINITY, f64::min));
    Ok(())
}

#[derive(Serialize)]
struct SampleScores {
    path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    cd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    emd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmsd_subsampled: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmsd_atomic: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let want = |m: MetricArg| args.metric == m || args.metric == MetricArg::All;
    let mut per_sample = Vec::new();
    if let Some(pdb) = &args.pdb {
        let atoms = load_cloud_or_pdb(pdb)?;
        // One subsampled target per model size, reused across samples.
        let mut targets: Vec<(usize, Cloud3)> = Vec::new();
        for path in &args.model_clouds {
            let model = load_xyz3(path)?;
            let target = match targets.iter().find(|(n, _)| *n == model.len()) {
                Some((_, t)) => t.clone(),
                None => {
                    let t = fit_gmm(&atoms, model.len(), &mut RandomSource::new(args.seed))?.means;
                    targets.push((model.len(), t.clone()));
                    t
                }
            };
            let eval = evaluate_model(&model, &atoms, &target)?;
            per_sample.push(SampleScores {
                path: path.display().to_string(),
                cd: want(MetricArg::Cd).then_some(eval.cd),
                emd: want(MetricArg::Emd).then_some(eval.emd),
                rmsd_subsampled: want(MetricArg::Rmsd).then_some(eval.rmsd_subsampled),
                rmsd_atomic: want(MetricArg::Rmsd).then_some(eval.rmsd_atomic),
            });
        }
    } else {
        let target = load_xyz3(args.target_cloud.as_ref().expect("clap enforces one"))?;
        for path in &args.model_clouds {
            let model = load_xyz3(path)?;
            per_sample.push(SampleScores {
                path: path.display().to_string(),
                cd: want(MetricArg::Cd).then(|| chamfer(&model, &target)).transpose()?,
                emd: want(MetricArg::Emd).then(|| emd(&model, &target)).transpose()?,
                rmsd_subsampled: want(MetricArg::Rmsd)
                    .then(|| rmsd_subsampled(&target, &model))
                    .transpose()?,
                rmsd_atomic: None,
            });
        }
    }
    let collect = |f: fn(&SampleScores) -> Option<f64>| {
        let vals: Vec<f64> = per_sample.iter().filter_map(f).collect();
        (vals.len() == per_sample.len()).then(|| mean(&vals))
    };
    let report = serde_json::json!({
        "per_sample": per_sample,
        "mean": {
            "cd": collect(|s| s.cd),
            "emd": collect(|s| s.emd),
            "rmsd_subsampled": collect(|s| s.rmsd_subsampled),
            "rmsd_atomic": collect(|s| s.rmsd_atomic),
        },
    });
    write_atomic(&args.out, serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    let mut manifest = RunManifest::new("evaluate", config_of(&args), args.seed);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    println!("evaluated {} clouds", args.model_clouds.len());
    Ok(())
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let started = Instant::now();
    let (net, _) = load_model(&args.model)?;
    let denoiser = Denoiser::Net(net);
    let ctx = GuidedScoreContext::unconditional(&denoiser);
    let sched = schedule_from(args.steps, args.tmin, args.tmax, args.rho, args.beta)?;
    let results = sample_batch(&ctx, args.points, &sched, args.seed, args.samples)?;
    let clouds: Vec<Cloud3> = results.iter().map(|r| r.cloud.clone()).collect();
    let names = write_samples(&args.out_dir, &clouds)?;
    let mut manifest = RunManifest::new("sample", config_of(&args), args.seed);
    manifest.nfe_per_sample = results.first().map(|r| r.nfe);
    manifest.outputs = names;
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    println!("sampled {} clouds", results.len());
    Ok(())
}

fn run_fit_gmm(args: FitGmmArgs) -> Result<()> {
    let started = Instant::now();
    let cloud = load_cloud_or_pdb(&args.input)?;
    let mut rng = RandomSource::new(args.seed);
    let model = fit_gmm(&cloud, args.components, &mut rng)?;
    write_atomic(&args.out, format_xyz(&model.means).as_bytes())?;
    let mut manifest = RunManifest::new("fit-gmm", config_of(&args), args.seed);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    println!("coarse-grained {} points to {} means", cloud.len(), args.components);
    Ok(())
}

fn run_parse_pdb(args: ParsePdbArgs) -> Result<()> {
    let started = Instant::now();
    let records = parse_pdb(&read_file(&args.input)?)?;
    let cloud = atoms_to_cloud(&records)?;
    write_atomic(&args.out, format_xyz(&cloud).as_bytes())?;
    let mut manifest = RunManifest::new("parse-pdb", config_of(&args), 0);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    println!("{} heavy atoms", cloud.len());
    Ok(())
}

fn run_genmetrics(args: GenmetricsArgs) -> Result<()> {
    let started = Instant::now();
    let samples: Vec<Cloud3> = args.samples.iter().map(load_xyz3).collect::<Result<_>>()?;
    let refs: Vec<Cloud3> = args.refs.iter().map(load_xyz3).collect::<Result<_>>()?;
    let report = generation_metrics(&samples, &refs)?;
    write_atomic(&args.out, serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    let mut manifest = RunManifest::new("genmetrics", config_of(&args), 0);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    println!(
        "1-NNA {:.1}%, COV {:.1}%, MMD {:.4}",
        report.one_nna, report.cov, report.mmd
    );
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let started = Instant::now();
    let (net, _) = load_model(&args.model)?;
    let denoiser = Denoiser::Net(net);
    let obs = load_observations(&args.obs, args.points)?;
    let target = load_xyz3(&args.target)?;
    let ctx = GuidedScoreContext::guided(&denoiser, &obs, args.alpha)?;
    let budget = 2 * args.steps - 1;
    let mut report = serde_json::Map::new();
    for (label, method, steps) in [
        ("euler_ode", Method::EulerOde, budget),
        ("euler_sde", Method::EulerSde, budget),
        ("corrected", Method::Corrected, args.steps),
    ] {
        let sched = schedule_from(steps, args.tmin, args.tmax, args.rho, args.beta)?;
        let results: Vec<SampleResult> =
            sample_batch_with(method, &ctx, args.points, &sched, args.seed, args.samples)?;
        let cds: Vec<f64> = results
            .iter()
            .map(|r| chamfer(&r.cloud, &target))
            .collect::<Result<_>>()?;
        report.insert(
            label.into(),
            serde_json::json!({
                "mean_cd": mean(&cds),
                "nfe": results.first().map_or(0, |r| r.nfe),
                "steps": steps,
            }),
        );
    }
    write_atomic(
        &args.out,
        serde_json::to_string_pretty(&serde_json::Value::Object(report)).unwrap().as_bytes(),
    )?;
    let mut manifest = RunManifest::new("ablate", config_of(&args), args.seed);
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&manifest_for(&args.out), started)?;
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("POINTDPS_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = thread_count(cli.threads) {
        // Ignore the error from double initialization (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Reconstruct(args) => run_reconstruct(args),
        Command::Ml(args) => run_ml(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Sample(args) => run_sample(args),
        Command::FitGmm(args) => run_fit_gmm(args),
        Command::ParsePdb(args) => run_parse_pdb(args),
        Command::Genmetrics(args) => run_genmetrics(args),
        Command::Ablate(args) => run_ablate(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
