//! Batch pipeline behind the `cfrc` binary: microstructure generation,
//! oracle simulation, dataset assembly, staged training, rollout,
//! evaluation and reporting.

pub mod config;
pub mod error;
pub mod provenance;

use std::fs;
use std::path::{Path, PathBuf};

use cfrc_core::case_io::{read_case, write_case};
use cfrc_core::crackpath::{extract_crack_path, percent_rmse_path, rmse_stress};
use cfrc_core::fields::DeformationSequence;
use cfrc_core::material::simulate_case;
use cfrc_core::microgen::{generate_fiber_centers, parse_layout, rasterize, write_layout};
use cfrc_core::report::{write_report, CaseMetrics};
use cfrc_surrogate::bundle::{checkpoint_name, Bundle, BundleManifest};
use cfrc_surrogate::dataset::{fit_dataset_stats, stage_samples, with_mirrors, Stage};
use cfrc_surrogate::{rollout_case, stage_config, train_stage, OracleEcho, RolloutResult};
use cfrc_unet::save_checkpoint;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::PipelineConfig;
pub use error::CliError;
use provenance::{sha256_hex, Provenance};

/// Increment and final-damage models used by `rollout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Trained Composite-Net bundle.
    Unet,
    /// Stubs replaying the simulated increments.
    OracleEcho,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Unet => "unet",
            Backend::OracleEcho => "oracle-echo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    GenMicro,
    Simulate,
    BuildDataset,
    /// Trains one stage, or all four in order when `None`.
    Train(Option<Stage>),
    Rollout(Backend),
    Evaluate(Backend),
    Report(Backend),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenMicro => "gen-micro",
            Command::Simulate => "simulate",
            Command::BuildDataset => "build-dataset",
            Command::Train(_) => "train",
            Command::Rollout(_) => "rollout",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

/// Everything a command needs besides its own arguments.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub config_text: String,
    pub config_path: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    /// Overrides the command's output directory.
    pub out: Option<PathBuf>,
    pub args: Vec<String>,
}

impl Context {
    pub fn load(config_path: &Path, seed: Option<u64>, jobs: Option<usize>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let (config, config_text) = PipelineConfig::load(config_path)?;
        let jobs = match jobs {
            Some(0) => return Err(CliError::Config("--jobs must be positive".into())),
            Some(j) => j,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Context {
            seed: seed.unwrap_or(config.seed),
            config,
            config_text,
            config_path: config_path.to_path_buf(),
            jobs,
            out,
            args: std::env::args().collect(),
        })
    }
}

/// Train/test split and the dataset-level settings used to build it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Per-case rollout outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub case_id: String,
    pub switch_step: Option<usize>,
    pub switch_never_fired: bool,
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(cfrc_core::Error::from)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(cfrc_core::Error::from)?)
}

/// Sorted entries of `dir` accepted by `keep`.
fn list_dir(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if keep(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Runs `command` on a worker pool capped at `ctx.jobs` and records provenance.
pub fn run(command: &Command, ctx: &Context) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| dispatch(command, ctx))?;
    Provenance {
        command: command.name().to_string(),
        args: ctx.args.clone(),
        config_path: ctx.config_path.display().to_string(),
        config_sha256: sha256_hex(&ctx.config_text),
        seed: ctx.seed,
        jobs: ctx.jobs,
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
    .write(&ctx.config.paths.report_root)
}

fn dispatch(command: &Command, ctx: &Context) -> Result<(), CliError> {
    match *command {
        Command::GenMicro => gen_micro(ctx),
        Command::Simulate => simulate(ctx),
        Command::BuildDataset => build_dataset(ctx),
        Command::Train(stage) => match stage {
            Some(s) => train(ctx, s),
            None => Stage::ALL.into_iter().try_for_each(|s| train(ctx, s)),
        },
        Command::Rollout(backend) => rollout(ctx, backend),
        Command::Evaluate(backend) => evaluate(ctx, backend).map(|_| ()),
        Command::Report(backend) => report(ctx, backend),
    }
}

/// Writes `case-XXXX.layout` files; case `i` uses seed `seed + i`.
pub fn gen_micro(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.out.clone().unwrap_or_else(|| cfg.micro_dir());
    mkdir(&dir)?;
    let layouts: Vec<_> = (0..cfg.microgen.n_cases)
        .into_par_iter()
        .map(|i| {
            let seed = ctx.seed.wrapping_add(i as u64);
            generate_fiber_centers(cfg.microgen.target_vf, &cfg.microgen.layout, seed).map(|l| (i, l))
        })
        .collect::<Result<_, _>>()?;
    for (i, layout) in layouts {
        let path = dir.join(format!("case-{i:04}.layout"));
        fs::write(&path, write_layout(&layout)).map_err(|e| CliError::io(&path, e))?;
    }
    log::info!("wrote {} layouts to {}", cfg.microgen.n_cases, dir.display());
    Ok(())
}

/// Rasterizes every layout and runs the material oracle on it.
pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let micro = cfg.micro_dir();
    let layouts = list_dir(&micro, |p| p.extension().is_some_and(|e| e == "layout"))?;
    if layouts.is_empty() {
        return Err(CliError::Validation(format!("no layouts in {}; run gen-micro", micro.display())));
    }
    let out = ctx.out.clone().unwrap_or_else(|| cfg.cases_dir());
    mkdir(&out)?;
    layouts.par_iter().try_for_each(|path| -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let grid = rasterize(&parse_layout(&text)?, cfg.microgen.resolution);
        let seq = simulate_case(&grid, &cfg.material)?;
        write_case(&seq, &out.join(&seq.case_id))?;
        log::info!("simulated {} (UTS at frame {})", seq.case_id, seq.uts_index);
        Ok(())
    })
}

fn load_cases(dir: &Path, ids: Option<&[String]>) -> Result<Vec<DeformationSequence>, CliError> {
    let dirs = match ids {
        Some(ids) => ids.iter().map(|id| dir.join(id)).collect(),
        None => list_dir(dir, |p| p.join("manifest.txt").is_file())?,
    };
    Ok(dirs.par_iter().map(|d| read_case(d)).collect::<Result<_, _>>()?)
}

/// Splits the simulated cases and fits normalization on the mirror-augmented
/// training split.
pub fn build_dataset(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let cases_dir = cfg.cases_dir();
    let cases = if cases_dir.is_dir() { load_cases(&cases_dir, None)? } else { Vec::new() };
    let n_test = cfg.dataset.n_test;
    if cases.len() <= n_test {
        return Err(CliError::Validation(format!(
            "{} simulated cases cannot leave a training split after holding out {n_test}",
            cases.len()
        )));
    }
    let mut ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed));
    let test: Vec<String> = ids.split_off(ids.len() - n_test);
    let mut train = ids;
    train.sort();
    let mut test = test;
    test.sort();
    let train_cases: Vec<_> = cases.iter().filter(|c| train.contains(&c.case_id)).cloned().collect();
    let norm = fit_dataset_stats(&with_mirrors(&train_cases), &cfg.dataset.params)?;
    let out = ctx.out.clone().unwrap_or_else(|| cfg.paths.data_root.clone());
    mkdir(&out)?;
    norm.save(&out.join("norm_stats.json"))?;
    write_json(
        &out.join("dataset.json"),
        &DatasetManifest {
            train,
            test,
            seed: ctx.seed,
        },
    )
}

fn load_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest, CliError> {
    let path = cfg.dataset_manifest();
    if !path.is_file() {
        return Err(CliError::Validation(format!("no dataset at {}; run build-dataset", path.display())));
    }
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.train.is_empty() {
        return Err(CliError::Validation("dataset has no training cases".into()));
    }
    Ok(manifest)
}

/// Trains one stage after checking that its prerequisites exist; writes the
/// bundle manifest once all four checkpoints are present.
pub fn train(ctx: &Context, stage: Stage) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let manifest = load_manifest(cfg)?;
    let ck_dir = ctx.out.clone().unwrap_or_else(|| cfg.paths.checkpoint_root.clone());
    for pre in stage.prerequisites() {
        if !ck_dir.join(checkpoint_name(*pre)).is_file() {
            return Err(CliError::Validation(format!(
                "stage {} requires a trained {} checkpoint",
                stage.name(),
                pre.name()
            )));
        }
    }
    let norm = cfrc_core::mesh_ingest::NormStats::load(&cfg.norm_stats_path())?;
    let cases = with_mirrors(&load_cases(&cfg.cases_dir(), Some(&manifest.train))?);
    let resolution = cases[0].size();
    let samples = stage_samples(stage, &cases, &norm, &cfg.dataset.params)?;
    let net = stage_config(stage, cfg.network.get(stage), resolution)?;
    let mut params = *cfg.train.get(stage);
    params.seed = ctx.seed.wrapping_add(Stage::ALL.iter().position(|&s| s == stage).unwrap_or(0) as u64);
    mkdir(&ck_dir)?;
    let log_path = ck_dir.join(format!("{}.log", stage.name()));
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let mut outcome = train_stage(stage, &samples, net, &norm, &params, &mut log)?;
    drop(log);
    save_checkpoint(&ck_dir.join(checkpoint_name(stage)), &mut outcome.model, Some(&norm))?;
    norm.save(&ck_dir.join("norm_stats.json"))?;
    log::info!(
        "{}: {} epochs, final loss {:.4e}",
        stage.name(),
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().map_or(f64::NAN, |l| l.total)
    );
    if Stage::ALL.iter().all(|s| ck_dir.join(checkpoint_name(*s)).is_file()) {
        BundleManifest::conventional(cfg.rollout).save(&ck_dir.join("bundle.json"))?;
    }
    Ok(())
}

/// Cases a rollout or evaluation runs on: the test split when a dataset
/// exists, otherwise every simulated case.
fn target_cases(cfg: &PipelineConfig) -> Result<Vec<DeformationSequence>, CliError> {
    let ids = if cfg.dataset_manifest().is_file() {
        Some(read_json::<DatasetManifest>(&cfg.dataset_manifest())?.test)
    } else {
        None
    };
    let cases_dir = cfg.cases_dir();
    if !cases_dir.is_dir() {
        return Err(CliError::Validation(format!("no simulated cases in {}", cases_dir.display())));
    }
    let cases = load_cases(&cases_dir, ids.as_deref())?;
    if cases.is_empty() {
        return Err(CliError::Validation("no cases to roll out".into()));
    }
    Ok(cases)
}

fn rollout_one(
    case: &DeformationSequence,
    backend: Backend,
    bundle: Option<&mut Bundle>,
    params: &cfrc_surrogate::RolloutParams,
) -> Result<RolloutResult, CliError> {
    let r = match (backend, bundle) {
        (Backend::Unet, Some(b)) => rollout_case(
            &case.case_id,
            case.seed,
            &case.microstructure,
            &mut b.uts,
            &mut b.necking,
            &mut b.damage,
            params,
        )?,
        _ => {
            let mut echo = OracleEcho { truth: case.clone() };
            let mut neck = echo.clone();
            let mut dmg = echo.clone();
            rollout_case(&case.case_id, case.seed, &case.microstructure, &mut echo, &mut neck, &mut dmg, params)?
        }
    };
    Ok(r)
}

pub fn rollout(ctx: &Context, backend: Backend) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let cases = target_cases(cfg)?;
    let bundle = match backend {
        Backend::Unet => {
            let path = cfg.paths.checkpoint_root.join("bundle.json");
            if !path.is_file() {
                return Err(CliError::Validation(format!(
                    "no complete bundle at {}; train all stages first",
                    path.display()
                )));
            }
            Some(Bundle::load(&path).map_err(|e| match e {
                cfrc_core::Error::Validation(m) => CliError::Validation(m),
                other => CliError::Runtime(other),
            })?)
        }
        Backend::OracleEcho => None,
    };
    let params = bundle.as_ref().map_or(cfg.rollout, |b| b.rollout);
    let out = ctx.out.clone().unwrap_or_else(|| cfg.rollout_dir(backend.name()));
    mkdir(&out)?;
    let records: Vec<RolloutRecord> = cases
        .par_iter()
        .map_init(
            || bundle.clone(),
            |b, case| -> Result<RolloutRecord, CliError> {
                let r = rollout_one(case, backend, b.as_mut(), &params)?;
                write_case(&r.sequence, &out.join(&case.case_id))?;
                Ok(RolloutRecord {
                    case_id: case.case_id.clone(),
                    switch_step: r.switch_step,
                    switch_never_fired: r.switch_never_fired(),
                })
            },
        )
        .collect::<Result<_, _>>()?;
    for r in records.iter().filter(|r| r.switch_never_fired) {
        log::warn!("{}: switch never fired", r.case_id);
    }
    write_json(&out.join("rollout.json"), &records)
}

fn case_metrics(
    truth: &DeformationSequence,
    pred: &DeformationSequence,
    crack: &cfrc_core::crackpath::CrackParams,
) -> Result<CaseMetrics, CliError> {
    let path = match (
        extract_crack_path(&truth.final_damage, crack),
        extract_crack_path(&pred.final_damage, crack),
    ) {
        (Ok(t), Ok(p)) => percent_rmse_path(&t, &p).ok(),
        _ => None,
    };
    let curve = |s: &DeformationSequence| s.frames.iter().map(|f| (f.strain, f.macro_stress())).collect();
    Ok(CaseMetrics {
        id: truth.case_id.clone(),
        rmse_stress: rmse_stress(&truth.frames, &pred.frames)?,
        percent_rmse_path: path,
        uts_strain: pred.frames[pred.uts_index].strain,
        final_macro_stress: pred.frames.last().map_or(0.0, |f| f.macro_stress()),
        max_stress: truth.max_stress() as f64,
        curve_truth: curve(truth),
        curve_pred: curve(pred),
    })
}

/// Scores every rolled-out case against its simulation and writes
/// `evaluation-<backend>.json` to the report directory.
pub fn evaluate(ctx: &Context, backend: Backend) -> Result<Vec<CaseMetrics>, CliError> {
    let cfg = &ctx.config;
    let rollout_dir = cfg.rollout_dir(backend.name());
    let index = rollout_dir.join("rollout.json");
    if !index.is_file() {
        return Err(CliError::Validation(format!("no rollout at {}; run rollout", rollout_dir.display())));
    }
    let records: Vec<RolloutRecord> = read_json(&index)?;
    let metrics: Vec<CaseMetrics> = records
        .par_iter()
        .map(|r| {
            let truth = read_case(&cfg.cases_dir().join(&r.case_id))?;
            let pred = read_case(&rollout_dir.join(&r.case_id))?;
            case_metrics(&truth, &pred, &cfg.evaluate.crack)
        })
        .collect::<Result<_, _>>()?;
    for m in &metrics {
        println!(
            "{} rmse_stress={:.6} max_stress={:.3} percent_rmse_path={}",
            m.id,
            m.rmse_stress,
            m.max_stress,
            m.percent_rmse_path.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
        );
    }
    let out = ctx.out.clone().unwrap_or_else(|| cfg.paths.report_root.clone());
    mkdir(&out)?;
    write_json(&out.join(format!("evaluation-{}.json", backend.name())), &metrics)?;
    Ok(metrics)
}

/// Summary, histogram and curve figures, with the configuration echoed.
pub fn report(ctx: &Context, backend: Backend) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let src = cfg.paths.report_root.join(format!("evaluation-{}.json", backend.name()));
    if !src.is_file() {
        return Err(CliError::Validation(format!("no evaluation at {}; run evaluate", src.display())));
    }
    let metrics: Vec<CaseMetrics> = read_json(&src)?;
    let out = ctx.out.clone().unwrap_or_else(|| cfg.paths.report_root.clone());
    mkdir(&out)?;
    write_report(&out, &metrics, &cfg.evaluate.report)?;
    let echo = out.join("config.toml");
    fs::write(&echo, &ctx.config_text).map_err(|e| CliError::io(&echo, e))
}
