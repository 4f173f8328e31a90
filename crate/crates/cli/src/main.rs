//! `rsnet` command-line tool: fairing solver, splitting verifier, gradient
//! checks, synthetic data, training and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rsnet::autodiff::{primitive_gradchecks, Tensor};
use rsnet::data_io::{
    default_cameras, read_jsonl, synth_generate, write_jsonl, BoneTable, PoseSample,
};
use rsnet::graph::{build_adjacency, normalize_adjacency, SkeletonTopology};
use rsnet::layers::layer_gradchecks;
use rsnet::model::{model_gradcheck, ModelConfig, RsNet};
use rsnet::spectral::{implicit_fairing, spectral_filter};
use rsnet::splitting::{
    solve_direct, solve_iterative, split, verify_properties, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use rsnet::training::{
    evaluate, loss, predict_all, train, MetricsRecord, TrainConfig, CHECKPOINT_FILE, METRICS_FILE,
};

const LAYER_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "rsnet",
    version,
    about = "Regular-splitting graph networks for 2D-to-3D pose lifting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// RNG seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Where to write the run manifest; printed to stderr when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve (I + sL)H = X by regular splitting and print H as CSV.
    SolveFairing {
        #[arg(long)]
        s: f64,
        /// N×F signal, one joint per row.
        #[arg(long)]
        signal: PathBuf,
        /// Skeleton JSON; the 17-joint skeleton when absent.
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        /// Also write per-step residual norms as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write H here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the splitting property report as JSON.
    VerifySplitting {
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long)]
        s: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks for layers and the full model.
    Gradcheck {
        /// Include every tape primitive.
        #[arg(long)]
        all: bool,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic JSONL dataset.
    SynthData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// 16 or 17 with the bundled tables.
        #[arg(long, default_value_t = 17)]
        joints: usize,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long)]
        bones: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes metrics, checkpoint and manifest under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out set; otherwise the tail of --data per `eval_fraction`.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and print a metrics record.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[command(flatten)]
        common: Common,
    },
}

/// Everything needed to rerun a command.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    artifacts: BTreeMap<String, PathBuf>,
    version: &'static str,
}

/// File given to `train --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    eval_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::detector(),
            eval_fraction: 0.2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Failed>().is_some() {
        return 2;
    }
    let numerical = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<rsnet::Error>(),
            Some(
                rsnet::Error::NotConverged { .. }
                    | rsnet::Error::Numerical(_)
                    | rsnet::Error::PowerIteration { .. }
                    | rsnet::Error::Singular
                    | rsnet::Error::FilterPole(_)
            )
        )
    });
    if numerical {
        2
    } else {
        1
    }
}

/// A check ran to completion and reported a failure.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn skeleton_or_default(path: Option<&Path>, joints: usize) -> anyhow::Result<SkeletonTopology> {
    match path {
        Some(p) => {
            SkeletonTopology::load(p).with_context(|| format!("reading skeleton {}", p.display()))
        }
        None => SkeletonTopology::builtin(joints)
            .with_context(|| format!("no bundled skeleton with {joints} joints")),
    }
}

fn write_manifest(
    common: &Common,
    manifest: &RunManifest,
    default_path: Option<&Path>,
) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    match common.manifest.as_deref().or(default_path) {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            eprintln!("{text}");
            Ok(())
        }
    }
}

fn manifest(command: &str, config: serde_json::Value, seed: u64) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        seed,
        artifacts: BTreeMap::new(),
        version: env!("CARGO_PKG_VERSION"),
    }
}

fn read_matrix_csv(path: &Path) -> anyhow::Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), i + 1))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        bail!("{}: empty signal", path.display());
    }
    if rows.iter().any(|r| r.len() != cols) {
        bail!("{}: ragged rows", path.display());
    }
    Ok(Tensor::from_vec(rows.len(), cols, rows.concat())?)
}

fn write_matrix_csv<W: Write>(out: W, m: &Tensor) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SolveFairing {
            s,
            signal,
            skeleton,
            tol,
            max_iter,
            trace,
            out,
            common,
        } => {
            let x = read_matrix_csv(&signal)?;
            let topology = skeleton_or_default(skeleton.as_deref(), x.rows())?;
            let (a_hat, _) = normalize_adjacency::<f64>(&build_adjacency(&topology)?)?;
            let splitting = split(&a_hat, s)?;
            let (h, iterations) = solve_iterative(&splitting, &x, tol, max_iter)?;
            let mut m = manifest(
                "solve-fairing",
                serde_json::json!({ "s": s, "tol": tol, "max_iter": max_iter, "signal": signal, "skeleton": skeleton }),
                common.seed,
            );
            match &out {
                Some(p) => {
                    write_matrix_csv(fs::File::create(p)?, &h)?;
                    m.artifacts.insert("solution".into(), p.clone());
                }
                None => write_matrix_csv(io::stdout().lock(), &h)?,
            }
            if let Some(p) = &trace {
                let mut w = csv::Writer::from_path(p)?;
                w.write_record(["step", "residual_norm"])?;
                for (k, r) in iterations.residual_norms.iter().enumerate() {
                    w.write_record([k.to_string(), r.to_string()])?;
                }
                w.flush()?;
                m.artifacts.insert("trace".into(), p.clone());
            }
            write_manifest(&common, &m, None)
        }
        Command::VerifySplitting {
            skeleton,
            s,
            common,
        } => {
            let topology = skeleton_or_default(skeleton.as_deref(), 17)?;
            let (a_hat, _) = normalize_adjacency::<f64>(&build_adjacency(&topology)?)?;
            let splitting = split(&a_hat, s)?;
            let report = verify_properties(&splitting)?;
            let x = Tensor::from_fn(topology.num_joints(), 3, |i, j| {
                ((i * 3 + j) as f64 * 0.37).sin()
            });
            let (iterative, _) = solve_iterative(&splitting, &x, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            let direct = solve_direct(&splitting, &x)?;
            let laplacian = Tensor::identity(a_hat.rows()).sub(&a_hat)?;
            let spectral = spectral_filter(&laplacian, &x, implicit_fairing(s))?;
            let rel = |a: &Tensor| -> anyhow::Result<f64> {
                Ok(a.sub(&direct)?.frobenius_norm()
                    / direct.frobenius_norm().max(f64::MIN_POSITIVE))
            };
            let agreement = serde_json::json!({
                "iterative_vs_direct": rel(&iterative)?,
                "spectral_vs_direct": rel(&spectral)?,
            });
            let all_passed = report.all_passed;
            let doc = serde_json::json!({ "report": report, "solution_agreement": agreement });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            write_manifest(
                &common,
                &manifest(
                    "verify-splitting",
                    serde_json::json!({ "s": s, "skeleton": skeleton }),
                    common.seed,
                ),
                None,
            )?;
            if !all_passed {
                return Err(Failed("splitting properties violated".into()).into());
            }
            Ok(())
        }
        Command::Gradcheck { all, seeds, common } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let mut worst: BTreeMap<(&str, &str), f64> = BTreeMap::new();
            let mut record = |group: &'static str, name: &'static str, err: f64| {
                let e = worst.entry((group, name)).or_insert(0.0);
                *e = e.max(err);
            };
            for seed in common.seed..common.seed + seeds {
                if all {
                    for (name, c) in primitive_gradchecks(seed)? {
                        record("primitive", name, c.max_relative_error);
                    }
                }
                for (name, c) in layer_gradchecks(seed)? {
                    record("layer", name, c.max_relative_error);
                }
                record("model", "rsnet", model_gradcheck(seed)?.max_relative_error);
            }
            let mut failed = Vec::new();
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "group,name,max_relative_error,tolerance,passed")?;
            for ((group, name), err) in &worst {
                let tol = if *group == "model" {
                    MODEL_TOL
                } else {
                    LAYER_TOL
                };
                let passed = *err < tol;
                if !passed {
                    failed.push(format!("{group}/{name}"));
                }
                writeln!(stdout, "{group},{name},{err:e},{tol:e},{passed}")?;
            }
            drop(stdout);
            write_manifest(
                &common,
                &manifest(
                    "gradcheck",
                    serde_json::json!({ "all": all, "seeds": seeds }),
                    common.seed,
                ),
                None,
            )?;
            if !failed.is_empty() {
                return Err(Failed(format!("gradient check failed: {}", failed.join(", "))).into());
            }
            Ok(())
        }
        Command::SynthData {
            count,
            out,
            joints,
            skeleton,
            bones,
            common,
        } => {
            let topology = skeleton_or_default(skeleton.as_deref(), joints)?;
            let table = match &bones {
                Some(p) => BoneTable::load(p)
                    .with_context(|| format!("reading bone table {}", p.display()))?,
                None => BoneTable::builtin(topology.num_joints()).with_context(|| {
                    format!("no bundled bone table for {} joints", topology.num_joints())
                })?,
            };
            let samples: Vec<PoseSample> =
                synth_generate(&topology, &table, count, common.seed, &default_cameras())?
                    .into_iter()
                    .map(|s| s.sample)
                    .collect();
            write_jsonl(&out, &samples)?;
            let mut m = manifest(
                "synth-data",
                serde_json::json!({ "count": count, "joints": topology.num_joints(), "skeleton": skeleton, "bones": bones }),
                common.seed,
            );
            m.artifacts.insert("dataset".into(), out.clone());
            write_manifest(&common, &m, None)
        }
        Command::Train {
            config,
            data,
            out,
            eval_data,
            skeleton,
            common,
        } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", config.display()))?;
            cfg.train.seed = common.seed;
            if !(0.0..1.0).contains(&cfg.eval_fraction) {
                bail!(
                    "eval_fraction must lie in [0, 1), got {}",
                    cfg.eval_fraction
                );
            }
            let topology = skeleton_or_default(skeleton.as_deref(), cfg.model.num_joints)?;
            let samples = read_jsonl(&data)?;
            let (train_set, eval_set) = match &eval_data {
                Some(p) => (samples, read_jsonl(p)?),
                None => {
                    let n_eval = (samples.len() as f64 * cfg.eval_fraction).round() as usize;
                    let mut samples = samples;
                    let eval = samples.split_off(samples.len() - n_eval);
                    (samples, eval)
                }
            };
            fs::create_dir_all(&out)?;
            let mut model = RsNet::new(cfg.model.clone(), topology, common.seed)?;
            let mut m = manifest("train", serde_json::to_value(&cfg)?, common.seed);
            m.artifacts.insert("metrics".into(), out.join(METRICS_FILE));
            m.artifacts
                .insert("metrics_csv".into(), out.join("metrics.csv"));
            m.artifacts
                .insert("checkpoint".into(), out.join(CHECKPOINT_FILE));
            write_manifest(&common, &m, Some(&out.join(MANIFEST_FILE)))?;
            let outcome = train(&mut model, &train_set, &eval_set, &cfg.train, Some(&out))?;
            let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
            for r in &outcome.records {
                w.serialize(r)?;
            }
            w.flush()?;
            let last = outcome.last().context("no epochs were run")?;
            println!("{}", serde_json::to_string(last)?);
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            alpha,
            common,
        } => {
            let model = RsNet::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let samples = read_jsonl(&data)?;
            if samples.is_empty() {
                bail!("{}: no samples", data.display());
            }
            let metrics = evaluate(&model, &samples)?;
            let preds = predict_all(&model, &samples)?;
            let scale = model.config.target_scale;
            let mut total = 0.0;
            for (s, p) in samples.iter().zip(&preds) {
                total += loss(
                    &s.target_tensor().scale(1.0 / scale),
                    &p.scale(1.0 / scale),
                    alpha,
                )?;
            }
            let record = MetricsRecord {
                epoch: 0,
                train_loss: total / samples.len() as f64,
                mpjpe_mm: metrics.mpjpe_mm,
                pa_mpjpe_mm: metrics.pa_mpjpe_mm,
                pck_150: metrics.pck_150,
                auc: metrics.auc,
            };
            println!("{}", serde_json::to_string(&record)?);
            write_manifest(
                &common,
                &manifest(
                    "eval",
                    serde_json::json!({ "checkpoint": checkpoint, "data": data, "alpha": alpha }),
                    common.seed,
                ),
                None,
            )
        }
    }
}
