//! `fiberwalk`: train tiny ViTs, explore equivalence classes, render
//! importance maps and decode trajectories back to images.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fiberwalk_core::attribution::{
    corpus_similarity, feature_importance, importance_heatmap, GroundTruth, Normalization,
};
use fiberwalk_core::explore::{
    load_trajectory, perturbation_baseline, run_exploration, save_trajectory, DeltaPolicy, ExplorationConfig,
    FeasibleBounds, Mode, DEFAULT_REINIT_PROB,
};
use fiberwalk_core::geometry::{eigen_split, pullback_metric, DEFAULT_NULL_TOL};
use fiberwalk_core::interpret::{argmax, classify, decode_trajectory, embedding_bounds, split_predictions};
use fiberwalk_core::netcore::{load_model, model_checksum, save_model};
use fiberwalk_core::raster::GrayImage;
use fiberwalk_core::workbench::{
    config_hash, load_idx_prefix, output_root, train_tiny_vit, variance_filter, Dataset, Optimizer, RunManifest,
    TrainConfig, DEFAULT_VARIANCE_THRESHOLD,
};
use fiberwalk_core::{Error, Network, VitConfig};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "fiberwalk", version, about = "Pullback-metric exploration of small vision transformers")]
struct Cli {
    /// Run directory. Defaults to `$FIBERWALK_OUT/<command>-<config hash>`
    /// (or `runs/...` when the variable is unset).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a tiny ViT on an MNIST-style IDX dataset.
    Train(TrainArgs),
    /// Walk along null (simec) or range (simexp) directions, or run the
    /// random pixel baseline.
    Explore(ExploreArgs),
    /// Per-patch importance scores and a heatmap.
    Importance(ImportanceArgs),
    /// Turn a trajectory back into images and classify them.
    Decode(DecodeArgs),
    /// Mean cosine similarity between predicted and human token scores.
    EvalAttribution(EvalArgs),
    /// Eigenvalues of the pullback metric at one input.
    InspectMetric(InspectArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained model manifest.
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Untrained preset (desk, invertible, large).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Input image (binary PGM).
    #[arg(long, conflicts_with = "dataset")]
    input: Option<PathBuf>,
    /// Directory with the MNIST IDX files; picks a test image with `--index`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory with train-/t10k- IDX files (optionally gzipped).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 10_000)]
    train_count: usize,
    #[arg(long, default_value_t = 2_000)]
    test_count: usize,
    /// Defaults to 60 (momentum) or 40 (adam).
    #[arg(long)]
    epochs: Option<usize>,
    /// Defaults to 0.05 (momentum) or 0.01 (adam).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// momentum or adam
    #[arg(long, default_value = "momentum")]
    optimizer: String,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Random translation augmentation, in pixels.
    #[arg(long)]
    max_shift: Option<usize>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args, Debug)]
struct ExploreArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value = "simec")]
    mode: String,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated patch indices allowed to move.
    #[arg(long, value_delimiter = ',')]
    select: Option<Vec<usize>>,
    /// `auto` or a fixed step length.
    #[arg(long, default_value = "auto")]
    delta: String,
    #[arg(long, default_value_t = DEFAULT_NULL_TOL)]
    null_tol: f64,
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    /// Cap to the embedding envelope of this many training images.
    #[arg(long)]
    bounds_count: Option<usize>,
    #[arg(long)]
    project_every_step: bool,
    /// Store points as a binary f32 blob instead of CSV columns.
    #[arg(long)]
    blob: bool,
    /// Baseline noise scale.
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = DEFAULT_REINIT_PROB)]
    reinit_prob: f64,
}

#[derive(Args, Debug)]
struct ImportanceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Pixels per patch cell in the heatmap.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// linear or log
    #[arg(long, default_value = "linear")]
    normalization: String,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// The image the trajectory started from.
    #[command(flatten)]
    input: InputArgs,
    /// Directory written by `explore`.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    bounds_count: Option<usize>,
    /// Decoded images below this pixel variance count as washed out.
    #[arg(long, default_value_t = DEFAULT_VARIANCE_THRESHOLD)]
    variance_threshold: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = DEFAULT_NULL_TOL)]
    null_tol: f64,
}

/// A missing input file; reported with exit code 2 like other usage errors.
#[derive(Debug)]
struct MissingFile(PathBuf);

impl std::fmt::Display for MissingFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no such file: {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingFile(path.to_path_buf()).into())
    }
}

/// Finds `<stem>` or `<stem>.gz` in `dir`.
fn idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(MissingFile(plain).into())
}

fn load_split(dir: &Path, prefix: &str, limit: usize) -> Result<Dataset> {
    let images = idx_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = idx_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    Ok(load_idx_prefix(images, labels, limit)?)
}

struct Loaded {
    net: Network,
    checksum: String,
    /// Training data directory recorded in the model, if any.
    data: Option<PathBuf>,
}

fn load_net(m: &ModelArgs) -> Result<Loaded> {
    match (&m.model, &m.preset) {
        (Some(path), _) => {
            require(path)?;
            let (net, manifest) = load_model(path)?;
            let data = manifest.metadata.get("data").and_then(Value::as_str).map(PathBuf::from);
            Ok(Loaded {
                checksum: manifest.weights.sha256,
                net,
                data,
            })
        }
        (None, Some(name)) => {
            let cfg = VitConfig::preset(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {name:?}")))?;
            let net = cfg.build()?;
            Ok(Loaded {
                checksum: model_checksum(&net),
                net,
                data: None,
            })
        }
        (None, None) => bail!(Error::InvalidArgument("give --model or --preset".into())),
    }
}

fn load_input(a: &InputArgs, side: usize) -> Result<Vec<f64>> {
    let pixels = match (&a.input, &a.dataset) {
        (Some(p), _) => {
            require(p)?;
            let img = GrayImage::read_pgm(p)?;
            if img.width != side || img.height != side {
                bail!(Error::InvalidArgument(format!(
                    "input is {}×{}, the model expects {side}×{side}",
                    img.width, img.height
                )));
            }
            img.pixels
        }
        (None, Some(dir)) => {
            let ds = load_split(dir, "t10k", a.index + 1)?;
            ds.images
                .get(a.index)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("index {} beyond the test set", a.index)))?
        }
        (None, None) => bail!(Error::InvalidArgument("give --input or --dataset".into())),
    };
    Ok(pixels)
}

fn input_json(a: &InputArgs) -> Value {
    json!({ "input": a.input, "dataset": a.dataset, "index": a.index })
}

fn model_json(m: &ModelArgs) -> Value {
    json!({ "model": m.model, "preset": m.preset })
}

fn image_side(net: &Network) -> usize {
    (net.input_dim() as f64).sqrt().round() as usize
}

/// Embedding envelope of the first `count` training images. Pixel-space
/// trajectories are already clamped to `[0, 1]` and need none.
fn bounds_for(loaded: &Loaded, count: Option<usize>, pixel_space: bool) -> Result<Option<FeasibleBounds>> {
    let Some(n) = count.filter(|_| !pixel_space) else { return Ok(None) };
    let dir = loaded
        .data
        .as_ref()
        .context("--bounds-count needs a model trained by `fiberwalk train` (it records its data directory)")?;
    let ds = load_split(dir, "train", n)?;
    Ok(Some(embedding_bounds(&ds.images, &loaded.net)?))
}

/// Output of one subcommand: files written and values for the manifest.
struct Outcome {
    outputs: Vec<PathBuf>,
    model_checksum: Option<String>,
}

struct Plan {
    name: &'static str,
    config: Value,
    seed: Option<u64>,
}

fn plan(cmd: &Command) -> Plan {
    match cmd {
        Command::Train(a) => Plan {
            name: "train",
            config: json!({
                "data": a.data, "preset": a.preset, "train_count": a.train_count, "test_count": a.test_count,
                "epochs": a.epochs, "lr": a.lr, "batch": a.batch, "optimizer": a.optimizer,
                "momentum": a.momentum, "max_shift": a.max_shift, "clip": !a.no_clip,
            }),
            seed: Some(a.seed),
        },
        Command::Explore(a) => Plan {
            name: "explore",
            config: json!({
                "model": model_json(&a.model), "input": input_json(&a.input), "mode": a.mode,
                "iters": a.iters, "select": a.select, "delta": a.delta, "null_tol": a.null_tol,
                "record_every": a.record_every, "bounds_count": a.bounds_count,
                "project_every_step": a.project_every_step, "blob": a.blob, "eta": a.eta,
                "reinit_prob": a.reinit_prob,
            }),
            seed: Some(a.seed),
        },
        Command::Importance(a) => Plan {
            name: "importance",
            config: json!({
                "model": model_json(&a.model), "input": input_json(&a.input),
                "scale": a.scale, "normalization": a.normalization,
            }),
            seed: None,
        },
        Command::Decode(a) => Plan {
            name: "decode",
            config: json!({
                "model": model_json(&a.model), "input": input_json(&a.input), "trajectory": a.trajectory,
                "bounds_count": a.bounds_count, "variance_threshold": a.variance_threshold,
            }),
            seed: None,
        },
        Command::EvalAttribution(a) => Plan {
            name: "eval-attribution",
            config: json!({ "pred": a.pred, "truth": a.truth }),
            seed: None,
        },
        Command::InspectMetric(a) => Plan {
            name: "inspect-metric",
            config: json!({ "model": model_json(&a.model), "input": input_json(&a.input), "null_tol": a.null_tol }),
            seed: None,
        },
    }
}

fn train(a: &TrainArgs, dir: &Path) -> Result<Outcome> {
    let cfg = VitConfig::preset(&a.preset).ok_or_else(|| Error::InvalidArgument(format!("unknown preset {:?}", a.preset)))?;
    require(&a.data)?;
    let train = load_split(&a.data, "train", a.train_count)?;
    let test = load_split(&a.data, "t10k", a.test_count)?;
    let base = match a.optimizer.as_str() {
        "momentum" => TrainConfig {
            optimizer: Optimizer::Momentum { momentum: a.momentum },
            ..TrainConfig::default()
        },
        "adam" => TrainConfig::adam(),
        o => bail!(Error::InvalidArgument(format!("unknown optimizer {o:?}"))),
    };
    let tc = TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        lr: a.lr.unwrap_or(base.lr),
        batch: a.batch,
        seed: a.seed,
        clip_norm: if a.no_clip { None } else { base.clip_norm },
        max_shift: a.max_shift.unwrap_or(base.max_shift),
        ..base
    };
    let net = cfg.build()?;
    let (trained, report) = train_tiny_vit(&net, &train, Some(&test), &tc)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {} loss {:.4} train {:.4} test {:.4}",
            e.epoch,
            e.mean_loss,
            e.train_accuracy,
            e.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    let data = std::fs::canonicalize(&a.data).unwrap_or_else(|_| a.data.clone());
    let model_path = dir.join("model.json");
    let checksum = save_model(
        &trained,
        &model_path,
        json!({ "vit": cfg, "train": tc, "data": data, "test_accuracy": report.test_accuracy }),
    )?;
    let report_path = dir.join("report.json");
    fiberwalk_core::fsio::write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!("test accuracy {}", report.test_accuracy.unwrap_or(f64::NAN));
    Ok(Outcome {
        outputs: vec![model_path.clone(), model_path.with_extension("bin"), report_path],
        model_checksum: Some(checksum),
    })
}

fn explore(a: &ExploreArgs, dir: &Path, config: Value) -> Result<Outcome> {
    let mode: Mode = a.mode.parse()?;
    let loaded = load_net(&a.model)?;
    let net = &loaded.net;
    let img = load_input(&a.input, image_side(net))?;
    let traj = if mode == Mode::Baseline {
        perturbation_baseline(net, &img, a.iters, a.eta, a.reinit_prob, a.seed)?
    } else {
        let mut cfg = ExplorationConfig::new(mode, a.iters, a.seed);
        cfg.null_tol = a.null_tol;
        cfg.delta = match a.delta.as_str() {
            "auto" => DeltaPolicy::Auto,
            d => DeltaPolicy::Fixed(
                d.parse()
                    .map_err(|_| Error::InvalidArgument(format!("--delta must be `auto` or a number, got {d:?}")))?,
            ),
        };
        cfg.selection = a.select.clone();
        cfg.record_every = a.record_every;
        cfg.project_every_step = a.project_every_step;
        cfg.bounds = bounds_for(&loaded, a.bounds_count, false)?;
        run_exploration(net, &net.embed(&img)?, &cfg)?
    };
    save_trajectory(&traj, dir, config, a.blob)?;
    let mut outputs: Vec<PathBuf> = ["trajectory.json", "points.csv", "steps.csv"].iter().map(|f| dir.join(f)).collect();
    if a.blob {
        outputs.push(dir.join("points.f32"));
    }
    println!("{} steps recorded {}", traj.steps.len(), traj.points.len());
    if let Some(e) = &traj.error {
        eprintln!("stopped early at step {}: {} ({})", e.step, e.message, e.tag);
    }
    Ok(Outcome {
        outputs,
        model_checksum: Some(loaded.checksum),
    })
}

fn importance(a: &ImportanceArgs, dir: &Path) -> Result<Outcome> {
    let norm: Normalization = a.normalization.parse()?;
    let loaded = load_net(&a.model)?;
    let img = load_input(&a.input, image_side(&loaded.net))?;
    let map = feature_importance(&loaded.net, &img)?;
    let csv = dir.join("importance.csv");
    map.write_csv(&csv)?;
    let heat = importance_heatmap(&map, norm, a.scale)?;
    let pgm = dir.join("heatmap.pgm");
    heat.write_pgm(&pgm)?;
    println!("heatmap {}x{} lambda_max {}", heat.width, heat.height, map.lambda_max);
    Ok(Outcome {
        outputs: vec![csv, pgm],
        model_checksum: Some(loaded.checksum),
    })
}

fn decode(a: &DecodeArgs, dir: &Path) -> Result<Outcome> {
    require(&a.trajectory)?;
    let loaded = load_net(&a.model)?;
    let net = &loaded.net;
    let original = load_input(&a.input, image_side(net))?;
    let (traj, _) = load_trajectory(&a.trajectory)?;
    let bounds = bounds_for(&loaded, a.bounds_count, traj.from_layer == 0)?;
    let batch = decode_trajectory(net, &traj, &original, bounds.as_ref())?;
    let i_star = argmax(&classify(net, &original)?);
    let split = split_predictions(&batch, i_star)?;
    let img_dir = dir.join("images");
    let mut outputs = batch.write_pgms(&img_dir)?;
    let csv = dir.join("predictions.csv");
    split.write_csv(&csv)?;
    outputs.push(csv);
    let (_, stats) = variance_filter(&batch.images, a.variance_threshold, 0);
    let summary = dir.join("summary.json");
    fiberwalk_core::fsio::write_atomic(
        &summary,
        serde_json::to_string_pretty(&json!({
            "i_star": i_star,
            "images": batch.len(),
            "changed": split.changed.len(),
            "stable": split.stable.len(),
            "variance_filter": {
                "threshold": a.variance_threshold,
                "kept": stats.kept,
                "retention": stats.retention,
            },
        }))?
        .as_bytes(),
    )?;
    outputs.push(summary);
    println!(
        "decoded {} images: {} keep class {i_star}, variance retention {}",
        batch.len(),
        split.stable.len(),
        stats.retention
    );
    Ok(Outcome {
        outputs,
        model_checksum: Some(loaded.checksum),
    })
}

fn eval_attribution(a: &EvalArgs, dir: &Path) -> Result<Outcome> {
    require(&a.pred)?;
    require(&a.truth)?;
    let pred = GroundTruth::read(&a.pred)?;
    let truth = GroundTruth::read(&a.truth)?;
    let (mean, per) = corpus_similarity(&pred, &truth)?;
    let mut csv = String::from("sentence,cosine,degenerate\n");
    for (i, s) in per.iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", s.value, s.degenerate));
    }
    let path = dir.join("similarity.csv");
    fiberwalk_core::fsio::write_atomic(&path, csv.as_bytes())?;
    println!("{mean:?}");
    Ok(Outcome {
        outputs: vec![path],
        model_checksum: None,
    })
}

fn inspect_metric(a: &InspectArgs, dir: &Path) -> Result<Outcome> {
    let loaded = load_net(&a.model)?;
    let net = &loaded.net;
    let img = load_input(&a.input, image_side(net))?;
    let e = net.embed(&img)?;
    let g = pullback_metric(net, &e, net.embed_boundary(), None)?;
    let dec = eigen_split(&g, a.null_tol)?;
    let path = dir.join("eigenvalues.csv");
    fiberwalk_core::fsio::write_atomic(&path, dec.to_csv().as_bytes())?;
    println!("dim {} rank {} lambda_max {}", dec.dim(), dec.rank(), dec.eigenvalues[0]);
    Ok(Outcome {
        outputs: vec![path],
        model_checksum: Some(loaded.checksum),
    })
}

fn execute(cmd: &Command, dir: &Path, config: Value) -> Result<Outcome> {
    match cmd {
        Command::Train(a) => train(a, dir),
        Command::Explore(a) => explore(a, dir, config),
        Command::Importance(a) => importance(a, dir),
        Command::Decode(a) => decode(a, dir),
        Command::EvalAttribution(a) => eval_attribution(a, dir),
        Command::InspectMetric(a) => inspect_metric(a, dir),
    }
}

fn tag_of(err: &anyhow::Error) -> &'static str {
    if err.downcast_ref::<MissingFile>().is_some() {
        "missing_file"
    } else if let Some(e) = err.downcast_ref::<Error>() {
        e.tag()
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let p = plan(&cli.command);
    let dir = cli.out.clone().unwrap_or_else(|| {
        output_root("runs").join(format!("{}-{}", p.name, &config_hash(&p.config)[..12]))
    });
    let mut manifest = RunManifest::start(p.name, args, p.config.clone(), p.seed);
    let result = std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .and_then(|()| execute(&cli.command, &dir, p.config));
    manifest.finish(&Ok(()));
    match &result {
        Ok(o) => {
            for out in &o.outputs {
                manifest.add_output(out);
            }
            manifest.model_checksum = o.model_checksum.clone();
        }
        Err(e) => manifest.status = tag_of(e).to_string(),
    }
    let manifest_path = dir.join("run.json");
    if dir.is_dir() {
        if let Err(e) = manifest.write(&manifest_path) {
            eprintln!("warning: could not write {}: {e}", manifest_path.display());
        }
    }
    match result {
        Ok(_) => {
            eprintln!("run manifest {}", manifest_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let tag = tag_of(&e);
            let message = format!("{e:#}").replace('"', "'");
            eprintln!("error kind={tag} message=\"{message}\"");
            if tag == "missing_file" {
                eprintln!("usage: fiberwalk {} --help", p.name);
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
