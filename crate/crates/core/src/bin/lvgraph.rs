use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lvgraph::checkpoint::{write_atomic, Checkpoint};
use lvgraph::config::RunConfig;
use lvgraph::data::{generate_phantom, load_manifest, synthetic_split, write_dataset, EchoSample, GrayImage, Split};
use lvgraph::export::export_heatmaps;
use lvgraph::labels::{measurements_from_landmarks, LandmarkSet, MeasurementTriple};
use lvgraph::train::{evaluate, prepare_all, MetricsReport, Trainer};
use lvgraph::Exec;

/// Hierarchical graph landmark detection for LV measurements.
///
/// Log verbosity is read from LVGRAPH_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "lvgraph", version)]
struct Cli {
    /// Execution policy: parallel or sequential.
    #[arg(long, global = true)]
    exec: Option<Exec>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset of synthetic phantoms plus manifest.
    MakeSynthetic(SyntheticArgs),
    /// Train from a TOML run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Predict landmarks for a single image.
    Predict(PredictArgs),
}

/// Options for commands that take flags; each can also be given in the
/// `[make_synthetic]`, `[eval]` or `[predict]` table of `--config`.
#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from (overrides `output.resume`).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Substitute ground truth for predictions (pipeline self-check).
    #[arg(long)]
    #[serde(default)]
    oracle: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Pixel spacing; enables the measurement output.
    #[arg(long)]
    spacing_mm: Option<f64>,
    /// Directory for heatmap arrays and overlays.
    #[arg(long)]
    export_heatmaps: Option<PathBuf>,
    /// Resample images whose size differs from the checkpoint.
    #[arg(long)]
    #[serde(default)]
    resize: bool,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

/// Reads `[section]` from a TOML file into `T`.
fn config_section<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>, section: &str) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match table.remove(section) {
        Some(v) => Ok(v
            .try_into()
            .with_context(|| format!("{}: [{section}]", path.display()))?),
        None => Ok(T::default()),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.with_context(|| format!("missing --{flag} (or `{}` in the config file)", flag.replace('-', "_")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LVGRAPH_LOG", "info")).init();
    let cli = Cli::parse();
    let exec = cli.exec.unwrap_or_default();
    let res = match cli.cmd {
        Command::MakeSynthetic(a) => make_synthetic(exec, a),
        Command::Train(a) => train(cli.exec, a),
        Command::Eval(a) => eval(exec, a),
        Command::Predict(a) => predict(exec, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn make_synthetic(exec: Exec, flags: SyntheticArgs) -> anyhow::Result<()> {
    let file: SyntheticArgs = config_section(flags.config.as_deref(), "make_synthetic")?;
    let count = required(flags.count.or(file.count), "count")?;
    let size = required(flags.size.or(file.size), "size")?;
    let seed = flags.seed.or(file.seed).unwrap_or(0);
    let out = required(flags.out.or(file.out), "out")?;
    if out.exists() && std::fs::read_dir(&out)?.next().is_some() {
        bail!("output directory {} exists and is not empty", out.display());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let samples = exec
        .map_range(count, |i| {
            let mut s = generate_phantom(seeds[i], size)?;
            s.id = format!("phantom_{i:05}");
            s.split = synthetic_split(i, count);
            Ok(s)
        })
        .into_iter()
        .collect::<lvgraph::Result<Vec<EchoSample>>>()?;

    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let tmp = tempfile::Builder::new().prefix(".synthetic-").tempdir_in(&parent)?;
    write_dataset(tmp.path(), &samples)?;
    if out.exists() {
        std::fs::remove_dir(&out)?;
    }
    std::fs::rename(tmp.path(), &out).with_context(|| format!("moving dataset to {}", out.display()))?;
    println!("wrote {count} phantoms ({size}x{size}) to {}", out.display());
    Ok(())
}

fn split_samples(samples: Vec<EchoSample>, split: Split) -> Vec<EchoSample> {
    samples.into_iter().filter(|s| s.split == split).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn train(flag: Option<Exec>, args: TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let exec = match (flag, &cfg.exec.policy) {
        (Some(e), _) => e,
        (None, Some(p)) => p.parse().map_err(anyhow::Error::msg)?,
        (None, None) => Exec::default(),
    };
    let samples = load_manifest(&cfg.data.manifest)?;
    let size = cfg.model.image_size;
    let train_set = prepare_all(exec, &split_samples(samples.clone(), Split::Train), size)?;
    let val_set = prepare_all(exec, &split_samples(samples, Split::Val), size)?;
    if train_set.is_empty() {
        bail!("manifest {} has no train records", cfg.data.manifest.display());
    }
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out)?;
    let mut trainer = match args.resume.or(cfg.output.resume.clone()) {
        Some(p) => {
            let ck = Checkpoint::load(&p)?;
            if ck.config.model != cfg.model {
                bail!("checkpoint {} was trained with a different model config", p.display());
            }
            let mut t = Trainer::resume(ck, exec)?;
            t.config = cfg.train_config();
            log::info!("resuming at step {} epoch {}", t.step_count(), t.epoch);
            t
        }
        None => Trainer::new(cfg.train_config(), exec)?,
    };
    log::info!(
        "{} train / {} val samples, {} parameters, {}",
        train_set.len(),
        val_set.len(),
        trainer.model.params.scalar_count(),
        lvgraph::train::platform_tag(exec)
    );
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("train_log.jsonl"))?;
    trainer.checkpoint().save(&out.join("last.ckpt"))?;
    if trainer.epoch == 0 {
        trainer.best_checkpoint().save(&out.join("best.ckpt"))?;
    }
    trainer.fit(&train_set, &val_set, |rec, t| {
        writeln!(log_file, "{}", serde_json::to_string(rec)?)?;
        log_file.flush()?;
        t.checkpoint().save(&out.join("last.ckpt"))?;
        if rec.best {
            t.best_checkpoint().save(&out.join("best.ckpt"))?;
        }
        Ok(())
    })?;
    println!("trained to step {} (epoch {})", trainer.step_count(), trainer.epoch);
    if val_set.is_empty() {
        println!("no validation records; best.ckpt holds the final parameters");
        return Ok(());
    }
    let best = Checkpoint::load(&out.join("best.ckpt"))?.model()?;
    let (report, _) = evaluate(&best, exec, &val_set, false)?;
    println!("validation metrics (best checkpoint):\n{report}");
    write_json(&out.join("val_metrics.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    split: Split,
    oracle: bool,
    metrics: &'a MetricsReport,
}

fn eval(exec: Exec, flags: EvalArgs) -> anyhow::Result<()> {
    let file: EvalArgs = config_section(flags.config.as_deref(), "eval")?;
    let ckpt_path = required(flags.checkpoint.or(file.checkpoint), "checkpoint")?;
    let manifest = required(flags.manifest.or(file.manifest), "manifest")?;
    let split: Split = flags.split.or(file.split).unwrap_or_else(|| "test".into()).parse()?;
    let oracle = flags.oracle || file.oracle;
    let json = flags.json.or(file.json);

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ckpt.model().context("checkpoint does not match its own config")?;
    let samples = split_samples(load_manifest(&manifest)?, split);
    if samples.is_empty() {
        bail!("split {split} of {} is empty", manifest.display());
    }
    let prepared = prepare_all(exec, &samples, model.config.image_size)?;
    let (report, _) = evaluate(&model, exec, &prepared, oracle)?;
    println!("{report}");
    if let Some(p) = json {
        write_json(
            &p,
            &EvalOutput {
                checkpoint: &ckpt_path,
                split,
                oracle,
                metrics: &report,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictOutput {
    /// `(x, y)` per landmark in the input frame.
    landmarks_xy: [[f64; 2]; 4],
    measurements: Option<MeasurementTriple>,
}

fn predict(exec: Exec, flags: PredictArgs) -> anyhow::Result<()> {
    let file: PredictArgs = config_section(flags.config.as_deref(), "predict")?;
    let ckpt_path = required(flags.checkpoint.or(file.checkpoint), "checkpoint")?;
    let image_path = required(flags.image.or(file.image), "image")?;
    let spacing = flags.spacing_mm.or(file.spacing_mm);
    let export = flags.export_heatmaps.or(file.export_heatmaps);
    let resize = flags.resize || file.resize;
    let json = flags.json.or(file.json);

    let model = Checkpoint::load(&ckpt_path)?.model()?;
    let image = GrayImage::load(&image_path)?;
    let s = model.config.image_size;
    let (h, w) = (image.height, image.width);
    if (h, w) != (s, s) && !resize {
        bail!("image is {h}x{w} but the checkpoint expects {s}x{s}; pass --resize to resample");
    }
    let input = image.resize(s, s);
    let pred = model.predict_landmarks(exec, &model.image_map(&input.data, s, s)?)?;
    let xy = pred.points.map(|[x, y]| [x * w as f64 / s as f64, y * h as f64 / s as f64]);
    for (i, p) in xy.iter().enumerate() {
        println!("p{} x={:.3} y={:.3}", i + 1, p[0], p[1]);
    }
    let measurements = match spacing {
        Some(sp) => {
            if h != w {
                bail!("measurements need an isotropic frame, got {h}x{w}");
            }
            let m = measurements_from_landmarks(&LandmarkSet::from_xy(&xy, sp, h, w));
            println!("IVS {:.3} mm, LVID {:.3} mm, LVPW {:.3} mm", m.ivs_mm, m.lvid_mm, m.lvpw_mm);
            Some(m)
        }
        None => None,
    };
    if let Some(dir) = export {
        let summary = export_heatmaps(&model, exec, &image, &dir)?;
        println!("heatmaps written to {}", summary.npz.display());
    }
    if let Some(p) = json {
        write_json(
            &p,
            &PredictOutput {
                landmarks_xy: xy,
                measurements,
            },
        )?;
    }
    Ok(())
}
