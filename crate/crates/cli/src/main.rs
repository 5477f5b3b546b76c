use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lacoste::benchmark::{evaluate_model, run_benchmark, BenchmarkConfig, Variant};
use lacoste::checkpoint::load_checkpoint;
use lacoste::lacls::{lacls_accuracy, train_lacls_offline, LaClassifier};
use lacoste::pipeline::{
    evaluate_prediction_dir, lacls_samples, train_model, write_clip_predictions, EnsembleConfig,
    Lacoste, MemoryBank, PipelineConfig,
};
use lacoste::synthdata::{load_dataset, serialize_dataset, Dataset, SceneConfig};

#[derive(Parser)]
#[command(
    name = "lacoste",
    version,
    about = "Stereo video instrument segmentation on synthetic clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Alpha,
    Components,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Index of the first clip (lets train/val splits share a seed).
        #[arg(long, default_value_t = 0)]
        first: usize,
        /// Omit right views.
        #[arg(long)]
        mono: bool,
    },
    /// Train the frame step and set classifier.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the location-agnostic classifier on ground-truth patches and add it to a checkpoint.
    TrainLacls {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run three-step inference and write per-frame predictions.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction directory against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablations on a freshly generated benchmark.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Benchmark configuration JSON; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            seed,
            clips,
            classes,
            first,
            mono,
        } => {
            let scene = SceneConfig {
                seed,
                num_classes: classes,
                stereo: !mono,
                ..SceneConfig::default()
            };
            let ds = Dataset::generate(&scene, first, clips)?;
            serialize_dataset(&ds.clips, &scene, &out)?;
            println!("wrote {} clips to {}", ds.clips.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = pipeline_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let mut model = Lacoste::new(cfg.clone(), cfg.train.seed)?;
            let steps = cfg.train.steps;
            train_model(&mut model, &ds.clips, |step, l| {
                if (step + 1) % 50 == 0 || step + 1 == steps {
                    eprintln!(
                        "step {}/{steps}: total {:.4} baseline {:.4} sc {:.4} lc {:.4} ida {:.4}",
                        step + 1,
                        l.total,
                        l.baseline,
                        l.sc,
                        l.lc,
                        l.ida
                    );
                }
            })?;
            model.save(&out)?;
            println!("saved checkpoint to {}", out.display());
        }
        Command::TrainLacls { data, out, config } => {
            let ds = load_dataset(&data)?;
            let existing = out.join("manifest.json").exists();
            let cfg = match (&config, existing) {
                (Some(p), _) => PipelineConfig::load(p)?,
                (None, true) => Lacoste::load(&out)?.cfg,
                (None, false) => PipelineConfig::default(),
            };
            let samples = lacls_samples(&ds.clips, &cfg.lacls, 1)?;
            let (lc, store, losses) = train_lacls_offline(&samples, &cfg.lacls, &cfg.lacls_train)?;
            eprintln!(
                "trained on {} patches; final loss {:.4}, training accuracy {:.3}",
                samples.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                lacls_accuracy(&lc, &store, &samples)?
            );
            let mut model = if existing {
                Lacoste::load(&out)?
            } else {
                Lacoste::new(cfg, 0)?
            };
            model.set_lacls(lc, store);
            model.save(&out)?;
            println!("saved checkpoint to {}", out.display());
        }
        Command::Infer { data, ckpt, out } => {
            let ds = load_dataset(&data)?;
            let ck = load_checkpoint(&ckpt)?;
            ck.component("qbs")
                .context("checkpoint has no trained frame step")?;
            let cfg: PipelineConfig = serde_json::from_value(ck.config.clone())?;
            let top_k = cfg.inference.top_k;
            let model = Lacoste::from_checkpoint(cfg, &ck)?;
            let bank = MemoryBank::new(model.cfg.inference.memory_capacity);
            let bank = model.cfg.inference.use_memory_bank.then_some(&bank);
            for clip in &ds.clips {
                let preds = model.infer_clip(clip, bank)?;
                write_clip_predictions(&out, &clip.name, &preds, top_k)?;
            }
            println!(
                "wrote predictions for {} clips to {}",
                ds.clips.len(),
                out.display()
            );
        }
        Command::Eval { pred, gt, out } => {
            let ds = load_dataset(&gt)?;
            let report = evaluate_prediction_dir(&pred, &ds)?;
            lacoste::io::write_json(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { sweep, config, out } => {
            let cfg: BenchmarkConfig = match &config {
                Some(p) => lacoste::io::read_json(p)?,
                None => BenchmarkConfig::default(),
            };
            let log = |s: &str| eprintln!("{s}");
            let report = match sweep {
                Sweep::Components => {
                    serde_json::to_value(run_benchmark(&cfg, &Variant::ALL, log)?)?
                }
                Sweep::Alpha => alpha_sweep(&cfg)?,
            };
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => lacoste::io::write_json(&p, &report)?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

/// Train the full model once, then score a grid of ensemble weights.
fn alpha_sweep(cfg: &BenchmarkConfig) -> Result<serde_json::Value> {
    let train = Dataset::generate(&cfg.scene, 0, cfg.train_clips)?.clips;
    let val = Dataset::generate(&cfg.scene, cfg.train_clips, cfg.val_clips)?.clips;
    let pc = cfg.variant_config(Variant::Full);
    let samples = lacls_samples(&train, &pc.lacls, cfg.lacls_frame_stride)?;
    let (lc, store, _): (LaClassifier, _, _) =
        train_lacls_offline(&samples, &pc.lacls, &pc.lacls_train)?;
    let mut model = Lacoste::new(pc, cfg.seed)?;
    model.set_lacls(lc, store);
    train_model(&mut model, &train, |_, _| {})?;
    let grid = [
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
        (0.5, 0.5, 0.0),
        (0.5, 0.0, 0.5),
        (0.0, 0.5, 0.5),
        (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    ];
    let mut rows = Vec::new();
    for (b, s, a) in grid {
        model.cfg.ensemble = EnsembleConfig {
            alpha_b: b,
            alpha_s: s,
            alpha_a: a,
        };
        let e = evaluate_model(&model, &val)?;
        eprintln!(
            "alpha ({b:.2}, {s:.2}, {a:.2}): mcIoU {:.2}, accuracy {:.3}",
            100.0 * e.metrics.mcIoU,
            e.accuracy.ensemble
        );
        rows.push(serde_json::json!({ "alpha": [b, s, a], "evaluation": e }));
    }
    Ok(serde_json::Value::Array(rows))
}
