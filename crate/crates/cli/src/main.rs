use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use evpatch::bench::{preprocess_timed, run_bench};
use evpatch::cost_model::{model_macs, CountingMode};
use evpatch::events_io::{read_dataset_dir, read_recording_file, write_dataset_dir, EventRecording, SynthCorpus};
use evpatch::patches::{active_histogram, select_active, ActiveCount};
use evpatch::train::{evaluate, fit, Dataset, ThresholdMode, TrainConfig, Trainer, METRICS_HEADER};
use evpatch::vit::{load_checkpoint_file, predict, save_checkpoint_file, ForwardProfile};
use evpatch::voxel::{write_grid_dump, Preprocess, DEFAULT_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH};
use evpatch::{ShapeClass, ViTConfig, VisionTransformer};

#[derive(Parser)]
#[command(name = "evpatch", version, about = "Sparse-patch transformer pipeline for event-camera recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Base,
    Toy,
}

impl Preset {
    fn config(self) -> ViTConfig {
        match self {
            Preset::Base => ViTConfig::base(),
            Preset::Toy => ViTConfig::toy(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusPreset {
    Toy,
    Bench,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize one recording into a normalized 192x240xC grid dump.
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CHANNELS)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
        /// Sensor width for text recordings.
        #[arg(long, default_value_t = 240)]
        width: usize,
        /// Sensor height for text recordings.
        #[arg(long, default_value_t = 180)]
        height: usize,
    },
    /// Active-patch histogram and mean active fraction over a dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        hist_out: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        preset: Preset,
        #[arg(long, default_value_t = 1)]
        bin_width: usize,
    },
    /// Evaluate a checkpoint over a range of thresholds.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Range as lo:hi:step.
        #[arg(long, default_value = "0.0:0.7:0.05")]
        thresholds: String,
        #[arg(long)]
        out: PathBuf,
        /// Also time each threshold with this many repetitions.
        #[arg(long)]
        bench_repeat: Option<usize>,
    },
    /// Train a model from scratch on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// fixed:<τ> or mixed.
        #[arg(long, default_value = "fixed:0.0")]
        mode: String,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to the checkpoint path with .metrics.csv.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Keeps the epoch with the best accuracy on this dataset.
        #[arg(long)]
        val_dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        augment: bool,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
    /// Single-threaded forward throughput at one threshold.
    Bench {
        #[arg(long, required_unless_present = "random_base")]
        checkpoint: Option<PathBuf>,
        /// Use randomly initialized base-config weights.
        #[arg(long, conflicts_with = "checkpoint")]
        random_base: bool,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Classify one recording.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.35)]
        threshold: f64,
        /// Sensor width for text recordings.
        #[arg(long, default_value_t = 240)]
        width: usize,
        /// Sensor height for text recordings.
        #[arg(long, default_value_t = 180)]
        height: usize,
    },
    /// Write a labeled synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        preset: CorpusPreset,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Voxelize {
            input,
            channels,
            out,
            width,
            height,
        } => voxelize(&input, channels, &out, width, height),
        Command::Stats {
            dataset,
            threshold,
            hist_out,
            preset,
            bin_width,
        } => stats(&dataset, threshold, &hist_out, preset.config(), bin_width),
        Command::Sweep {
            dataset,
            checkpoint,
            thresholds,
            out,
            bench_repeat,
        } => sweep(&dataset, &checkpoint, &thresholds, &out, bench_repeat),
        Command::Train {
            dataset,
            mode,
            epochs,
            seed,
            out,
            metrics,
            val_dataset,
            lr,
            augment,
            preset,
        } => {
            let metrics = metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
            let cfg = TrainConfig {
                epochs,
                optimizer: evpatch::train::AdamWConfig {
                    lr,
                    ..Default::default()
                },
                threshold_mode: parse_mode(&mode)?,
                seed,
                augment,
            };
            train(&dataset, val_dataset.as_deref(), cfg, preset.config(), &out, &metrics)
        }
        Command::Bench {
            checkpoint,
            random_base,
            dataset,
            threshold,
            repeat,
            seed,
        } => {
            let model = match checkpoint {
                Some(path) if !random_base => load_model(&path)?,
                _ => VisionTransformer::init(ViTConfig::base(), seed)?,
            };
            bench(&model, &dataset, threshold, repeat)
        }
        Command::Infer {
            checkpoint,
            input,
            threshold,
            width,
            height,
        } => infer(&checkpoint, &input, threshold, width, height),
        Command::Synth {
            out,
            preset,
            per_class,
            seed,
        } => {
            let corpus = match preset {
                CorpusPreset::Toy => SynthCorpus::toy(per_class, seed),
                CorpusPreset::Bench => SynthCorpus::bench(per_class, seed),
            };
            let recs = corpus.generate()?;
            let names: Vec<&str> = ShapeClass::ALL.iter().map(|c| c.name()).collect();
            write_dataset_dir(&out, &recs, &names)?;
            println!("wrote {} recordings to {}", recs.len(), out.display());
            Ok(())
        }
    }
}

/// Parses `fixed:<τ>` or `mixed`.
fn parse_mode(s: &str) -> Result<ThresholdMode> {
    if s == "mixed" {
        return Ok(ThresholdMode::mixed());
    }
    let t = s
        .strip_prefix("fixed:")
        .with_context(|| format!("mode must be fixed:<threshold> or mixed, got {s:?}"))?;
    let t: f64 = t.parse().with_context(|| format!("bad threshold in {s:?}"))?;
    ensure!((0.0..=1.0).contains(&t), "threshold {t} outside [0, 1]");
    Ok(ThresholdMode::Fixed(t))
}

/// Expands `lo:hi:step` into an ascending list that includes `hi` when it
/// lies on the grid.
fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("range must be lo:hi:step, got {s:?}"))?;
    let [lo, hi, step] = parts[..] else {
        bail!("range must be lo:hi:step, got {s:?}");
    };
    ensure!(step > 0.0, "step must be positive");
    ensure!(0.0 <= lo && lo <= hi && hi <= 1.0, "range must satisfy 0 <= lo <= hi <= 1");
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

fn load_model(path: &Path) -> Result<VisionTransformer> {
    let (cfg, params) =
        load_checkpoint_file(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(VisionTransformer::new(cfg, params)?)
}

fn load_dataset(dir: &Path) -> Result<(Vec<String>, Vec<EventRecording>)> {
    let (names, recs) = read_dataset_dir(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    ensure!(!recs.is_empty(), "dataset {} has no recordings", dir.display());
    Ok((names, recs))
}

fn preprocess_for(cfg: &ViTConfig) -> Preprocess {
    Preprocess {
        channels: cfg.channels,
        frame_height: cfg.frame_height,
        frame_width: cfg.frame_width,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn voxelize(input: &Path, channels: usize, out: &Path, width: usize, height: usize) -> Result<()> {
    ensure!(channels >= 2, "--channels must be at least 2, got {channels}");
    let rec = read_recording_file(input, width, height).with_context(|| format!("reading {}", input.display()))?;
    let prep = Preprocess {
        channels,
        frame_height: FRAME_HEIGHT,
        frame_width: FRAME_WIDTH,
    };
    let grid = prep.normalized_frame(&rec)?;
    let mut w = create(out)?;
    write_grid_dump(&grid, &mut w)?;
    w.flush()?;
    Ok(())
}

fn stats(dataset: &Path, threshold: f64, hist_out: &Path, cfg: ViTConfig, bin_width: usize) -> Result<()> {
    ensure!(bin_width > 0, "--bin-width must be positive");
    let (_, recs) = load_dataset(dataset)?;
    let prep = preprocess_for(&cfg);
    let counts = recs
        .iter()
        .map(|r| {
            let frame = prep.normalized_frame(r)?;
            Ok(ActiveCount::from(&select_active(&frame, cfg.patch_size, threshold)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let hist = active_histogram(&counts, bin_width);
    let mut w = create(hist_out)?;
    hist.write_csv(&mut w)?;
    w.flush()?;
    let mean = hist.mean_active_fraction.unwrap_or(0.0);
    println!("recordings,{}", counts.len());
    println!("mean_active_fraction,{mean}");
    Ok(())
}

fn sweep(dataset: &Path, checkpoint: &Path, thresholds: &str, out: &Path, bench_repeat: Option<usize>) -> Result<()> {
    let thresholds = parse_range(thresholds)?;
    let model = load_model(checkpoint)?;
    let cfg = *model.config();
    let (names, recs) = load_dataset(dataset)?;
    ensure!(
        names.len() <= cfg.num_classes,
        "dataset has {} classes, checkpoint has {}",
        names.len(),
        cfg.num_classes
    );
    let data = Dataset::from_recordings(&recs, &preprocess_for(&cfg), cfg.num_classes)?;
    let frames: Vec<_> = data.samples().iter().map(|s| s.normalized.clone()).collect();
    let mut w = create(out)?;
    writeln!(w, "threshold,mean_active_fraction,mean_macs,accuracy,frames_per_second")?;
    for t in thresholds {
        let m = evaluate(&model, &data, t)?;
        let fps = match bench_repeat {
            Some(r) => format!("{}", run_bench(&model, &frames, t, r)?.median_fps),
            None => String::new(),
        };
        writeln!(w, "{t},{},{},{},{fps}", m.mean_active_fraction, m.mean_macs, m.accuracy)?;
    }
    w.flush()?;
    Ok(())
}

fn train(
    dataset: &Path,
    val_dataset: Option<&Path>,
    train_cfg: TrainConfig,
    preset: ViTConfig,
    out: &Path,
    metrics: &Path,
) -> Result<()> {
    let (names, recs) = load_dataset(dataset)?;
    let cfg = ViTConfig {
        num_classes: names.len(),
        ..preset
    };
    let prep = preprocess_for(&cfg);
    let train_set = Dataset::from_recordings(&recs, &prep, cfg.num_classes)?;
    let val_set = match val_dataset {
        Some(dir) => {
            let (val_names, val_recs) = load_dataset(dir)?;
            ensure!(val_names == names, "validation classes {val_names:?} differ from {names:?}");
            Some(Dataset::from_recordings(&val_recs, &prep, cfg.num_classes)?)
        }
        None => None,
    };
    let eval_threshold = match train_cfg.threshold_mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Mixed { .. } => 0.35,
    };
    let seed = train_cfg.seed;
    let mut trainer = Trainer::new(VisionTransformer::init(cfg, seed)?, train_cfg)?;
    let mut w = create(metrics)?;
    writeln!(w, "{METRICS_HEADER}")?;
    let outcome = fit(&mut trainer, &train_set, val_set.as_ref(), eval_threshold, Some(&mut w))?;
    w.flush()?;
    save_checkpoint_file(&cfg, outcome.model.params(), out)?;
    let m = evaluate(&outcome.model, &train_set, eval_threshold)?;
    println!("epoch,{}", outcome.epoch);
    println!("train_accuracy,{}", m.accuracy);
    if let Some(v) = outcome.val_accuracy {
        println!("val_accuracy,{v}");
    }
    Ok(())
}

fn bench(model: &VisionTransformer, dataset: &Path, threshold: f64, repeat: usize) -> Result<()> {
    let (_, recs) = load_dataset(dataset)?;
    let (frames, prep_time) = preprocess_timed(&recs, &preprocess_for(model.config()))?;
    let r = run_bench(model, &frames, threshold, repeat)?;
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "threshold,frames,repeats,median_fps,mean_active_fraction,mean_macs,preprocess_seconds"
    )?;
    writeln!(
        out,
        "{},{},{},{},{},{},{}",
        r.threshold,
        r.frames,
        r.repeats,
        r.median_fps,
        r.mean_active_fraction,
        r.mean_macs,
        prep_time.as_secs_f64()
    )?;
    Ok(())
}

fn infer(checkpoint: &Path, input: &Path, threshold: f64, width: usize, height: usize) -> Result<()> {
    let model = load_model(checkpoint)?;
    let cfg = *model.config();
    let rec = read_recording_file(input, width, height)
        .with_context(|| format!("reading {}", input.display()))?;
    let frame = preprocess_for(&cfg).normalized_frame(&rec)?;
    let patches = select_active(&frame, cfg.patch_size, threshold)?;
    let logits = model.forward(&patches, &mut ForwardProfile::default())?;
    println!("class,{}", predict(&logits));
    println!("patches,{}", patches.len());
    println!("macs,{}", model_macs(patches.len() as u64, &cfg, CountingMode::Encoder));
    Ok(())
}
