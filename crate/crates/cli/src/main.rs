use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use plumeseg::checkpoint::latest_in;
use plumeseg::config::RunConfig;
use plumeseg::data::{load_frames, write_clip, write_manifest, ManifestEntry, Split, MANIFEST_FILE};
use plumeseg::eval::{ablate, ablation_csv, ablation_table, evaluate_model, predict_segment, write_probability_maps};
use plumeseg::model::infer_sequence;
use plumeseg::parallel::Execution;
use plumeseg::synth::{generate_clip, Category, PlumeSceneConfig};
use plumeseg::train::{load_model, train, training_segments};
use plumeseg::viz::write_panels;
use plumeseg::{Error, Result};

/// Gas plume video segmentation: synthetic data, training and evaluation.
#[derive(Parser)]
#[command(name = "plumeseg", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set model.encoder.widths=[8,16,32,32]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Dataset root (same as `--set data.root=...`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic plume videos with exact masks and a manifest.
    GenData {
        /// Output dataset root.
        #[arg(short, long)]
        out: PathBuf,
        /// Videos per category.
        #[arg(long, default_value_t = 2)]
        per_category: usize,
        /// Of those, how many go to the test split.
        #[arg(long, default_value_t = 1)]
        test_per_category: usize,
        #[arg(long, default_value_t = 150)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these categories (comma separated).
        #[arg(long, value_delimiter = ',')]
        categories: Vec<Category>,
        /// Render this scene (TOML) instead of the category presets; its
        /// seed is advanced per video.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Train, writing one checkpoint per epoch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split and write CSV reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint file, or a directory holding `epoch-*.ckpt` files.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report directory.
        #[arg(short, long, default_value = "reports")]
        out: PathBuf,
    },
    /// Write probability maps for a directory of frames.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Video directory (with a `frames/` subdirectory) or a frame directory.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write input | ground truth | prediction panels.
    Visualize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Only this video.
        #[arg(long)]
        video: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train and evaluate the four module configurations and compare them.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write `ablation.csv`.
        #[arg(short, long, default_value = "reports")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::GenData {
            out,
            per_category,
            test_per_category,
            frames,
            height,
            width,
            seed,
            categories,
            scene,
        } => gen_data(
            &out,
            GenOptions {
                per_category,
                test_per_category,
                frames,
                height,
                width,
                seed,
                categories,
                scene,
            },
        ),
        Command::Train { cfg, resume } => {
            let config = resolve_config(&cfg, None)?;
            let segments = training_segments(&config, exec)?;
            info!(
                "training on {} segments ({} frames) for {} epochs",
                segments.len(),
                segments.iter().map(|s| s.len()).sum::<usize>(),
                config.epochs
            );
            let trainer = train(config, &segments, resume.as_deref(), exec, |r| {
                println!(
                    "epoch {:>4}  loss {:.6}  -> {}",
                    r.stats.epoch,
                    r.stats.mean_loss,
                    r.checkpoint.display()
                );
            })?;
            info!("finished after {} steps", trainer.steps());
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            out,
        } => {
            let ckpt = checkpoint_file(&checkpoint)?;
            let (snapshot, model, ps) = load_model(&ckpt)?;
            let config = resolve_config(&cfg, Some(&snapshot))?;
            let segments = config.load_split(split.split(), exec)?;
            let eval = evaluate_model(&model, &ps, config.input_dims(), &segments, exec)?;
            let name = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            eval.write(&out, name)?;
            print!("{}", eval.table(name));
            info!("reports written to {}", out.display());
            Ok(())
        }
        Command::Predict { checkpoint, input, out } => {
            let (config, model, ps) = load_model(&checkpoint_file(&checkpoint)?)?;
            let (frames, indices) = load_frames(&input)?;
            let size = config.input_dims();
            let (h, w) = (frames[0].height(), frames[0].width());
            let probs: Vec<_> = infer_sequence(&model, &ps, &frames, size, exec)?
                .into_iter()
                .map(|p| plumeseg::tensor::resize_bilinear(&p, h, w))
                .collect();
            let files = write_probability_maps(&probs, &indices, &out)?;
            println!("wrote {} probability maps to {}", files.len(), out.display());
            Ok(())
        }
        Command::Visualize {
            cfg,
            checkpoint,
            split,
            video,
            out,
        } => {
            let (snapshot, model, ps) = load_model(&checkpoint_file(&checkpoint)?)?;
            let config = resolve_config(&cfg, Some(&snapshot))?;
            let mut segments = config.load_split(split.split(), exec)?;
            if let Some(v) = &video {
                segments.retain(|s| &s.meta.id == v);
                if segments.is_empty() {
                    return Err(Error::Data(format!("video `{v}` not found")));
                }
            }
            let mut count = 0;
            for seg in &segments {
                let probs = predict_segment(&model, &ps, seg, config.input_dims())?;
                count += write_panels(seg, &probs, &out.join(&seg.meta.id))?.len();
            }
            println!("wrote {count} panels under {}", out.display());
            Ok(())
        }
        Command::Ablate { cfg, out } => {
            let config = resolve_config(&cfg, None)?;
            let train_set = config.load_split(Some(Split::Train), exec)?;
            let test_set = config.load_split(Some(Split::Test), exec)?;
            let rows = ablate(&config, &train_set, &test_set, exec, |name, r| {
                info!("{name}: epoch {} loss {:.6}", r.stats.epoch, r.stats.mean_loss);
            })?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let csv = out.join("ablation.csv");
            fs::write(&csv, ablation_csv(&rows)).map_err(|e| io_err(&csv, e))?;
            print!("{}", ablation_table(&rows));
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Config file (or `base`, or defaults), then `--data`, then `--set`
/// overrides. With a checkpoint `base`, the model part may not change.
fn resolve_config(args: &ConfigArgs, base: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(root) = &args.data {
        cfg.data.root = root.clone();
    }
    cfg.apply_overrides(&args.overrides)?;
    if let Some(b) = base {
        if cfg.model != b.model || cfg.switches != b.switches {
            return Err(Error::Config(
                "model settings differ from those stored in the checkpoint".into(),
            ));
        }
    }
    Ok(cfg)
}

fn checkpoint_file(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest_in(path)?.ok_or_else(|| Error::Data(format!("no checkpoints in {}", path.display())))
    } else {
        Ok(path.to_path_buf())
    }
}

struct GenOptions {
    per_category: usize,
    test_per_category: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    categories: Vec<Category>,
    scene: Option<PathBuf>,
}

fn gen_data(out: &Path, o: GenOptions) -> Result<()> {
    if o.per_category == 0 || o.frames == 0 {
        return Err(Error::Config("need at least one video and one frame".into()));
    }
    if o.test_per_category > o.per_category {
        return Err(Error::Config("more test videos than videos per category".into()));
    }
    let scene = match &o.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Some(PlumeSceneConfig::from_toml(&text)?)
        }
        None => None,
    };
    let categories = if o.categories.is_empty() {
        Category::ALL.to_vec()
    } else {
        o.categories.clone()
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut entries = Vec::new();
    for (ci, cat) in categories.iter().enumerate() {
        for k in 0..o.per_category {
            let seed = o.seed.wrapping_mul(1_000_003).wrapping_add((ci * 1000 + k) as u64);
            let cfg = match &scene {
                Some(s) => PlumeSceneConfig { seed, ..s.clone() },
                None => cat.preset(o.height, o.width, seed),
            };
            let category = if scene.is_some() {
                Category::classify(cfg.distance, cfg.is_complex()).unwrap_or(*cat)
            } else {
                *cat
            };
            let mut clip = generate_clip(&cfg, o.frames)?;
            clip.meta.id = format!("{category}-{seed:06}");
            write_clip(out, &clip)?;
            let split = if k >= o.per_category - o.test_per_category {
                Split::Test
            } else {
                Split::Train
            };
            info!("{} ({split})", clip.meta.id);
            entries.push(ManifestEntry {
                id: clip.meta.id.clone(),
                category,
                split,
            });
        }
    }
    write_manifest(out, &entries)?;
    println!(
        "wrote {} videos of {} frames and {}",
        entries.len(),
        o.frames,
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}
