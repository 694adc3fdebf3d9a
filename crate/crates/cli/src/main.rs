//! Command-line harness for training, evaluation, the augmentation matrix,
//! anomaly-synthesis previews and dataset tooling.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/ingestion error,
//! 4 training divergence, 1 anything else.

use attnad::data::{build_manifest, generate_shapes_dataset, SyntheticShapesConfig};
use attnad::error::{PipelineError, TrainError};
use attnad::pipeline::{
    evaluate_from_manifest, run_augmentation_matrix, run_two_stage, synth_preview, MatrixConfig,
    RunConfig, EXIT_CONFIG_ERROR, EXIT_DATA_ERROR, EXIT_DIVERGENCE,
};
use attnad::synth::AugmentationConfig;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "attnad",
    about = "Attention-guided two-stage anomaly detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the two-stage training pipeline from a JSON run config.
    Train(TrainArgs),
    /// Re-evaluate a finished run from its manifest.
    Eval(EvalArgs),
    /// Train one detector per augmentation condition and tabulate AUROC.
    Matrix(MatrixArgs),
    /// Anomaly-synthesis tooling.
    Synth(SynthArgs),
    /// Dataset tooling.
    Data(DataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to a RunConfig JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Resume from the latest checkpoints in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Path to a run manifest (manifest.json) produced by `train`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    /// Path to a MatrixConfig JSON file ({"base": RunConfig, "conditions": [..]}).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(subcommand)]
    cmd: SynthCmd,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write side-by-side (input | anomaly | mask) PNG triplets and a JSONL
    /// manifest of seeds, recipes and mask statistics.
    Preview {
        #[arg(long, default_value = "synth_preview")]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas size of the generated source images.
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        /// Optional augmentation config JSON; defaults otherwise.
        #[arg(long)]
        augmentation: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[command(subcommand)]
    cmd: DataCmd,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Scan an image tree (<root>/{train,test}/<class>/*) and write a
    /// checksummed manifest.
    BuildManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        name: String,
        /// Square resize target (multiple of 16).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize the synthetic shapes dataset as an MVTec-style tree.
    MakeShapes {
        #[arg(long)]
        out: PathBuf,
        /// Optional SyntheticShapesConfig JSON; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, PipelineError> {
    let s = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| {
        PipelineError::Config(attnad::error::ConfigError::Parse(format!(
            "{}: {e}",
            path.display()
        )))
    })
}

fn make_shapes(out: &PathBuf, cfg: &SyntheticShapesConfig) -> Result<(), PipelineError> {
    use attnad::viz::save_image_png;
    let ds = generate_shapes_dataset::<attnad::Real>(cfg);
    let write_split = |split: &attnad::data::DataSplit<attnad::Real>,
                       is_train: bool|
     -> Result<(), PipelineError> {
        for i in 0..split.len() {
            let class = split.labels[i] as usize;
            let class_name = &ds.class_names[class];
            let sub = if is_train { "train" } else { "test" };
            let img_path = out
                .join(sub)
                .join(class_name)
                .join(format!("{i:05}.png"));
            save_image_png(&split.images, i, &img_path)?;
            if !is_train && class != 0 {
                // ground-truth mask: white marks the defect
                let mask = split.masks.as_ref().expect("shapes test split has masks");
                let m = mask.single(i);
                let (h, w) = (m.height(), m.width());
                let mut img = image::GrayImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let defect = m.data()[[0, 0, y, x]] == 0.0;
                        img.put_pixel(x as u32, y as u32, image::Luma([if defect { 255 } else { 0 }]));
                    }
                }
                let mask_path = out
                    .join("ground_truth")
                    .join(class_name)
                    .join(format!("{i:05}_mask.png"));
                std::fs::create_dir_all(mask_path.parent().unwrap())
                    .map_err(|e| PipelineError::io(&mask_path, e))?;
                img.save(&mask_path)
                    .map_err(|e| PipelineError::io(&mask_path, std::io::Error::other(e.to_string())))?;
            }
        }
        Ok(())
    };
    write_split(&ds.train, true)?;
    write_split(&ds.test, false)?;
    let cfg_path = out.join("shapes_config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )
    .map_err(|e| PipelineError::io(&cfg_path, e))?;
    println!(
        "wrote shapes dataset: {} train / {} test images under {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train(args) => {
            let raw = std::fs::read_to_string(&args.config)
                .map_err(|e| PipelineError::io(&args.config, e))?;
            let cfg = RunConfig::from_json(&raw)?;
            let manifest = run_two_stage(&cfg, args.resume)?;
            if let Some(m) = &manifest.metrics {
                println!(
                    "run complete: auroc={:.4} pixel_auroc={} accuracy={:.4}",
                    m.auroc,
                    m.pixel_auroc
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "n/a".into()),
                    m.accuracy_at_threshold
                );
            }
            println!(
                "manifest: {}",
                cfg.output_dir.join("manifest.json").display()
            );
            Ok(())
        }
        Cmd::Eval(args) => {
            let report = evaluate_from_manifest(&args.run)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Cmd::Matrix(args) => {
            let cfg: MatrixConfig = read_json(&args.config)?;
            let report = run_augmentation_matrix(&cfg)?;
            print!("{}", report.to_text_table());
            Ok(())
        }
        Cmd::Synth(SynthArgs {
            cmd:
                SynthCmd::Preview {
                    out,
                    count,
                    seed,
                    canvas,
                    augmentation,
                },
        }) => {
            let mut aug = match augmentation {
                Some(p) => read_json::<AugmentationConfig>(&p)?,
                None => AugmentationConfig::default(),
            };
            aug.seed = seed;
            let shapes = SyntheticShapesConfig {
                canvas,
                seed,
                ..Default::default()
            };
            let manifest = synth_preview(&out, &aug, &shapes, count)?;
            println!("preview manifest: {}", manifest.display());
            Ok(())
        }
        Cmd::Data(DataArgs {
            cmd: DataCmd::BuildManifest {
                root,
                name,
                size,
                out,
            },
        }) => {
            let m = build_manifest(&root, &name, size)?;
            m.save(&out)?;
            println!("manifest with {} files written to {}", m.files.len(), out.display());
            Ok(())
        }
        Cmd::Data(DataArgs {
            cmd: DataCmd::MakeShapes { out, config, seed },
        }) => {
            let mut cfg = match config {
                Some(p) => read_json::<SyntheticShapesConfig>(&p)?,
                None => SyntheticShapesConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            make_shapes(&out, &cfg)
        }
    }
}

fn exit_code(err: &PipelineError) -> i32 {
    match err {
        PipelineError::Config(_) => EXIT_CONFIG_ERROR,
        PipelineError::Data(_) => EXIT_DATA_ERROR,
        PipelineError::Train(TrainError::Diverged { .. }) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
