//! `dect`: dual-energy CT simulation and material decomposition pipelines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dect_cli::config::{profile_by_name, Method, PipelineConfig};
use dect_cli::dataset::{generate_dataset, load_manifest, Split};
use dect_cli::pipeline::{
    decompose_split, evaluate_predictions, load_method_checkpoints, train_denoisenet_cmd,
    train_sinonet_cmd, write_report,
};
use dect_core::arrayfile::{read_array2, read_array3, write_array2, ArraySidecar};
use dect_core::error::Error;
use dect_core::geometry::FanBeamGeometry;
use dect_core::phantom::MATERIAL_NAMES;
use dect_core::projector::{Sinogram, SinogramKind};
use dect_core::recon::{fbp, FilterKind, FilterSpec};
use dect_core::render::{save_gray_png, save_label_png};

#[derive(Parser)]
#[command(name = "dect", about = "dual-energy fan-beam CT simulation and material decomposition")]
struct Cli {
    /// Worker threads (also honors DECT_THREADS); 0 keeps the default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Profile name: desk, paper or tiny.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// TOML/JSON config file overriding the profile entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => profile_by_name(&self.profile)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or resume) a synthetic dual-energy dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root directory.
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Filtered back-projection of a persisted sinogram.
    Recon {
        /// Input sinogram array file.
        #[arg(long)]
        input: PathBuf,
        /// Geometry JSON file.
        #[arg(long)]
        geometry: PathBuf,
        /// Output image array file.
        #[arg(long)]
        output: PathBuf,
        /// Apply -ln before filtering (for transmission sinograms).
        #[arg(long)]
        neg_log: bool,
        /// View subset covered by the rows: all, low or high.
        #[arg(long, default_value = "all")]
        views: String,
        #[arg(long, default_value = "ram-lak")]
        filter: String,
        #[arg(long, default_value_t = 1.0)]
        cutoff: f64,
        /// Also write a PNG rendering.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Train one stage of the pipeline.
    Train {
        /// Dataset root (from gen-data).
        #[arg(long)]
        data_dir: PathBuf,
        /// Stage: sino or denoise.
        #[arg(long)]
        stage: String,
        /// Checkpoint output directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Stage-one checkpoint (required for --stage denoise).
        #[arg(long)]
        sinonet_ckpt: Option<PathBuf>,
    },
    /// Decompose the test split with a method and persist predictions.
    Decompose {
        #[arg(long)]
        data_dir: PathBuf,
        /// Method: aamd, rfast or sinonet-fbp.
        #[arg(long)]
        method: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        sinonet_ckpt: Option<PathBuf>,
        #[arg(long)]
        denoisenet_ckpt: Option<PathBuf>,
        /// Skip PNG rendering.
        #[arg(long)]
        no_render: bool,
    },
    /// Evaluate persisted predictions against ground truth.
    Evaluate {
        #[arg(long)]
        data_dir: PathBuf,
        /// Directory holding <case_id>.bin predictions.
        #[arg(long)]
        predictions: PathBuf,
        /// Report title.
        #[arg(long, default_value = "evaluation")]
        title: String,
    },
    /// Render label map and per-material PNGs from a maps/prediction file.
    Render {
        /// [3 x H x W] array file (ground truth maps or predictions).
        #[arg(long)]
        input: PathBuf,
        /// Output directory for PNGs.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_filter(kind: &str, cutoff: f64) -> Result<FilterSpec, Error> {
    let kind = match kind {
        "ram-lak" => FilterKind::RamLak,
        "hann" | "hann-apodized" => FilterKind::HannApodized,
        other => {
            return Err(Error::Config(format!(
                "unknown filter {other:?} (expected ram-lak or hann)"
            )))
        }
    };
    let spec = FilterSpec {
        kind,
        cutoff_fraction: cutoff,
    };
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { cfg, data_dir } => {
            let cfg = cfg.resolve()?;
            let manifest = generate_dataset(&cfg, &data_dir)?;
            eprintln!(
                "dataset ready: {} train / {} val / {} test cases under {}",
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len(),
                data_dir.display()
            );
        }
        Command::Recon {
            input,
            geometry,
            output,
            neg_log,
            views,
            filter,
            cutoff,
            png,
        } => {
            let geom: FanBeamGeometry =
                serde_json::from_str(&std::fs::read_to_string(&geometry)?)?;
            geom.validate()?;
            let (mut data, sidecar) = read_array2(&input)?;
            if let Some(hash) = &sidecar.geometry_hash {
                if *hash != geom.hash() {
                    return Err(Error::Data(
                        "sinogram geometry hash does not match the supplied geometry".into(),
                    ));
                }
            }
            if neg_log {
                data = data.mapv(|v| -(v.max(1e-12)).ln());
            }
            let view_indices = match views.as_str() {
                "all" => (0..geom.total_views()).collect(),
                "low" => geom.low_kvp_views(),
                "high" => geom.high_kvp_views(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown view subset {other:?} (expected all, low or high)"
                    )))
                }
            };
            let sino = Sinogram {
                data,
                view_indices,
                geometry_hash: geom.hash(),
                kind: SinogramKind::PathLengthMm,
            };
            let image = fbp(&sino, &geom, &parse_filter(&filter, cutoff)?)?;
            let sc = ArraySidecar::new(&[image.nrows(), image.ncols()], "fbp_image")
                .with_geometry(&geom.hash());
            write_array2(&output, &image, &sc)?;
            if let Some(png_path) = png {
                let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                save_gray_png(&image, lo, hi, &png_path)?;
            }
        }
        Command::Train {
            data_dir,
            stage,
            ckpt,
            sinonet_ckpt,
        } => {
            let manifest = load_manifest(&data_dir)?;
            match stage.as_str() {
                "sino" => {
                    let ck = train_sinonet_cmd(&data_dir, &manifest, &ckpt)?;
                    eprintln!(
                        "stage one done: best val loss {:.6} at epoch {}",
                        ck.best_val, ck.best_epoch
                    );
                }
                "denoise" => {
                    let sino_dir = sinonet_ckpt.ok_or_else(|| {
                        Error::Config("--stage denoise needs --sinonet-ckpt".into())
                    })?;
                    let ck = train_denoisenet_cmd(&data_dir, &manifest, &sino_dir, &ckpt)?;
                    eprintln!(
                        "stage two done: best val loss {:.6} at epoch {}",
                        ck.best_val, ck.best_epoch
                    );
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown stage {other:?} (expected sino or denoise)"
                    )))
                }
            }
        }
        Command::Decompose {
            data_dir,
            method,
            out_dir,
            sinonet_ckpt,
            denoisenet_ckpt,
            no_render,
        } => {
            let manifest = load_manifest(&data_dir)?;
            let method = Method::parse(&method)?;
            let ckpts = load_method_checkpoints(
                method,
                sinonet_ckpt.as_deref(),
                denoisenet_ckpt.as_deref(),
                &manifest,
            )?;
            let log = decompose_split(
                &data_dir,
                &manifest,
                Split::Test,
                method,
                &ckpts,
                &out_dir,
                !no_render,
            )?;
            eprintln!(
                "{}: {} cases, mean inference {:.1} ms",
                log.method,
                log.per_case_ms.len(),
                log.mean_ms
            );
        }
        Command::Evaluate {
            data_dir,
            predictions,
            title,
        } => {
            let manifest = load_manifest(&data_dir)?;
            let report = evaluate_predictions(&data_dir, &manifest, &predictions)?;
            write_report(&report, &predictions, &title)?;
            print!("{}", report.to_markdown(&title));
        }
        Command::Render { input, out_dir } => {
            let (stack, _) = read_array3(&input)?;
            std::fs::create_dir_all(&out_dir)?;
            let maps = dect_cli::dataset::stack_to_maps(&stack, 1.0);
            save_label_png(&maps, &out_dir.join("labels.png"))?;
            for (m, name) in MATERIAL_NAMES.iter().enumerate() {
                let ch = stack.index_axis(ndarray::Axis(0), m).to_owned();
                save_gray_png(&ch, 0.0, 1.0, &out_dir.join(format!("{name}.png")))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        std::env::var("DECT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
