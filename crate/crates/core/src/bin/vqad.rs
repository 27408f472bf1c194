use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vqad::detect::{match_detections, score, BoxRect, MatchCounts};
use vqad::fusion::Connectivity;
use vqad::io::{
    gen_dataset, read_json, sidecar_path, write_json, write_map16, write_mask1, write_overlay, write_tile,
    CalibrationSidecar, Dataset, DatasetSpec, DetectionFile, DetectionRecord, Manifest, Split,
};
use vqad::maps::SsimParams;
use vqad::model::{checkpoint, init_model, ModelConfig};
use vqad::pipeline::{linear_grid, sweep_thresholds, Detector, DetectorConfig};
use vqad::trainer::{calibrate_am, train, TrainConfig};
use vqad::VqadError;

#[derive(Parser)]
#[command(name = "vqad", version, about = "VQ-VAE anomaly detection on sea-surface tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PNG tiles plus manifest.json).
    Gen {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the normal-only train split and calibrate the alignment map.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV training log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the detector over one split and write a detections file.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        lambda_sm: f32,
        #[arg(long)]
        lambda_am: f32,
        #[arg(long)]
        out: PathBuf,
        /// Write reconstruction, SM, AM, final map and overlay PNGs here.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Score a detections file against manifest boxes; prints JSON.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        iou: f64,
        /// Score every image of this split (images without a record count as
        /// empty predictions). Default: only the images in the detections file.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Grid-search the two thresholds on a split; prints the best pair as JSON.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// `lo:hi:n`, n evenly spaced values.
        #[arg(long)]
        grid_sm: String,
        #[arg(long)]
        grid_am: String,
        #[arg(long, default_value_t = 0.3)]
        iou: f64,
        #[command(flatten)]
        detector: DetectorArgs,
    },
}

#[derive(clap::Args)]
struct DetectorArgs {
    /// Pixel connectivity, 4 or 8.
    #[arg(long, default_value_t = 8)]
    connectivity: u8,
    #[arg(long, default_value_t = 4)]
    min_area: usize,
    /// AM dilation radius; defaults to ceil(f / 2).
    #[arg(long)]
    selem_radius: Option<usize>,
}

impl DetectorArgs {
    fn config(&self, ssim: SsimParams) -> Result<DetectorConfig> {
        Ok(DetectorConfig {
            ssim,
            selem_radius: self.selem_radius,
            connectivity: Connectivity::try_from(self.connectivity)?,
            min_area: self.min_area,
        })
    }
}

/// Contents of the `--config` file for `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    calibration_percentile: f64,
    ssim: SsimParams,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            calibration_percentile: 99.0,
            ssim: SsimParams::default(),
        }
    }
}

fn cmd_gen(params: &Path, out: &Path) -> Result<()> {
    let spec: DatasetSpec = read_json(params)?;
    let manifest = gen_dataset(&spec, out)?;
    log::info!("wrote {} tiles under {}", manifest.records.len(), out.display());
    Ok(())
}

fn cmd_train(data: &Path, config: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let cfg: TrainFile = read_json(config)?;
    cfg.ssim.validate()?;
    init_model(cfg.model.clone())?;
    let dataset = Dataset::load(data)?;
    let tiles: Vec<_> = dataset.load_split(Split::Train)?.into_iter().map(|(_, t, _)| t).collect();
    log::info!("training on {} normal tiles", tiles.len());
    let (model, training_log) = train(&tiles, &cfg.model, &cfg.train)?;
    checkpoint::save(&model, out)?;
    let normalizer = calibrate_am(&model, &tiles, cfg.calibration_percentile)?;
    let sidecar = CalibrationSidecar {
        normalizer,
        train: cfg.train.clone(),
        ssim: cfg.ssim,
    };
    write_json(&sidecar_path(out), &sidecar)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    std::fs::write(&log_path, training_log.to_csv()).map_err(|e| VqadError::io(&log_path, e))?;
    log::info!("checkpoint {}, AM scale {:.5}", out.display(), normalizer.scale);
    Ok(())
}

fn load_detector_parts(ckpt: &Path) -> Result<(vqad::model::ModelState, CalibrationSidecar)> {
    let model = checkpoint::load(ckpt)?;
    let sidecar: CalibrationSidecar = read_json(&sidecar_path(ckpt))?;
    Ok((model, sidecar))
}

/// `train/00001.png` → `train_00001`.
fn dump_stem(path: &str) -> String {
    let trimmed = path.strip_suffix(".png").unwrap_or(path);
    trimmed.replace(['/', '\\'], "_")
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    ckpt: &Path,
    data: &Path,
    split: Split,
    lambda_sm: f32,
    lambda_am: f32,
    out: &Path,
    dump: Option<&Path>,
    args: &DetectorArgs,
) -> Result<()> {
    let (model, sidecar) = load_detector_parts(ckpt)?;
    let detector = Detector::new(&model, sidecar.normalizer, args.config(sidecar.ssim)?);
    let dataset = Dataset::load(data)?;
    let items = dataset.load_split(split)?;
    let tiles: Vec<_> = items.iter().map(|(_, t, _)| t.clone()).collect();
    let analyses = detector.analyze_all(&tiles)?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| VqadError::io(dir, e))?;
    }
    let mut file = DetectionFile::default();
    for ((path, tile, truth), analysis) in items.iter().zip(&analyses) {
        let (amap, boxes) = detector.detect(analysis, lambda_sm, lambda_am)?;
        if let Some(dir) = dump {
            let stem = dump_stem(path);
            let at = |suffix: &str| dir.join(format!("{stem}_{suffix}.png"));
            write_tile(&at("recon"), &analysis.reconstruction)?;
            write_map16(&at("sm"), &analysis.maps.sm)?;
            write_map16(&at("am"), &analysis.maps.am)?;
            write_mask1(&at("amap"), &amap)?;
            let predicted: Vec<BoxRect> = boxes.iter().map(|b| b.rect()).collect();
            write_overlay(&at("overlay"), tile, truth, &predicted)?;
        }
        file.detections.push(DetectionRecord {
            image: path.clone(),
            boxes,
        });
    }
    write_json(out, &file)?;
    let total: usize = file.detections.iter().map(|r| r.boxes.len()).sum();
    log::info!("{total} boxes over {} tiles", file.detections.len());
    Ok(())
}

fn cmd_eval(detections: &Path, truth: &Path, iou: f64, split: Option<Split>) -> Result<()> {
    let file: DetectionFile = read_json(detections)?;
    file.validate()?;
    let manifest: Manifest = read_json(truth)?;
    manifest.validate()?;
    for r in &file.detections {
        if manifest.find(&r.image).is_none() {
            return Err(VqadError::Reference(format!("detections name unknown image {}", r.image)).into());
        }
    }
    let predicted = |image: &str| -> Vec<BoxRect> {
        file.detections
            .iter()
            .filter(|r| r.image == image)
            .flat_map(|r| r.boxes.iter().map(|b| b.rect()))
            .collect()
    };
    let images: Vec<&str> = match split {
        Some(s) => manifest.split(s).map(|r| r.path.as_str()).collect(),
        None => {
            let mut v: Vec<&str> = file.detections.iter().map(|r| r.image.as_str()).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    let mut counts = MatchCounts::default();
    for image in images {
        let gt = &manifest.find(image).expect("checked above").boxes;
        counts += match_detections(&predicted(image), gt, iou).counts;
    }
    println!("{}", serde_json::to_string(&score(counts))?);
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f32>> {
    let bad = || VqadError::Config(format!("grid `{spec}` is not of the form lo:hi:n"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(bad().into());
    };
    let lo: f32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f32 = hi.trim().parse().map_err(|_| bad())?;
    let n: i64 = n.trim().parse().map_err(|_| bad())?;
    if n < 1 {
        return Err(VqadError::Config(format!("grid `{spec}` needs n >= 1")).into());
    }
    Ok(linear_grid(lo, hi, n as usize)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    ckpt: &Path,
    data: &Path,
    split: Split,
    grid_sm: &str,
    grid_am: &str,
    iou: f64,
    args: &DetectorArgs,
) -> Result<()> {
    let (gs, ga) = (parse_grid(grid_sm)?, parse_grid(grid_am)?);
    let (model, sidecar) = load_detector_parts(ckpt)?;
    let detector = Detector::new(&model, sidecar.normalizer, args.config(sidecar.ssim)?);
    let dataset = Dataset::load(data)?;
    let validation: Vec<_> = dataset
        .load_split(split)?
        .into_iter()
        .map(|(_, t, b)| (t, b))
        .collect();
    let best = sweep_thresholds(&detector, &validation, &gs, &ga, iou)?;
    println!("{}", serde_json::to_string(&best)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { params, out } => cmd_gen(&params, &out),
        Command::Train { data, config, out, log } => cmd_train(&data, &config, &out, log.as_deref()),
        Command::Detect {
            checkpoint,
            data,
            split,
            lambda_sm,
            lambda_am,
            out,
            dump_maps,
            detector,
        } => cmd_detect(
            &checkpoint,
            &data,
            split,
            lambda_sm,
            lambda_am,
            &out,
            dump_maps.as_deref(),
            &detector,
        ),
        Command::Eval {
            detections,
            truth,
            iou,
            split,
        } => cmd_eval(&detections, &truth, iou, split),
        Command::Sweep {
            checkpoint,
            data,
            split,
            grid_sm,
            grid_am,
            iou,
            detector,
        } => cmd_sweep(&checkpoint, &data, split, &grid_sm, &grid_am, iou, &detector),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<VqadError>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(2)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("VQAD_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| VqadError::Config(format!("VQAD_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
