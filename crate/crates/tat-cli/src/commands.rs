//! Subcommand implementations.

use clap::Args;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use tat_core::data::{
    augment, decode_image, image_tensor, load_dataset, rasterize_batch, synth::synth_scene,
    AugmentConfig, DatasetFormat, ImageBuf, Sample,
};
use tat_core::eval::{evaluate, EvalImage};
use tat_core::flops::{analyze_config, ABLATION_ROWS};
use tat_core::geometry::{
    decode, min_area_rect, nms, read_detections, write_detections, Detection, Point,
    DEFAULT_IOU_THRESH, DEFAULT_SCORE_THRESH, LABEL_STRIDE,
};
use tat_core::io::atomic_write;
use tat_core::model::{Model, INPUT_MULTIPLE};
use tat_core::optim::AdadeltaConfig;
use tat_core::train::{train as run_train, Batch, BatchSource, TrainConfig};
use tat_core::losses::LossWeights;

use crate::{CliError, CliResult, KvFile, Resolution};

fn kv_for(config: &Option<PathBuf>) -> Result<KvFile, CliError> {
    match config {
        Some(path) => KvFile::load(path),
        None => Ok(KvFile::empty()),
    }
}

fn parse_format(s: Option<String>) -> Result<DatasetFormat, CliError> {
    match s {
        None => Ok(DatasetFormat::Icdar2015),
        Some(v) => v.parse().map_err(|e: tat_core::Error| CliError::Usage(e.to_string())),
    }
}

fn check_multiple(value: usize, what: &str) -> CliResult {
    if value == 0 || value % INPUT_MULTIPLE != 0 {
        return Err(CliError::Usage(format!(
            "{what} must be a positive multiple of {INPUT_MULTIPLE}, got {value}"
        )));
    }
    Ok(())
}

fn load_samples(
    dataset: &str,
    format: DatasetFormat,
    synth_count: usize,
    synth_size: usize,
    seed: u64,
) -> Result<Vec<Sample>, CliError> {
    if dataset == "synth" {
        return Ok((0..synth_count)
            .map(|i| synth_scene(seed.wrapping_add(i as u64), synth_size, synth_size, 1))
            .collect());
    }
    let (samples, summary) = load_dataset(Path::new(dataset), format)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    if samples.is_empty() {
        return Err(CliError::Runtime(format!("no samples under {dataset}")));
    }
    Ok(samples)
}

/// Serves fixed-size samples directly; every epoch sees the same batches.
struct SliceSource {
    samples: Vec<Sample>,
    batch_size: usize,
}

impl BatchSource for SliceSource {
    fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    fn batch(&self, _epoch: usize, step: usize) -> tat_core::Result<Batch> {
        let n = self.samples.len();
        let picked: Vec<Sample> = (0..self.batch_size)
            .map(|k| self.samples[(step * self.batch_size + k) % n].clone())
            .collect();
        let (images, labels) = rasterize_batch(&picked)?;
        Ok(Batch { images, labels })
    }
}

/// Augments on the fly; the patch for slot k of (epoch, step) is a pure
/// function of the seed, so resume replays identical batches.
struct AugmentSource {
    samples: Vec<Sample>,
    cfg: AugmentConfig,
    batch_size: usize,
}

impl BatchSource for AugmentSource {
    fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    fn batch(&self, epoch: usize, step: usize) -> tat_core::Result<Batch> {
        let n = self.samples.len();
        let spe = self.steps_per_epoch();
        let picked: Vec<Sample> = (0..self.batch_size)
            .map(|k| {
                let slot = step * self.batch_size + k;
                let index = ((epoch * spe * self.batch_size) + slot) as u64;
                augment(&self.samples[slot % n], &self.cfg, index)
            })
            .collect();
        let (images, labels) = rasterize_batch(&picked)?;
        Ok(Batch { images, labels })
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory, or `synth` for built-in synthetic scenes.
    #[arg(long)]
    dataset: Option<String>,
    /// icdar2015 (default), icdar2013 or td500.
    #[arg(long)]
    format: Option<String>,
    /// key=value file: network keys plus any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and history.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Training patch side; must divide 32.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Resume from checkpoint step N under the output directory.
    #[arg(long)]
    resume: Option<usize>,
    /// Stop once total loss falls below this fraction of the initial loss.
    #[arg(long)]
    stop_loss_ratio: Option<f64>,
    /// Number of synthetic scenes when --dataset synth.
    #[arg(long)]
    synth_count: Option<usize>,
    /// Synthetic scene side; must divide 32.
    #[arg(long)]
    synth_size: Option<usize>,
}

pub fn train(mut args: TrainArgs) -> CliResult {
    let mut kv = kv_for(&args.config)?;
    let model_cfg = kv.model_config()?;
    kv.take("dataset", &mut args.dataset)?;
    kv.take("format", &mut args.format)?;
    kv.take("out", &mut args.out)?;
    kv.take("epochs", &mut args.epochs)?;
    kv.take("batch_size", &mut args.batch_size)?;
    kv.take("seed", &mut args.seed)?;
    kv.take("checkpoint_every", &mut args.checkpoint_every)?;
    kv.take("crop_size", &mut args.crop_size)?;
    kv.take("resume", &mut args.resume)?;
    kv.take("stop_loss_ratio", &mut args.stop_loss_ratio)?;
    kv.take("synth_count", &mut args.synth_count)?;
    kv.take("synth_size", &mut args.synth_size)?;
    kv.finish()?;

    let dataset = args
        .dataset
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let format = parse_format(args.format)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("out"));
    let seed = args.seed.unwrap_or(0);
    let batch_size = args.batch_size.unwrap_or(4).max(1);
    let crop_size = args.crop_size.unwrap_or(640);
    let synth_size = args.synth_size.unwrap_or(256);
    check_multiple(crop_size, "--crop-size")?;
    check_multiple(synth_size, "--synth-size")?;

    let samples = load_samples(
        &dataset,
        format,
        args.synth_count.unwrap_or(20),
        synth_size,
        seed,
    )?;
    println!("{} samples from {dataset}", samples.len());

    let source: Box<dyn BatchSource> = if dataset == "synth" {
        Box::new(SliceSource {
            samples,
            batch_size,
        })
    } else {
        Box::new(AugmentSource {
            samples,
            cfg: AugmentConfig {
                crop_size,
                seed,
                ..AugmentConfig::default()
            },
            batch_size,
        })
    };

    let cfg = TrainConfig {
        batch_size,
        epochs: args.epochs.unwrap_or(600),
        seed,
        checkpoint_every: args.checkpoint_every.unwrap_or(500),
        weights: LossWeights::default(),
        optimizer: AdadeltaConfig::default(),
        resume_from: args.resume,
        stop_loss_ratio: args.stop_loss_ratio,
    };
    let model = Model::new(&model_cfg, seed)?;
    let outcome = run_train(&model, source.as_ref(), &cfg, &out)?;
    println!(
        "{} steps, loss {:.6} -> {:.6}",
        outcome.steps_run, outcome.initial_loss, outcome.final_loss
    );
    println!("history: {}", outcome.history_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    /// Trained weights (.tatw).
    #[arg(long)]
    checkpoint: PathBuf,
    /// key=value file: network keys plus any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the per-image detection files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    score_thresh: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long)]
    iou_thresh: Option<f64>,
    /// Resize to WxH before inference (boxes map back to input pixels).
    /// Default keeps the size and pads to the next multiple of 32.
    #[arg(long)]
    resolution: Option<Resolution>,
    /// Images to process.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

pub fn infer(mut args: InferArgs) -> CliResult {
    let mut kv = kv_for(&args.config)?;
    let model_cfg = kv.model_config()?;
    kv.take("out", &mut args.out)?;
    kv.take("score_thresh", &mut args.score_thresh)?;
    kv.take("iou_thresh", &mut args.iou_thresh)?;
    kv.take("resolution", &mut args.resolution)?;
    kv.finish()?;

    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("detections"));
    let score_thresh = args.score_thresh.unwrap_or(DEFAULT_SCORE_THRESH);
    let iou_thresh = args.iou_thresh.unwrap_or(DEFAULT_IOU_THRESH);

    let model = Model::new(&model_cfg, 0)?;
    model.load_weights(&args.checkpoint)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;

    for path in &args.images {
        let image = decode_image(path)?;
        let (proc, sx, sy) = match args.resolution {
            Some(r) => (
                image.resized(r.h, r.w),
                image.w as f64 / r.w as f64,
                image.h as f64 / r.h as f64,
            ),
            None => (image.clone(), 1.0, 1.0),
        };
        let pad_h = proc.h.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
        let pad_w = proc.w.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
        let padded = proc.padded_to(pad_h, pad_w, proc.channel_means());

        let det_out = model.forward(&image_tensor(&padded), false)?;
        let (mh, mw) = (pad_h / LABEL_STRIDE, pad_w / LABEL_STRIDE);
        let cands = decode(
            &det_out.score.data(),
            &det_out.dist.data(),
            &det_out.angle.data(),
            mh,
            mw,
            score_thresh,
        );
        let kept = nms(&cands, iou_thresh);
        let mut dets = Vec::with_capacity(kept.len());
        for d in kept {
            dets.push(scale_back(&d, sx, sy)?);
        }

        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let out_path = out_dir.join(format!("{stem}.txt"));
        write_detections(&out_path, &dets)?;
        println!("{}: {} detections -> {}", path.display(), dets.len(), out_path.display());
    }
    Ok(())
}

/// Map a detection from processing coordinates back to input pixels.
fn scale_back(d: &Detection, sx: f64, sy: f64) -> Result<Detection, CliError> {
    if sx == 1.0 && sy == 1.0 {
        return Ok(*d);
    }
    let pts: Vec<Point> = d
        .rbox
        .vertices()
        .iter()
        .map(|p| Point::new(p.x * sx, p.y * sy))
        .collect();
    Ok(Detection {
        rbox: min_area_rect(&pts)?,
        score: d.score,
    })
}

#[derive(Args)]
pub struct EvalArgs {
    /// Ground-truth directory (gt_<stem>.txt files, or <stem>.gt for td500).
    #[arg(long)]
    gt: PathBuf,
    /// Directory of detection files (<stem>.txt).
    #[arg(long)]
    dets: PathBuf,
    /// icdar2015 (default), icdar2013 or td500.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    iou: Option<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn eval(mut args: EvalArgs) -> CliResult {
    let mut kv = kv_for(&args.config)?;
    kv.take("format", &mut args.format)?;
    kv.take("iou", &mut args.iou)?;
    kv.take("report", &mut args.report)?;
    kv.finish()?;
    let format = parse_format(args.format)?;
    let iou = args.iou.unwrap_or(0.5);

    let mut images = Vec::new();
    let mut stems = std::collections::BTreeSet::new();
    let entries = std::fs::read_dir(&args.gt)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.gt.display())))?;
    let mut gt_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    gt_files.sort();
    for gt_path in gt_files {
        let Some(stem) = gt_stem(&gt_path, format) else {
            continue;
        };
        let anns = tat_core::data::loaders::parse_annotations(&gt_path, format)?;
        let det_path = args.dets.join(format!("{stem}.txt"));
        let dets = if det_path.is_file() {
            read_detections(&det_path)?
        } else {
            Vec::new()
        };
        stems.insert(stem.clone());
        images.push(EvalImage {
            id: stem,
            gts: anns.iter().map(|a| (a.rbox, a.care)).collect(),
            dets,
        });
    }
    if images.is_empty() {
        return Err(CliError::Runtime(format!(
            "no ground-truth files under {}",
            args.gt.display()
        )));
    }
    // detection files with no matching ground truth indicate a wiring bug
    let det_entries = std::fs::read_dir(&args.dets)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.dets.display())))?;
    for entry in det_entries.filter_map(|e| e.ok().map(|e| e.path())) {
        if entry.extension().is_some_and(|x| x == "txt") {
            let stem = entry.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if !stems.contains(&stem) {
                return Err(CliError::Runtime(format!(
                    "detection file {} has no ground truth",
                    entry.display()
                )));
            }
        }
    }

    let rep = evaluate(&images, iou)?;
    print!("{}", rep.table());
    println!(
        "precision {:.4}  recall {:.4}  f-score {:.4}",
        rep.precision, rep.recall, rep.f_score
    );
    if let Some(path) = args.report {
        rep.write_json(&path)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn gt_stem(path: &Path, format: DatasetFormat) -> Option<String> {
    let name = path.file_name()?.to_string_lossy();
    match format {
        DatasetFormat::Td500 => name.strip_suffix(".gt").map(str::to_string),
        _ => name
            .strip_prefix("gt_")
            .and_then(|n| n.strip_suffix(".txt"))
            .map(str::to_string),
    }
}

#[derive(Args)]
pub struct FlopsArgs {
    /// Network configuration file(s); repeatable.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Named ablation configuration (m, m-fru, m-fru-tau, m-fru-tau-i); repeatable.
    #[arg(long)]
    preset: Vec<String>,
    /// Analysis resolution, default 1280x720.
    #[arg(long)]
    resolution: Option<Resolution>,
    /// Write the per-layer breakdown as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print the per-layer table.
    #[arg(long)]
    layers: bool,
}

pub fn flops(args: FlopsArgs) -> CliResult {
    let r = args.resolution.unwrap_or(Resolution { w: 1280, h: 720 });
    let mut rows: Vec<(String, tat_core::graph::ModelConfig)> = Vec::new();
    for name in &args.preset {
        let row = ABLATION_ROWS
            .iter()
            .find(|a| a.name == name.as_str())
            .ok_or_else(|| CliError::Usage(format!("unknown preset `{name}`")))?;
        let cfg = row.config().ok_or_else(|| {
            CliError::Usage(format!("preset `{name}` is not a buildable configuration"))
        })?;
        rows.push((name.clone(), cfg));
    }
    for path in &args.config {
        let mut kv = KvFile::load(path)?;
        let cfg = kv.model_config()?;
        kv.finish()?;
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        rows.push((name, cfg));
    }
    if rows.is_empty() {
        rows.push(("default".into(), tat_core::graph::ModelConfig::default()));
    }

    let mut csv = String::from("config,layer,kind,flops,params\n");
    for (name, cfg) in &rows {
        let rep = analyze_config(cfg, r.h, r.w)?;
        println!(
            "{name}: {}x{}  total {:.4} GFLOPs  {:.2} KFLOPs/px  {} params",
            r.w,
            r.h,
            rep.total_flops as f64 / 1e9,
            rep.flops_per_pixel / 1e3,
            rep.total_params
        );
        if args.layers {
            print!("{}", rep.table());
        }
        for l in &rep.layers {
            csv.push_str(&format!("{name},{},{},{},{}\n", l.name, l.kind, l.flops, l.params));
        }
    }
    if let Some(path) = args.csv {
        atomic_write(&path, csv.as_bytes())?;
        println!("csv: {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct PreviewArgs {
    /// Dataset directory, or `synth` for built-in synthetic scenes.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop_size: Option<usize>,
}

pub fn augment_preview(mut args: PreviewArgs) -> CliResult {
    let mut kv = kv_for(&args.config)?;
    kv.take("dataset", &mut args.dataset)?;
    kv.take("format", &mut args.format)?;
    kv.take("out", &mut args.out)?;
    kv.take("count", &mut args.count)?;
    kv.take("seed", &mut args.seed)?;
    kv.take("crop_size", &mut args.crop_size)?;
    kv.finish()?;

    let dataset = args
        .dataset
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let format = parse_format(args.format)?;
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("preview"));
    let count = args.count.unwrap_or(8);
    let seed = args.seed.unwrap_or(0);
    let crop_size = args.crop_size.unwrap_or(640);
    check_multiple(crop_size, "--crop-size")?;

    let samples = load_samples(&dataset, format, 4, 2 * crop_size, seed)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let cfg = AugmentConfig {
        crop_size,
        seed,
        ..AugmentConfig::default()
    };
    for i in 0..count {
        let mut patch = augment(&samples[i % samples.len()], &cfg, i as u64);
        let boxes = std::mem::take(&mut patch.boxes);
        for b in &boxes {
            // care boxes red, don't-care yellow
            let color = if b.care { [255, 0, 0] } else { [255, 255, 0] };
            draw_box(&mut patch.image, &b.rbox.vertices(), color);
        }
        let path = out_dir.join(format!("patch-{i:03}.png"));
        write_png(&path, &patch.image)?;
    }
    println!("wrote {count} patches to {}", out_dir.display());
    Ok(())
}

fn draw_box(img: &mut ImageBuf, verts: &[Point; 4], color: [u8; 3]) {
    for e in 0..4 {
        let a = verts[e];
        let b = verts[(e + 1) % 4];
        let steps = (a.x - b.x).hypot(a.y - b.y).ceil() as usize * 2 + 1;
        for t in 0..=steps {
            let f = t as f64 / steps as f64;
            let x = (a.x + (b.x - a.x) * f).round() as isize;
            let y = (a.y + (b.y - a.y) * f).round() as isize;
            if x >= 0 && y >= 0 && (x as usize) < img.w && (y as usize) < img.h {
                for c in 0..3 {
                    img.set(y as usize, x as usize, c, color[c]);
                }
            }
        }
    }
}

fn write_png(path: &Path, img: &ImageBuf) -> CliResult {
    let rgb = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.data.clone())
        .expect("buffer length matches dimensions");
    let mut bytes = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    atomic_write(path, &bytes)?;
    Ok(())
}
