//! Annotation-format readers for the three public benchmarks.
//!
//! Layouts: `images/*.jpg|png` + `gt/gt_<stem>.txt` for the ICDAR sets,
//! flat `*.JPG` + `*.gt` pairs for TD500. A `dataset.toml` manifest of
//! flat key=value lines may override the two directory names.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{BoxAnnotation, ImageBuf, Sample};
use crate::error::{Error, Result};
use crate::geometry::{Point, RBox};

/// Transcription marking a region as don't-care.
pub const DONT_CARE: &str = "###";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Icdar2015,
    Icdar2013,
    Td500,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<DatasetFormat> {
        match s {
            "icdar2015" => Ok(DatasetFormat::Icdar2015),
            "icdar2013" => Ok(DatasetFormat::Icdar2013),
            "td500" => Ok(DatasetFormat::Td500),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected icdar2015, icdar2013 or td500)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadSummary {
    pub loaded: usize,
    pub skipped_missing_gt: usize,
    pub warnings: Vec<String>,
}

struct Layout {
    images_dir: String,
    gt_dir: String,
}

impl Layout {
    fn for_format(format: DatasetFormat) -> Layout {
        match format {
            DatasetFormat::Icdar2015 | DatasetFormat::Icdar2013 => Layout {
                images_dir: "images".into(),
                gt_dir: "gt".into(),
            },
            DatasetFormat::Td500 => Layout {
                images_dir: ".".into(),
                gt_dir: ".".into(),
            },
        }
    }

    fn apply_manifest(&mut self, root: &Path) -> Result<()> {
        let manifest = root.join("dataset.toml");
        if !manifest.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Annotation {
                    path: manifest.clone(),
                    line: lineno + 1,
                    detail: format!("expected key=value, got `{line}`"),
                });
            };
            let value = value.trim().trim_matches('"').to_string();
            match key.trim() {
                "images_dir" => self.images_dir = value,
                "gt_dir" => self.gt_dir = value,
                other => {
                    return Err(Error::Annotation {
                        path: manifest.clone(),
                        line: lineno + 1,
                        detail: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(())
    }

    fn gt_path(&self, root: &Path, image: &Path, format: DatasetFormat) -> PathBuf {
        let stem = image.file_stem().unwrap_or_default().to_string_lossy();
        let name = match format {
            DatasetFormat::Icdar2015 | DatasetFormat::Icdar2013 => format!("gt_{stem}.txt"),
            DatasetFormat::Td500 => format!("{stem}.gt"),
        };
        root.join(&self.gt_dir).join(name)
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

pub fn decode_image(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path)
        .map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            detail: source.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageBuf::from_raw(h as usize, w as usize, img.into_raw()))
}

/// Read every image with an annotation file. Images without one are
/// skipped and counted in the summary; malformed annotation lines are
/// hard errors carrying the file and line number.
pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<(Vec<Sample>, LoadSummary)> {
    let mut layout = Layout::for_format(format);
    layout.apply_manifest(root)?;

    let images_dir = root.join(&layout.images_dir);
    let entries = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut image_paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    image_paths.sort();

    let mut samples = Vec::new();
    let mut summary = LoadSummary::default();
    for image_path in image_paths {
        let gt = layout.gt_path(root, &image_path, format);
        if !gt.exists() {
            summary.skipped_missing_gt += 1;
            summary
                .warnings
                .push(format!("no annotation file for {}", image_path.display()));
            continue;
        }
        let boxes = parse_annotations(&gt, format)?;
        let image = decode_image(&image_path)?;
        samples.push(Sample { image, boxes });
        summary.loaded += 1;
    }
    Ok((samples, summary))
}

/// Parse one annotation file into boxes.
pub fn parse_annotations(path: &Path, format: DatasetFormat) -> Result<Vec<BoxAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let mut boxes = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Annotation {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail,
        };
        let b = match format {
            DatasetFormat::Icdar2015 => parse_icdar2015(line).map_err(err)?,
            DatasetFormat::Icdar2013 => parse_icdar2013(line).map_err(err)?,
            DatasetFormat::Td500 => parse_td500(line).map_err(err)?,
        };
        boxes.push(b);
    }
    Ok(boxes)
}

fn parse_icdar2015(line: &str) -> std::result::Result<BoxAnnotation, String> {
    let fields: Vec<&str> = line.splitn(9, ',').collect();
    if fields.len() != 9 {
        return Err(format!("expected 8 coordinates and a transcription, got {} fields", fields.len()));
    }
    let mut coords = [0.0f64; 8];
    for (i, f) in fields[..8].iter().enumerate() {
        coords[i] = f
            .trim()
            .parse()
            .map_err(|_| format!("coordinate {} is not a number: `{f}`", i + 1))?;
    }
    let pts = [
        Point::new(coords[0], coords[1]),
        Point::new(coords[2], coords[3]),
        Point::new(coords[4], coords[5]),
        Point::new(coords[6], coords[7]),
    ];
    let rbox = RBox::from_vertices(&pts).map_err(|e| e.to_string())?;
    let text = fields[8].to_string();
    Ok(BoxAnnotation {
        rbox,
        care: text != DONT_CARE,
        text,
    })
}

fn parse_icdar2013(line: &str) -> std::result::Result<BoxAnnotation, String> {
    let fields: Vec<&str> = line.splitn(5, char::is_whitespace).collect();
    if fields.len() < 4 {
        return Err(format!("expected `left top right bottom [word]`, got {} fields", fields.len()));
    }
    let mut v = [0.0f64; 4];
    for (i, f) in fields[..4].iter().enumerate() {
        v[i] = f
            .trim()
            .parse()
            .map_err(|_| format!("coordinate {} is not a number: `{f}`", i + 1))?;
    }
    let (left, top, right, bottom) = (v[0], v[1], v[2], v[3]);
    if right <= left || bottom <= top {
        return Err(format!("empty rectangle {left},{top},{right},{bottom}"));
    }
    let rbox = RBox::new(
        (left + right) / 2.0,
        (top + bottom) / 2.0,
        right - left,
        bottom - top,
        0.0,
    )
    .map_err(|e| e.to_string())?;
    let text = fields
        .get(4)
        .map(|t| t.trim().trim_matches('"').to_string())
        .unwrap_or_default();
    Ok(BoxAnnotation {
        rbox,
        care: text != DONT_CARE,
        text,
    })
}

fn parse_td500(line: &str) -> std::result::Result<BoxAnnotation, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(format!("expected `idx difficulty x y w h theta`, got {} fields", fields.len()));
    }
    let difficulty: i64 = fields[1]
        .parse()
        .map_err(|_| format!("difficulty is not an integer: `{}`", fields[1]))?;
    let mut v = [0.0f64; 5];
    for (i, f) in fields[2..].iter().enumerate() {
        v[i] = f
            .parse()
            .map_err(|_| format!("field {} is not a number: `{f}`", i + 3))?;
    }
    let (x, y, w, h, theta) = (v[0], v[1], v[2], v[3], v[4]);
    // (x, y, w, h) is the unrotated rectangle; theta rotates it about its
    // own center
    let rbox = RBox::new(x + w / 2.0, y + h / 2.0, w, h, theta).map_err(|e| e.to_string())?;
    Ok(BoxAnnotation {
        rbox,
        care: difficulty == 0,
        text: String::new(),
    })
}
