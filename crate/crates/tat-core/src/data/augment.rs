//! Training-patch augmentation: rotate, kernel-box crop, resize to the
//! crop size, photometric jitter, blur. Box geometry is transformed
//! analytically so labels stay exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BoxAnnotation, ImageBuf, Sample};
use crate::geometry::{polygon_area, clip_convex, min_area_rect, Point, RBox};

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Rotation range in degrees.
    pub rotate_deg: (f64, f64),
    /// Output patch side; must divide 32.
    pub crop_size: usize,
    /// Window scale k: the crop window is k * crop_size wide.
    pub scale_k: (f64, f64),
    pub jitter_prob: f64,
    pub jitter_scale: (f64, f64),
    pub jitter_shift: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_deg: (-15.0, 15.0),
            crop_size: 640,
            scale_k: (0.5, 2.0),
            jitter_prob: 0.5,
            jitter_scale: (0.8, 1.2),
            jitter_shift: (-16.0, 16.0),
            blur_prob: 0.5,
            blur_sigma: (0.0, 1.5),
            seed: 0,
        }
    }
}

/// The random choices one augmentation makes, drawn up front so the laws
/// governing them can be tested directly.
#[derive(Clone, Debug)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub k: f64,
    /// Index into the sample's boxes (reduced modulo the box count).
    pub kernel: usize,
    /// Per-channel (scale, shift), when jitter fires.
    pub jitter: Option<[(f64, f64); 3]>,
    /// Blur sigma, when blur fires.
    pub blur_sigma: Option<f64>,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentDraw {
        let angle_deg = rng.gen_range(cfg.rotate_deg.0..=cfg.rotate_deg.1);
        let k = rng.gen_range(cfg.scale_k.0..=cfg.scale_k.1);
        let kernel = rng.gen_range(0..u32::MAX) as usize;
        let jitter = if rng.gen_bool(cfg.jitter_prob) {
            let mut per = [(0.0, 0.0); 3];
            for slot in per.iter_mut() {
                *slot = (
                    rng.gen_range(cfg.jitter_scale.0..=cfg.jitter_scale.1),
                    rng.gen_range(cfg.jitter_shift.0..=cfg.jitter_shift.1),
                );
            }
            Some(per)
        } else {
            None
        };
        let blur_sigma = if rng.gen_bool(cfg.blur_prob) {
            Some(rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1))
        } else {
            None
        };
        AugmentDraw {
            angle_deg,
            k,
            kernel,
            jitter,
            blur_sigma,
        }
    }
}

/// Per-sample stream: augmentation `index` of a run is a pure function of
/// (config seed, index), so any worker arrangement reproduces it.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 mixing keeps nearby (seed, index) pairs uncorrelated
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Rotate the image about its center, same canvas, zero fill outside.
fn rotate_image(img: &ImageBuf, angle_rad: f64) -> ImageBuf {
    if angle_rad == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.h, img.w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_rad.sin_cos();
    let mut out = ImageBuf::new(h, w);
    for i in 0..h {
        for j in 0..w {
            // inverse map: rotate the destination pixel back by -angle
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = cy + (-sin) * dx + cos * dy;
            let sx = cx + cos * dx + sin * dy;
            for c in 0..3 {
                let v = img.sample(sy, sx, c);
                out.set(i, j, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Rotate a box's center about the image center; dimensions are
/// untouched, the angle shifts by the rotation.
fn rotate_rbox(r: &RBox, angle_rad: f64, cy: f64, cx: f64) -> RBox {
    let (sin, cos) = angle_rad.sin_cos();
    let dx = r.cx - cx;
    let dy = r.cy - cy;
    let ncx = cx + cos * dx - sin * dy;
    let ncy = cy + sin * dx + cos * dy;
    RBox::new(ncx, ncy, r.w, r.h, r.theta + angle_rad).expect("rigid motion keeps the box valid")
}

/// Crop a side x side window with corner (x0, y0); zero padding outside.
fn crop_image(img: &ImageBuf, x0: isize, y0: isize, side: usize) -> ImageBuf {
    let mut out = ImageBuf::new(side, side);
    for i in 0..side {
        let sy = y0 + i as isize;
        if sy < 0 || sy >= img.h as isize {
            continue;
        }
        for j in 0..side {
            let sx = x0 + j as isize;
            if sx < 0 || sx >= img.w as isize {
                continue;
            }
            for c in 0..3 {
                out.set(i, j, c, img.get(sy as usize, sx as usize, c));
            }
        }
    }
    out
}

fn apply_jitter(img: &mut ImageBuf, per_channel: &[(f64, f64); 3]) {
    for px in 0..img.h * img.w {
        for c in 0..3 {
            let (scale, shift) = per_channel[c];
            let v = img.data[px * 3 + c] as f64 * scale + shift;
            img.data[px * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn gaussian_blur(img: &ImageBuf, sigma: f64) -> ImageBuf {
    if sigma <= 1e-9 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-(t as f64) * (t as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    // separable: horizontal pass into f64, vertical pass back to u8
    let (h, w) = (img.h, img.w);
    let mut tmp = vec![0.0f64; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * img.get(i, jj, c) as f64;
                }
                tmp[(i * w + j) * 3 + c] = acc;
            }
        }
    }
    let mut out = ImageBuf::new(h, w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let ii = (i as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ii * w + j) * 3 + c];
                }
                out.set(i, j, c, acc.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Clip a transformed box to the patch; boxes keeping less than 20% of
/// their area are dropped, survivors are refit to a minimum-area rect.
fn clip_box_to_patch(b: &BoxAnnotation, side: f64) -> Option<BoxAnnotation> {
    let verts = b.rbox.vertices();
    let patch = [
        Point::new(0.0, 0.0),
        Point::new(side, 0.0),
        Point::new(side, side),
        Point::new(0.0, side),
    ];
    let clipped = clip_convex(&verts, &patch);
    if clipped.len() < 3 {
        return None;
    }
    let kept = polygon_area(&clipped);
    if kept < 0.2 * b.rbox.area() {
        return None;
    }
    let mut rbox = min_area_rect(&clipped).ok()?;
    // the refit circumscribes the clipped polygon and can poke past the
    // patch near corners; re-clip once, then fall back to the polygon's
    // axis-aligned bounds, which are inside by construction
    if !contained(&rbox, side) {
        let reclipped = clip_convex(&rbox.vertices(), &patch);
        rbox = match min_area_rect(&reclipped) {
            Ok(r) if contained(&r, side) => r,
            _ => aabb_of(&clipped)?,
        };
    }
    Some(BoxAnnotation {
        rbox,
        care: b.care,
        text: b.text.clone(),
    })
}

fn contained(r: &RBox, side: f64) -> bool {
    r.vertices()
        .iter()
        .all(|p| (-1e-6..=side + 1e-6).contains(&p.x) && (-1e-6..=side + 1e-6).contains(&p.y))
}

fn aabb_of(poly: &[Point]) -> Option<RBox> {
    let min_x = poly.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = poly.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    RBox::new(
        0.5 * (min_x + max_x),
        0.5 * (min_y + max_y),
        max_x - min_x,
        max_y - min_y,
        0.0,
    )
    .ok()
}

/// Window corner options for a window of `side` containing `rbox`, or
/// None when the box does not fit.
fn window_interval(rbox: &RBox, side: f64) -> Option<((f64, f64), (f64, f64))> {
    let verts = rbox.vertices();
    let min_x = verts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = verts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = verts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = verts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    if max_x - min_x > side || max_y - min_y > side {
        return None;
    }
    Some(((max_x - side, min_x), (max_y - side, min_y)))
}

/// Augment one sample into a crop_size x crop_size patch. Deterministic
/// in (cfg.seed, index).
pub fn augment(sample: &Sample, cfg: &AugmentConfig, index: u64) -> Sample {
    assert_eq!(cfg.crop_size % 32, 0, "crop size must divide 32");
    let mut rng = sample_rng(cfg.seed, index);
    let draw = AugmentDraw::sample(cfg, &mut rng);
    augment_with_draw(sample, cfg, &draw, &mut rng)
}

/// The pipeline applied to pre-drawn choices; positioning and retry
/// randomness continues from `rng`.
pub fn augment_with_draw(
    sample: &Sample,
    cfg: &AugmentConfig,
    draw: &AugmentDraw,
    rng: &mut impl Rng,
) -> Sample {
    let angle = draw.angle_deg.to_radians();
    let rotated = rotate_image(&sample.image, angle);
    let cy = (sample.image.h as f64 - 1.0) / 2.0;
    let cx = (sample.image.w as f64 - 1.0) / 2.0;
    let boxes: Vec<BoxAnnotation> = sample
        .boxes
        .iter()
        .map(|b| BoxAnnotation {
            rbox: rotate_rbox(&b.rbox, angle, cy, cx),
            care: b.care,
            text: b.text.clone(),
        })
        .collect();

    let side = (draw.k * cfg.crop_size as f64).round().max(1.0) as usize;
    let mut window = None;
    if boxes.is_empty() {
        window = Some(random_window(rotated.w, rotated.h, side, rng));
    } else {
        let mut kernel = draw.kernel % boxes.len();
        for _ in 0..10 {
            if let Some(((x_lo, x_hi), (y_lo, y_hi))) = window_interval(&boxes[kernel].rbox, side as f64) {
                let x0 = rng.gen_range(x_lo..=x_hi);
                let y0 = rng.gen_range(y_lo..=y_hi);
                window = Some((x0.round() as isize, y0.round() as isize));
                break;
            }
            // box larger than the window: redraw the kernel choice
            kernel = rng.gen_range(0..u32::MAX) as usize % boxes.len();
        }
        if window.is_none() {
            // fall back to a centered crop
            let x0 = (rotated.w as isize - side as isize) / 2;
            let y0 = (rotated.h as isize - side as isize) / 2;
            window = Some((x0, y0));
        }
    }
    let (x0, y0) = window.expect("window chosen");

    let patch = crop_image(&rotated, x0, y0, side);
    let mut out_img = patch.resized(cfg.crop_size, cfg.crop_size);
    let scale = cfg.crop_size as f64 / side as f64;

    let out_boxes: Vec<BoxAnnotation> = boxes
        .iter()
        .filter_map(|b| {
            let r = &b.rbox;
            let moved = RBox::new(
                (r.cx - x0 as f64) * scale,
                (r.cy - y0 as f64) * scale,
                r.w * scale,
                r.h * scale,
                r.theta,
            )
            .ok()?;
            clip_box_to_patch(
                &BoxAnnotation {
                    rbox: moved,
                    care: b.care,
                    text: b.text.clone(),
                },
                cfg.crop_size as f64,
            )
        })
        .collect();

    if let Some(jitter) = &draw.jitter {
        apply_jitter(&mut out_img, jitter);
    }
    if let Some(sigma) = draw.blur_sigma {
        out_img = gaussian_blur(&out_img, sigma);
    }

    Sample {
        image: out_img,
        boxes: out_boxes,
    }
}

fn random_window(w: usize, h: usize, side: usize, rng: &mut impl Rng) -> (isize, isize) {
    let x = if w > side {
        rng.gen_range(0..=(w - side)) as isize
    } else {
        (w as isize - side as isize) / 2
    };
    let y = if h > side {
        rng.gen_range(0..=(h - side)) as isize
    } else {
        (h as isize - side as isize) / 2
    };
    (x, y)
}
