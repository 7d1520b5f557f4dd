//! Synthetic scenes of light striped rectangles on a dark noisy
//! background. Cheap stand-ins for text lines, used by smoke and
//! overfitting tests where a real dataset would be overkill.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BoxAnnotation, ImageBuf, Sample};
use crate::geometry::{Point, RBox};

/// Render one scene. Deterministic in (seed, h, w, n_boxes).
pub fn synth_scene(seed: u64, h: usize, w: usize, n_boxes: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = ImageBuf::new(h, w);
    for px in image.data.iter_mut() {
        *px = rng.gen_range(20..60) as u8;
    }

    let mut boxes: Vec<BoxAnnotation> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n_boxes && attempts < 50 * n_boxes.max(1) {
        attempts += 1;
        let bw = rng.gen_range(0.25..0.5) * w as f64;
        let bh = rng.gen_range(0.35..0.6) * bw.min(0.25 * h as f64);
        let theta = rng.gen_range(-0.5..0.5);
        let margin = 0.5 * bw.hypot(bh) + 2.0;
        if 2.0 * margin >= w as f64 || 2.0 * margin >= h as f64 {
            continue;
        }
        let cx = rng.gen_range(margin..w as f64 - margin);
        let cy = rng.gen_range(margin..h as f64 - margin);
        let rbox = RBox::new(cx, cy, bw, bh, theta).expect("sampled sides are positive");
        // keep boxes apart so labels never fight over a pixel
        let far = boxes.iter().all(|b| {
            let d = (b.rbox.cx - cx).hypot(b.rbox.cy - cy);
            d > 0.6 * (b.rbox.diagonal() + rbox.diagonal())
        });
        if !far {
            continue;
        }
        render_box(&mut image, &rbox, &mut rng);
        boxes.push(BoxAnnotation {
            rbox,
            care: true,
            text: String::new(),
        });
    }
    Sample { image, boxes }
}

/// A fixed-size batch of scenes, one box each, for overfitting runs.
pub fn synth_dataset(seed: u64, count: usize, h: usize, w: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| synth_scene(seed.wrapping_add(i as u64), h, w, 1))
        .collect()
}

/// Fill the box with a light base tone and darker stripes across the
/// long axis, a crude glyph texture.
fn render_box(image: &mut ImageBuf, rbox: &RBox, rng: &mut impl Rng) {
    let base = rng.gen_range(190..240) as f64;
    let stripe = rng.gen_range(90..140) as f64;
    let period = rng.gen_range(6.0..12.0);
    let (sin, cos) = rbox.theta.sin_cos();
    let verts = rbox.vertices();
    let min_x = verts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_x = verts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil().min(image.w as f64 - 1.0) as usize;
    let min_y = verts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_y = verts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil().min(image.h as f64 - 1.0) as usize;
    for i in min_y..=max_y {
        for j in min_x..=max_x {
            let p = Point::new(j as f64, i as f64);
            if !rbox.contains(p) {
                continue;
            }
            // coordinate along the box's long axis
            let u = (p.x - rbox.cx) * cos + (p.y - rbox.cy) * sin;
            let phase = (u / period).rem_euclid(1.0);
            let v = if phase < 0.35 { stripe } else { base };
            let v = (v + rng.gen_range(-8.0..8.0)).clamp(0.0, 255.0) as u8;
            for c in 0..3 {
                image.set(i, j, c, v);
            }
        }
    }
}
