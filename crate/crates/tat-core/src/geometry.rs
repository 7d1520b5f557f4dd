//! Rotated boxes, per-pixel label maps, prediction decoding, exact IoU,
//! and locality-aware NMS.
//!
//! Coordinates are image pixels, x right, y down. A map pixel (row i,
//! col j) at stride s corresponds to the image point (s*j, s*i). Distance
//! channels are ordered (top, right, bottom, left) in the box's rotated
//! frame.

use crate::error::{Error, Result};
use crate::tensor::Elem;
use rand::Rng;
use std::path::Path;

/// Stride between the input image and the label/prediction maps.
pub const LABEL_STRIDE: usize = 4;
/// Per-side score-region shrink, referenced to the shorter side.
pub const SHRINK: f64 = 0.3;
/// Default decode score threshold.
pub const DEFAULT_SCORE_THRESH: f64 = 0.8;
/// Default NMS IoU threshold.
pub const DEFAULT_IOU_THRESH: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Point {
        Point { x, y }
    }
}

fn cross(u: Point, v: Point) -> f64 {
    u.x * v.y - u.y * v.x
}

fn sub(a: Point, b: Point) -> Point {
    Point::new(a.x - b.x, a.y - b.y)
}

/// Rotated rectangle. Canonical form: w >= h and theta in [-pi/2, pi/2),
/// enforced by the constructor (a rectangle is invariant under swapping
/// sides with a quarter turn, and under half turns).
#[derive(Clone, Copy, Debug)]
pub struct RBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<RBox> {
        for (v, name) in [(cx, "cx"), (cy, "cy"), (w, "w"), (h, "h"), (theta, "theta")] {
            if !v.is_finite() {
                return Err(Error::Geometry(format!("non-finite {name} = {v}")));
            }
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Geometry(format!(
                "sides must be positive, got w={w}, h={h}"
            )));
        }
        let (w, h, theta) = if w >= h {
            (w, h, theta)
        } else {
            (h, w, theta + std::f64::consts::FRAC_PI_2)
        };
        let theta = normalize_angle(theta);
        Ok(RBox { cx, cy, w, h, theta })
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    /// Corners in clockwise screen order starting from the box-frame
    /// top-left.
    pub fn vertices(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let corner = |u: f64, v: f64| Point::new(self.cx + c * u - s * v, self.cy + s * u + c * v);
        [
            corner(-hw, -hh),
            corner(hw, -hh),
            corner(hw, hh),
            corner(-hw, hh),
        ]
    }

    /// Fit the minimum-area rectangle through four corner points.
    pub fn from_vertices(quad: &[Point; 4]) -> Result<RBox> {
        min_area_rect(quad)
    }

    /// Point coordinates in the box frame (u along w, v along h).
    fn to_frame(&self, p: Point) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, p: Point) -> bool {
        let (u, v) = self.to_frame(p);
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Perpendicular distances (top, right, bottom, left) from `p` to the
    /// box edges. Positive iff `p` is inside.
    pub fn edge_distances(&self, p: Point) -> [f64; 4] {
        let (u, v) = self.to_frame(p);
        [
            v + self.h / 2.0,
            self.w / 2.0 - u,
            self.h / 2.0 - v,
            u + self.w / 2.0,
        ]
    }

    /// Shrink every side inward by `factor` times the shorter side.
    /// Valid for factor < 0.5, which keeps both sides positive.
    pub fn shrunk(&self, factor: f64) -> RBox {
        let margin = 2.0 * factor * self.w.min(self.h);
        RBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w - margin,
            h: self.h - margin,
            theta: self.theta,
        }
    }
}

/// Wrap an angle into [-pi/2, pi/2) using the half-turn symmetry.
pub fn normalize_angle(theta: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can land exactly on pi/2 through rounding
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

/// Signed double area; positive for clockwise screen order (y down).
fn shoelace(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    shoelace(poly).abs() / 2.0
}

fn line_intersect(a: Point, b: Point, p: Point, q: Point) -> Point {
    let e = sub(b, a);
    let d = sub(q, p);
    let denom = cross(e, d);
    if denom.abs() < 1e-30 {
        return p;
    }
    let t = cross(e, sub(a, p)) / denom;
    Point::new(p.x + t * d.x, p.y + t * d.y)
}

/// Sutherland-Hodgman clip of a convex `subject` by a convex quad.
pub(crate) fn clip_convex(subject: &[Point], clip: &[Point; 4]) -> Vec<Point> {
    let orient = if shoelace(clip) >= 0.0 { 1.0 } else { -1.0 };
    let mut poly = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % 4];
        let edge = sub(b, a);
        let inside = |p: Point| orient * cross(edge, sub(p, a)) >= 0.0;
        let input = std::mem::take(&mut poly);
        for k in 0..input.len() {
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur = input[k];
            match (inside(prev), inside(cur)) {
                (true, true) => poly.push(cur),
                (true, false) => poly.push(line_intersect(a, b, prev, cur)),
                (false, true) => {
                    poly.push(line_intersect(a, b, prev, cur));
                    poly.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    poly
}

/// Exact IoU of two rotated rectangles via convex polygon clipping.
pub fn rbox_iou(a: &RBox, b: &RBox) -> f64 {
    let va = a.vertices();
    let vb = b.vertices();
    let inter = polygon_area(&clip_convex(&va, &vb));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Monte-Carlo IoU estimate: uniform samples over the joint bounding box.
/// Slow and noisy by design; cross-check for `rbox_iou`.
pub fn rbox_iou_monte_carlo(a: &RBox, b: &RBox, samples: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point> = a.vertices().into_iter().chain(b.vertices()).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for _ in 0..samples {
        let p = Point::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let ia = a.contains(p);
        let ib = b.contains(p);
        if ia && ib {
            inter += 1;
        }
        if ia || ib {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Minimum-area enclosing rectangle: convex hull, then one caliper pass
/// (the optimum is aligned with some hull edge).
pub fn min_area_rect(points: &[Point]) -> Result<RBox> {
    let hull = convex_hull(points)?;
    if hull.len() < 3 {
        return Err(Error::Geometry(format!(
            "min_area_rect needs non-collinear points, got {} hull points",
            hull.len()
        )));
    }
    let mut best: Option<(f64, RBox)> = None;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let e = sub(b, a);
        let len = e.x.hypot(e.y);
        if len < 1e-12 {
            continue;
        }
        let d = Point::new(e.x / len, e.y / len);
        let n = Point::new(-d.y, d.x);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let u = p.x * d.x + p.y * d.y;
            let v = p.x * n.x + p.y * n.y;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let (w, h) = (u1 - u0, v1 - v0);
        if w <= 0.0 || h <= 0.0 {
            continue;
        }
        let area = w * h;
        if best.as_ref().map_or(true, |(ba, _)| area < *ba) {
            let cu = (u0 + u1) / 2.0;
            let cv = (v0 + v1) / 2.0;
            let center = Point::new(cu * d.x + cv * n.x, cu * d.y + cv * n.y);
            let rb = RBox::new(center.x, center.y, w, h, d.y.atan2(d.x))?;
            best = Some((area, rb));
        }
    }
    best.map(|(_, rb)| rb)
        .ok_or_else(|| Error::Geometry("degenerate point set".into()))
}

/// Andrew monotone chain. Returns hull vertices; fewer than 3 means the
/// input was collinear or a single point.
fn convex_hull(points: &[Point]) -> Result<Vec<Point>> {
    if points.is_empty() {
        return Err(Error::Geometry("empty point set".into()));
    }
    for p in points {
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::Geometry(format!("non-finite point ({}, {})", p.x, p.y)));
        }
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    if pts.len() < 3 {
        return Ok(pts);
    }
    let chain = |iter: &mut dyn Iterator<Item = Point>| -> Vec<Point> {
        let mut half: Vec<Point> = Vec::new();
        for p in iter {
            while half.len() >= 2 {
                let q = half[half.len() - 1];
                let r = half[half.len() - 2];
                // pop right turns and collinear runs
                if cross(sub(q, r), sub(p, r)) <= 0.0 {
                    half.pop();
                } else {
                    break;
                }
            }
            half.push(p);
        }
        half
    };
    let mut lower = chain(&mut pts.iter().copied());
    let mut upper = chain(&mut pts.iter().rev().copied());
    // each chain ends with the other's starting point
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Ok(lower)
}

/// Ground-truth maps at LABEL_STRIDE resolution.
#[derive(Clone, Debug)]
pub struct LabelMaps {
    pub h: usize,
    pub w: usize,
    /// 1 inside shrunk care boxes. h*w.
    pub score: Vec<Elem>,
    /// (top, right, bottom, left) to the unshrunk edges, channel-major.
    /// 4*h*w.
    pub dist: Vec<Elem>,
    /// Generating box angle. h*w.
    pub rot: Vec<Elem>,
    /// 0 over don't-care extents. h*w.
    pub train_mask: Vec<Elem>,
}

impl LabelMaps {
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.w + j
    }

    pub fn dist_at(&self, ch: usize, i: usize, j: usize) -> Elem {
        self.dist[ch * self.h * self.w + i * self.w + j]
    }

    pub fn positive_count(&self) -> usize {
        self.score
            .iter()
            .zip(self.train_mask.iter())
            .filter(|(&s, &m)| s > 0.5 && m > 0.5)
            .count()
    }
}

/// Map-pixel index range [lo, hi] covering an image-coordinate interval.
fn pixel_range(lo: f64, hi: f64, cap: usize) -> Option<(usize, usize)> {
    let s = LABEL_STRIDE as f64;
    let a = (lo / s).floor().max(0.0) as usize;
    let b = (hi / s).ceil() as usize;
    if b >= cap && a >= cap {
        return None;
    }
    Some((a.min(cap - 1), b.min(cap - 1)))
}

fn bounds(vs: &[Point; 4]) -> (f64, f64, f64, f64) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in vs {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    (x0, y0, x1, y1)
}

/// Rasterize ground truth for one image. Boxes are painted largest-first,
/// so where care boxes overlap the smaller area wins. Don't-care boxes
/// clear the train mask over their full extent.
pub fn generate_labels(boxes: &[(RBox, bool)], img_h: usize, img_w: usize) -> Result<LabelMaps> {
    if img_h % LABEL_STRIDE != 0 || img_w % LABEL_STRIDE != 0 {
        return Err(Error::Geometry(format!(
            "label maps need image dims divisible by {LABEL_STRIDE}, got {img_h}x{img_w}"
        )));
    }
    let (mh, mw) = (img_h / LABEL_STRIDE, img_w / LABEL_STRIDE);
    let mut maps = LabelMaps {
        h: mh,
        w: mw,
        score: vec![0.0; mh * mw],
        dist: vec![0.0; 4 * mh * mw],
        rot: vec![0.0; mh * mw],
        train_mask: vec![1.0; mh * mw],
    };

    for (b, care) in boxes {
        if *care {
            continue;
        }
        let (x0, y0, x1, y1) = bounds(&b.vertices());
        let (Some((i0, i1)), Some((j0, j1))) = (pixel_range(y0, y1, mh), pixel_range(x0, x1, mw))
        else {
            continue;
        };
        for i in i0..=i1 {
            for j in j0..=j1 {
                let p = Point::new((LABEL_STRIDE * j) as f64, (LABEL_STRIDE * i) as f64);
                if b.contains(p) {
                    maps.train_mask[i * mw + j] = 0.0;
                }
            }
        }
    }

    let mut care_boxes: Vec<&RBox> = boxes.iter().filter(|(_, c)| *c).map(|(b, _)| b).collect();
    // stable sort: equal areas keep input order, then later paint wins
    care_boxes.sort_by(|a, b| b.area().partial_cmp(&a.area()).unwrap());
    for b in care_boxes {
        let shr = b.shrunk(SHRINK);
        let (x0, y0, x1, y1) = bounds(&shr.vertices());
        let (Some((i0, i1)), Some((j0, j1))) = (pixel_range(y0, y1, mh), pixel_range(x0, x1, mw))
        else {
            continue;
        };
        for i in i0..=i1 {
            for j in j0..=j1 {
                let p = Point::new((LABEL_STRIDE * j) as f64, (LABEL_STRIDE * i) as f64);
                if !shr.contains(p) {
                    continue;
                }
                let d = b.edge_distances(p);
                let at = i * mw + j;
                maps.score[at] = 1.0;
                maps.rot[at] = b.theta as Elem;
                for (ch, &v) in d.iter().enumerate() {
                    maps.dist[ch * mh * mw + at] = v as Elem;
                }
            }
        }
    }
    Ok(maps)
}

#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub rbox: RBox,
    pub score: f64,
}

/// Reconstruct candidate boxes from prediction maps, row-major scan order.
/// `dist` is channel-major 4*h*w in (top, right, bottom, left) order.
pub fn decode(
    score: &[Elem],
    dist: &[Elem],
    rot: &[Elem],
    h: usize,
    w: usize,
    score_thresh: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let at = i * w + j;
            let s = score[at] as f64;
            if s < score_thresh {
                continue;
            }
            let t = dist[at] as f64;
            let r = dist[h * w + at] as f64;
            let b = dist[2 * h * w + at] as f64;
            let l = dist[3 * h * w + at] as f64;
            let bw = l + r;
            let bh = t + b;
            if bw <= 0.0 || bh <= 0.0 {
                continue;
            }
            let theta = rot[at] as f64;
            let (sin, cos) = theta.sin_cos();
            // box-frame coords of this pixel, then invert the rotation
            let u = (l - r) / 2.0;
            let v = (t - b) / 2.0;
            let px = (LABEL_STRIDE * j) as f64;
            let py = (LABEL_STRIDE * i) as f64;
            let cx = px - (cos * u - sin * v);
            let cy = py - (sin * u + cos * v);
            if let Ok(rbox) = RBox::new(cx, cy, bw, bh, theta) {
                out.push(Detection { rbox, score: s });
            }
        }
    }
    out
}

/// Align `b`'s vertices to `a`'s by the cyclic shift with the smallest
/// total displacement, then return per-vertex maxima. Canonicalization can
/// relabel corners of near-square boxes, which a plain zip would misread
/// as a large error.
pub fn vertex_deviation(a: &RBox, b: &RBox) -> f64 {
    let va = a.vertices();
    let vb = b.vertices();
    (0..4)
        .map(|shift| {
            (0..4)
                .map(|k| {
                    let p = va[k];
                    let q = vb[(k + shift) % 4];
                    (p.x - q.x).hypot(p.y - q.y)
                })
                .fold(0.0, f64::max)
        })
        .fold(f64::MAX, f64::min)
}

struct Fused {
    verts: [Point; 4], // weight-scaled accumulator
    weight: f64,
    score: f64,
}

impl Fused {
    fn new(d: &Detection) -> Fused {
        let mut verts = d.rbox.vertices();
        for p in &mut verts {
            p.x *= d.score;
            p.y *= d.score;
        }
        Fused {
            verts,
            weight: d.score,
            score: d.score,
        }
    }

    fn mean_verts(&self) -> [Point; 4] {
        let mut vs = self.verts;
        for p in &mut vs {
            p.x /= self.weight;
            p.y /= self.weight;
        }
        vs
    }

    fn absorb(&mut self, d: &Detection) {
        let cur = self.mean_verts();
        let vb = d.rbox.vertices();
        // align corner labels before averaging
        let shift = (0..4)
            .min_by(|&s1, &s2| {
                let cost = |s: usize| -> f64 {
                    (0..4)
                        .map(|k| {
                            let p = cur[k];
                            let q = vb[(k + s) % 4];
                            (p.x - q.x).hypot(p.y - q.y)
                        })
                        .sum()
                };
                cost(s1).partial_cmp(&cost(s2)).unwrap()
            })
            .unwrap();
        for k in 0..4 {
            let q = vb[(k + shift) % 4];
            self.verts[k].x += q.x * d.score;
            self.verts[k].y += q.y * d.score;
        }
        self.weight += d.score;
        self.score = self.score.max(d.score);
    }

    fn to_detection(&self) -> Option<Detection> {
        let rbox = min_area_rect(&self.mean_verts()).ok()?;
        Some(Detection {
            rbox,
            score: self.score,
        })
    }
}

/// Locality-aware NMS: a linear pass fuses runs of near-duplicates from
/// the row-major decode (score-weighted vertex average, score = max of the
/// run), then standard greedy suppression on the survivors.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut fused: Vec<Fused> = Vec::new();
    for d in dets {
        let merged = match fused.last_mut() {
            Some(f) => {
                let candidate = f.to_detection();
                match candidate {
                    Some(c) if rbox_iou(&c.rbox, &d.rbox) > iou_thresh => {
                        f.absorb(d);
                        true
                    }
                    _ => false,
                }
            }
            None => false,
        };
        if !merged {
            fused.push(Fused::new(d));
        }
    }

    let mut cands: Vec<Detection> = fused.iter().filter_map(|f| f.to_detection()).collect();
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.rbox.cx.partial_cmp(&b.rbox.cx).unwrap())
            .then(a.rbox.cy.partial_cmp(&b.rbox.cy).unwrap())
    });

    let mut keep: Vec<Detection> = Vec::new();
    for d in cands {
        if keep.iter().all(|k| rbox_iou(&k.rbox, &d.rbox) <= iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

/// One detection per line: "x1,y1,x2,y2,x3,y3,x4,y4,score", vertices
/// clockwise from the box-frame top-left, coordinates to 2 decimals.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let vs = d.rbox.vertices();
        for p in vs {
            out.push_str(&format!("{:.2},{:.2},", p.x, p.y));
        }
        out.push_str(&format!("{:.4}\n", d.score));
    }
    out
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    crate::io::atomic_write(path, format_detections(dets).as_bytes())
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(Error::Annotation {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("expected 9 comma-separated values, got {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 9];
        for (k, f) in fields.iter().enumerate() {
            nums[k] = f.parse().map_err(|_| Error::Annotation {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("not a number: `{f}`"),
            })?;
        }
        let score = nums[8];
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Annotation {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("score {score} outside [0, 1]"),
            });
        }
        let quad = [
            Point::new(nums[0], nums[1]),
            Point::new(nums[2], nums[3]),
            Point::new(nums[4], nums[5]),
            Point::new(nums[6], nums[7]),
        ];
        let rbox = min_area_rect(&quad).map_err(|e| Error::Annotation {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        out.push(Detection { rbox, score });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

/// Random box that fits entirely inside an img_w x img_h image.
pub fn random_rbox(
    rng: &mut impl Rng,
    img_w: usize,
    img_h: usize,
    min_side: f64,
    max_side: f64,
) -> RBox {
    loop {
        let w = rng.gen_range(min_side..max_side);
        let h = rng.gen_range(min_side..max_side);
        let theta = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let radius = w.hypot(h) / 2.0;
        if 2.0 * radius >= img_w as f64 || 2.0 * radius >= img_h as f64 {
            continue;
        }
        let cx = rng.gen_range(radius..img_w as f64 - radius);
        let cy = rng.gen_range(radius..img_h as f64 - radius);
        if let Ok(b) = RBox::new(cx, cy, w, h, theta) {
            return b;
        }
    }
}
