//! Dice, IoU-distance and rotation losses plus their weighted total.
//!
//! Labels are plain constants; only the predictions ride the tape. Each
//! loss is a single op with an analytic backward. Reductions accumulate in
//! f64. Empty supervision (no mask, no positives) short-circuits to a
//! constant zero so gradients vanish instead of producing 0/0.

use crate::error::{Error, Result};
use crate::geometry::LabelMaps;
use crate::tensor::ops::{add, scale};
use crate::tensor::{Elem, GradFn, Tensor};

const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_d: 2.0,
            lambda_r: 20.0,
        }
    }
}

/// Per-image label maps stacked into network layout: score/rot/mask are
/// N*H*W, dist is N*4*H*W with each image's four channels contiguous.
#[derive(Clone, Debug)]
pub struct LabelBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub score: Vec<Elem>,
    pub dist: Vec<Elem>,
    pub rot: Vec<Elem>,
    pub mask: Vec<Elem>,
}

impl LabelBatch {
    pub fn from_maps(maps: &[LabelMaps]) -> Result<LabelBatch> {
        let Some(first) = maps.first() else {
            return Err(Error::Geometry("empty label batch".into()));
        };
        let (h, w) = (first.h, first.w);
        let mut out = LabelBatch {
            n: maps.len(),
            h,
            w,
            score: Vec::with_capacity(maps.len() * h * w),
            dist: Vec::with_capacity(maps.len() * 4 * h * w),
            rot: Vec::with_capacity(maps.len() * h * w),
            mask: Vec::with_capacity(maps.len() * h * w),
        };
        for m in maps {
            if (m.h, m.w) != (h, w) {
                return Err(Error::Geometry(format!(
                    "label batch mixes map sizes {}x{} and {h}x{w}",
                    m.h, m.w
                )));
            }
            out.score.extend_from_slice(&m.score);
            out.dist.extend_from_slice(&m.dist);
            out.rot.extend_from_slice(&m.rot);
            out.mask.extend_from_slice(&m.train_mask);
        }
        Ok(out)
    }

    pub fn from_single(maps: &LabelMaps) -> LabelBatch {
        LabelBatch::from_maps(std::slice::from_ref(maps)).expect("single map")
    }

    /// Positive supervision: ground-truth text pixels that are not masked
    /// out.
    pub fn pos_mask(&self) -> Vec<Elem> {
        self.score
            .iter()
            .zip(self.mask.iter())
            .map(|(&s, &m)| s * m)
            .collect()
    }
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &'static str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Shape {
            op: "loss",
            axis: what,
            expected: format!("{shape:?}"),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(())
}

fn expect_len(len: usize, want: usize, what: &'static str) -> Result<()> {
    if len != want {
        return Err(Error::Shape {
            op: "loss",
            axis: what,
            expected: want.to_string(),
            got: len.to_string(),
        });
    }
    Ok(())
}

struct DiceGrad {
    s_star: Vec<Elem>,
    mask: Vec<Elem>,
    inter: f64,
    denom: f64,
}

impl GradFn for DiceGrad {
    fn backward(&self, grad_out: &[Elem], _parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let g = grad_out[0] as f64;
        let d2 = self.denom * self.denom;
        let grads = self
            .s_star
            .iter()
            .zip(self.mask.iter())
            .map(|(&s, &m)| {
                let m = m as f64;
                let s = s as f64;
                // d/dy [1 - 2I/D]; both I and D depend on the prediction
                ((-2.0 * (m * s * self.denom - self.inter * m) / d2) * g) as Elem
            })
            .collect();
        vec![Some(grads)]
    }
}

/// Global dice loss over masked pixels:
/// 1 - 2*sum(m*s*y) / (sum(m*s) + sum(m*y) + eps).
pub fn dice_loss(s_hat: &Tensor, s_star: &[Elem], mask: &[Elem]) -> Result<Tensor> {
    let n = s_hat.numel();
    expect_len(s_star.len(), n, "s_star")?;
    expect_len(mask.len(), n, "mask")?;
    if mask.iter().all(|&m| m == 0.0) {
        return Ok(Tensor::scalar(0.0));
    }
    let y = s_hat.data();
    let mut inter = 0.0f64;
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    for k in 0..n {
        let m = mask[k] as f64;
        inter += m * s_star[k] as f64 * y[k] as f64;
        a += m * s_star[k] as f64;
        b += m * y[k] as f64;
    }
    let denom = a + b + DICE_EPS;
    let loss = 1.0 - 2.0 * inter / denom;
    Ok(Tensor::from_op(
        vec![1],
        vec![loss as Elem],
        vec![s_hat.clone()],
        Box::new(DiceGrad {
            s_star: s_star.to_vec(),
            mask: mask.to_vec(),
            inter,
            denom,
        }),
    ))
}

struct IouDistGrad {
    d_star: Vec<Elem>,
    pos: Vec<(usize, usize)>, // (image, pixel)
    hw: usize,
}

impl GradFn for IouDistGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let d = parents[0].data();
        let hw = self.hw;
        let scale = grad_out[0] as f64 / self.pos.len() as f64;
        let mut gd = vec![0.0 as Elem; d.len()];
        for &(ni, k) in &self.pos {
            let base = ni * 4 * hw;
            let at = |ch: usize| base + ch * hw + k;
            let p = [d[at(0)] as f64, d[at(1)] as f64, d[at(2)] as f64, d[at(3)] as f64];
            let t = [
                self.d_star[at(0)] as f64,
                self.d_star[at(1)] as f64,
                self.d_star[at(2)] as f64,
                self.d_star[at(3)] as f64,
            ];
            // channels: 0 top, 1 right, 2 bottom, 3 left
            let ih = p[0].min(t[0]) + p[2].min(t[2]);
            let iw = p[1].min(t[1]) + p[3].min(t[3]);
            let inter = ih * iw;
            let area_p = (p[0] + p[2]) * (p[1] + p[3]);
            let area_t = (t[0] + t[2]) * (t[1] + t[3]);
            let union = area_p + area_t - inter;
            // loss_k = ln(U+1) - ln(I+1)
            for ch in 0..4 {
                let di = if p[ch] <= t[ch] {
                    if ch % 2 == 0 {
                        iw
                    } else {
                        ih
                    }
                } else {
                    0.0
                };
                let da = if ch % 2 == 0 {
                    p[1] + p[3]
                } else {
                    p[0] + p[2]
                };
                let du = da - di;
                let g = du / (union + 1.0) - di / (inter + 1.0);
                gd[at(ch)] += (g * scale) as Elem;
            }
        }
        vec![Some(gd)]
    }
}

/// Axis-decomposed IoU regression loss, mean of -log((I+1)/(U+1)) over
/// positive pixels.
pub fn iou_dist_loss(d_hat: &Tensor, d_star: &[Elem], pos_mask: &[Elem]) -> Result<Tensor> {
    let shape = d_hat.shape().to_vec();
    if shape.len() != 4 || shape[1] != 4 {
        return Err(Error::Shape {
            op: "loss",
            axis: "dist",
            expected: "[N,4,H,W]".into(),
            got: format!("{shape:?}"),
        });
    }
    let (n, hw) = (shape[0], shape[2] * shape[3]);
    expect_len(d_star.len(), n * 4 * hw, "d_star")?;
    expect_len(pos_mask.len(), n * hw, "pos_mask")?;
    let pos: Vec<(usize, usize)> = (0..n)
        .flat_map(|ni| (0..hw).map(move |k| (ni, k)))
        .filter(|&(ni, k)| pos_mask[ni * hw + k] > 0.5)
        .collect();
    if pos.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let d = d_hat.data();
    let mut acc = 0.0f64;
    for &(ni, k) in &pos {
        let base = ni * 4 * hw;
        let at = |ch: usize| base + ch * hw + k;
        let p = [d[at(0)] as f64, d[at(1)] as f64, d[at(2)] as f64, d[at(3)] as f64];
        let t = [
            d_star[at(0)] as f64,
            d_star[at(1)] as f64,
            d_star[at(2)] as f64,
            d_star[at(3)] as f64,
        ];
        let ih = p[0].min(t[0]) + p[2].min(t[2]);
        let iw = p[1].min(t[1]) + p[3].min(t[3]);
        let inter = ih * iw;
        let union = (p[0] + p[2]) * (p[1] + p[3]) + (t[0] + t[2]) * (t[1] + t[3]) - inter;
        acc += (union + 1.0).ln() - (inter + 1.0).ln();
    }
    let loss = acc / pos.len() as f64;
    Ok(Tensor::from_op(
        vec![1],
        vec![loss as Elem],
        vec![d_hat.clone()],
        Box::new(IouDistGrad {
            d_star: d_star.to_vec(),
            pos,
            hw,
        }),
    ))
}

struct RotationGrad {
    r_star: Vec<Elem>,
    pos: Vec<usize>,
}

impl GradFn for RotationGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let r = parents[0].data();
        let scale = grad_out[0] as f64 / self.pos.len() as f64;
        let mut gr = vec![0.0 as Elem; r.len()];
        for &k in &self.pos {
            let delta = r[k] as f64 - self.r_star[k] as f64;
            gr[k] = (delta.sin() * scale) as Elem;
        }
        vec![Some(gr)]
    }
}

/// Mean of 1 - cos(R* - R_hat) over positive pixels.
pub fn rotation_loss(r_hat: &Tensor, r_star: &[Elem], pos_mask: &[Elem]) -> Result<Tensor> {
    let n = r_hat.numel();
    expect_len(r_star.len(), n, "r_star")?;
    expect_len(pos_mask.len(), n, "pos_mask")?;
    let pos: Vec<usize> = (0..n).filter(|&k| pos_mask[k] > 0.5).collect();
    if pos.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let r = r_hat.data();
    let mut acc = 0.0f64;
    for &k in &pos {
        acc += 1.0 - (r_star[k] as f64 - r[k] as f64).cos();
    }
    let loss = acc / pos.len() as f64;
    Ok(Tensor::from_op(
        vec![1],
        vec![loss as Elem],
        vec![r_hat.clone()],
        Box::new(RotationGrad {
            r_star: r_star.to_vec(),
            pos,
        }),
    ))
}

/// All loss terms, still attached to the tape. `total` is the training
/// objective.
pub struct LossReport {
    pub total: Tensor,
    pub cls: Tensor,
    pub dist: Tensor,
    pub rot: Tensor,
}

impl LossReport {
    pub fn values(&self) -> (f64, f64, f64, f64) {
        (
            self.total.item() as f64,
            self.cls.item() as f64,
            self.dist.item() as f64,
            self.rot.item() as f64,
        )
    }

    pub fn csv_header() -> &'static str {
        "step,total,cls,dist,rot"
    }

    pub fn csv_row(&self, step: usize) -> String {
        let (t, c, d, r) = self.values();
        format!("{step},{t},{c},{d},{r}")
    }
}

/// Weighted combination of the three terms over a label batch.
pub fn total_loss(
    score_hat: &Tensor,
    dist_hat: &Tensor,
    rot_hat: &Tensor,
    labels: &LabelBatch,
    weights: LossWeights,
) -> Result<LossReport> {
    let (n, h, w) = (labels.n, labels.h, labels.w);
    expect_shape(score_hat, &[n, 1, h, w], "score")?;
    expect_shape(dist_hat, &[n, 4, h, w], "dist")?;
    expect_shape(rot_hat, &[n, 1, h, w], "rot")?;
    let pos = labels.pos_mask();
    let cls = dice_loss(score_hat, &labels.score, &labels.mask)?;
    let dist = iou_dist_loss(dist_hat, &labels.dist, &pos)?;
    let rot = rotation_loss(rot_hat, &labels.rot, &pos)?;
    let total = add(
        &add(
            &scale(&cls, weights.lambda_c as Elem),
            &scale(&dist, weights.lambda_d as Elem),
        )?,
        &scale(&rot, weights.lambda_r as Elem),
    )?;
    Ok(LossReport {
        total,
        cls,
        dist,
        rot,
    })
}
