//! Bilinear resize with half-pixel (align_corners=false) sampling.

use super::{Elem, GradFn, Tensor};
use crate::error::{Error, Result};

/// Source coordinate for output index `i`, clamped to the valid range.
/// Half-pixel convention: src = (i + 0.5) * in/out - 0.5.
fn src_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// (low index, high index, weight of high) for one axis sample.
fn axis_taps(i: usize, in_len: usize, scale: f64) -> (usize, usize, f64) {
    let s = src_coord(i, scale).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

struct ResizeGrad {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl GradFn for ResizeGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let shape = parents[0].shape();
        let (n, c) = (shape[0], shape[1]);
        let sy = ih as f64 / oh as f64;
        let sx = iw as f64 / ow as f64;
        let mut gx = vec![0.0f64; n * c * ih * iw];
        for oy in 0..oh {
            let (y0, y1, wy) = axis_taps(oy, ih, sy);
            for ox in 0..ow {
                let (x0, x1, wx) = axis_taps(ox, iw, sx);
                for img in 0..n * c {
                    let g = grad_out[(img * oh + oy) * ow + ox] as f64;
                    if g == 0.0 {
                        continue;
                    }
                    let base = img * ih * iw;
                    gx[base + y0 * iw + x0] += g * (1.0 - wy) * (1.0 - wx);
                    gx[base + y0 * iw + x1] += g * (1.0 - wy) * wx;
                    gx[base + y1 * iw + x0] += g * wy * (1.0 - wx);
                    gx[base + y1 * iw + x1] += g * wy * wx;
                }
            }
        }
        vec![Some(gx.into_iter().map(|v| v as Elem).collect())]
    }
}

/// Resize a N,C,H,W tensor to `out_h` x `out_w`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape {
            op: "bilinear_resize",
            axis: "rank",
            expected: "4 (N,C,H,W)".into(),
            got: shape.len().to_string(),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyOutput {
            op: "bilinear_resize",
            h: out_h,
            w: out_w,
        });
    }
    let (n, c, ih, iw) = (shape[0], shape[1], shape[2], shape[3]);
    if (ih, iw) == (out_h, out_w) {
        // Identity resizes appear when a scale factor cancels; keep them
        // bit-exact and tape-free beyond a pass-through.
        return Ok(x.clone());
    }
    let sy = ih as f64 / out_h as f64;
    let sx = iw as f64 / out_w as f64;
    let xd = x.data();
    let mut y = vec![0.0 as Elem; n * c * out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, wy) = axis_taps(oy, ih, sy);
        for ox in 0..out_w {
            let (x0, x1, wx) = axis_taps(ox, iw, sx);
            for img in 0..n * c {
                let base = img * ih * iw;
                let v = (xd[base + y0 * iw + x0] as f64) * (1.0 - wy) * (1.0 - wx)
                    + (xd[base + y0 * iw + x1] as f64) * (1.0 - wy) * wx
                    + (xd[base + y1 * iw + x0] as f64) * wy * (1.0 - wx)
                    + (xd[base + y1 * iw + x1] as f64) * wy * wx;
                y[(img * out_h + oy) * out_w + ox] = v as Elem;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        y,
        vec![x.clone()],
        Box::new(ResizeGrad {
            in_hw: (ih, iw),
            out_hw: (out_h, out_w),
        }),
    ))
}

/// Resize by a rational factor `num/den`; both output sides must come out
/// integral.
pub fn resize_by(x: &Tensor, num: usize, den: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape {
            op: "resize_by",
            axis: "rank",
            expected: "4 (N,C,H,W)".into(),
            got: shape.len().to_string(),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if (h * num) % den != 0 || (w * num) % den != 0 {
        return Err(Error::Shape {
            op: "resize_by",
            axis: "spatial",
            expected: format!("H,W divisible so that *{num}/{den} is integral"),
            got: format!("{h}x{w}"),
        });
    }
    bilinear_resize(x, h * num / den, w * num / den)
}
