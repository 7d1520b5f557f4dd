//! Elementwise and structural tensor ops.
//!
//! Binary ops accept equal shapes, or 4-D shapes that differ only on the
//! channel axis where one side has a single channel (the attention-map
//! broadcast). Nothing wider is supported on purpose.

use super::{Elem, GradFn, Tensor};
use crate::error::{Error, Result};

/// How the two operand shapes line up.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    /// lhs has 1 channel, rhs has C.
    LhsChannel,
    /// rhs has 1 channel, lhs has C.
    RhsChannel,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if a.len() == 4
        && b.len() == 4
        && a[0] == b[0]
        && a[2] == b[2]
        && a[3] == b[3]
        && (a[1] == 1 || b[1] == 1)
    {
        return Ok(if a[1] == 1 {
            Broadcast::LhsChannel
        } else {
            Broadcast::RhsChannel
        });
    }
    Err(Error::Broadcast {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Apply `f(a_i, b_i)` over the broadcast pair, producing the wide shape.
fn zip_broadcast(
    a: &[Elem],
    b: &[Elem],
    a_shape: &[usize],
    b_shape: &[usize],
    kind: Broadcast,
    f: impl Fn(Elem, Elem) -> Elem,
) -> (Vec<usize>, Vec<Elem>) {
    match kind {
        Broadcast::Same => (
            a_shape.to_vec(),
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::LhsChannel | Broadcast::RhsChannel => {
            let (wide_shape, narrow_is_lhs) = if kind == Broadcast::LhsChannel {
                (b_shape, true)
            } else {
                (a_shape, false)
            };
            let (n, c, h, w) = (wide_shape[0], wide_shape[1], wide_shape[2], wide_shape[3]);
            let hw = h * w;
            let mut out = vec![0.0 as Elem; n * c * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let wide_base = (ni * c + ci) * hw;
                    let narrow_base = ni * hw;
                    for i in 0..hw {
                        let (x, y) = if narrow_is_lhs {
                            (a[narrow_base + i], b[wide_base + i])
                        } else {
                            (a[wide_base + i], b[narrow_base + i])
                        };
                        out[wide_base + i] = f(x, y);
                    }
                }
            }
            (wide_shape.to_vec(), out)
        }
    }
}

/// Reduce a wide-shape gradient onto the 1-channel operand.
fn reduce_to_narrow(g: &[Elem], wide: &[usize]) -> Vec<Elem> {
    let (n, c, h, w) = (wide[0], wide[1], wide[2], wide[3]);
    let hw = h * w;
    let mut out = vec![0.0 as Elem; n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                // f64 accumulation matters little here (channel counts are
                // small) but keep sums widened for the f32 build.
                out[ni * hw + i] = ((out[ni * hw + i] as f64) + (g[base + i] as f64)) as Elem;
            }
        }
    }
    out
}

struct AddGrad {
    kind: Broadcast,
}

impl GradFn for AddGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let wide = parents
            .iter()
            .map(|p| p.shape().to_vec())
            .max_by_key(|s| s.iter().product::<usize>())
            .unwrap();
        let side = |is_narrow: bool| {
            if is_narrow {
                reduce_to_narrow(grad_out, &wide)
            } else {
                grad_out.to_vec()
            }
        };
        vec![
            Some(side(self.kind == Broadcast::LhsChannel)),
            Some(side(self.kind == Broadcast::RhsChannel)),
        ]
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let kind = broadcast_kind("add", a.shape(), b.shape())?;
    let (shape, data) = zip_broadcast(
        &a.data(),
        &b.data(),
        a.shape(),
        b.shape(),
        kind,
        |x, y| x + y,
    );
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(AddGrad { kind }),
    ))
}

struct MulGrad {
    kind: Broadcast,
}

impl GradFn for MulGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let a = parents[0].data();
        let b = parents[1].data();
        let (a_shape, b_shape) = (parents[0].shape(), parents[1].shape());
        // d/da (a*b) = b * g, in a's shape; symmetric for b.
        let grad_for = |this: &[Elem],
                        this_shape: &[usize],
                        other: &[Elem],
                        other_shape: &[usize],
                        this_narrow: bool|
         -> Vec<Elem> {
            let _ = this;
            if self.kind == Broadcast::Same {
                return grad_out.iter().zip(other).map(|(&g, &o)| g * o).collect();
            }
            if this_narrow {
                // wide = other side
                let wide = other_shape;
                let prod: Vec<Elem> = grad_out.iter().zip(other).map(|(&g, &o)| g * o).collect();
                reduce_to_narrow(&prod, wide)
            } else {
                // other is the narrow one: broadcast it while multiplying
                let (n, c, h, w) = (
                    this_shape[0],
                    this_shape[1],
                    this_shape[2],
                    this_shape[3],
                );
                let hw = h * w;
                let mut out = vec![0.0 as Elem; n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            out[base + i] = grad_out[base + i] * other[ni * hw + i];
                        }
                    }
                }
                out
            }
        };
        let a_narrow = self.kind == Broadcast::LhsChannel;
        let b_narrow = self.kind == Broadcast::RhsChannel;
        vec![
            Some(grad_for(&a, a_shape, &b, b_shape, a_narrow)),
            Some(grad_for(&b, b_shape, &a, a_shape, b_narrow)),
        ]
    }
}

/// Elementwise multiply; supports the 1-channel attention-map broadcast.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let kind = broadcast_kind("mul", a.shape(), b.shape())?;
    let (shape, data) = zip_broadcast(
        &a.data(),
        &b.data(),
        a.shape(),
        b.shape(),
        kind,
        |x, y| x * y,
    );
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(MulGrad { kind }),
    ))
}

fn sigmoid_scalar(x: Elem) -> Elem {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SigmoidGrad {
    out: std::sync::Arc<Vec<Elem>>,
}

impl GradFn for SigmoidGrad {
    fn backward(&self, grad_out: &[Elem], _parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        vec![Some(
            grad_out
                .iter()
                .zip(self.out.iter())
                .map(|(&g, &y)| g * y * (1.0 - y))
                .collect(),
        )]
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<Elem> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let out = Tensor::from_op(
        x.shape().to_vec(),
        data.clone(),
        vec![x.clone()],
        Box::new(SigmoidGrad {
            out: std::sync::Arc::new(data),
        }),
    );
    out
}

struct Relu6Grad;

impl GradFn for Relu6Grad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let x = parents[0].data();
        vec![Some(
            grad_out
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > 0.0 && v < 6.0 { g } else { 0.0 })
                .collect(),
        )]
    }
}

pub fn relu6(x: &Tensor) -> Tensor {
    let data: Vec<Elem> = x.data().iter().map(|&v| v.clamp(0.0, 6.0)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(Relu6Grad),
    )
}

struct ScaleGrad {
    c: Elem,
}

impl GradFn for ScaleGrad {
    fn backward(&self, grad_out: &[Elem], _parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        vec![Some(grad_out.iter().map(|&g| g * self.c).collect())]
    }
}

pub fn scale(x: &Tensor, c: Elem) -> Tensor {
    let data: Vec<Elem> = x.data().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(ScaleGrad { c }),
    )
}

struct AddScalarGrad;

impl GradFn for AddScalarGrad {
    fn backward(&self, grad_out: &[Elem], _parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        vec![Some(grad_out.to_vec())]
    }
}

pub fn add_scalar(x: &Tensor, c: Elem) -> Tensor {
    let data: Vec<Elem> = x.data().iter().map(|&v| v + c).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(AddScalarGrad),
    )
}

struct SumAllGrad {
    n: usize,
}

impl GradFn for SumAllGrad {
    fn backward(&self, grad_out: &[Elem], _parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        vec![Some(vec![grad_out[0]; self.n])]
    }
}

/// Sum of all elements as a `[1]` tensor; accumulates in f64.
pub fn sum_all(x: &Tensor) -> Tensor {
    let total = super::sum64(&x.data()) as Elem;
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(SumAllGrad { n: x.numel() }),
    )
}

struct NarrowChannelsGrad {
    lo: usize,
    len: usize,
}

impl GradFn for NarrowChannelsGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let s = parents[0].shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let mut g = vec![0.0 as Elem; n * c * hw];
        for ni in 0..n {
            for ci in 0..self.len {
                let src = (ni * self.len + ci) * hw;
                let dst = (ni * c + self.lo + ci) * hw;
                g[dst..dst + hw].copy_from_slice(&grad_out[src..src + hw]);
            }
        }
        vec![Some(g)]
    }
}

/// Channel slice `[lo, lo+len)` of an N,C,H,W tensor.
pub fn narrow_channels(x: &Tensor, lo: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || lo + len > s[1] {
        return Err(Error::Shape {
            op: "narrow_channels",
            axis: "channel",
            expected: format!("range within 0..{}", s.get(1).copied().unwrap_or(0)),
            got: format!("{}..{}", lo, lo + len),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let src = x.data();
    let mut data = vec![0.0 as Elem; n * len * hw];
    for ni in 0..n {
        for ci in 0..len {
            let from = (ni * c + lo + ci) * hw;
            let to = (ni * len + ci) * hw;
            data[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, len, h, w],
        data,
        vec![x.clone()],
        Box::new(NarrowChannelsGrad { lo, len }),
    ))
}

struct ConcatChannelsGrad {
    channels: Vec<usize>,
}

impl GradFn for ConcatChannelsGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let s0 = parents[0].shape();
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let hw = h * w;
        let c_total: usize = self.channels.iter().sum();
        let mut grads = Vec::with_capacity(parents.len());
        let mut offset = 0;
        for &ck in &self.channels {
            let mut g = vec![0.0 as Elem; n * ck * hw];
            for ni in 0..n {
                for ci in 0..ck {
                    let src = (ni * c_total + offset + ci) * hw;
                    let dst = (ni * ck + ci) * hw;
                    g[dst..dst + hw].copy_from_slice(&grad_out[src..src + hw]);
                }
            }
            grads.push(Some(g));
            offset += ck;
        }
        grads
    }
}

/// Concatenate N,C,H,W tensors along the channel axis.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    assert!(!xs.is_empty());
    let s0 = xs[0].shape().to_vec();
    for x in xs {
        let s = x.shape();
        if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
            return Err(Error::Shape {
                op: "concat_channels",
                axis: "spatial",
                expected: format!("{:?} (except channels)", s0),
                got: format!("{:?}", s),
            });
        }
    }
    let (n, h, w) = (s0[0], s0[2], s0[3]);
    let hw = h * w;
    let channels: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
    let c_total: usize = channels.iter().sum();
    let mut data = vec![0.0 as Elem; n * c_total * hw];
    let mut offset = 0;
    for (x, &ck) in xs.iter().zip(&channels) {
        let src = x.data();
        for ni in 0..n {
            for ci in 0..ck {
                let from = (ni * ck + ci) * hw;
                let to = (ni * c_total + offset + ci) * hw;
                data[to..to + hw].copy_from_slice(&src[from..from + hw]);
            }
        }
        offset += ck;
    }
    Ok(Tensor::from_op(
        vec![n, c_total, h, w],
        data,
        xs.to_vec(),
        Box::new(ConcatChannelsGrad { channels }),
    ))
}
