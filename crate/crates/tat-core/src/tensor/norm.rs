//! Batch normalization over N,C,H,W with per-channel affine.
//!
//! Training mode normalizes by batch statistics (biased variance) and
//! backpropagates through them; eval mode is a per-channel affine map using
//! stored running statistics. Running buffers live with the layer, not on
//! the tape; `update_running` applies the momentum rule.

use super::{Elem, GradFn, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "batch_norm",
            axis: "rank",
            expected: "4 (N,C,H,W)".into(),
            got: s.len().to_string(),
        });
    }
    let c = s[1];
    for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
        if t.shape() != [c] {
            return Err(Error::Shape {
                op: "batch_norm",
                axis: name,
                expected: format!("[{c}]"),
                got: format!("{:?}", t.shape()),
            });
        }
    }
    Ok((s[0], c, s[2] * s[3]))
}

/// Per-channel mean and biased variance, f64 accumulation.
pub fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let xd = x.data();
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for ni in 0..n {
            for &v in &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                acc += v as f64;
            }
        }
        mean[ci] = acc / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut acc = 0.0f64;
        for ni in 0..n {
            for &v in &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                let d = v as f64 - mu;
                acc += d * d;
            }
        }
        var[ci] = acc / m;
    }
    (mean, var)
}

/// running <- momentum * running + (1 - momentum) * batch
pub fn update_running(running: &mut [Elem], batch: &[f64], momentum: f64) {
    debug_assert_eq!(running.len(), batch.len());
    for (r, &b) in running.iter_mut().zip(batch.iter()) {
        *r = (momentum * (*r as f64) + (1.0 - momentum) * b) as Elem;
    }
}

struct BnTrainGrad {
    mean: Vec<f64>,
    var: Vec<f64>,
    eps: f64,
}

impl GradFn for BnTrainGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let x = &parents[0];
        let gamma = parents[1].data();
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = x.data();
        let m = (n * hw) as f64;
        let mut gx = vec![0.0 as Elem; xd.len()];
        let mut ggamma = vec![0.0 as Elem; c];
        let mut gbeta = vec![0.0 as Elem; c];
        for ci in 0..c {
            let mu = self.mean[ci];
            let inv_std = 1.0 / (self.var[ci] + self.eps).sqrt();
            let g = gamma[ci] as f64;
            // Reductions first, then the closed-form dx.
            let mut sum_gy = 0.0f64;
            let mut sum_gy_xhat = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    let gy = grad_out[base + k] as f64;
                    let xhat = (xd[base + k] as f64 - mu) * inv_std;
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                }
            }
            ggamma[ci] = sum_gy_xhat as Elem;
            gbeta[ci] = sum_gy as Elem;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    let gy = grad_out[base + k] as f64;
                    let xhat = (xd[base + k] as f64 - mu) * inv_std;
                    let dx = g * inv_std / m * (m * gy - sum_gy - xhat * sum_gy_xhat);
                    gx[base + k] = dx as Elem;
                }
            }
        }
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }
}

/// Train-mode batch norm. Returns the normalized tensor plus the batch
/// mean/variance so the caller can fold them into its running buffers.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = check(x, gamma, beta)?;
    let (mean, var) = batch_stats(x);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![0.0 as Elem; xd.len()];
    for ci in 0..c {
        let mu = mean[ci];
        let inv_std = 1.0 / (var[ci] + BN_EPS).sqrt();
        let (g, b) = (gd[ci] as f64, bd[ci] as f64);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                y[base + k] = ((xd[base + k] as f64 - mu) * inv_std * g + b) as Elem;
            }
        }
    }
    let out = Tensor::from_op(
        x.shape().to_vec(),
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(BnTrainGrad {
            mean: mean.clone(),
            var: var.clone(),
            eps: BN_EPS,
        }),
    );
    Ok((out, mean, var))
}

struct BnEvalGrad {
    scale: Vec<f64>, // gamma * inv_std per channel
    xhat_needed: Vec<f64>,
    eps: f64,
    mean: Vec<Elem>,
    var: Vec<Elem>,
}

impl GradFn for BnEvalGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let x = &parents[0];
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = x.data();
        let mut gx = vec![0.0 as Elem; xd.len()];
        let mut ggamma = vec![0.0 as Elem; c];
        let mut gbeta = vec![0.0 as Elem; c];
        for ci in 0..c {
            let inv_std = 1.0 / (self.var[ci] as f64 + self.eps).sqrt();
            let mu = self.mean[ci] as f64;
            let mut sg = 0.0f64;
            let mut sb = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    let gy = grad_out[base + k] as f64;
                    gx[base + k] = (gy * self.scale[ci]) as Elem;
                    sg += gy * (xd[base + k] as f64 - mu) * inv_std;
                    sb += gy;
                }
            }
            ggamma[ci] = sg as Elem;
            gbeta[ci] = sb as Elem;
        }
        let _ = &self.xhat_needed;
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }
}

/// Eval-mode batch norm using frozen statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[Elem],
    running_var: &[Elem],
) -> Result<Tensor> {
    let (n, c, hw) = check(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape {
            op: "batch_norm",
            axis: "running stats",
            expected: format!("[{c}]"),
            got: format!("[{}]/[{}]", running_mean.len(), running_var.len()),
        });
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![0.0 as Elem; xd.len()];
    let mut scale = vec![0.0f64; c];
    for ci in 0..c {
        let inv_std = 1.0 / (running_var[ci] as f64 + BN_EPS).sqrt();
        let g = gd[ci] as f64;
        scale[ci] = g * inv_std;
        let shift = bd[ci] as f64 - running_mean[ci] as f64 * g * inv_std;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                y[base + k] = (xd[base + k] as f64 * scale[ci] + shift) as Elem;
            }
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(BnEvalGrad {
            scale,
            xhat_needed: Vec::new(),
            eps: BN_EPS,
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
        }),
    ))
}
