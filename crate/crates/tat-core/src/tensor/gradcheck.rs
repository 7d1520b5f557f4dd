//! Central-difference gradient verification.
//!
//! The checker re-evaluates a user-supplied loss closure with perturbed
//! parameter values, so the closure must rebuild its graph from the live
//! tensor data on every call (which is how the model forward works anyway).

use super::{Elem, Tensor};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub worst: f64,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.worst
    }

    pub fn failures(&self, tol: f64) -> Vec<&ProbeResult> {
        self.probes.iter().filter(|p| p.rel_err > tol).collect()
    }
}

fn rel_err(a: f64, f: f64) -> f64 {
    // Both effectively zero: agreement by fiat, avoids 0/0.
    if a.abs() < 1e-9 && f.abs() < 1e-9 {
        0.0
    } else {
        (a - f).abs() / a.abs().max(f.abs())
    }
}

/// Compare analytic gradients of `loss_fn` against central differences at
/// `probes_per_tensor` deterministic positions in every named parameter.
///
/// Every parameter must require grad. Parameters the loss does not reach
/// get an analytic gradient of zero, which still has to agree with the
/// finite difference.
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    mut loss_fn: F,
    probes_per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    for (name, p) in params {
        if !p.requires_grad() {
            return Err(Error::MissingGrad { name: name.clone() });
        }
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;

    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, p) in params {
        let n = p.numel();
        let grad = p
            .grad()
            .unwrap_or_else(|| vec![0.0 as Elem; n]);
        let mut idxs: Vec<usize> = if n <= probes_per_tensor {
            (0..n).collect()
        } else {
            // sample without replacement
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(probes_per_tensor);
            all
        };
        idxs.sort_unstable();
        let base = p.data().to_vec();
        for &i in &idxs {
            let mut v = base.clone();
            v[i] = base[i] + eps as Elem;
            p.set_data(v.clone())?;
            let up = loss_fn()?.item() as f64;
            v[i] = base[i] - eps as Elem;
            p.set_data(v)?;
            let dn = loss_fn()?.item() as f64;
            p.set_data(base.clone())?;
            let numeric = (up - dn) / (2.0 * eps);
            let analytic = grad[i] as f64;
            let rel = rel_err(analytic, numeric);
            report.worst = report.worst.max(rel);
            report.probes.push(ProbeResult {
                name: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{mul, sigmoid, sum_all};

    #[test]
    fn passes_on_a_correct_graph() {
        let a = Tensor::param(&[2, 2], vec![0.3, -0.7, 1.1, 0.05]);
        let b = Tensor::param(&[2, 2], vec![-0.2, 0.9, 0.4, -1.3]);
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let report = check_gradients(
            &params,
            || Ok(sum_all(&sigmoid(&mul(&a, &b)?))),
            4,
            1e-5,
            42,
        )
        .unwrap();
        assert_eq!(report.probes.len(), 8);
        assert!(report.max_rel() < 1e-6, "worst {}", report.max_rel());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // sigmoid whose backward is deliberately off by 2x
        struct BadGrad;
        impl crate::tensor::GradFn for BadGrad {
            fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
                let x = parents[0].data();
                Some(vec![Some(
                    grad_out
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| {
                            let s = 1.0 / (1.0 + (-v as f64).exp());
                            (2.0 * s * (1.0 - s) * g as f64) as Elem
                        })
                        .collect(),
                )])
                .unwrap()
            }
        }
        let a = Tensor::param(&[3], vec![0.1, -0.4, 0.8]);
        let params = vec![("a".to_string(), a.clone())];
        let report = check_gradients(
            &params,
            || {
                let y: Vec<Elem> = a
                    .data()
                    .iter()
                    .map(|&v| (1.0 / (1.0 + (-v as f64).exp())) as Elem)
                    .collect();
                let t = Tensor::from_op(vec![3], y, vec![a.clone()], Box::new(BadGrad));
                Ok(sum_all(&t))
            },
            3,
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.max_rel() > 0.3, "worst {}", report.max_rel());
    }

    #[test]
    fn unreached_parameter_gets_zero_grad_and_passes() {
        let a = Tensor::param(&[2], vec![0.5, -0.5]);
        let unused = Tensor::param(&[2], vec![1.0, 2.0]);
        let params = vec![
            ("a".to_string(), a.clone()),
            ("unused".to_string(), unused.clone()),
        ];
        let report = check_gradients(&params, || Ok(sum_all(&sigmoid(&a))), 2, 1e-5, 7).unwrap();
        assert!(report.max_rel() < 1e-6);
    }
}
