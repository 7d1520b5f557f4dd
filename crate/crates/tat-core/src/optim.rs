//! ADADELTA with weight decay folded into the gradient.
//!
//! Accumulators are kept in f64 and serialized through the weight
//! container, so a resumed run continues bit-for-bit (with the default
//! f64 element type).

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{load_tensors, save_tensors, NamedTensor};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
            weight_decay: 1e-5,
        }
    }
}

pub struct Adadelta {
    pub config: AdadeltaConfig,
    params: Vec<(String, Tensor)>,
    acc_grad: Vec<Vec<f64>>,
    acc_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(params: Vec<(String, Tensor)>, config: AdadeltaConfig) -> Adadelta {
        let acc_grad = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let acc_update = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adadelta {
            config,
            params,
            acc_grad,
            acc_update,
        }
    }

    /// One update over every parameter. Errors if any parameter has no
    /// gradient, which catches graph wiring bugs early.
    pub fn step(&mut self) -> Result<()> {
        let AdadeltaConfig {
            rho,
            eps,
            lr,
            weight_decay,
        } = self.config;
        for (idx, (name, t)) in self.params.iter().enumerate() {
            let Some(grad) = t.grad() else {
                return Err(Error::MissingGrad { name: name.clone() });
            };
            let x = t.data();
            let eg = &mut self.acc_grad[idx];
            let eu = &mut self.acc_update[idx];
            let mut next = Vec::with_capacity(x.len());
            for i in 0..x.len() {
                let xi = x[i] as f64;
                let g = grad[i] as f64 + weight_decay * xi;
                eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
                let delta = -((eu[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
                eu[i] = rho * eu[i] + (1.0 - rho) * delta * delta;
                next.push((xi + lr * delta) as Elem);
            }
            t.set_data(next)?;
        }
        Ok(())
    }

    /// Drop all gradients so the next backward starts fresh and a missing
    /// gradient is detectable.
    pub fn clear_grads(&self) {
        for (_, t) in &self.params {
            t.clear_grad();
        }
    }

    fn state_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (idx, (name, t)) in self.params.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{name}.acc_grad"),
                shape: t.shape().to_vec(),
                data: self.acc_grad[idx].iter().map(|&v| v as Elem).collect(),
            });
            out.push(NamedTensor {
                name: format!("{name}.acc_update"),
                shape: t.shape().to_vec(),
                data: self.acc_update[idx].iter().map(|&v| v as Elem).collect(),
            });
        }
        out
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.state_tensors())
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let tensors = load_tensors(path)?;
        let expect = self.params.len() * 2;
        if tensors.len() != expect {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("{} state tensors, expected {expect}", tensors.len()),
            });
        }
        for nt in tensors {
            let (pname, which) = match nt.name.rsplit_once('.') {
                Some((p, "acc_grad")) => (p, true),
                Some((p, "acc_update")) => (p, false),
                _ => {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        detail: format!("unrecognized state tensor `{}`", nt.name),
                    })
                }
            };
            let Some(idx) = self.params.iter().position(|(n, _)| n == pname) else {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!("state for unknown parameter `{pname}`"),
                });
            };
            if nt.data.len() != self.params[idx].1.numel() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!(
                        "state `{}` has {} values, expected {}",
                        nt.name,
                        nt.data.len(),
                        self.params[idx].1.numel()
                    ),
                });
            }
            let values: Vec<f64> = nt.data.iter().map(|&v| v as f64).collect();
            if which {
                self.acc_grad[idx] = values;
            } else {
                self.acc_update[idx] = values;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{scale, sum_all};

    fn cfg_no_decay() -> AdadeltaConfig {
        AdadeltaConfig {
            weight_decay: 0.0,
            ..AdadeltaConfig::default()
        }
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // x = 0, g = 1: E[g2] = 0.05, delta = -sqrt(1e-6)/sqrt(0.05 + 1e-6)
        let x = Tensor::param(&[1], vec![0.0]);
        sum_all(&x).backward().unwrap();
        let mut opt = Adadelta::new(vec![("x".into(), x.clone())], cfg_no_decay());
        opt.step().unwrap();
        let expected = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        let got = x.data()[0] as f64;
        assert!(
            (got - expected).abs() < 1e-9,
            "got {got:.10e}, expected {expected:.10e}"
        );
        // four significant digits of the hand value
        assert!((got + 4.4721e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]);
        let before = x.data().as_ref().clone();
        // loss = 0 * sum(x) has gradient exactly zero
        scale(&sum_all(&x), 0.0).backward().unwrap();
        let mut opt = Adadelta::new(vec![("x".into(), x.clone())], cfg_no_decay());
        opt.step().unwrap();
        opt.step().unwrap();
        assert_eq!(x.data().as_ref(), &before);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let x = Tensor::param(&[1], vec![5.0]);
        scale(&sum_all(&x), 0.0).backward().unwrap();
        let mut opt = Adadelta::new(vec![("x".into(), x.clone())], AdadeltaConfig::default());
        opt.step().unwrap();
        let v = x.data()[0];
        assert!(v < 5.0 && v > 0.0);
    }

    #[test]
    fn identical_parameters_evolve_identically() {
        let a = Tensor::param(&[2], vec![0.3, 0.3]);
        let b = Tensor::param(&[2], vec![0.3, 0.3]);
        let loss = sum_all(&crate::tensor::ops::add(&sum_all(&a), &sum_all(&b)).unwrap());
        loss.backward().unwrap();
        let mut opt = Adadelta::new(
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            AdadeltaConfig::default(),
        );
        opt.step().unwrap();
        for (u, v) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let x = Tensor::param(&[1], vec![1.0]);
        let mut opt = Adadelta::new(vec![("x".into(), x)], AdadeltaConfig::default());
        match opt.step() {
            Err(Error::MissingGrad { name }) => assert_eq!(name, "x"),
            other => panic!("expected a missing-grad error, got {other:?}"),
        }
    }

    #[test]
    fn state_round_trip_resumes_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");

        let run = |steps_before: usize, load: bool| -> Vec<Elem> {
            let x = Tensor::param(&[4], vec![1.0, -1.0, 2.0, 0.25]);
            let params = vec![("x".into(), x.clone())];
            let mut opt = Adadelta::new(params, AdadeltaConfig::default());
            let do_step = |opt: &mut Adadelta, x: &Tensor| {
                opt.clear_grads();
                // quadratic loss keeps gradients varying across steps
                let y = crate::tensor::ops::mul(x, x).unwrap();
                sum_all(&y).backward().unwrap();
                opt.step().unwrap();
            };
            for _ in 0..steps_before {
                do_step(&mut opt, &x);
            }
            if load {
                opt.load_state(&path).unwrap();
            } else {
                opt.save_state(&path).unwrap();
            }
            do_step(&mut opt, &x);
            x.data().as_ref().clone()
        };

        let full = run(3, false);
        // replay: 3 warm-up steps to reach the same parameter values,
        // then load the saved accumulators and take the same 4th step
        let resumed = run(3, true);
        for (u, v) in full.iter().zip(resumed.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        let a = Tensor::param(&[2], vec![0.0; 2]);
        let opt = Adadelta::new(vec![("a".into(), a)], AdadeltaConfig::default());
        opt.save_state(&path).unwrap();

        let b = Tensor::param(&[3], vec![0.0; 3]);
        let mut other = Adadelta::new(vec![("a".into(), b)], AdadeltaConfig::default());
        assert!(other.load_state(&path).is_err());

        let c = Tensor::param(&[2], vec![0.0; 2]);
        let mut renamed = Adadelta::new(vec![("c".into(), c)], AdadeltaConfig::default());
        assert!(renamed.load_state(&path).is_err());
    }
}
