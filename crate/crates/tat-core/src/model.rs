//! Parameter storage, initialization and graph execution: turns a
//! [`NetworkGraph`](crate::graph::NetworkGraph) plus weights into detector
//! outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{build_graph, LayerKind, ModelConfig, NetworkGraph};
use crate::io::{load_tensors, save_tensors, NamedTensor};
use crate::tensor::conv::{conv2d, ConvSpec};
use crate::tensor::norm::{batch_norm_eval, batch_norm_train, update_running, BN_MOMENTUM};
use crate::tensor::ops::{add, add_scalar, concat_channels, mul, narrow_channels, relu6, scale, sigmoid};
use crate::tensor::resize::bilinear_resize;
use crate::tensor::{Elem, Tensor};

/// Regressed distances come out of a sigmoid scaled to this many pixels.
pub const DIST_SCALE: Elem = 1024.0;
/// Input sides must divide this so every tower level lands on an integral
/// grid.
pub const INPUT_MULTIPLE: usize = 32;

/// Trainable parameters plus non-trainable running statistics, both keyed
/// by the owning node name. Iteration order is the sorted name order,
/// which checkpointing and the optimizer rely on.
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, RwLock<Vec<Elem>>>,
}

impl ParamStore {
    fn new() -> ParamStore {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingGrad {
            name: name.to_string(),
        })
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn buffer_snapshot(&self, name: &str) -> Result<Vec<Elem>> {
        Ok(self
            .buffers
            .get(name)
            .ok_or_else(|| Error::MissingGrad {
                name: name.to_string(),
            })?
            .read()
            .expect("buffer lock")
            .clone())
    }

    fn set_buffer(&self, name: &str, values: Vec<Elem>) -> Result<()> {
        let slot = self.buffers.get(name).ok_or_else(|| Error::MissingGrad {
            name: name.to_string(),
        })?;
        *slot.write().expect("buffer lock") = values;
        Ok(())
    }

    /// Every tensor, parameters first, stats after, for serialization.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, t) in &self.params {
            out.push(NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().as_ref().clone(),
            });
        }
        for (name, buf) in &self.buffers {
            let data = buf.read().expect("buffer lock").clone();
            out.push(NamedTensor {
                name: name.clone(),
                shape: vec![data.len()],
                data,
            });
        }
        out
    }

    /// Replace every parameter and buffer from `tensors`. The name set and
    /// shapes must match exactly.
    pub fn load_named(&self, tensors: Vec<NamedTensor>, origin: &Path) -> Result<()> {
        let mut seen = 0usize;
        for nt in tensors {
            if let Some(p) = self.params.get(&nt.name) {
                if p.shape() != nt.shape.as_slice() {
                    return Err(Error::Checkpoint {
                        path: origin.to_path_buf(),
                        detail: format!(
                            "tensor `{}` has shape {:?}, expected {:?}",
                            nt.name,
                            nt.shape,
                            p.shape()
                        ),
                    });
                }
                p.set_data(nt.data)?;
                seen += 1;
            } else if self.buffers.contains_key(&nt.name) {
                let expect = self.buffer_snapshot(&nt.name)?.len();
                if nt.data.len() != expect {
                    return Err(Error::Checkpoint {
                        path: origin.to_path_buf(),
                        detail: format!(
                            "buffer `{}` has {} values, expected {expect}",
                            nt.name,
                            nt.data.len()
                        ),
                    });
                }
                self.set_buffer(&nt.name, nt.data)?;
                seen += 1;
            } else {
                return Err(Error::Checkpoint {
                    path: origin.to_path_buf(),
                    detail: format!("unknown tensor `{}`", nt.name),
                });
            }
        }
        let expect = self.params.len() + self.buffers.len();
        if seen != expect {
            return Err(Error::Checkpoint {
                path: origin.to_path_buf(),
                detail: format!("{seen} tensors loaded, model has {expect}"),
            });
        }
        Ok(())
    }
}

/// He-normal initialization: conv weights ~ N(0, sqrt(2 / fan_in)), biases
/// zero, BN scale one / shift zero, running stats at the identity.
/// Deterministic in `seed` and the node order.
pub fn init_params(graph: &NetworkGraph, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (idx, node) in graph.nodes.iter().enumerate() {
        match &node.kind {
            LayerKind::Conv { spec, bias } => {
                let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let shape = spec.weight_shape();
                let n: usize = shape.iter().product();
                let data: Vec<Elem> = (0..n).map(|_| dist.sample(&mut rng) as Elem).collect();
                store
                    .params
                    .insert(format!("{}.weight", node.name), Tensor::param(&shape, data));
                if *bias {
                    store.params.insert(
                        format!("{}.bias", node.name),
                        Tensor::param(&[spec.out_channels], vec![0.0; spec.out_channels]),
                    );
                }
            }
            LayerKind::BatchNorm => {
                let parent = &graph.nodes[node.inputs[0]];
                let LayerKind::Conv { spec, .. } = &parent.kind else {
                    unreachable!("normalization always follows a conv (node {idx})");
                };
                let c = spec.out_channels;
                store
                    .params
                    .insert(format!("{}.gamma", node.name), Tensor::param(&[c], vec![1.0; c]));
                store
                    .params
                    .insert(format!("{}.beta", node.name), Tensor::param(&[c], vec![0.0; c]));
                store
                    .buffers
                    .insert(format!("{}.running_mean", node.name), RwLock::new(vec![0.0; c]));
                store
                    .buffers
                    .insert(format!("{}.running_var", node.name), RwLock::new(vec![1.0; c]));
            }
            _ => {}
        }
    }
    store
}

/// Run the graph on an image batch. Training mode uses batch statistics
/// and pushes them into the running buffers; eval mode reads the buffers.
/// Returns the raw 6-channel detection map at the output stride.
pub fn execute(
    graph: &NetworkGraph,
    store: &ParamStore,
    image: &Tensor,
    training: bool,
) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape {
            op: "execute",
            axis: "input",
            expected: "N,3,H,W".into(),
            got: format!("{shape:?}"),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Resolution { h, w });
    }

    // Free each intermediate once its last consumer has run; the tape
    // keeps what backward needs alive on its own.
    let mut uses = vec![0usize; graph.nodes.len()];
    for node in &graph.nodes {
        for &i in &node.inputs {
            uses[i] += 1;
        }
    }
    uses[graph.det] += 1;

    let mut outs: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    let get = |outs: &Vec<Option<Tensor>>, i: usize| -> Tensor {
        outs[i].clone().expect("topological order")
    };
    for (idx, node) in graph.nodes.iter().enumerate() {
        let value = match &node.kind {
            LayerKind::Input => image.clone(),
            LayerKind::Conv { spec, bias } => {
                let x = get(&outs, node.inputs[0]);
                let weight = store.param(&format!("{}.weight", node.name))?;
                let b = if *bias {
                    Some(store.param(&format!("{}.bias", node.name))?)
                } else {
                    None
                };
                conv2d(&x, weight, b, spec)?
            }
            LayerKind::BatchNorm => {
                let x = get(&outs, node.inputs[0]);
                let gamma = store.param(&format!("{}.gamma", node.name))?;
                let beta = store.param(&format!("{}.beta", node.name))?;
                if training {
                    let (y, mean, var) = batch_norm_train(&x, gamma, beta)?;
                    let mut rm = store.buffer_snapshot(&format!("{}.running_mean", node.name))?;
                    let mut rv = store.buffer_snapshot(&format!("{}.running_var", node.name))?;
                    update_running(&mut rm, &mean, BN_MOMENTUM);
                    update_running(&mut rv, &var, BN_MOMENTUM);
                    store.set_buffer(&format!("{}.running_mean", node.name), rm)?;
                    store.set_buffer(&format!("{}.running_var", node.name), rv)?;
                    y
                } else {
                    let rm = store.buffer_snapshot(&format!("{}.running_mean", node.name))?;
                    let rv = store.buffer_snapshot(&format!("{}.running_var", node.name))?;
                    batch_norm_eval(&x, gamma, beta, &rm, &rv)?
                }
            }
            LayerKind::Relu6 => relu6(&get(&outs, node.inputs[0])),
            LayerKind::Sigmoid => sigmoid(&get(&outs, node.inputs[0])),
            LayerKind::ResizeLike => {
                let src = get(&outs, node.inputs[0]);
                let like = get(&outs, node.inputs[1]);
                let ls = like.shape();
                bilinear_resize(&src, ls[2], ls[3])?
            }
            LayerKind::Add => {
                let a = get(&outs, node.inputs[0]);
                let b = get(&outs, node.inputs[1]);
                add(&a, &b)?
            }
            LayerKind::Mul => {
                let a = get(&outs, node.inputs[0]);
                let b = get(&outs, node.inputs[1]);
                mul(&a, &b)?
            }
            LayerKind::Concat => {
                let xs: Vec<Tensor> = node.inputs.iter().map(|&i| get(&outs, i)).collect();
                concat_channels(&xs)?
            }
            LayerKind::Tap => get(&outs, node.inputs[0]),
        };
        outs[idx] = Some(value);
        for &i in &node.inputs {
            uses[i] -= 1;
            if uses[i] == 0 {
                outs[i] = None;
            }
        }
    }
    Ok(outs[graph.det].take().expect("det node computed"))
}

/// Decoded head activations, all at the output stride.
#[derive(Debug)]
pub struct DetOutput {
    /// N,1,H,W text/non-text probability.
    pub score: Tensor,
    /// N,4,H,W distances to the top/right/bottom/left box edges, pixels.
    pub dist: Tensor,
    /// N,1,H,W box angle in [-pi/2, pi/2).
    pub angle: Tensor,
}

/// Split the raw 6-channel map into calibrated score, distances and angle.
pub fn head_outputs(raw: &Tensor) -> Result<DetOutput> {
    let score = sigmoid(&narrow_channels(raw, 0, 1)?);
    let dist = scale(&sigmoid(&narrow_channels(raw, 1, 4)?), DIST_SCALE);
    let half_pi = std::f64::consts::FRAC_PI_2 as Elem;
    let angle = add_scalar(
        &scale(&sigmoid(&narrow_channels(raw, 5, 1)?), 2.0 * half_pi),
        -half_pi,
    );
    Ok(DetOutput { score, dist, angle })
}

pub struct Model {
    pub graph: NetworkGraph,
    pub store: ParamStore,
}

impl Model {
    /// Build and He-initialize a detector for `config`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        let graph = build_graph(config)?;
        let store = init_params(&graph, seed);
        Ok(Model { graph, store })
    }

    /// Raw 6-channel detection map, before head activations.
    pub fn raw_forward(&self, image: &Tensor, training: bool) -> Result<Tensor> {
        execute(&self.graph, &self.store, image, training)
    }

    pub fn forward(&self, image: &Tensor, training: bool) -> Result<DetOutput> {
        head_outputs(&self.raw_forward(image, training)?)
    }

    /// Trainable parameters in deterministic (name-sorted) order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.store
            .params()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.store.params() {
            t.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.store.named_tensors())
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        self.store.load_named(load_tensors(path)?, path)
    }
}

/// Standalone attention-unit weights, mirroring the graph layout so the
/// unit can be probed in isolation.
pub struct TauEncoder {
    pub dilation: usize,
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    pub pw_weight: Tensor,
    pub pw_bias: Tensor,
}

pub struct TauWeights {
    pub in_channels: usize,
    pub compress_channels: usize,
    pub compress_weight: Tensor,
    pub compress_bias: Tensor,
    pub encoders: Vec<TauEncoder>,
    pub decode_weight: Tensor,
    pub decode_bias: Tensor,
}

impl TauWeights {
    /// He-initialized unit with zero biases.
    pub fn init(in_channels: usize, compress_channels: usize, dilations: &[usize], seed: u64) -> TauWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: [usize; 4], fan_in: usize| -> Tensor {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let n: usize = shape.iter().product();
            let data: Vec<Elem> = (0..n).map(|_| dist.sample(&mut rng) as Elem).collect();
            Tensor::param(&shape, data)
        };
        let cc = compress_channels;
        let compress_weight = he([cc, in_channels, 1, 1], in_channels);
        let compress_bias = Tensor::param(&[cc], vec![0.0; cc]);
        let encoders = dilations
            .iter()
            .map(|&dilation| TauEncoder {
                dilation,
                dw_weight: he([cc, 1, 3, 3], 9),
                dw_bias: Tensor::param(&[cc], vec![0.0; cc]),
                pw_weight: he([cc, cc, 1, 1], cc),
                pw_bias: Tensor::param(&[cc], vec![0.0; cc]),
            })
            .collect();
        let decode_weight = he([1, cc * dilations.len(), 1, 1], cc * dilations.len());
        let decode_bias = Tensor::param(&[1], vec![0.0]);
        TauWeights {
            in_channels,
            compress_channels,
            compress_weight,
            compress_bias,
            encoders,
            decode_weight,
            decode_bias,
        }
    }
}

/// The attention map alone: sigmoid of the decoded multi-dilation
/// encoding, N,1,H,W in (0, 1).
pub fn tau_attention(x: &Tensor, w: &TauWeights) -> Result<Tensor> {
    let cc = w.compress_channels;
    let c = conv2d(
        x,
        &w.compress_weight,
        Some(&w.compress_bias),
        &ConvSpec::new(w.in_channels, cc, 1),
    )?;
    let c = relu6(&c);
    let mut enc_outs = Vec::new();
    for e in &w.encoders {
        let dw = conv2d(
            &c,
            &e.dw_weight,
            Some(&e.dw_bias),
            &ConvSpec::depthwise(cc, 3).dilation(e.dilation).padding(e.dilation),
        )?;
        let dw = relu6(&dw);
        let pw = conv2d(&dw, &e.pw_weight, Some(&e.pw_bias), &ConvSpec::new(cc, cc, 1))?;
        enc_outs.push(relu6(&pw));
    }
    let cat = concat_channels(&enc_outs)?;
    let dec = conv2d(
        &cat,
        &w.decode_weight,
        Some(&w.decode_bias),
        &ConvSpec::new(cc * w.encoders.len(), 1, 1),
    )?;
    Ok(sigmoid(&dec))
}

/// Full attention unit: gate the input by its own attention map.
pub fn tau_forward(x: &Tensor, w: &TauWeights) -> Result<Tensor> {
    let att = tau_attention(x, w)?;
    mul(x, &att)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DET_CHANNELS;

    fn tiny_input(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Elem> = (0..n * 3 * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(&[n, 3, h, w], data)
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let model = Model::new(&ModelConfig::default(), 7).unwrap();
        let x = tiny_input(1, 1, 64, 64);
        let out = model.forward(&x, false).unwrap();
        assert_eq!(out.score.shape(), &[1, 1, 16, 16]);
        assert_eq!(out.dist.shape(), &[1, 4, 16, 16]);
        assert_eq!(out.angle.shape(), &[1, 1, 16, 16]);
        for &s in out.score.data().iter() {
            assert!(s > 0.0 && s < 1.0);
        }
        for &d in out.dist.data().iter() {
            assert!(d > 0.0 && d < DIST_SCALE);
        }
        let half_pi = std::f64::consts::FRAC_PI_2 as Elem;
        for &a in out.angle.data().iter() {
            assert!(a >= -half_pi && a < half_pi);
        }
    }

    #[test]
    fn zeroed_weights_give_the_neutral_head() {
        let model = Model::new(&ModelConfig::default(), 3).unwrap();
        for (_, t) in model.store.params() {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        let x = tiny_input(2, 1, 32, 32);
        let out = model.forward(&x, false).unwrap();
        for &s in out.score.data().iter() {
            assert_eq!(s, 0.5);
        }
        for &d in out.dist.data().iter() {
            assert_eq!(d, 0.5 * DIST_SCALE);
        }
        for &a in out.angle.data().iter() {
            assert_eq!(a, 0.0);
        }
    }

    #[test]
    fn input_resolution_must_divide_32() {
        let model = Model::new(&ModelConfig::default(), 3).unwrap();
        let x = tiny_input(1, 1, 48, 64);
        match model.forward(&x, false) {
            Err(Error::Resolution { h, w }) => {
                assert_eq!((h, w), (48, 64));
            }
            other => panic!("expected a resolution error, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let a = Model::new(&ModelConfig::default(), 11).unwrap();
        let b = Model::new(&ModelConfig::default(), 11).unwrap();
        let x = tiny_input(5, 1, 32, 32);
        let ya = a.raw_forward(&x, false).unwrap();
        let yb = b.raw_forward(&x, false).unwrap();
        assert_eq!(ya.shape(), yb.shape());
        for (u, v) in ya.data().iter().zip(yb.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        let c = Model::new(&ModelConfig::default(), 12).unwrap();
        let yc = c.raw_forward(&x, false).unwrap();
        assert!(ya.data().iter().zip(yc.data().iter()).any(|(u, v)| u != v));
    }

    #[test]
    fn training_updates_running_stats_eval_does_not() {
        let model = Model::new(&ModelConfig::default(), 2).unwrap();
        let name = "backbone.stem.bn.running_mean";
        let before = model.store.buffer_snapshot(name).unwrap();
        let x = tiny_input(9, 2, 32, 32);
        model.raw_forward(&x, false).unwrap();
        assert_eq!(model.store.buffer_snapshot(name).unwrap(), before);
        model.raw_forward(&x, true).unwrap();
        assert_ne!(model.store.buffer_snapshot(name).unwrap(), before);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.tatw");
        let a = Model::new(&ModelConfig::default(), 21).unwrap();
        let x = tiny_input(4, 1, 32, 32);
        // push the running stats off their init values first
        a.raw_forward(&x, true).unwrap();
        a.save(&path).unwrap();

        let b = Model::new(&ModelConfig::default(), 22).unwrap();
        b.load_weights(&path).unwrap();
        let ya = a.raw_forward(&x, false).unwrap();
        let yb = b.raw_forward(&x, false).unwrap();
        for (u, v) in ya.data().iter().zip(yb.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn load_rejects_mismatched_stores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.tatw");
        let small = Model::new(
            &ModelConfig {
                use_tau: false,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        small.save(&path).unwrap();
        let full = Model::new(&ModelConfig::default(), 1).unwrap();
        assert!(full.load_weights(&path).is_err());
    }

    #[test]
    fn merge_variant_forwards() {
        let cfg = ModelConfig {
            use_fru: false,
            use_raw_input: false,
            backbone_blocks: 17,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, 5).unwrap();
        let x = tiny_input(8, 1, 64, 32);
        let out = model.forward(&x, false).unwrap();
        assert_eq!(out.score.shape(), &[1, 1, 16, 8]);
        assert_eq!(out.dist.shape(), &[1, 4, 16, 8]);
    }

    #[test]
    fn tau_gate_lives_in_unit_interval_and_contracts() {
        let w = TauWeights::init(16, 8, &[1, 3, 5, 7], 77);
        let x = tiny_input(6, 1, 16, 16); // 3 channels
        let w3 = TauWeights::init(3, 8, &[1, 3, 5, 7], 78);
        let att = tau_attention(&x, &w3).unwrap();
        assert_eq!(att.shape(), &[1, 1, 16, 16]);
        for &a in att.data().iter() {
            assert!(a > 0.0 && a < 1.0);
        }
        let y = tau_forward(&x, &w3).unwrap();
        for (yi, xi) in y.data().iter().zip(x.data().iter()) {
            assert!(yi.abs() <= xi.abs());
        }
        assert_eq!(w.encoders.len(), 4);
    }

    #[test]
    fn saturated_gate_is_the_identity() {
        // decode weight 0 and a large positive bias drive the sigmoid to
        // exactly 1.0 in floating point, so the unit passes its input
        // through untouched.
        let mut w = TauWeights::init(3, 8, &[1, 3], 9);
        w.decode_weight = Tensor::param(&[1, 16, 1, 1], vec![0.0; 16]);
        w.decode_bias = Tensor::param(&[1], vec![100.0]);
        let x = tiny_input(10, 2, 12, 20);
        let y = tau_forward(&x, &w).unwrap();
        for (yi, xi) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(yi.to_bits(), xi.to_bits());
        }
    }

    #[test]
    fn single_encoder_impulse_footprint_is_the_dilated_lattice() {
        // With one 3x3 encoder at dilation r and 1x1 convs elsewhere, an
        // impulse can only influence the attention map at the nine taps
        // {-r, 0, r} x {-r, 0, r} around itself.
        for &r in &[1usize, 3, 5, 7] {
            let w = TauWeights::init(1, 4, &[r], 100 + r as u64);
            // positive weights so the signal survives the clipped relus
            for t in [&w.compress_weight, &w.encoders[0].dw_weight, &w.encoders[0].pw_weight, &w.decode_weight] {
                let abs: Vec<Elem> = t.data().iter().map(|v| v.abs() + 0.05).collect();
                t.set_data(abs).unwrap();
            }
            let (h, wd) = (31usize, 31usize);
            let (ci, cj) = (15usize, 15usize);
            let mut img = vec![0.0; h * wd];
            img[ci * wd + cj] = 1.0;
            let x = Tensor::from_vec(&[1, 1, h, wd], img);
            let att = tau_attention(&x, &w).unwrap();
            let zero = tau_attention(&Tensor::zeros(&[1, 1, h, wd]), &w).unwrap();
            let a = att.data();
            let z = zero.data();
            let mut touched = Vec::new();
            for i in 0..h {
                for j in 0..wd {
                    if (a[i * wd + j] - z[i * wd + j]).abs() > 1e-12 {
                        touched.push((i as isize - ci as isize, j as isize - cj as isize));
                    }
                }
            }
            let lattice: Vec<(isize, isize)> = {
                let s = r as isize;
                let offs = [-s, 0, s];
                let mut v: Vec<(isize, isize)> = offs
                    .iter()
                    .flat_map(|&di| offs.iter().map(move |&dj| (di, dj)))
                    .collect();
                v.sort_unstable();
                v
            };
            touched.sort_unstable();
            assert_eq!(touched, lattice, "dilation {r}");
        }
    }

    #[test]
    fn raw_image_branch_changes_the_output() {
        let with = Model::new(&ModelConfig::default(), 31).unwrap();
        let without = Model::new(
            &ModelConfig {
                use_raw_input: false,
                ..ModelConfig::default()
            },
            31,
        )
        .unwrap();
        assert!(with.store.param_count() > without.store.param_count());
        let x = tiny_input(3, 1, 32, 32);
        let a = with.forward(&x, false).unwrap();
        let b = without.forward(&x, false).unwrap();
        assert_eq!(a.score.shape(), b.score.shape());
    }

    #[test]
    fn det_channel_count_is_fixed() {
        let model = Model::new(&ModelConfig::default(), 1).unwrap();
        let x = tiny_input(1, 1, 32, 32);
        let raw = model.raw_forward(&x, false).unwrap();
        assert_eq!(raw.shape()[1], DET_CHANNELS);
    }
}
