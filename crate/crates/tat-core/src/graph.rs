//! Declarative detector graph: a flat list of primitive layers in
//! topological order. The same structure drives the executor (model
//! module) and the FLOPs analyzer, so the two can never disagree about
//! what the network computes.

use crate::error::{Error, Result};
use crate::tensor::conv::ConvSpec;

/// MobileNetV2 inverted-residual schedule as (expansion, out_channels,
/// stride) per block.
pub const MOBILENET_V2_BLOCKS: [(usize, usize, usize); 17] = [
    (1, 16, 1),
    (6, 24, 2),
    (6, 24, 1),
    (6, 32, 2),
    (6, 32, 1),
    (6, 32, 1),
    (6, 64, 2),
    (6, 64, 1),
    (6, 64, 1),
    (6, 64, 1),
    (6, 96, 1),
    (6, 96, 1),
    (6, 96, 1),
    (6, 160, 2),
    (6, 160, 1),
    (6, 160, 1),
    (6, 320, 1),
];

pub const STEM_CHANNELS: usize = 32;
pub const DET_CHANNELS: usize = 6;
/// Channel ladder of the plain merge head used when FRUs are disabled,
/// deepest stage first.
pub const MERGE_CHANNELS: [usize; 3] = [128, 64, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub use_mobilenet: bool,
    pub use_fru: bool,
    pub use_tau: bool,
    pub use_raw_input: bool,
    pub backbone_blocks: usize,
    pub fru_channels: usize,
    pub tau_compress_channels: usize,
    pub tau_encoder_dilations: Vec<usize>,
    pub output_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_mobilenet: true,
            use_fru: true,
            use_tau: true,
            use_raw_input: true,
            backbone_blocks: 7,
            fru_channels: 32,
            tau_compress_channels: 8,
            tau_encoder_dilations: vec![1, 3, 5, 7],
            output_stride: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_mobilenet {
            return Err(Error::Config(
                "use_mobilenet=false selects the heavy reference baseline, which this \
                 implementation does not build; its complexity is available as a fixture in \
                 the flops report"
                    .into(),
            ));
        }
        if self.use_raw_input && !self.use_fru {
            return Err(Error::Config(
                "use_raw_input needs use_fru: the downsampled image enters through cascaded \
                 feature refine units"
                    .into(),
            ));
        }
        if self.backbone_blocks > MOBILENET_V2_BLOCKS.len() {
            return Err(Error::Config(format!(
                "backbone_blocks {} exceeds the {} available inverted-residual blocks",
                self.backbone_blocks,
                MOBILENET_V2_BLOCKS.len()
            )));
        }
        if self.use_fru && self.backbone_blocks < 7 {
            return Err(Error::Config(format!(
                "the refine tower taps strides 4, 8 and 16, which needs backbone_blocks >= 7 \
                 (got {})",
                self.backbone_blocks
            )));
        }
        if !self.use_fru && self.backbone_blocks < 14 {
            return Err(Error::Config(format!(
                "the plain merge head taps strides 4, 8, 16 and 32, which needs \
                 backbone_blocks >= 14 (got {})",
                self.backbone_blocks
            )));
        }
        if self.fru_channels < 2 || self.fru_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "fru_channels must be even and >= 2, got {}",
                self.fru_channels
            )));
        }
        if self.tau_compress_channels == 0 {
            return Err(Error::Config("tau_compress_channels must be positive".into()));
        }
        if self.tau_encoder_dilations.is_empty()
            || self.tau_encoder_dilations.iter().any(|&d| d == 0)
        {
            return Err(Error::Config(
                "tau_encoder_dilations must be a non-empty list of positive rates".into(),
            ));
        }
        if self.output_stride != 4 {
            return Err(Error::Config(format!(
                "only output_stride 4 is supported, got {}",
                self.output_stride
            )));
        }
        Ok(())
    }

    /// Parse the flat key=value format; '#' starts a comment. Unknown keys
    /// are errors so typos fail loudly.
    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: {key}: {what}: `{value}`", lineno + 1))
            };
            match key {
                "use_mobilenet" => cfg.use_mobilenet = parse_bool(value).ok_or_else(|| bad("expected a boolean"))?,
                "use_fru" => cfg.use_fru = parse_bool(value).ok_or_else(|| bad("expected a boolean"))?,
                "use_tau" => cfg.use_tau = parse_bool(value).ok_or_else(|| bad("expected a boolean"))?,
                "use_raw_input" => cfg.use_raw_input = parse_bool(value).ok_or_else(|| bad("expected a boolean"))?,
                "backbone_blocks" => cfg.backbone_blocks = value.parse().map_err(|_| bad("expected an integer"))?,
                "fru_channels" => cfg.fru_channels = value.parse().map_err(|_| bad("expected an integer"))?,
                "tau_compress_channels" => cfg.tau_compress_channels = value.parse().map_err(|_| bad("expected an integer"))?,
                "tau_encoder_dilations" => {
                    cfg.tau_encoder_dilations = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("expected a comma-separated integer list"))?;
                }
                "output_stride" => cfg.output_stride = value.parse().map_err(|_| bad("expected an integer"))?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let dil: Vec<String> = self.tau_encoder_dilations.iter().map(|d| d.to_string()).collect();
        format!(
            "use_mobilenet={}\nuse_fru={}\nuse_tau={}\nuse_raw_input={}\nbackbone_blocks={}\n\
             fru_channels={}\ntau_compress_channels={}\ntau_encoder_dilations={}\noutput_stride={}\n",
            self.use_mobilenet,
            self.use_fru,
            self.use_tau,
            self.use_raw_input,
            self.backbone_blocks,
            self.fru_channels,
            self.tau_compress_channels,
            dil.join(","),
            self.output_stride
        )
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum LayerKind {
    /// The image, N,3,H,W.
    Input,
    Conv { spec: ConvSpec, bias: bool },
    BatchNorm,
    Relu6,
    Sigmoid,
    /// Bilinear-resize inputs[0] to the spatial dims of inputs[1]; the
    /// reference feeds shape only, not data.
    ResizeLike,
    /// Element-wise sum of two same-shape inputs.
    Add,
    /// Element-wise product; one operand may be single-channel.
    Mul,
    /// Channel concatenation.
    Concat,
    /// Named pass-through marking a backbone output.
    Tap,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct NetworkGraph {
    /// Topological order: nodes only reference earlier nodes.
    pub nodes: Vec<Node>,
    /// The 6-channel detection conv (1 score + 4 distances + 1 angle).
    pub det: NodeId,
    pub taps: Vec<(String, NodeId)>,
    pub config: ModelConfig,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            debug_assert!(i < self.nodes.len(), "inputs must precede the node");
        }
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: impl Into<String>, input: NodeId, spec: ConvSpec, bias: bool) -> NodeId {
        self.add(name, LayerKind::Conv { spec, bias }, vec![input])
    }

    fn conv_bn(&mut self, prefix: &str, input: NodeId, spec: ConvSpec) -> NodeId {
        let c = self.conv(prefix.to_string(), input, spec, false);
        self.add(format!("{prefix}.bn"), LayerKind::BatchNorm, vec![c])
    }

    fn conv_bn_relu(&mut self, prefix: &str, input: NodeId, spec: ConvSpec) -> NodeId {
        let b = self.conv_bn(prefix, input, spec);
        self.add(format!("{prefix}.relu"), LayerKind::Relu6, vec![b])
    }

    /// Inverted residual block. Returns (output, out_channels).
    fn inverted_residual(
        &mut self,
        prefix: &str,
        input: NodeId,
        in_ch: usize,
        expansion: usize,
        out_ch: usize,
        stride: usize,
    ) -> NodeId {
        let mid = in_ch * expansion;
        let mut x = input;
        if expansion != 1 {
            x = self.conv_bn_relu(&format!("{prefix}.expand"), x, ConvSpec::new(in_ch, mid, 1));
        }
        x = self.conv_bn_relu(
            &format!("{prefix}.dw"),
            x,
            ConvSpec::depthwise(mid, 3).stride(stride).padding(1),
        );
        let proj = self.conv_bn(&format!("{prefix}.project"), x, ConvSpec::new(mid, out_ch, 1));
        if stride == 1 && in_ch == out_ch {
            self.add(format!("{prefix}.add"), LayerKind::Add, vec![proj, input])
        } else {
            proj
        }
    }

    /// Feature refine unit: bottleneck residual normalizing to
    /// `out_ch` channels. Returns the activated output.
    fn fru(&mut self, prefix: &str, input: NodeId, in_ch: usize, out_ch: usize) -> NodeId {
        let mid = out_ch / 2;
        let x = self.conv_bn_relu(&format!("{prefix}.c1"), input, ConvSpec::new(in_ch, mid, 1));
        let x = self.conv_bn_relu(
            &format!("{prefix}.c2"),
            x,
            ConvSpec::new(mid, mid, 3).padding(1),
        );
        let x = self.conv_bn(&format!("{prefix}.c3"), x, ConvSpec::new(mid, out_ch, 1));
        let shortcut = if in_ch == out_ch {
            input
        } else {
            self.conv_bn(&format!("{prefix}.sc"), input, ConvSpec::new(in_ch, out_ch, 1))
        };
        let sum = self.add(format!("{prefix}.fuse"), LayerKind::Add, vec![x, shortcut]);
        self.add(format!("{prefix}.relu"), LayerKind::Relu6, vec![sum])
    }

    /// Textual attention unit: compress, dilated depthwise encoders,
    /// decode to a 1-channel sigmoid gate, multiply back onto the input.
    fn tau(&mut self, prefix: &str, input: NodeId, in_ch: usize, cfg: &ModelConfig) -> NodeId {
        let cc = cfg.tau_compress_channels;
        let c = self.conv(format!("{prefix}.compress"), input, ConvSpec::new(in_ch, cc, 1), true);
        let c = self.add(format!("{prefix}.compress.relu"), LayerKind::Relu6, vec![c]);
        let mut enc_outs = Vec::new();
        for (k, &r) in cfg.tau_encoder_dilations.iter().enumerate() {
            let p = format!("{prefix}.enc{}", k + 1);
            let dw = self.conv(
                format!("{p}.dw"),
                c,
                ConvSpec::depthwise(cc, 3).dilation(r).padding(r),
                true,
            );
            let dw = self.add(format!("{p}.dw.relu"), LayerKind::Relu6, vec![dw]);
            let pw = self.conv(format!("{p}.pw"), dw, ConvSpec::new(cc, cc, 1), true);
            let pw = self.add(format!("{p}.pw.relu"), LayerKind::Relu6, vec![pw]);
            enc_outs.push(pw);
        }
        let cat = self.add(format!("{prefix}.concat"), LayerKind::Concat, enc_outs);
        let dec = self.conv(
            format!("{prefix}.dec"),
            cat,
            ConvSpec::new(cc * cfg.tau_encoder_dilations.len(), 1, 1),
            true,
        );
        let gate = self.add(format!("{prefix}.gate"), LayerKind::Sigmoid, vec![dec]);
        self.add(format!("{prefix}.apply"), LayerKind::Mul, vec![input, gate])
    }
}

/// Backbone stem + inverted residual blocks. Returns the tap node and
/// channel count for each requested stride (the last block output at that
/// stride).
fn build_backbone(
    b: &mut Builder,
    input: NodeId,
    blocks: usize,
    tap_strides: &[usize],
) -> Result<Vec<(usize, usize, NodeId)>> {
    let mut x = b.conv_bn_relu(
        "backbone.stem",
        input,
        ConvSpec::new(3, STEM_CHANNELS, 3).stride(2).padding(1),
    );
    let mut ch = STEM_CHANNELS;
    let mut stride = 2;
    let mut by_stride: Vec<(usize, usize, NodeId)> = Vec::new();
    for (k, &(t, c, s)) in MOBILENET_V2_BLOCKS.iter().take(blocks).enumerate() {
        x = b.inverted_residual(&format!("backbone.b{}", k + 1), x, ch, t, c, s);
        ch = c;
        stride *= s;
        match by_stride.iter_mut().find(|(st, ..)| *st == stride) {
            Some(slot) => *slot = (stride, ch, x),
            None => by_stride.push((stride, ch, x)),
        }
    }
    let mut taps = Vec::new();
    for &want in tap_strides {
        let Some(&(st, c, node)) = by_stride.iter().find(|(st, ..)| *st == want) else {
            return Err(Error::Config(format!(
                "backbone with {blocks} blocks never reaches stride {want}"
            )));
        };
        let tap = b.add(format!("tap.s{st}"), LayerKind::Tap, vec![node]);
        taps.push((st, c, tap));
    }
    Ok(taps)
}

/// Build the detector graph for a validated configuration.
pub fn build_graph(config: &ModelConfig) -> Result<NetworkGraph> {
    config.validate()?;
    let mut b = Builder { nodes: Vec::new() };
    let input = b.add("input", LayerKind::Input, vec![]);

    let det_input = if config.use_fru {
        build_refine_tower(&mut b, input, config)?
    } else {
        build_merge_head(&mut b, input, config)?
    };

    let det = b.conv(
        "det",
        det_input,
        ConvSpec::new(config.fru_channels, DET_CHANNELS, 1),
        true,
    );
    let taps = b
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.kind, LayerKind::Tap))
        .map(|(i, n)| (n.name.clone(), i))
        .collect();
    Ok(NetworkGraph {
        nodes: b.nodes,
        det,
        taps,
        config: config.clone(),
    })
}

/// The attention tower: one refine unit per tap, top-down fusion by
/// addition, optional image side branch through two cascaded refine
/// units, a second refine unit after each fusion, then attention.
fn build_refine_tower(b: &mut Builder, input: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let fc = cfg.fru_channels;
    let taps = build_backbone(b, input, cfg.backbone_blocks, &[16, 8, 4])?;
    let mut coarser: Option<NodeId> = None;
    let mut out = 0;
    for &(stride, ch, tap) in &taps {
        let lp = format!("tower.s{stride}");
        let refined = b.fru(&format!("{lp}.fru_in"), tap, ch, fc);
        let mut fused = match coarser {
            None => refined,
            Some(prev) => {
                let up = b.add(format!("{lp}.up"), LayerKind::ResizeLike, vec![prev, refined]);
                b.add(format!("{lp}.fmu"), LayerKind::Add, vec![up, refined])
            }
        };
        // the downsampled input rides along as extra channels, so low
        // level detail survives the deep path; the next FRU mixes it in
        let mut fused_ch = fc;
        if cfg.use_raw_input {
            let img = b.add(
                format!("{lp}.img"),
                LayerKind::ResizeLike,
                vec![input, refined],
            );
            fused = b.add(format!("{lp}.fmu_img"), LayerKind::Concat, vec![fused, img]);
            fused_ch += 3;
        }
        let refined2 = b.fru(&format!("{lp}.fru_out"), fused, fused_ch, fc);
        out = if cfg.use_tau {
            b.tau(&format!("{lp}.tau"), refined2, fc, cfg)
        } else {
            refined2
        };
        coarser = Some(out);
    }
    Ok(out)
}

/// Plain top-down merge used without refine units: upsample, concat with
/// the skip feature, 1x1 then 3x3 conv, shrinking the channel ladder.
fn build_merge_head(b: &mut Builder, input: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let taps = build_backbone(b, input, cfg.backbone_blocks, &[32, 16, 8, 4])?;
    let (_, _, mut h) = taps[0];
    let mut h_ch = taps[0].1;
    for (k, &(stride, ch, tap)) in taps[1..].iter().enumerate() {
        let lp = format!("merge.s{stride}");
        let out_ch = MERGE_CHANNELS[k];
        let up = b.add(format!("{lp}.up"), LayerKind::ResizeLike, vec![h, tap]);
        let cat = b.add(format!("{lp}.concat"), LayerKind::Concat, vec![up, tap]);
        let x = b.conv_bn_relu(&format!("{lp}.reduce"), cat, ConvSpec::new(h_ch + ch, out_ch, 1));
        let mut x = b.conv_bn_relu(
            &format!("{lp}.conv"),
            x,
            ConvSpec::new(out_ch, out_ch, 3).padding(1),
        );
        if cfg.use_tau {
            x = b.tau(&format!("{lp}.tau"), x, out_ch, cfg);
        }
        h = x;
        h_ch = out_ch;
    }
    Ok(b.conv_bn_relu(
        "merge.final",
        h,
        ConvSpec::new(h_ch, cfg.fru_channels, 3).padding(1),
    ))
}

/// Static shape inference for a batch of `n` images at `h`x`w`. Returns
/// one N,C,H,W shape per node.
pub fn infer_shapes(g: &NetworkGraph, n: usize, h: usize, w: usize) -> Result<Vec<[usize; 4]>> {
    let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(g.nodes.len());
    for (idx, node) in g.nodes.iter().enumerate() {
        for &i in &node.inputs {
            if i >= idx {
                return Err(Error::Config(format!(
                    "node `{}` references a later node; graph is not topologically ordered",
                    node.name
                )));
            }
        }
        let shape = match &node.kind {
            LayerKind::Input => [n, 3, h, w],
            LayerKind::Conv { spec, .. } => {
                let s = shapes[node.inputs[0]];
                if s[1] != spec.in_channels {
                    return Err(Error::Shape {
                        op: "infer_shapes",
                        axis: "channel",
                        expected: spec.in_channels.to_string(),
                        got: format!("{} at node `{}`", s[1], node.name),
                    });
                }
                let (oh, ow) = spec.output_size(s[2], s[3])?;
                [s[0], spec.out_channels, oh, ow]
            }
            LayerKind::BatchNorm | LayerKind::Relu6 | LayerKind::Sigmoid | LayerKind::Tap => {
                shapes[node.inputs[0]]
            }
            LayerKind::ResizeLike => {
                let src = shapes[node.inputs[0]];
                let like = shapes[node.inputs[1]];
                [src[0], src[1], like[2], like[3]]
            }
            LayerKind::Add => {
                let a = shapes[node.inputs[0]];
                let bsh = shapes[node.inputs[1]];
                if a != bsh {
                    return Err(Error::Shape {
                        op: "infer_shapes",
                        axis: "add operands",
                        expected: format!("{a:?}"),
                        got: format!("{bsh:?} at node `{}`", node.name),
                    });
                }
                a
            }
            LayerKind::Mul => {
                let a = shapes[node.inputs[0]];
                let bsh = shapes[node.inputs[1]];
                let compatible = a == bsh
                    || (a[0] == bsh[0]
                        && a[2] == bsh[2]
                        && a[3] == bsh[3]
                        && (a[1] == 1 || bsh[1] == 1));
                if !compatible {
                    return Err(Error::Shape {
                        op: "infer_shapes",
                        axis: "mul operands",
                        expected: format!("{a:?}"),
                        got: format!("{bsh:?} at node `{}`", node.name),
                    });
                }
                [a[0], a[1].max(bsh[1]), a[2], a[3]]
            }
            LayerKind::Concat => {
                let first = shapes[node.inputs[0]];
                let mut c = 0;
                for &i in &node.inputs {
                    let s = shapes[i];
                    if (s[0], s[2], s[3]) != (first[0], first[2], first[3]) {
                        return Err(Error::Shape {
                            op: "infer_shapes",
                            axis: "concat spatial dims",
                            expected: format!("{first:?}"),
                            got: format!("{s:?} at node `{}`", node.name),
                        });
                    }
                    c += s[1];
                }
                [first[0], c, first[2], first[3]]
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}
