use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChannelPlan, ScaleConfig};
use crate::csif::Csif;
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, ConvBnAct, Ctx, DetectHead, Module, ParamList, Sppf, StageBlock};
use crate::srm::{latent_channels, Srm, DEFAULT_EPS};
use crate::tensor::{concat, split, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fused,
    Rgb,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub scale: ScaleConfig,
    pub in_channels_rgb: usize,
    pub in_channels_depth: usize,
    pub num_classes: usize,
    pub modality: Modality,
    pub use_srm: bool,
    pub use_csif: bool,
    pub srm_alpha: f64,
    /// Overrides the depth-scaled number of attention blocks at P5.
    pub csif_blocks: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: ScaleConfig::preset("n").expect("nano preset"),
            in_channels_rgb: 3,
            in_channels_depth: 1,
            num_classes: 2,
            modality: Modality::Fused,
            use_srm: true,
            use_csif: true,
            srm_alpha: crate::srm::DEFAULT_ALPHA,
            csif_blocks: None,
        }
    }
}

impl ModelConfig {
    pub fn for_scale(scale: ScaleConfig) -> ModelConfig {
        ModelConfig { scale, ..ModelConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rgb,
    Depth,
    Fusion,
    Neck,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Input,
    Conv,
    Stage,
    Sppf,
    Srm,
    Csif,
    Concat,
    Upsample,
    Head,
}

pub enum Layer {
    Input,
    Conv(ConvBnAct),
    Stage(StageBlock),
    Sppf(Sppf),
    Srm(Srm),
    Csif(Csif),
    Concat,
    Upsample,
    Head(DetectHead),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Input => LayerKind::Input,
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Stage(_) => LayerKind::Stage,
            Layer::Sppf(_) => LayerKind::Sppf,
            Layer::Srm(_) => LayerKind::Srm,
            Layer::Csif(_) => LayerKind::Csif,
            Layer::Concat => LayerKind::Concat,
            Layer::Upsample => LayerKind::Upsample,
            Layer::Head(_) => LayerKind::Head,
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        match self {
            Layer::Conv(m) => m.collect_params(prefix, out),
            Layer::Stage(m) => m.collect_params(prefix, out),
            Layer::Sppf(m) => m.collect_params(prefix, out),
            Layer::Srm(m) => m.collect_params(prefix, out),
            Layer::Csif(m) => m.collect_params(prefix, out),
            Layer::Head(m) => m.collect_params(prefix, out),
            Layer::Input | Layer::Concat | Layer::Upsample => {}
        }
    }

    /// Multiply-accumulates given the spatial size of the (first) input.
    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Layer::Conv(m) => m.macs(h, w),
            Layer::Stage(m) => m.macs(h, w),
            Layer::Sppf(m) => m.macs(h, w),
            Layer::Srm(m) => m.macs(h, w),
            Layer::Csif(m) => m.macs(h, w),
            Layer::Head(m) => m.macs(h, w),
            Layer::Input | Layer::Concat | Layer::Upsample => 0,
        }
    }
}

pub struct Node {
    pub name: String,
    pub branch: Branch,
    pub layer: Layer,
    pub inputs: Vec<usize>,
    pub out_channels: usize,
    /// Output stride relative to the network input.
    pub stride: usize,
}

impl Node {
    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }
}

/// Detection outputs of one pyramid level.
pub struct LevelOutput {
    pub stride: usize,
    /// `[B, num_classes, H, W]`
    pub cls: Tensor,
    /// `[B, 4, H, W]` raw (l, t, r, b) regressions.
    pub boxes: Tensor,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeStats {
    pub name: String,
    pub kind: LayerKind,
    pub branch: Branch,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub flops: u64,
}

/// A built detector: nodes in execution order, each consuming earlier
/// nodes' outputs.
pub struct ModelGraph {
    pub config: ModelConfig,
    pub plan: ChannelPlan,
    pub nodes: Vec<Node>,
    /// P3, P4, P5 features handed to the neck.
    pub taps: [usize; 3],
    /// Head nodes for P3, P4, P5.
    pub heads: [usize; 3],
}

struct Builder {
    nodes: Vec<Node>,
    seed: u64,
}

impl Builder {
    /// Independent init stream per node so variants that share a node name
    /// start from identical weights.
    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(h);
        rng
    }

    fn add(&mut self, name: &str, branch: Branch, layer: Layer, inputs: &[usize], cout: usize, stride: usize) -> usize {
        self.nodes.push(Node {
            name: name.to_string(),
            branch,
            layer,
            inputs: inputs.to_vec(),
            out_channels: cout,
            stride,
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: &str, br: Branch, from: usize, cout: usize, k: usize, s: usize) -> usize {
        let (cin, stride) = (self.nodes[from].out_channels, self.nodes[from].stride);
        let m = ConvBnAct::new(cin, cout, k, s, &mut self.rng(name));
        self.add(name, br, Layer::Conv(m), &[from], cout, stride * s)
    }

    fn stage(&mut self, name: &str, br: Branch, from: usize, cout: usize, n: usize, shortcut: bool) -> usize {
        let (cin, stride) = (self.nodes[from].out_channels, self.nodes[from].stride);
        let m = StageBlock::new(cin, cout, n, shortcut, &mut self.rng(name));
        self.add(name, br, Layer::Stage(m), &[from], cout, stride)
    }

    fn srm(&mut self, name: &str, br: Branch, from: usize, alpha: f64) -> Result<usize> {
        let (c, stride) = (self.nodes[from].out_channels, self.nodes[from].stride);
        let m = Srm::with_config(c, latent_channels(c), alpha, DEFAULT_EPS, &mut self.rng(name))?;
        Ok(self.add(name, br, Layer::Srm(m), &[from], c, stride))
    }

    fn concat(&mut self, name: &str, br: Branch, from: &[usize]) -> usize {
        let c = from.iter().map(|&i| self.nodes[i].out_channels).sum();
        let stride = self.nodes[from[0]].stride;
        self.add(name, br, Layer::Concat, from, c, stride)
    }

    fn upsample(&mut self, name: &str, from: usize) -> usize {
        let (c, stride) = (self.nodes[from].out_channels, self.nodes[from].stride);
        self.add(name, Branch::Neck, Layer::Upsample, &[from], c, stride / 2)
    }
}

impl ModelGraph {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelGraph> {
        config.scale.validate()?;
        if config.num_classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        if !(0.0..=1.0).contains(&config.srm_alpha) {
            return Err(Error::Config(format!("srm_alpha {} outside [0, 1]", config.srm_alpha)));
        }
        let plan = ChannelPlan::new(&config.scale);
        let [_, _, c3, c4, c5] = plan.channels;
        let n = plan.repeats;
        let mut b = Builder { nodes: Vec::new(), seed };

        let mut branches = Vec::new();
        if config.modality != Modality::Depth {
            branches.push((Branch::Rgb, "rgb", config.in_channels_rgb));
        }
        if config.modality != Modality::Rgb {
            branches.push((Branch::Depth, "depth", config.in_channels_depth));
        }
        let mut levels = Vec::new();
        for &(br, tag, cin) in &branches {
            let input = b.add(&format!("{tag}.input"), br, Layer::Input, &[], cin, 1);
            levels.push(build_branch(&mut b, br, tag, input, &plan, config)?);
        }

        // P3 comes from the first branch only: RGB when present.
        let p3 = levels[0][0];
        let fusion_input = |b: &mut Builder, level: usize, name: &str| -> usize {
            let srcs: Vec<usize> = levels.iter().map(|l| l[level]).collect();
            if srcs.len() == 1 {
                srcs[0]
            } else {
                b.concat(name, Branch::Fusion, &srcs)
            }
        };
        let f = Branch::Fusion;
        let cat4 = fusion_input(&mut b, 1, "fuse.p4.concat");
        let mut p4 = b.stage("fuse.p4.stage", f, cat4, c4, n, false);
        if config.use_srm {
            p4 = b.srm("fuse.p4.srm", f, p4, config.srm_alpha)?;
        }
        let cat5 = fusion_input(&mut b, 2, "fuse.p5.concat");
        let mut p5 = b.stage("fuse.p5.stage", f, cat5, c5, n, false);
        if config.use_csif {
            let blocks = config.csif_blocks.unwrap_or(plan.csif_blocks);
            let stride = b.nodes[p5].stride;
            let m = Csif::new(c5, c5, blocks, &mut b.rng("fuse.p5.csif"))?;
            p5 = b.add("fuse.p5.csif", f, Layer::Csif(m), &[p5], c5, stride);
        }
        if config.use_srm {
            p5 = b.srm("fuse.p5.srm", f, p5, config.srm_alpha)?;
        }
        let taps = [p3, p4, p5];

        let nk = Branch::Neck;
        let up5 = b.upsample("neck.up5", p5);
        let cat = b.concat("neck.cat4", nk, &[up5, p4]);
        let td4 = b.stage("neck.td4", nk, cat, c4, n, false);
        let up4 = b.upsample("neck.up4", td4);
        let cat = b.concat("neck.cat3", nk, &[up4, p3]);
        let out3 = b.stage("neck.out3", nk, cat, c3, n, false);
        let down = b.conv("neck.down3", nk, out3, c3, 3, 2);
        let cat = b.concat("neck.cat4b", nk, &[down, td4]);
        let out4 = b.stage("neck.out4", nk, cat, c4, n, false);
        let down = b.conv("neck.down4", nk, out4, c4, 3, 2);
        let cat = b.concat("neck.cat5b", nk, &[down, p5]);
        let out5 = b.stage("neck.out5", nk, cat, c5, n, false);

        let mut heads = [0; 3];
        for (i, (from, tag)) in [(out3, "head.p3"), (out4, "head.p4"), (out5, "head.p5")].into_iter().enumerate() {
            let (c, stride) = (b.nodes[from].out_channels, b.nodes[from].stride);
            let m = DetectHead::new(c, config.num_classes, &mut b.rng(tag));
            heads[i] = b.add(tag, Branch::Head, Layer::Head(m), &[from], config.num_classes + 4, stride);
        }

        Ok(ModelGraph { config: config.clone(), plan, nodes: b.nodes, taps, heads })
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    /// Whether the output of node `from` can influence node `to`.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([to]);
        while let Some(i) = queue.pop_front() {
            if i == from {
                return true;
            }
            for &j in &self.nodes[i].inputs {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        false
    }

    /// Layer kinds met when walking back from `node` along first inputs,
    /// nearest first.
    pub fn producer_chain(&self, node: usize, len: usize) -> Vec<LayerKind> {
        let mut out = Vec::new();
        let mut cur = Some(node);
        while let Some(i) = cur {
            if out.len() == len {
                break;
            }
            out.push(self.nodes[i].kind());
            cur = self.nodes[i].inputs.first().copied();
        }
        out
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    pub fn count_flops(&self, input_hw: usize) -> Result<u64> {
        Ok(self.node_stats(input_hw, input_hw)?.iter().map(|s| s.flops).sum())
    }

    /// Per-node channels, output spatial size, parameters and FLOPs
    /// (2 × multiply-accumulates) for an `h`×`w` input.
    pub fn node_stats(&self, h: usize, w: usize) -> Result<Vec<NodeStats>> {
        let mut hw: Vec<(usize, usize)> = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (ih, iw) = node.inputs.first().map(|&i| hw[i]).unwrap_or((h, w));
            let out = match &node.layer {
                Layer::Conv(c) => c.output_hw(ih, iw)?,
                Layer::Upsample => (ih * 2, iw * 2),
                Layer::Concat => {
                    if node.inputs.iter().any(|&i| hw[i] != (ih, iw)) {
                        return Err(Error::Geometry(format!(
                            "input {h}x{w} misaligns the maps joined at {}",
                            node.name
                        )));
                    }
                    (ih, iw)
                }
                _ => (ih, iw),
            };
            hw.push(out);
            let mut params = ParamList::new();
            node.layer.collect_params("", &mut params);
            stats.push(NodeStats {
                name: node.name.clone(),
                kind: node.kind(),
                branch: node.branch,
                in_channels: node.inputs.iter().map(|&i| self.nodes[i].out_channels).sum(),
                out_channels: node.out_channels,
                height: out.0,
                width: out.1,
                params: params.iter().map(|(_, t)| t.numel()).sum(),
                flops: 2 * node.layer.macs(ih, iw),
            });
        }
        Ok(stats)
    }

    /// Runs every node and returns all node outputs (`None` for inputs of
    /// an absent modality).
    pub fn forward_all(&self, rgb: &Tensor, depth: &Tensor, ctx: &Ctx) -> Result<Vec<Tensor>> {
        self.run(rgb, depth, ctx, true)
            .map(|v| v.into_iter().map(|t| t.expect("all node outputs retained")).collect())
    }

    pub fn forward(&self, rgb: &Tensor, depth: &Tensor, ctx: &Ctx) -> Result<Vec<LevelOutput>> {
        let outs = self.run(rgb, depth, ctx, false)?;
        let nc = self.config.num_classes;
        self.heads
            .iter()
            .map(|&i| {
                let t = outs[i].as_ref().expect("head outputs retained");
                let parts = split(t, 1, &[nc, 4])?;
                Ok(LevelOutput { stride: self.nodes[i].stride, cls: parts[0].clone(), boxes: parts[1].clone() })
            })
            .collect()
    }

    fn run(&self, rgb: &Tensor, depth: &Tensor, ctx: &Ctx, keep_all: bool) -> Result<Vec<Option<Tensor>>> {
        let mut last_use: Vec<usize> = (0..self.nodes.len()).collect();
        for (j, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                last_use[i] = last_use[i].max(j);
            }
        }
        let mut outs: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (j, node) in self.nodes.iter().enumerate() {
            let arg = |k: usize| -> &Tensor {
                outs[node.inputs[k]].as_ref().expect("input computed before use")
            };
            let y = match &node.layer {
                Layer::Input => {
                    let x = if node.branch == Branch::Rgb { rgb } else { depth };
                    if x.rank() != 4 || x.dim(1) != node.out_channels {
                        return shape_err(format!(
                            "{} expects [B, {}, H, W], got {:?}",
                            node.name,
                            node.out_channels,
                            x.shape()
                        ));
                    }
                    x.clone()
                }
                Layer::Conv(m) => m.forward(arg(0), ctx)?,
                Layer::Stage(m) => m.forward(arg(0), ctx)?,
                Layer::Sppf(m) => m.forward(arg(0), ctx)?,
                Layer::Srm(m) => m.forward(arg(0))?,
                Layer::Csif(m) => m.forward(arg(0), ctx)?,
                Layer::Upsample => arg(0).upsample_nearest2x()?,
                Layer::Concat => {
                    let parts: Vec<Tensor> = (0..node.inputs.len()).map(|k| arg(k).clone()).collect();
                    concat(&parts, 1).map_err(|e| match e {
                        Error::Shape(m) => Error::Geometry(format!(
                            "{}: {m} (input side must be a multiple of 32)",
                            node.name
                        )),
                        other => other,
                    })?
                }
                Layer::Head(m) => {
                    let (cls, reg) = m.forward(arg(0), ctx)?;
                    concat(&[cls, reg], 1)?
                }
            };
            outs.push(Some(y));
            if !keep_all {
                for &i in &node.inputs {
                    if last_use[i] == j && !self.heads.contains(&i) {
                        outs[i] = None;
                    }
                }
            }
        }
        Ok(outs)
    }
}

fn build_branch(
    b: &mut Builder,
    br: Branch,
    tag: &str,
    input: usize,
    plan: &ChannelPlan,
    config: &ModelConfig,
) -> Result<[usize; 3]> {
    let [c1, c2, c3, c4, c5] = plan.channels;
    let n = plan.repeats;
    let x = b.conv(&format!("{tag}.p1.conv"), br, input, c1, 3, 2);
    let x = b.conv(&format!("{tag}.p2.conv"), br, x, c2, 3, 2);
    let x = b.stage(&format!("{tag}.p2.stage"), br, x, c2, n, true);
    let x = b.conv(&format!("{tag}.p3.conv"), br, x, c3, 3, 2);
    let mut p3 = b.stage(&format!("{tag}.p3.stage"), br, x, c3, n, true);
    if config.use_srm {
        p3 = b.srm(&format!("{tag}.p3.srm"), br, p3, config.srm_alpha)?;
    }
    let x = b.conv(&format!("{tag}.p4.conv"), br, p3, c4, 3, 2);
    let mut p4 = b.stage(&format!("{tag}.p4.stage"), br, x, c4, n, true);
    if config.use_srm {
        p4 = b.srm(&format!("{tag}.p4.srm"), br, p4, config.srm_alpha)?;
    }
    let x = b.conv(&format!("{tag}.p5.conv"), br, p4, c5, 3, 2);
    let x = b.stage(&format!("{tag}.p5.stage"), br, x, c5, n, true);
    let stride = b.nodes[x].stride;
    let name = format!("{tag}.p5.sppf");
    let m = Sppf::new(c5, &mut b.rng(&name));
    let p5 = b.add(&name, br, Layer::Sppf(m), &[x], c5, stride);
    Ok([p3, p4, p5])
}

impl Module for ModelGraph {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        for node in &self.nodes {
            node.layer.collect_params(&join(prefix, &node.name), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(modality: Modality) -> ModelGraph {
        let cfg = ModelConfig { scale: ScaleConfig::micro(), modality, ..ModelConfig::default() };
        ModelGraph::build(&cfg, 0).unwrap()
    }

    #[test]
    fn micro_forward_shapes() {
        let g = micro(Modality::Fused);
        let rgb = Tensor::zeros(&[1, 3, 64, 64]);
        let depth = Tensor::zeros(&[1, 1, 64, 64]);
        let out = crate::tensor::no_grad(|| g.forward(&rgb, &depth, &Ctx::eval())).unwrap();
        let sizes: Vec<_> = out.iter().map(|o| (o.stride, o.cls.shape().to_vec(), o.boxes.dim(1))).collect();
        assert_eq!(
            sizes,
            vec![(8, vec![1, 2, 8, 8], 4), (16, vec![1, 2, 4, 4], 4), (32, vec![1, 2, 2, 2], 4)]
        );
    }

    #[test]
    fn single_modality_graphs_have_one_branch() {
        for m in [Modality::Rgb, Modality::Depth] {
            let g = micro(m);
            assert!(g.find("fuse.p4.concat").is_none());
            assert_eq!(g.count_kind(LayerKind::Input), 1);
            assert_eq!(g.count_kind(LayerKind::Srm), 4);
        }
    }

    #[test]
    fn misaligned_input_is_a_geometry_error() {
        let g = micro(Modality::Fused);
        assert!(matches!(g.node_stats(48, 48), Err(Error::Geometry(_))));
        assert!(g.node_stats(64, 96).is_ok());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let g = micro(Modality::Fused);
        let r = crate::tensor::no_grad(|| {
            g.forward(&Tensor::zeros(&[1, 1, 32, 32]), &Tensor::zeros(&[1, 1, 32, 32]), &Ctx::eval())
        });
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn shared_nodes_initialize_identically_across_variants() {
        let full = micro(Modality::Fused);
        let cfg = ModelConfig { scale: ScaleConfig::micro(), use_srm: false, ..ModelConfig::default() };
        let bare = ModelGraph::build(&cfg, 0).unwrap();
        let a = full.parameters();
        let b = bare.parameters();
        let w = |ps: &ParamList, n: &str| ps.iter().find(|(k, _)| k == n).unwrap().1.to_vec();
        assert_eq!(w(&a, "rgb.p4.conv.conv.weight"), w(&b, "rgb.p4.conv.conv.weight"));
        assert_eq!(w(&a, "head.p3.cls_out.weight"), w(&b, "head.p3.cls_out.weight"));
    }
}
