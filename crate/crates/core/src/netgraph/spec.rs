//! Declarative layer graphs and analytic parameter counting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How short- and long-range connections are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Element-wise maximum (competitive blocks).
    Maxout,
    /// Channel concatenation (dense blocks).
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Input,
    Conv2d { kernel: usize },
    Conv3d { kernel: usize },
    BatchNorm,
    Relu,
    Maxout,
    Concat,
    /// 2x2 in-plane max-pool that records argmax positions.
    MaxpoolWithIndices,
    /// Inverse of the referenced pool layer.
    UnpoolFromIndices { pool: usize },
    Softmax,
}

impl LayerKind {
    /// Kernel extent `(kd, kh, kw)` for convolutions.
    pub fn kernel(&self) -> Option<[usize; 3]> {
        match *self {
            LayerKind::Conv2d { kernel } => Some([1, kernel, kernel]),
            LayerKind::Conv3d { kernel } => Some([kernel, kernel, kernel]),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Producing layers, by index.
    pub inputs: Vec<usize>,
    /// Channels per input operand (the sum for concatenation).
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialDims {
    Two,
    Three,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub dims: SpatialDims,
    /// Required `(D, H, W)` input; 2D nets use `D = 1`. `None` accepts any size.
    pub input_canvas: Option<[usize; 3]>,
    pub fusion: Option<FusionMode>,
}

impl NetworkSpec {
    pub fn input_channels(&self) -> usize {
        self.layers[0].out_channels
    }

    pub fn output(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Channel-flow check: every declared channel count matches its producers.
    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, m: String| Err(Error::Config(format!("layer {i} ({}): {m}", self.layers[i].name)));
        if self.layers.is_empty() || self.layers[0].kind != LayerKind::Input {
            return Err(Error::Config("network must start with an input layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.iter().any(|&j| j >= i) {
                return bad(i, "inputs must precede the layer".into());
            }
            let ins: Vec<usize> = l.inputs.iter().map(|&j| self.layers[j].out_channels).collect();
            let (exp_in, exp_out) = match l.kind {
                LayerKind::Input => {
                    if !l.inputs.is_empty() {
                        return bad(i, "input layer takes no inputs".into());
                    }
                    (l.in_channels, l.in_channels)
                }
                LayerKind::Conv2d { .. } | LayerKind::Conv3d { .. } => {
                    if ins.len() != 1 {
                        return bad(i, "convolution takes one input".into());
                    }
                    (ins[0], l.out_channels)
                }
                LayerKind::BatchNorm | LayerKind::Relu | LayerKind::MaxpoolWithIndices | LayerKind::Softmax => {
                    if ins.len() != 1 {
                        return bad(i, "expects one input".into());
                    }
                    (ins[0], ins[0])
                }
                LayerKind::UnpoolFromIndices { pool } => {
                    if ins.len() != 1 || pool >= i || self.layers[pool].kind != LayerKind::MaxpoolWithIndices {
                        return bad(i, "unpool needs one input and an earlier pool layer".into());
                    }
                    if self.layers[pool].out_channels != ins[0] {
                        return bad(i, "unpool channels differ from its pool".into());
                    }
                    (ins[0], ins[0])
                }
                LayerKind::Maxout => {
                    if ins.len() < 2 || ins.iter().any(|&c| c != ins[0]) {
                        return bad(i, format!("maxout needs >= 2 equal-channel inputs, got {ins:?}"));
                    }
                    (ins[0], ins[0])
                }
                LayerKind::Concat => {
                    if ins.len() < 2 {
                        return bad(i, "concat needs >= 2 inputs".into());
                    }
                    let s = ins.iter().sum();
                    (s, s)
                }
            };
            if l.in_channels != exp_in || l.out_channels != exp_out {
                return bad(
                    i,
                    format!(
                        "declares {}->{} channels, producers imply {exp_in}->{exp_out}",
                        l.in_channels, l.out_channels
                    ),
                );
            }
        }
        if self.layers[self.output()].kind != LayerKind::Softmax {
            return Err(Error::Config("network must end in softmax".into()));
        }
        if self.layers[self.output()].out_channels != self.num_classes {
            return Err(Error::Config("output channels differ from num_classes".into()));
        }
        Ok(())
    }

    /// Spatial `(D, H, W)` of every layer output for a given input size.
    pub fn spatial_shapes(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let mut out: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let s = match l.kind {
                LayerKind::Input => input,
                LayerKind::MaxpoolWithIndices => {
                    let [d, h, w] = out[l.inputs[0]];
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Dimension(format!("layer {}: cannot pool {h}x{w}", l.name)));
                    }
                    [d, h / 2, w / 2]
                }
                LayerKind::UnpoolFromIndices { pool } => {
                    let pooled = out[pool];
                    if out[l.inputs[0]] != pooled {
                        return Err(Error::Dimension(format!("layer {}: unpool input size mismatch", l.name)));
                    }
                    out[self.layers[pool].inputs[0]]
                }
                _ => {
                    let s = out[l.inputs[0]];
                    if l.inputs.iter().any(|&j| out[j] != s) {
                        return Err(Error::Dimension(format!("layer {} ({i}): operand sizes differ", l.name)));
                    }
                    s
                }
            };
            out.push(s);
        }
        Ok(out)
    }
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    layers: Vec<Layer>,
}

impl SpecBuilder {
    pub fn new(input_channels: usize) -> Self {
        let mut b = Self::default();
        b.layers.push(Layer {
            name: "input".into(),
            kind: LayerKind::Input,
            inputs: vec![],
            in_channels: input_channels,
            out_channels: input_channels,
        });
        b
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn channels(&self, id: usize) -> usize {
        self.layers[id].out_channels
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>, in_channels: usize, out_channels: usize) -> usize {
        self.layers.push(Layer { name, kind, inputs, in_channels, out_channels });
        self.layers.len() - 1
    }

    pub fn conv2d(&mut self, name: impl Into<String>, input: usize, kernel: usize, out: usize) -> usize {
        let c = self.channels(input);
        self.push(name.into(), LayerKind::Conv2d { kernel }, vec![input], c, out)
    }

    pub fn conv3d(&mut self, name: impl Into<String>, input: usize, kernel: usize, out: usize) -> usize {
        let c = self.channels(input);
        self.push(name.into(), LayerKind::Conv3d { kernel }, vec![input], c, out)
    }

    fn unary(&mut self, name: impl Into<String>, kind: LayerKind, input: usize) -> usize {
        let c = self.channels(input);
        self.push(name.into(), kind, vec![input], c, c)
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, input: usize) -> usize {
        self.unary(name, LayerKind::BatchNorm, input)
    }

    pub fn relu(&mut self, name: impl Into<String>, input: usize) -> usize {
        self.unary(name, LayerKind::Relu, input)
    }

    pub fn softmax(&mut self, name: impl Into<String>, input: usize) -> usize {
        self.unary(name, LayerKind::Softmax, input)
    }

    pub fn maxpool(&mut self, name: impl Into<String>, input: usize) -> usize {
        self.unary(name, LayerKind::MaxpoolWithIndices, input)
    }

    pub fn unpool(&mut self, name: impl Into<String>, input: usize, pool: usize) -> usize {
        self.unary(name, LayerKind::UnpoolFromIndices { pool }, input)
    }

    pub fn fuse(&mut self, name: impl Into<String>, mode: FusionMode, inputs: Vec<usize>) -> usize {
        let chans: Vec<usize> = inputs.iter().map(|&i| self.channels(i)).collect();
        match mode {
            FusionMode::Maxout => self.push(name.into(), LayerKind::Maxout, inputs, chans[0], chans[0]),
            FusionMode::Concat => {
                let s = chans.iter().sum();
                self.push(name.into(), LayerKind::Concat, inputs, s, s)
            }
        }
    }

    pub fn finish(
        self,
        name: impl Into<String>,
        num_classes: usize,
        dims: SpatialDims,
        input_canvas: Option<[usize; 3]>,
        fusion: Option<FusionMode>,
    ) -> Result<NetworkSpec> {
        let spec = NetworkSpec { name: name.into(), layers: self.layers, num_classes, dims, input_canvas, fusion };
        spec.validate()?;
        if let Some(c) = input_canvas {
            spec.spatial_shapes(c)?;
        }
        Ok(spec)
    }
}

/// Width, kernel sizes and canvas of the 2D segmentation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    /// Output channels of every convolution inside blocks and bottleneck.
    pub width: usize,
    /// Kernel sizes of the three convolutions in each dense block.
    pub dense_kernels: [usize; 3],
    pub unpool_kernel: usize,
    pub bottleneck_kernel: usize,
    /// `(H, W)`; both must be divisible by 16.
    pub canvas: (usize, usize),
}

impl Default for SegNetConfig {
    /// Full-size network on the 224x256 canvas.
    fn default() -> Self {
        Self { width: 64, dense_kernels: [5, 5, 1], unpool_kernel: 5, bottleneck_kernel: 5, canvas: (224, 256) }
    }
}

impl SegNetConfig {
    /// Narrow, small-kernel variant on the 112x128 canvas for CPU-scale runs.
    pub fn desk() -> Self {
        Self { width: 16, dense_kernels: [3, 3, 1], unpool_kernel: 3, bottleneck_kernel: 3, canvas: (112, 128) }
    }
}

pub const ENCODER_DEPTH: usize = 4;

/// Appends a dense block. Each convolution is preceded by batch-norm and ReLU;
/// its input fuses the block input with every earlier convolution output.
/// Returns the last convolution.
pub fn add_dense_block(b: &mut SpecBuilder, prefix: &str, input: usize, mode: FusionMode, cfg: &SegNetConfig) -> usize {
    let mut x = input;
    if mode == FusionMode::Maxout && b.channels(input) != cfg.width {
        x = b.conv2d(format!("{prefix}.proj"), input, 1, cfg.width);
    }
    let mut operands = vec![x];
    let mut fused = x;
    let mut last = x;
    for (k, &kernel) in cfg.dense_kernels.iter().enumerate() {
        let n = k + 1;
        let bn = b.batch_norm(format!("{prefix}.bn{n}"), fused);
        let r = b.relu(format!("{prefix}.relu{n}"), bn);
        last = b.conv2d(format!("{prefix}.conv{n}"), r, kernel, cfg.width);
        operands.push(last);
        if k + 1 < cfg.dense_kernels.len() {
            fused = b.fuse(format!("{prefix}.fuse{n}"), mode, operands.clone());
        }
    }
    last
}

/// Appends an unpool block: index unpooling, one convolution, then fusion with the skip connection.
pub fn add_unpool_block(
    b: &mut SpecBuilder,
    prefix: &str,
    input: usize,
    skip: usize,
    pool: usize,
    mode: FusionMode,
    cfg: &SegNetConfig,
) -> usize {
    let u = b.unpool(format!("{prefix}.unpool"), input, pool);
    let c = b.conv2d(format!("{prefix}.conv"), u, cfg.unpool_kernel, cfg.width);
    b.fuse(format!("{prefix}.fuse"), mode, vec![skip, c])
}

fn fragment_config(cfg: &SegNetConfig) -> SegNetConfig {
    SegNetConfig { canvas: (2, 2), ..cfg.clone() }
}

/// A standalone dense block on an input of `in_channels`, closed by a softmax over its output.
pub fn build_cdb(in_channels: usize, mode: FusionMode) -> Result<NetworkSpec> {
    build_cdb_with(in_channels, mode, &SegNetConfig::default())
}

pub fn build_cdb_with(in_channels: usize, mode: FusionMode, cfg: &SegNetConfig) -> Result<NetworkSpec> {
    let mut b = SpecBuilder::new(in_channels);
    let input = b.input();
    let out = add_dense_block(&mut b, "cdb", input, mode, cfg);
    b.softmax("softmax", out);
    let f = fragment_config(cfg);
    b.finish("cdb", cfg.width, SpatialDims::Two, Some([1, f.canvas.0, f.canvas.1]), Some(mode))
}

/// A standalone unpool block: the input is both the skip connection and, after pooling, the coarse path.
pub fn build_cub(mode: FusionMode) -> Result<NetworkSpec> {
    build_cub_with(mode, &SegNetConfig::default())
}

pub fn build_cub_with(mode: FusionMode, cfg: &SegNetConfig) -> Result<NetworkSpec> {
    let mut b = SpecBuilder::new(cfg.width);
    let skip = b.input();
    let pool = b.maxpool("pool", skip);
    let out = add_unpool_block(&mut b, "cub", pool, skip, pool, mode, cfg);
    let classes = b.channels(out);
    b.softmax("softmax", out);
    let f = fragment_config(cfg);
    b.finish("cub", classes, SpatialDims::Two, Some([1, f.canvas.0, f.canvas.1]), Some(mode))
}

/// Encoder-decoder segmentation network: four dense blocks with pooling,
/// a convolution + batch-norm bottleneck, four unpool/dense decoder stages,
/// a 1x1 classifier and softmax.
pub fn build_segnet(num_classes: usize, mode: FusionMode, in_channels: usize) -> Result<NetworkSpec> {
    build_segnet_with(num_classes, mode, in_channels, &SegNetConfig::default())
}

pub fn build_segnet_with(num_classes: usize, mode: FusionMode, in_channels: usize, cfg: &SegNetConfig) -> Result<NetworkSpec> {
    if num_classes < 2 {
        return Err(Error::Argument("segmentation needs at least 2 classes".into()));
    }
    let div = 1 << ENCODER_DEPTH;
    if !cfg.canvas.0.is_multiple_of(div) || !cfg.canvas.1.is_multiple_of(div) {
        return Err(Error::Config(format!("canvas {:?} must be divisible by {div}", cfg.canvas)));
    }
    let mut b = SpecBuilder::new(in_channels);
    let mut x = b.input();
    let mut skips = Vec::with_capacity(ENCODER_DEPTH);
    for i in 1..=ENCODER_DEPTH {
        let e = add_dense_block(&mut b, &format!("enc{i}"), x, mode, cfg);
        let p = b.maxpool(format!("enc{i}.pool"), e);
        skips.push((e, p));
        x = p;
    }
    let bc = b.conv2d("bottleneck.conv", x, cfg.bottleneck_kernel, cfg.width);
    x = b.batch_norm("bottleneck.bn", bc);
    for i in (1..=ENCODER_DEPTH).rev() {
        let (skip, pool) = skips[i - 1];
        let u = add_unpool_block(&mut b, &format!("cub{i}"), x, skip, pool, mode, cfg);
        x = add_dense_block(&mut b, &format!("dec{i}"), u, mode, cfg);
    }
    let logits = b.conv2d("classifier", x, 1, num_classes);
    b.softmax("softmax", logits);
    let name = match mode {
        FusionMode::Maxout => "cdfnet",
        FusionMode::Concat => "dense-unet",
    };
    b.finish(name, num_classes, SpatialDims::Two, Some([1, cfg.canvas.0, cfg.canvas.1]), Some(mode))
}

pub const VIEW_AGG_HIDDEN: usize = 30;
pub const VIEW_COUNT: usize = 3;

/// 3x3x3 convolution to 30 channels, batch-norm, 1x1x1 convolution to the classes, softmax.
pub fn build_view_agg_net(num_classes: usize) -> Result<NetworkSpec> {
    let mut b = SpecBuilder::new(VIEW_COUNT * num_classes);
    let c = b.conv3d("agg.conv1", b.input(), 3, VIEW_AGG_HIDDEN);
    let bn = b.batch_norm("agg.bn", c);
    let c2 = b.conv3d("agg.conv2", bn, 1, num_classes);
    b.softmax("softmax", c2);
    b.finish("view-agg", num_classes, SpatialDims::Three, None, None)
}

/// Trainable parameters: convolutions `(prod(kernel) * in + 1) * out`, batch-norm `2 * channels`.
pub fn count_parameters(spec: &NetworkSpec) -> usize {
    spec.layers.iter().map(layer_parameters).sum()
}

pub fn layer_parameters(l: &Layer) -> usize {
    match l.kind.kernel() {
        Some(k) => (k.iter().product::<usize>() * l.in_channels + 1) * l.out_channels,
        None if l.kind == LayerKind::BatchNorm => 2 * l.out_channels,
        None => 0,
    }
}
