//! The detector network: a shared convolutional backbone whose feature map
//! feeds a region-proposal head (per-anchor objectness + box deltas) and,
//! through ROI max pooling, a pair of classification/regression heads.
//!
//! Forward passes are recorded on an autograd [`Tape`]; proposal selection
//! and box decoding are deliberately outside the differentiable graph.
//! Inference is read-only over the model, so concurrent `detect` calls over
//! distinct images are safe.

mod io;

pub use io::{decode_model, encode_model, load_model, save_model};

use crate::autograd::{AutogradError, BnMode, RunningStats, Tape, Tensor, ValueId};
use crate::boxes::{
    generate_anchors, nms, AnchorGrid, BBox, BoxDelta, BoxError, Detection, TraitClass,
};
use crate::rng::Rng;
use std::fmt;

#[derive(Debug)]
pub enum DetectorError {
    Autograd(AutogradError),
    Box_(BoxError),
    ImageTooSmall { h: usize, w: usize, stride: usize },
    RoiOutsideFeatureMap,
    Config(String),
    Format(String),
    VersionMismatch { found: u32, supported: u32 },
    ChecksumMismatch,
    Io(std::io::Error),
}

impl fmt::Display for DetectorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorError::Autograd(e) => write!(f, "{e}"),
            DetectorError::Box_(e) => write!(f, "{e}"),
            DetectorError::ImageTooSmall { h, w, stride } => write!(
                f,
                "image {w}x{h} smaller than one backbone stride cell ({stride})"
            ),
            DetectorError::RoiOutsideFeatureMap => {
                write!(f, "roi lies entirely outside the feature map")
            }
            DetectorError::Config(msg) => write!(f, "bad config: {msg}"),
            DetectorError::Format(msg) => write!(f, "bad model file: {msg}"),
            DetectorError::VersionMismatch { found, supported } => write!(
                f,
                "model format version {found} not supported (this build reads {supported})"
            ),
            DetectorError::ChecksumMismatch => write!(f, "model file checksum mismatch"),
            DetectorError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for DetectorError {}

impl From<AutogradError> for DetectorError {
    fn from(e: AutogradError) -> Self {
        DetectorError::Autograd(e)
    }
}

impl From<BoxError> for DetectorError {
    fn from(e: BoxError) -> Self {
        DetectorError::Box_(e)
    }
}

impl From<std::io::Error> for DetectorError {
    fn from(e: std::io::Error) -> Self {
        DetectorError::Io(e)
    }
}

/// One backbone block: 3x3 conv (+batchnorm+relu) with the given output
/// channel count and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Everything that determines the network's shape and inference behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub backbone_blocks: Vec<BlockSpec>,
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub roi_pool_size: usize,
    pub head_channels: [usize; 3],
    /// Proposal budget: candidates kept before NMS, proposals kept after.
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub rpn_nms_iou: f64,
    pub detect_nms_iou: f64,
    pub score_threshold: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for DetectorConfig {
    /// Full-width layout: 512-channel proposal head, 512/512/2048 head stack,
    /// 14x14 ROI pooling, nine anchors per cell.
    fn default() -> Self {
        DetectorConfig {
            in_channels: 1,
            backbone_blocks: vec![
                BlockSpec { channels: 16, stride: 2 },
                BlockSpec { channels: 32, stride: 2 },
                BlockSpec { channels: 64, stride: 2 },
                BlockSpec { channels: 64, stride: 1 },
            ],
            rpn_channels: 512,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_pool_size: 14,
            head_channels: [512, 512, 2048],
            pre_nms_top: 256,
            post_nms_top: 32,
            rpn_nms_iou: 0.7,
            detect_nms_iou: 0.3,
            score_threshold: 0.5,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }
}

impl DetectorConfig {
    /// Narrow widths that train in minutes on a laptop CPU while keeping
    /// the full architecture (same blocks, pooling, head structure), with
    /// anchors sized for the synthetic 96-pixel dataset.
    pub fn compact() -> Self {
        DetectorConfig {
            rpn_channels: 128,
            head_channels: [48, 48, 96],
            anchor_scales: vec![16.0, 24.0, 32.0, 40.0, 48.0],
            anchor_ratios: vec![0.6, 1.0, 2.5],
            post_nms_top: 28,
            detect_nms_iou: 0.25,
            score_threshold: 0.6,
            ..DetectorConfig::default()
        }
    }

    pub fn total_stride(&self) -> usize {
        self.backbone_blocks.iter().map(|b| b.stride).product()
    }

    /// Anchors per feature-map cell (K).
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Five traits plus background.
    pub fn num_classes(&self) -> usize {
        TraitClass::ALL.len() + 1
    }

    pub fn background_class(&self) -> usize {
        TraitClass::ALL.len()
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |msg: String| Err(DetectorError::Config(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.backbone_blocks.is_empty() {
            return bad("backbone needs at least one block".into());
        }
        if self.backbone_blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return bad("backbone blocks need positive channels and stride".into());
        }
        if self.rpn_channels == 0 || self.head_channels.iter().any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty".into());
        }
        if self.roi_pool_size == 0 {
            return bad("roi_pool_size must be >= 1".into());
        }
        if self.pre_nms_top == 0 || self.post_nms_top == 0 {
            return bad("proposal budgets must be positive".into());
        }
        for (name, v) in [
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("detect_nms_iou", self.detect_nms_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad(format!(
                "score_threshold must be in [0, 1], got {}",
                self.score_threshold
            ));
        }
        if self.bn_epsilon <= 0.0 || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bad batchnorm constants".into());
        }
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    pub tensor: Tensor,
}

impl Param {
    fn new(name: String, tensor: Tensor) -> Self {
        Param { name, tensor }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Param,
    pub beta: Param,
    slot: usize,
    momentum: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<ConvBnRelu>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnNet {
    pub conv: ConvBnRelu,
    pub objectness: ConvLayer,
    pub deltas: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadNet {
    pub stack: Vec<ConvBnRelu>,
    pub cls: LinearLayer,
    pub reg: LinearLayer,
}

/// Batch-norm running statistics for every BN layer, indexed by slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BnState {
    pub slots: Vec<RunningStats>,
}

/// Which network components the three named groups map to; used for
/// freezing, checksums, and gradient masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Backbone,
    Rpn,
    Heads,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Backbone, Component::Rpn, Component::Heads];

    pub fn of_param(name: &str) -> Component {
        if name.starts_with("backbone.") {
            Component::Backbone
        } else if name.starts_with("rpn.") {
            Component::Rpn
        } else {
            Component::Heads
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Rpn => "rpn",
            Component::Heads => "heads",
        }
    }
}

/// The whole model: config plus every named parameter and BN buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub rpn: RpnNet,
    pub heads: HeadNet,
    pub bn_state: BnState,
}

struct Builder {
    rng: Rng,
    slots: usize,
    momentum: f64,
    epsilon: f64,
}

impl Builder {
    fn uniform_fan_in(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.range(-bound, bound))
    }

    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvLayer {
        let fan_in = in_c * k * k;
        ConvLayer {
            weight: Param::new(
                format!("{name}.weight"),
                self.uniform_fan_in(vec![out_c, in_c, k, k], fan_in),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_c])),
            stride,
            padding,
        }
    }

    fn bn(&mut self, name: &str, channels: usize, bn_state: &mut BnState) -> BnLayer {
        let slot = self.slots;
        self.slots += 1;
        bn_state.slots.push(RunningStats::new(channels));
        BnLayer {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            slot,
            momentum: self.momentum,
            epsilon: self.epsilon,
        }
    }

    fn conv_bn(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bn_state: &mut BnState,
    ) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), in_c, out_c, k, stride, padding),
            bn: self.bn(&format!("{name}.bn"), out_c, bn_state),
        }
    }

    fn linear(&mut self, name: &str, in_d: usize, out_d: usize) -> LinearLayer {
        LinearLayer {
            weight: Param::new(
                format!("{name}.weight"),
                self.uniform_fan_in(vec![out_d, in_d], in_d),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_d])),
        }
    }
}

impl DetectorModel {
    /// Fresh model with fan-in-scaled uniform initialization, deterministic
    /// in `seed`.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut bn_state = BnState::default();
        let mut b = Builder {
            rng: Rng::new(seed),
            slots: 0,
            momentum: config.bn_momentum,
            epsilon: config.bn_epsilon,
        };

        let mut blocks = Vec::new();
        let mut in_c = config.in_channels;
        for (i, spec) in config.backbone_blocks.iter().enumerate() {
            blocks.push(b.conv_bn(
                &format!("backbone.block{i}"),
                in_c,
                spec.channels,
                3,
                spec.stride,
                1,
                &mut bn_state,
            ));
            in_c = spec.channels;
        }
        let fm_c = in_c;

        let k = config.anchors_per_cell();
        let rpn = RpnNet {
            conv: b.conv_bn("rpn.conv", fm_c, config.rpn_channels, 3, 1, 1, &mut bn_state),
            objectness: b.conv("rpn.objectness", config.rpn_channels, k, 1, 1, 0),
            deltas: b.conv("rpn.deltas", config.rpn_channels, 4 * k, 1, 1, 0),
        };

        let [c1, c2, c3] = config.head_channels;
        let stack = vec![
            b.conv_bn("heads.stack0", fm_c, c1, 1, 1, 0, &mut bn_state),
            b.conv_bn("heads.stack1", c1, c2, 3, 1, 1, &mut bn_state),
            b.conv_bn("heads.stack2", c2, c3, 1, 1, 0, &mut bn_state),
        ];
        let heads = HeadNet {
            stack,
            cls: b.linear("heads.cls", c3, config.num_classes()),
            reg: b.linear("heads.reg", c3, 4 * TraitClass::ALL.len()),
        };

        Ok(DetectorModel {
            config,
            backbone: Backbone { blocks },
            rpn,
            heads,
            bn_state,
        })
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for block in &self.backbone.blocks {
            visit_conv_bn(block, f);
        }
        visit_conv_bn(&self.rpn.conv, f);
        visit_conv(&self.rpn.objectness, f);
        visit_conv(&self.rpn.deltas, f);
        for block in &self.heads.stack {
            visit_conv_bn(block, f);
        }
        f(&self.heads.cls.weight);
        f(&self.heads.cls.bias);
        f(&self.heads.reg.weight);
        f(&self.heads.reg.bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for block in &mut self.backbone.blocks {
            visit_conv_bn_mut(block, f);
        }
        visit_conv_bn_mut(&mut self.rpn.conv, f);
        visit_conv_mut(&mut self.rpn.objectness, f);
        visit_conv_mut(&mut self.rpn.deltas, f);
        for block in &mut self.heads.stack {
            visit_conv_bn_mut(block, f);
        }
        f(&mut self.heads.cls.weight);
        f(&mut self.heads.cls.bias);
        f(&mut self.heads.reg.weight);
        f(&mut self.heads.reg.bias);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.tensor.numel());
        n
    }

    /// FNV hash over a component's parameter names and value bit patterns.
    /// BN running statistics are buffers, not parameters, and are excluded.
    pub fn component_checksum(&self, component: Component) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.for_each_param(&mut |p| {
            if Component::of_param(p.name()) != component {
                return;
            }
            for &b in p.name().as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for v in p.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }
}

fn visit_conv(layer: &ConvLayer, f: &mut dyn FnMut(&Param)) {
    f(&layer.weight);
    f(&layer.bias);
}

fn visit_conv_mut(layer: &mut ConvLayer, f: &mut dyn FnMut(&mut Param)) {
    f(&mut layer.weight);
    f(&mut layer.bias);
}

fn visit_conv_bn(block: &ConvBnRelu, f: &mut dyn FnMut(&Param)) {
    visit_conv(&block.conv, f);
    f(&block.bn.gamma);
    f(&block.bn.beta);
}

fn visit_conv_bn_mut(block: &mut ConvBnRelu, f: &mut dyn FnMut(&mut Param)) {
    visit_conv_mut(&mut block.conv, f);
    f(&mut block.bn.gamma);
    f(&mut block.bn.beta);
}

/// Memoized param-to-tape registration; binding the same parameter twice on
/// one tape returns the original node so gradients accumulate in one place.
#[derive(Debug, Default)]
pub struct Bindings {
    entries: Vec<(String, ValueId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, param: &Param, requires_grad: bool) -> ValueId {
        if let Some((_, id)) = self.entries.iter().find(|(n, _)| n == param.name()) {
            return *id;
        }
        let mut t = param.tensor.clone();
        t.requires_grad = requires_grad;
        let id = tape.leaf(t);
        self.entries.push((param.name().to_string(), id));
        id
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Everything a forward pass threads through the layers.
pub struct NetCtx<'a> {
    pub tape: &'a mut Tape,
    pub binds: &'a mut Bindings,
    pub bn_state: &'a mut BnState,
}

impl ConvLayer {
    fn apply(&self, ctx: &mut NetCtx, x: ValueId, rg: bool) -> Result<ValueId, AutogradError> {
        let w = ctx.binds.bind(ctx.tape, &self.weight, rg);
        let b = ctx.binds.bind(ctx.tape, &self.bias, rg);
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl BnLayer {
    fn apply(
        &self,
        ctx: &mut NetCtx,
        x: ValueId,
        train: bool,
        rg: bool,
    ) -> Result<ValueId, AutogradError> {
        let g = ctx.binds.bind(ctx.tape, &self.gamma, rg);
        let b = ctx.binds.bind(ctx.tape, &self.beta, rg);
        let mode = if train { BnMode::Train } else { BnMode::Eval };
        ctx.tape.batchnorm(
            x,
            g,
            b,
            &mut ctx.bn_state.slots[self.slot],
            mode,
            self.momentum,
            self.epsilon,
        )
    }
}

impl ConvBnRelu {
    fn apply(
        &self,
        ctx: &mut NetCtx,
        x: ValueId,
        train: bool,
        rg: bool,
    ) -> Result<ValueId, AutogradError> {
        let x = self.conv.apply(ctx, x, rg)?;
        let x = self.bn.apply(ctx, x, train, rg)?;
        ctx.tape.relu(x)
    }
}

impl LinearLayer {
    fn apply(&self, ctx: &mut NetCtx, x: ValueId, rg: bool) -> Result<ValueId, AutogradError> {
        let w = ctx.binds.bind(ctx.tape, &self.weight, rg);
        let b = ctx.binds.bind(ctx.tape, &self.bias, rg);
        ctx.tape.linear(x, w, b)
    }
}

/// Run the shared backbone over a `[1, C, H, W]` image node.
pub fn backbone_forward(
    ctx: &mut NetCtx,
    backbone: &Backbone,
    config: &DetectorConfig,
    image: ValueId,
    train_bn: bool,
    rg: bool,
) -> Result<ValueId, DetectorError> {
    let shape = ctx.tape.shape(image).to_vec();
    let (h, w) = match shape.as_slice() {
        [_, _, h, w] => (*h, *w),
        s => {
            return Err(DetectorError::Autograd(AutogradError::Shape(format!(
                "backbone expects [1, C, H, W], got {s:?}"
            ))))
        }
    };
    let stride = config.total_stride();
    if h < stride || w < stride {
        return Err(DetectorError::ImageTooSmall { h, w, stride });
    }
    let mut x = image;
    for block in &backbone.blocks {
        x = block.apply(ctx, x, train_bn, rg)?;
    }
    Ok(x)
}

/// Proposal head outputs: `K` sigmoid objectness maps and `4K` delta maps,
/// spatial extents preserved.
pub fn rpn_forward(
    ctx: &mut NetCtx,
    rpn: &RpnNet,
    fm: ValueId,
    train_bn: bool,
    rg: bool,
) -> Result<(ValueId, ValueId), DetectorError> {
    let x = rpn.conv.apply(ctx, fm, train_bn, rg)?;
    let logits = rpn.objectness.apply(ctx, x, rg)?;
    let objectness = ctx.tape.sigmoid(logits)?;
    let deltas = rpn.deltas.apply(ctx, x, rg)?;
    Ok((objectness, deltas))
}

/// Per-anchor values read out of the `[1, K, h, w]` / `[1, 4K, h, w]` maps.
pub fn anchor_objectness_index(grid: &AnchorGrid, anchor: usize) -> usize {
    let (cy, cx, slot) = grid.position(anchor);
    (slot * grid.fm_height + cy) * grid.fm_width + cx
}

/// Flat indices of the four delta components (tx, ty, tw, th) for an anchor.
pub fn anchor_delta_indices(grid: &AnchorGrid, anchor: usize) -> [usize; 4] {
    let (cy, cx, slot) = grid.position(anchor);
    let plane = grid.fm_height * grid.fm_width;
    let cell = cy * grid.fm_width + cx;
    [
        (slot * 4) * plane + cell,
        (slot * 4 + 1) * plane + cell,
        (slot * 4 + 2) * plane + cell,
        (slot * 4 + 3) * plane + cell,
    ]
}

/// Decode, clip, rank and suppress the raw anchor predictions into at most
/// `post_nms_top` scored proposals. Pure readout: no gradients flow here.
pub fn propose(
    objectness: &[f64],
    deltas: &[f64],
    grid: &AnchorGrid,
    config: &DetectorConfig,
    img_w: f64,
    img_h: f64,
) -> Vec<Detection> {
    debug_assert_eq!(objectness.len(), grid.len());
    debug_assert_eq!(deltas.len(), 4 * grid.len());

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        objectness[anchor_objectness_index(grid, b)]
            .partial_cmp(&objectness[anchor_objectness_index(grid, a)])
            .unwrap()
    });
    order.truncate(config.pre_nms_top);

    let mut candidates = Vec::with_capacity(order.len());
    for ai in order {
        let d = anchor_delta_indices(grid, ai);
        let delta = BoxDelta {
            tx: deltas[d[0]],
            ty: deltas[d[1]],
            tw: deltas[d[2]],
            th: deltas[d[3]],
        };
        let Ok(decoded) = delta.decode(&grid.anchors()[ai]) else {
            continue;
        };
        let Some(clipped) = decoded.clip(img_w, img_h) else {
            continue;
        };
        candidates.push(Detection::new(
            clipped,
            None,
            objectness[anchor_objectness_index(grid, ai)],
        ));
    }

    let mut kept = nms(&candidates, config.rpn_nms_iou);
    kept.truncate(config.post_nms_top);
    kept
}

fn roi_argmax_indices(
    data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    roi: &BBox,
    stride: usize,
    out_size: usize,
) -> Result<Vec<usize>, DetectorError> {
    let fx1 = roi.x1() / stride as f64;
    let fy1 = roi.y1() / stride as f64;
    let fx2 = roi.x2() / stride as f64;
    let fy2 = roi.y2() / stride as f64;
    if fx2 <= 0.0 || fy2 <= 0.0 || fx1 >= w as f64 || fy1 >= h as f64 {
        return Err(DetectorError::RoiOutsideFeatureMap);
    }
    let fx1 = fx1.max(0.0);
    let fy1 = fy1.max(0.0);
    let fx2 = fx2.min(w as f64);
    let fy2 = fy2.min(h as f64);

    // Cell span of bin i along one axis.
    let span = |lo: f64, hi: f64, limit: usize, i: usize| -> (usize, usize) {
        let step = (hi - lo) / out_size as f64;
        let start = (lo + step * i as f64).floor() as isize;
        let end = (lo + step * (i + 1) as f64).ceil() as isize;
        let start = start.clamp(0, limit as isize - 1) as usize;
        let end = (end.clamp(start as isize + 1, limit as isize)) as usize;
        (start, end)
    };

    let mut indices = Vec::with_capacity(c * out_size * out_size);
    for ch in 0..c {
        for by in 0..out_size {
            let (y0, y1) = span(fy1, fy2, h, by);
            for bx in 0..out_size {
                let (x0, x1) = span(fx1, fx2, w, bx);
                let mut best = (ch * h + y0) * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = (ch * h + y) * w + x;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                indices.push(best);
            }
        }
    }
    Ok(indices)
}

/// Max-pool an image-space ROI into a fixed `out_size x out_size` grid of
/// feature-map bins. Bin boundaries use floor/ceil rounding with a clamp
/// that keeps every bin at least one cell. Gradient routes to the argmax
/// cell of each bin.
pub fn roi_pool(
    tape: &mut Tape,
    fm: ValueId,
    roi: &BBox,
    stride: usize,
    out_size: usize,
) -> Result<ValueId, DetectorError> {
    let pooled = roi_pool_batch(tape, fm, std::slice::from_ref(roi), stride, out_size)?;
    Ok(pooled)
}

/// Pool several ROIs from the same feature map into one `[N, C, S, S]`
/// stack, so the heads can run them as a single batch.
pub fn roi_pool_batch(
    tape: &mut Tape,
    fm: ValueId,
    rois: &[BBox],
    stride: usize,
    out_size: usize,
) -> Result<ValueId, DetectorError> {
    let shape = tape.shape(fm).to_vec();
    let (c, h, w) = match shape.as_slice() {
        [1, c, h, w] => (*c, *h, *w),
        s => {
            return Err(DetectorError::Autograd(AutogradError::Shape(format!(
                "roi pooling expects a [1, C, h, w] feature map, got {s:?}"
            ))))
        }
    };
    if rois.is_empty() {
        return Err(DetectorError::Autograd(AutogradError::Shape(
            "roi pooling needs at least one roi".into(),
        )));
    }
    let mut indices = Vec::with_capacity(rois.len() * c * out_size * out_size);
    for roi in rois {
        indices.extend(roi_argmax_indices(
            tape.data(fm),
            c,
            h,
            w,
            roi,
            stride,
            out_size,
        )?);
    }
    Ok(tape.gather(fm, indices, vec![rois.len(), c, out_size, out_size])?)
}

/// Head outputs for a `[N, C, S, S]` stack of pooled proposals: a row of
/// softmax class scores and a row of per-foreground-class regression values
/// per proposal.
///
/// Head batch-norm always normalizes with the statistics of the proposal
/// stack at hand, in training and at inference alike: with one image per
/// step the batch composition varies too much for running averages to
/// transfer, and per-batch statistics keep the two paths identical.
pub fn heads_forward(
    ctx: &mut NetCtx,
    heads: &HeadNet,
    pooled: ValueId,
    rg: bool,
) -> Result<(ValueId, ValueId), DetectorError> {
    let mut x = pooled;
    for block in &heads.stack {
        x = block.apply(ctx, x, true, rg)?;
    }
    let feat = ctx.tape.global_avg_pool(x)?;
    let logits = heads.cls.apply(ctx, feat, rg)?;
    let scores = ctx.tape.softmax(logits, 1)?;
    let deltas = heads.reg.apply(ctx, feat, rg)?;
    Ok((scores, deltas))
}

/// Full eval-mode inference over one `[1, C, H, W]` image tensor:
/// backbone, proposal head, ROI pooling, heads, per-class decode, score
/// threshold, per-class NMS. Background is never emitted and every returned
/// box lies within the image.
pub fn detect(model: &DetectorModel, image: &Tensor) -> Result<Vec<Detection>, DetectorError> {
    detect_with_threshold(model, image, model.config.score_threshold)
}

pub fn detect_with_threshold(
    model: &DetectorModel,
    image: &Tensor,
    score_threshold: f64,
) -> Result<Vec<Detection>, DetectorError> {
    let cfg = &model.config;
    let (img_h, img_w) = match image.shape() {
        [1, c, h, w] if *c == cfg.in_channels => (*h, *w),
        s => {
            return Err(DetectorError::Autograd(AutogradError::Shape(format!(
                "detect expects [1, {}, H, W], got {s:?}",
                cfg.in_channels
            ))))
        }
    };

    // Eval mode never mutates running statistics; the clone keeps `model`
    // shared so concurrent detect calls stay safe.
    let mut bn_state = model.bn_state.clone();
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let mut ctx = NetCtx {
        tape: &mut tape,
        binds: &mut binds,
        bn_state: &mut bn_state,
    };

    let img = ctx.tape.constant(image.clone());
    let fm = backbone_forward(&mut ctx, &model.backbone, cfg, img, false, false)?;
    let (obj, deltas) = rpn_forward(&mut ctx, &model.rpn, fm, false, false)?;

    let fm_shape = ctx.tape.shape(fm).to_vec();
    let grid = generate_anchors(
        fm_shape[2],
        fm_shape[3],
        cfg.total_stride(),
        &cfg.anchor_scales,
        &cfg.anchor_ratios,
    )?;
    let proposals = propose(
        ctx.tape.data(obj),
        ctx.tape.data(deltas),
        &grid,
        cfg,
        img_w as f64,
        img_h as f64,
    );

    let mut raw: Vec<Detection> = Vec::new();
    if !proposals.is_empty() {
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = roi_pool_batch(
            ctx.tape,
            fm,
            &rois,
            cfg.total_stride(),
            cfg.roi_pool_size,
        )?;
        let (scores, reg) = heads_forward(&mut ctx, &model.heads, pooled, false)?;
        let scores = ctx.tape.data(scores);
        let reg = ctx.tape.data(reg);
        let num_classes = cfg.num_classes();
        let reg_width = 4 * TraitClass::ALL.len();
        for (pi, proposal) in proposals.iter().enumerate() {
            for class in TraitClass::ALL {
                let ci = class.index();
                let score = scores[pi * num_classes + ci];
                if score < score_threshold {
                    continue;
                }
                let at = pi * reg_width + ci * 4;
                let delta = BoxDelta {
                    tx: reg[at],
                    ty: reg[at + 1],
                    tw: reg[at + 2],
                    th: reg[at + 3],
                };
                let Ok(decoded) = delta.decode(&proposal.bbox) else {
                    continue;
                };
                let Some(clipped) = decoded.clip(img_w as f64, img_h as f64) else {
                    continue;
                };
                raw.push(Detection::new(clipped, Some(class), score));
            }
        }
    }

    // Per-class suppression, concatenated in class order, then sorted by
    // descending score (stable, so the class order breaks ties).
    let mut out = Vec::new();
    for class in TraitClass::ALL {
        let of_class: Vec<Detection> = raw
            .iter()
            .filter(|d| d.label == Some(class))
            .cloned()
            .collect();
        out.extend(nms(&of_class, cfg.detect_nms_iou));
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(out)
}
