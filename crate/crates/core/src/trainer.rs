//! The alternating training schedule.
//!
//! Four phases run in order: (b) proposal head together with the shared
//! backbone, (c) classification/regression heads together with the
//! backbone through ROI pooling, (d) the proposal head alone with the
//! backbone frozen, and (e) the heads alone with backbone and proposal
//! head frozen. Within every epoch the proposal losses are computed before
//! the head losses, and all four losses are logged every epoch regardless
//! of which components the phase updates.
//!
//! Freezing is structural: parameters outside a phase's update set are
//! never touched by the optimizer, never require gradients, and their
//! batch-norm layers run in eval mode, so frozen components stay
//! bit-identical across the phase.

use crate::autograd::{sgd_step, AutogradError, Tape, Tensor, ValueId};
use crate::boxes::{assign_anchors, generate_anchors, AnchorGrid, AnchorLabel, BBox, BoxDelta};
use crate::detector::{
    anchor_delta_indices, anchor_objectness_index, backbone_forward, heads_forward, propose,
    roi_pool_batch, rpn_forward, Bindings, Component, DetectorError, DetectorModel, NetCtx,
};
use crate::rng::Rng;
use crate::synthdata::AnnotatedImage;
use std::fmt;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    /// (b) proposal head + shared backbone, end to end.
    RpnWithBackbone,
    /// (c) heads + shared backbone, end to end through ROI pooling.
    HeadsWithBackbone,
    /// (d) proposal head only; shared layers frozen.
    RpnOnly,
    /// (e) heads only; shared layers and proposal head frozen.
    HeadsOnly,
}

impl TrainPhase {
    pub fn letter(&self) -> char {
        match self {
            TrainPhase::RpnWithBackbone => 'b',
            TrainPhase::HeadsWithBackbone => 'c',
            TrainPhase::RpnOnly => 'd',
            TrainPhase::HeadsOnly => 'e',
        }
    }

    pub fn from_letter(c: char) -> Option<TrainPhase> {
        match c {
            'b' => Some(TrainPhase::RpnWithBackbone),
            'c' => Some(TrainPhase::HeadsWithBackbone),
            'd' => Some(TrainPhase::RpnOnly),
            'e' => Some(TrainPhase::HeadsOnly),
            _ => None,
        }
    }

    /// Components the optimizer may update in this phase.
    pub fn updates(&self) -> &'static [Component] {
        match self {
            TrainPhase::RpnWithBackbone => &[Component::Backbone, Component::Rpn],
            TrainPhase::HeadsWithBackbone => &[Component::Backbone, Component::Heads],
            TrainPhase::RpnOnly => &[Component::Rpn],
            TrainPhase::HeadsOnly => &[Component::Heads],
        }
    }

    fn trains(&self, c: Component) -> bool {
        self.updates().contains(&c)
    }
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub phase: TrainPhase,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phases: Vec<PhaseSpec>,
    /// Anchors sampled per image for the proposal-head losses.
    pub rpn_batch_size: usize,
    /// Cap on the positive share of the sampled anchors (1:1 at 0.5).
    pub rpn_positive_fraction: f64,
    /// Anchor assignment thresholds.
    pub pos_iou_threshold: f64,
    pub neg_iou_threshold: f64,
    /// Proposals with gt IOU at or above this train the heads as foreground.
    pub head_fg_iou: f64,
    /// Proposals used per image for the head losses.
    pub head_batch_size: usize,
    /// Add the ground-truth boxes to the head-training proposal set so the
    /// heads always see foreground examples.
    pub include_gt_proposals: bool,
    /// Weights of (rpn cls, rpn reg, head cls, head reg) in the step loss.
    pub loss_weights: [f64; 4],
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The stock schedule: a short low-rate warmup entry for phase (b),
    /// then the four phases in order.
    fn default() -> Self {
        TrainConfig {
            phases: vec![
                PhaseSpec {
                    phase: TrainPhase::RpnWithBackbone,
                    epochs: 1,
                    learning_rate: 0.01,
                },
                PhaseSpec {
                    phase: TrainPhase::RpnWithBackbone,
                    epochs: 5,
                    learning_rate: 0.04,
                },
                PhaseSpec {
                    phase: TrainPhase::HeadsWithBackbone,
                    epochs: 8,
                    learning_rate: 0.06,
                },
                PhaseSpec {
                    phase: TrainPhase::RpnOnly,
                    epochs: 2,
                    learning_rate: 0.02,
                },
                PhaseSpec {
                    phase: TrainPhase::HeadsOnly,
                    epochs: 5,
                    learning_rate: 0.03,
                },
            ],
            rpn_batch_size: 32,
            rpn_positive_fraction: 0.5,
            pos_iou_threshold: 0.55,
            neg_iou_threshold: 0.25,
            head_fg_iou: 0.5,
            head_batch_size: 28,
            include_gt_proposals: true,
            loss_weights: [1.0, 1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.phases.is_empty() {
            return bad("schedule has no phases".into());
        }
        for p in &self.phases {
            if p.epochs == 0 || p.learning_rate <= 0.0 {
                return bad(format!(
                    "phase {} wants positive epochs and learning rate",
                    p.phase
                ));
            }
        }
        if self.rpn_batch_size == 0 || self.head_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rpn_positive_fraction) {
            return bad("rpn_positive_fraction must be in [0, 1]".into());
        }
        if self.pos_iou_threshold <= self.neg_iou_threshold {
            return bad("pos_iou_threshold must exceed neg_iou_threshold".into());
        }
        if self.loss_weights.iter().any(|&w| w <= 0.0) {
            return bad("loss weights must be positive".into());
        }
        Ok(())
    }

    /// Schedule letters, e.g. "b,c,d,e".
    pub fn phase_letters(&self) -> String {
        self.phases
            .iter()
            .map(|p| p.phase.letter().to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Keep only the schedule entries whose phase letter appears in
    /// `letters` (e.g. "b,c"); entries stay in their configured order.
    pub fn restrict_phases(&mut self, letters: &str) -> Result<(), TrainError> {
        let mut keep = Vec::new();
        for part in letters.split(',') {
            let part = part.trim();
            let mut chars = part.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    keep.push(TrainPhase::from_letter(c).ok_or_else(|| {
                        TrainError::Config(format!("unknown phase {part:?} (want b, c, d or e)"))
                    })?);
                }
                _ => {
                    return Err(TrainError::Config(format!(
                        "unknown phase {part:?} (want b, c, d or e)"
                    )))
                }
            }
        }
        self.phases.retain(|p| keep.contains(&p.phase));
        if self.phases.is_empty() {
            return Err(TrainError::Config(format!(
                "no schedule entries left for phases {letters:?}"
            )));
        }
        Ok(())
    }

    /// Canonical `key = value` text mirroring
    /// [`crate::detector::DetectorConfig::to_text`]; the schedule is encoded
    /// as `phase:epochs:learning_rate` entries.
    pub fn to_text(&self) -> String {
        let schedule = self
            .phases
            .iter()
            .map(|p| format!("{}:{}:{}", p.phase.letter(), p.epochs, p.learning_rate))
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("head_batch_size", format!("{}", self.head_batch_size));
        line("head_fg_iou", format!("{}", self.head_fg_iou));
        line(
            "include_gt_proposals",
            format!("{}", self.include_gt_proposals),
        );
        line(
            "loss_weights",
            self.loss_weights
                .iter()
                .map(|w| format!("{w}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        line("neg_iou_threshold", format!("{}", self.neg_iou_threshold));
        line("pos_iou_threshold", format!("{}", self.pos_iou_threshold));
        line("rpn_batch_size", format!("{}", self.rpn_batch_size));
        line(
            "rpn_positive_fraction",
            format!("{}", self.rpn_positive_fraction),
        );
        line("schedule", schedule);
        line("seed", format!("{}", self.seed));
        out
    }

    /// Apply `key = value` lines on top of `self`; the inverse of
    /// [`TrainConfig::to_text`]. Unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        let bad = |line: usize, msg: String| TrainError::Config(format!("line {line}: {msg}"));
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line_no, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(line_no, format!("bad float {v:?}")))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| bad(line_no, format!("bad integer {v:?}")))
            };
            match key {
                "head_batch_size" => self.head_batch_size = parse_usize(value)?,
                "head_fg_iou" => self.head_fg_iou = parse_f64(value)?,
                "include_gt_proposals" => {
                    self.include_gt_proposals = value.parse().map_err(|_| {
                        bad(line_no, format!("bad bool {value:?}"))
                    })?;
                }
                "loss_weights" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| parse_f64(p.trim()))
                        .collect::<Result<_, _>>()?;
                    if parts.len() != 4 {
                        return Err(bad(line_no, "loss_weights wants 4 values".into()));
                    }
                    self.loss_weights = [parts[0], parts[1], parts[2], parts[3]];
                }
                "neg_iou_threshold" => self.neg_iou_threshold = parse_f64(value)?,
                "pos_iou_threshold" => self.pos_iou_threshold = parse_f64(value)?,
                "rpn_batch_size" => self.rpn_batch_size = parse_usize(value)?,
                "rpn_positive_fraction" => self.rpn_positive_fraction = parse_f64(value)?,
                "schedule" => {
                    let mut phases = Vec::new();
                    for part in value.split(',') {
                        let fields: Vec<&str> = part.trim().split(':').collect();
                        if fields.len() != 3 {
                            return Err(bad(
                                line_no,
                                format!("schedule entry {part:?} wants phase:epochs:lr"),
                            ));
                        }
                        let phase = fields[0]
                            .chars()
                            .next()
                            .and_then(TrainPhase::from_letter)
                            .filter(|_| fields[0].len() == 1)
                            .ok_or_else(|| {
                                bad(line_no, format!("unknown phase {:?}", fields[0]))
                            })?;
                        phases.push(PhaseSpec {
                            phase,
                            epochs: parse_usize(fields[1])?,
                            learning_rate: parse_f64(fields[2])?,
                        });
                    }
                    self.phases = phases;
                }
                "seed" => {
                    self.seed = value
                        .parse()
                        .map_err(|_| bad(line_no, format!("bad seed {value:?}")))?;
                }
                other => return Err(bad(line_no, format!("unknown key {other:?}"))),
            }
        }
        self.validate()
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    EmptyDataset,
    /// A loss went NaN; carries phase/epoch/step for the diagnostic.
    NanLoss {
        phase: char,
        epoch: usize,
        step: usize,
        loss: &'static str,
    },
    Autograd(AutogradError),
    Detector(DetectorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "bad train config: {m}"),
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::NanLoss {
                phase,
                epoch,
                step,
                loss,
            } => write!(
                f,
                "{loss} loss went NaN at phase {phase}, epoch {epoch}, step {step}"
            ),
            TrainError::Autograd(e) => write!(f, "{e}"),
            TrainError::Detector(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<AutogradError> for TrainError {
    fn from(e: AutogradError) -> Self {
        TrainError::Autograd(e)
    }
}

impl From<DetectorError> for TrainError {
    fn from(e: DetectorError) -> Self {
        TrainError::Detector(e)
    }
}

/// Mean values of the four losses over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: char,
    /// 1-based epoch index across the whole schedule.
    pub epoch: usize,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg
    }
}

/// Parameter checksums of the three components taken around one schedule
/// entry; the frozen components of a phase must come out bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseChecksums {
    pub phase: char,
    /// (component name, before, after) in component order.
    pub components: Vec<(&'static str, u64, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub phase_wall_times: Vec<(char, f64)>,
    /// Before/after parameter checksums for every schedule entry.
    pub phase_checksums: Vec<PhaseChecksums>,
    /// (component, checksum) after the full schedule.
    pub final_checksums: Vec<(&'static str, u64)>,
}

impl TrainReport {
    /// CSV with one row per epoch: epoch, phase, the four losses, wall time.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,phase,rpn_cls,rpn_reg,head_cls,head_reg,wall_time_s\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                e.epoch, e.phase, e.rpn_cls, e.rpn_reg, e.head_cls, e.head_reg, e.wall_time_s
            ));
        }
        out
    }

    /// The loss columns only; this is the part that is bit-reproducible
    /// for a fixed (seed, config, dataset).
    pub fn loss_table(&self) -> Vec<[f64; 4]> {
        self.epochs
            .iter()
            .map(|e| [e.rpn_cls, e.rpn_reg, e.head_cls, e.head_reg])
            .collect()
    }
}

// ── anchor target sampling ───────────────────────────────────────────

/// Sampled anchor minibatch: positives first, padded with negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// (anchor index, objectness target).
    pub sampled: Vec<(usize, f64)>,
    /// (anchor index, regression target) for the sampled positives.
    pub positives: Vec<(usize, BoxDelta)>,
}

/// Assign anchors against the ground truth, then sample a fixed-size
/// minibatch at the configured positive fraction. Ignored anchors are never
/// sampled.
pub fn rpn_targets(
    grid: &AnchorGrid,
    gts: &[BBox],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> RpnTargets {
    let labels = assign_anchors(grid, gts, cfg.pos_iou_threshold, cfg.neg_iou_threshold);
    let mut pos: Vec<(usize, BoxDelta)> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (ai, label) in labels.iter().enumerate() {
        match label {
            AnchorLabel::Positive { target, .. } => pos.push((ai, *target)),
            AnchorLabel::Negative => neg.push(ai),
            AnchorLabel::Ignore => {}
        }
    }

    let max_pos = ((cfg.rpn_batch_size as f64) * cfg.rpn_positive_fraction).round() as usize;
    if pos.len() > max_pos {
        rng.shuffle(&mut pos);
        pos.truncate(max_pos);
        pos.sort_by_key(|(ai, _)| *ai);
    }
    let want_neg = cfg.rpn_batch_size.saturating_sub(pos.len()).min(neg.len());
    if neg.len() > want_neg {
        rng.shuffle(&mut neg);
        neg.truncate(want_neg);
        neg.sort_unstable();
    }

    let mut sampled: Vec<(usize, f64)> = pos.iter().map(|(ai, _)| (*ai, 1.0)).collect();
    sampled.extend(neg.iter().map(|&ai| (ai, 0.0)));
    RpnTargets {
        sampled,
        positives: pos,
    }
}

// ── loss construction ────────────────────────────────────────────────

/// Proposal-head losses over the sampled anchors: binary cross-entropy on
/// objectness, mean squared error on the positive anchors' deltas. With no
/// positives the regression loss is the constant zero.
pub fn rpn_loss(
    tape: &mut Tape,
    objectness: ValueId,
    deltas: ValueId,
    grid: &AnchorGrid,
    targets: &RpnTargets,
) -> Result<(ValueId, ValueId), AutogradError> {
    let obj_idx: Vec<usize> = targets
        .sampled
        .iter()
        .map(|(ai, _)| anchor_objectness_index(grid, *ai))
        .collect();
    let labels: Vec<f64> = targets.sampled.iter().map(|(_, t)| *t).collect();
    let gathered = tape.gather(objectness, obj_idx, vec![labels.len()])?;
    let cls = tape.loss_bce(gathered, &labels)?;

    let reg = if targets.positives.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut idx = Vec::with_capacity(targets.positives.len() * 4);
        let mut want = Vec::with_capacity(targets.positives.len() * 4);
        for (ai, t) in &targets.positives {
            idx.extend(anchor_delta_indices(grid, *ai));
            want.extend([t.tx, t.ty, t.tw, t.th]);
        }
        let gathered = tape.gather(deltas, idx, vec![want.len()])?;
        let target = tape.constant(Tensor::new(vec![want.len()], want)?);
        tape.loss_mse(gathered, target)?
    };
    Ok((cls, reg))
}

/// Head-training label for one proposal: a foreground class with its
/// regression target, or background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalTarget {
    pub class_index: usize,
    pub regression: Option<BoxDelta>,
}

/// Label proposals against the ground truth for head training: IOU at or
/// above `head_fg_iou` makes a proposal foreground for its argmax gt,
/// anything else is background.
pub fn label_proposals(
    proposals: &[BBox],
    gts: &[(BBox, crate::boxes::TraitClass)],
    cfg: &TrainConfig,
) -> Vec<ProposalTarget> {
    let background = crate::boxes::TraitClass::ALL.len();
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .map(|(g, c)| (crate::boxes::iou(p, g), g, c))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            match best {
                Some((v, g, c)) if v >= cfg.head_fg_iou => ProposalTarget {
                    class_index: c.index(),
                    regression: Some(BoxDelta::encode(g, p)),
                },
                _ => ProposalTarget {
                    class_index: background,
                    regression: None,
                },
            }
        })
        .collect()
}

/// The two head losses over a batch of labeled proposals: categorical
/// cross-entropy on the `[N, classes]` scores and mean squared error on the
/// foreground rows' regression outputs for their target class (constant
/// zero without any foreground).
pub fn head_loss(
    tape: &mut Tape,
    scores: ValueId,
    reg: ValueId,
    targets: &[ProposalTarget],
) -> Result<(ValueId, ValueId), AutogradError> {
    let classes: Vec<usize> = targets.iter().map(|t| t.class_index).collect();
    let cls = tape.loss_cce(scores, &classes)?;

    let reg_width = tape.shape(reg)[1];
    let mut idx = Vec::new();
    let mut want = Vec::new();
    for (row, target) in targets.iter().enumerate() {
        if let Some(delta) = &target.regression {
            let at = row * reg_width + 4 * target.class_index;
            idx.extend([at, at + 1, at + 2, at + 3]);
            want.extend([delta.tx, delta.ty, delta.tw, delta.th]);
        }
    }
    let reg_loss = if idx.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let gathered = tape.gather(reg, idx, vec![want.len()])?;
        let target = tape.constant(Tensor::new(vec![want.len()], want)?);
        tape.loss_mse(gathered, target)?
    };
    Ok((cls, reg_loss))
}

// ── the phase engine ─────────────────────────────────────────────────

struct StepLosses {
    rpn_cls: f64,
    rpn_reg: f64,
    head_cls: f64,
    head_reg: f64,
}

fn apply_updates(
    model: &mut DetectorModel,
    tape: &Tape,
    binds: &Bindings,
    phase: TrainPhase,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, id) in binds.iter() {
        if !phase.trains(Component::of_param(name)) {
            continue;
        }
        if let Some(grad) = tape.grad(id) {
            let mut result = Ok(());
            let mut grad_opt = Some(grad);
            model.for_each_param_mut(&mut |p| {
                if p.name() == name {
                    if let Some(g) = grad_opt.take() {
                        result = sgd_step(&mut p.tensor, g, lr, false);
                    }
                }
            });
            result?;
        }
    }
    Ok(())
}

/// One image step: the proposal pass (losses, optional update) followed by
/// the head pass (losses, optional update).
fn train_step(
    model: &mut DetectorModel,
    image: &AnnotatedImage,
    phase: TrainPhase,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepLosses, TrainError> {
    let weights = cfg.loss_weights;
    let gts: Vec<BBox> = image.boxes.iter().map(|(b, _)| *b).collect();
    let img_tensor = image.to_tensor();
    let stride = model.config.total_stride();

    // ── pass 1: proposal losses (before the head losses) ─────────
    let train_backbone = phase == TrainPhase::RpnWithBackbone;
    let train_rpn = phase.trains(Component::Rpn);
    let (rpn_cls_v, rpn_reg_v) = {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let config = model.config.clone();
        let DetectorModel {
            backbone,
            rpn,
            bn_state,
            ..
        } = model;
        let mut ctx = NetCtx {
            tape: &mut tape,
            binds: &mut binds,
            bn_state,
        };
        let img = ctx.tape.constant(img_tensor.clone());
        let fm = backbone_forward(&mut ctx, backbone, &config, img, train_backbone, train_backbone)?;
        let (obj, deltas) = rpn_forward(&mut ctx, rpn, fm, train_rpn, train_rpn)?;
        let fm_shape = ctx.tape.shape(fm).to_vec();
        let grid = generate_anchors(
            fm_shape[2],
            fm_shape[3],
            stride,
            &config.anchor_scales,
            &config.anchor_ratios,
        )
        .map_err(DetectorError::from)?;
        let targets = rpn_targets(&grid, &gts, cfg, rng);
        let (cls, reg) = rpn_loss(&mut tape, obj, deltas, &grid, &targets)?;
        let (cls_v, reg_v) = (tape.data(cls)[0], tape.data(reg)[0]);
        if train_rpn {
            let wc = tape.scale(cls, weights[0])?;
            let wr = tape.scale(reg, weights[1])?;
            let total = tape.add(wc, wr)?;
            tape.backward(total)?;
            apply_updates(model, &tape, &binds, phase, lr)?;
        }
        (cls_v, reg_v)
    };

    // ── pass 2: head losses ───────────────────────────────────────
    let train_heads = phase.trains(Component::Heads);
    let backbone_in_head_pass = phase == TrainPhase::HeadsWithBackbone;
    let (head_cls_v, head_reg_v) = {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let config = model.config.clone();
        let DetectorModel {
            backbone,
            rpn,
            heads,
            bn_state,
            ..
        } = model;
        let mut ctx = NetCtx {
            tape: &mut tape,
            binds: &mut binds,
            bn_state,
        };
        let img = ctx.tape.constant(img_tensor);
        let fm = backbone_forward(
            &mut ctx,
            backbone,
            &config,
            img,
            backbone_in_head_pass,
            backbone_in_head_pass,
        )?;
        let (obj, deltas) = rpn_forward(&mut ctx, rpn, fm, false, false)?;
        let fm_shape = ctx.tape.shape(fm).to_vec();
        let grid = generate_anchors(
            fm_shape[2],
            fm_shape[3],
            stride,
            &config.anchor_scales,
            &config.anchor_ratios,
        )
        .map_err(DetectorError::from)?;
        let proposals = propose(
            ctx.tape.data(obj),
            ctx.tape.data(deltas),
            &grid,
            &config,
            image.width as f64,
            image.height as f64,
        );

        // Training proposal set. While the backbone is still moving
        // (phase c) the batch is kept class-balanced: ground-truth boxes
        // first (guaranteed foreground), then foreground proposals up to
        // half the budget, then background proposals. The heads-only
        // fine-tune instead consumes the raw proposal list exactly as
        // inference will see it, so the final head state is calibrated on
        // the detect-time batch composition.
        let mut rois: Vec<BBox> = Vec::new();
        if phase == TrainPhase::HeadsOnly {
            rois.extend(
                proposals
                    .iter()
                    .take(cfg.head_batch_size)
                    .map(|p| p.bbox),
            );
        } else {
            if cfg.include_gt_proposals {
                rois.extend(gts.iter().copied());
            }
            let fg_budget = (cfg.head_batch_size / 2).max(rois.len());
            let is_fg = |b: &BBox| {
                gts.iter()
                    .map(|g| crate::boxes::iou(b, g))
                    .fold(0.0, f64::max)
                    >= cfg.head_fg_iou
            };
            for p in proposals.iter().filter(|p| is_fg(&p.bbox)) {
                if rois.len() >= fg_budget {
                    break;
                }
                rois.push(p.bbox);
            }
            for p in proposals.iter().filter(|p| !is_fg(&p.bbox)) {
                if rois.len() >= cfg.head_batch_size {
                    break;
                }
                rois.push(p.bbox);
            }
        }
        let labels = label_proposals(&rois, &image.boxes, cfg);

        let (cls_v, reg_v, outputs) = if rois.is_empty() {
            (0.0, 0.0, None)
        } else {
            let pooled = roi_pool_batch(ctx.tape, fm, &rois, stride, config.roi_pool_size)?;
            let (scores, reg) =
                heads_forward(&mut ctx, heads, pooled, train_heads)?;
            let (cls, reg) = head_loss(&mut tape, scores, reg, &labels)?;
            (tape.data(cls)[0], tape.data(reg)[0], Some((cls, reg)))
        };
        if let (true, Some((cls, reg))) = (train_heads, outputs) {
            let wc = tape.scale(cls, weights[2])?;
            let wr = tape.scale(reg, weights[3])?;
            let total = tape.add(wc, wr)?;
            tape.backward(total)?;
            apply_updates(model, &tape, &binds, phase, lr)?;
        }
        (cls_v, reg_v)
    };

    Ok(StepLosses {
        rpn_cls: rpn_cls_v,
        rpn_reg: rpn_reg_v,
        head_cls: head_cls_v,
        head_reg: head_reg_v,
    })
}

/// Run one phase of the schedule, appending per-epoch records.
pub fn train_phase(
    model: &mut DetectorModel,
    dataset: &[AnnotatedImage],
    spec: &PhaseSpec,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch_offset: usize,
    records: &mut Vec<EpochRecord>,
) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for epoch in 0..spec.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        for (step, &idx) in order.iter().enumerate() {
            let losses = train_step(model, &dataset[idx], spec.phase, spec.learning_rate, cfg, rng)
                .map_err(|e| match e {
                    // Non-finite anywhere in the step surfaces as the NaN
                    // diagnostic with its position in the schedule.
                    TrainError::Autograd(AutogradError::NonFinite(what)) => TrainError::NanLoss {
                        phase: spec.phase.letter(),
                        epoch: epoch_offset + epoch + 1,
                        step: step + 1,
                        loss: what,
                    },
                    e => e,
                })?;
            for (s, v) in sums.iter_mut().zip([
                losses.rpn_cls,
                losses.rpn_reg,
                losses.head_cls,
                losses.head_reg,
            ]) {
                if v.is_nan() {
                    return Err(TrainError::NanLoss {
                        phase: spec.phase.letter(),
                        epoch: epoch_offset + epoch + 1,
                        step: step + 1,
                        loss: "step",
                    });
                }
                *s += v;
            }
        }
        let n = dataset.len() as f64;
        records.push(EpochRecord {
            phase: spec.phase.letter(),
            epoch: epoch_offset + epoch + 1,
            rpn_cls: sums[0] / n,
            rpn_reg: sums[1] / n,
            head_cls: sums[2] / n,
            head_reg: sums[3] / n,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Execute the configured schedule. Deterministic in
/// (seed, config, dataset): two runs produce bit-identical models and loss
/// sequences.
pub fn train(
    model: &mut DetectorModel,
    dataset: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = Rng::new(cfg.seed);
    let mut records = Vec::new();
    let mut phase_wall_times = Vec::new();
    let mut phase_checksums = Vec::new();
    for spec in &cfg.phases {
        let started = Instant::now();
        let offset = records.len();
        let before: Vec<u64> = Component::ALL
            .iter()
            .map(|c| model.component_checksum(*c))
            .collect();
        train_phase(model, dataset, spec, cfg, &mut rng, offset, &mut records)?;
        phase_checksums.push(PhaseChecksums {
            phase: spec.phase.letter(),
            components: Component::ALL
                .iter()
                .zip(before)
                .map(|(c, b)| (c.name(), b, model.component_checksum(*c)))
                .collect(),
        });
        phase_wall_times.push((spec.phase.letter(), started.elapsed().as_secs_f64()));
    }
    let final_checksums = Component::ALL
        .iter()
        .map(|c| (c.name(), model.component_checksum(*c)))
        .collect();
    Ok(TrainReport {
        epochs: records,
        phase_wall_times,
        phase_checksums,
        final_checksums,
    })
}
