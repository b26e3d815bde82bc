//! Three-branch detector: shared convolutional backbone with a feature
//! pyramid, a region-proposal stage, and per-region heads for genus
//! classification (Branch-1), box regression (Branch-2), and biological-class
//! classification (Branch-3).
//!
//! The class branch is one fully connected layer of shape `m x 7` (six
//! classes plus background) reading the same pooled per-region feature
//! vector as the genus head. Background is an extra logit column in both
//! classification heads; reported score vectors renormalize over the
//! foreground entries.

pub mod checkpoint;
pub mod loss;

use crate::data::Instance;
use crate::geometry::{
    decode_deltas, encode_deltas, iou_unchecked, nms, tile_anchors, AnchorGrid, BoundingBox,
};
use crate::nn::{
    relu2_backward, relu2_inplace, relu_backward, relu_inplace, roi_align, roi_align_backward,
    upsample_nearest, upsample_nearest_backward, Conv2d, HasParams, Linear, ParamRef,
};
use crate::taxonomy::Taxonomy;
use crate::util::argsort_desc;
use crate::{Error, Result};
use loss::{compute_loss, DetectionLossInputs, LossBreakdown, LossWeights};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// All structural and proposal-stage knobs of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Post-merge genus count (foreground labels).
    pub num_genera: usize,
    /// Biological class count; fixed at six.
    pub num_classes: usize,
    /// Width m of the shared per-region feature vector.
    pub roi_feature_dim: usize,
    /// Square input edge length.
    pub image_size: usize,
    pub stem_channels: usize,
    /// Output channels per pyramid stage; the length sets the level count.
    pub stage_channels: Vec<usize>,
    /// Extra stride-1 convolutions appended to each stage.
    pub blocks_per_stage: usize,
    pub fpn_channels: usize,
    pub anchor_ratios: Vec<f64>,
    /// One base anchor size per pyramid level.
    pub anchor_sizes: Vec<f64>,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_pos_iou: f64,
    /// Disables Branch-3 entirely (ablation baseline).
    pub class_branch: bool,
}

impl ModelConfig {
    /// Desk-scale three-level pyramid sized for CPU training.
    pub fn desk(num_genera: usize) -> Self {
        ModelConfig {
            num_genera,
            num_classes: crate::taxonomy::NUM_CLASSES,
            roi_feature_dim: 96,
            image_size: 800,
            stem_channels: 24,
            stage_channels: vec![32, 48, 64],
            blocks_per_stage: 1,
            fpn_channels: 32,
            anchor_ratios: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            anchor_sizes: vec![32.0, 64.0, 128.0],
            pre_nms_top_n: 1000,
            post_nms_top_n: 300,
            rpn_nms_iou: 0.7,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch: 128,
            roi_pos_fraction: 0.25,
            roi_pos_iou: 0.5,
            class_branch: true,
        }
    }

    /// Minimal two-level model on small inputs for fast functional tests.
    pub fn tiny(num_genera: usize) -> Self {
        ModelConfig {
            num_genera,
            num_classes: crate::taxonomy::NUM_CLASSES,
            roi_feature_dim: 32,
            image_size: 128,
            stem_channels: 8,
            stage_channels: vec![12, 16],
            blocks_per_stage: 0,
            fpn_channels: 12,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            anchor_sizes: vec![24.0, 48.0],
            pre_nms_top_n: 300,
            post_nms_top_n: 64,
            rpn_nms_iou: 0.7,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch: 32,
            roi_pos_fraction: 0.25,
            roi_pos_iou: 0.5,
            class_branch: true,
        }
    }

    /// Full five-level pyramid with the published anchor set; expressible
    /// but far beyond desk-scale compute.
    pub fn reference_scale(num_genera: usize) -> Self {
        ModelConfig {
            num_genera,
            num_classes: crate::taxonomy::NUM_CLASSES,
            roi_feature_dim: 1024,
            image_size: 800,
            stem_channels: 64,
            stage_channels: vec![256, 512, 1024, 2048, 256],
            blocks_per_stage: 2,
            fpn_channels: 256,
            anchor_ratios: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            anchor_sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            pre_nms_top_n: 2000,
            post_nms_top_n: 1000,
            rpn_nms_iou: 0.7,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch: 128,
            roi_pos_fraction: 0.25,
            roi_pos_iou: 0.5,
            class_branch: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }

    /// Effective stride of each pyramid level (stem stride 4, then one
    /// halving per stage).
    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| 8usize << i).collect()
    }

    /// Spatial size of each pyramid level for the configured input.
    pub fn feature_dims(&self) -> Vec<(usize, usize)> {
        let mut d = self.image_size / 4;
        let mut dims = Vec::with_capacity(self.levels());
        for _ in 0..self.levels() {
            d = (d + 2 - 3) / 2 + 1;
            dims.push((d, d));
        }
        dims
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(self.anchor_ratios.clone(), self.anchor_sizes.clone(), self.strides())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != crate::taxonomy::NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {}, got {}",
                crate::taxonomy::NUM_CLASSES,
                self.num_classes
            )));
        }
        if self.num_genera < 2 {
            return Err(Error::Config(format!("need at least 2 genera, got {}", self.num_genera)));
        }
        if self.roi_feature_dim == 0 {
            return Err(Error::Config("roi_feature_dim must be positive".into()));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("at least one backbone stage required".into()));
        }
        if self.anchor_sizes.len() != self.levels() {
            return Err(Error::Config(format!(
                "{} anchor sizes for {} pyramid levels",
                self.anchor_sizes.len(),
                self.levels()
            )));
        }
        if self.image_size % 4 != 0 || self.image_size < 32 {
            return Err(Error::Config(format!("image_size must be a multiple of 4 and >= 32, got {}", self.image_size)));
        }
        if let Some((h, _)) = self.feature_dims().last() {
            if *h < 2 {
                return Err(Error::Config("backbone too deep for this image size".into()));
            }
        }
        for p in [self.rpn_pos_fraction, self.roi_pos_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("sampling fraction {p} outside [0,1]")));
            }
        }
        self.anchor_grid()?;
        Ok(())
    }
}

/// One final detection: a box plus foreground probability vectors for the
/// genus and biological-class heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub genus_scores: Vec<f64>,
    pub class_scores: Vec<f64>,
    pub confidence: f64,
}

impl Detection {
    pub fn genus_index(&self) -> usize {
        argmax(&self.genus_scores)
    }

    pub fn class_index(&self) -> usize {
        argmax(&self.class_scores)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Raw per-region outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub proposals: Vec<BoundingBox>,
    /// `[R, 4]` class-agnostic box deltas.
    pub box_deltas: Array2<f32>,
    /// `[R, num_genera]` foreground genus logits.
    pub genus_logits: Array2<f32>,
    /// `[R, 6]` foreground class logits.
    pub class_logits: Array2<f32>,
    pub(crate) genus_logits_full: Array2<f32>,
    pub(crate) class_logits_full: Array2<f32>,
}

/// Assignment of one region to either a ground-truth instance or
/// background. Background uses the extra index (`num_genera` for the genus
/// head, 6 for the class head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionTarget {
    pub gt_index: Option<usize>,
    pub genus_label: usize,
    pub class_label: usize,
}

/// Match proposals to ground truth: IoU >= `pos_iou` against the best
/// ground-truth box makes a region positive (ties break to the lowest
/// ground-truth index); everything else is background. The class label is
/// always the taxonomy roll-up of the genus label.
pub fn assign_targets(
    proposals: &[BoundingBox],
    gt: &[Instance],
    taxonomy: &Taxonomy,
    pos_iou: f64,
) -> Result<Vec<RegionTarget>> {
    let bg_genus = taxonomy.num_genera();
    let bg_class = crate::taxonomy::NUM_CLASSES;
    let mut gt_genus = Vec::with_capacity(gt.len());
    for inst in gt {
        let gi = taxonomy
            .genus_index(&inst.genus)
            .ok_or_else(|| Error::Lookup(format!("genus {:?} not in taxonomy", inst.genus)))?;
        gt_genus.push(gi);
    }
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut best = None;
        let mut best_iou = 0.0f64;
        for (j, inst) in gt.iter().enumerate() {
            let v = iou_unchecked(p, &inst.bbox);
            if v > best_iou {
                best_iou = v;
                best = Some(j);
            }
        }
        if let Some(j) = best.filter(|_| best_iou >= pos_iou) {
            let genus_label = gt_genus[j];
            out.push(RegionTarget {
                gt_index: Some(j),
                genus_label,
                class_label: taxonomy.class_index_of_genus(genus_label),
            });
        } else {
            out.push(RegionTarget { gt_index: None, genus_label: bg_genus, class_label: bg_class });
        }
    }
    Ok(out)
}

/// The detector with all owned parameters.
pub struct Detector {
    pub config: ModelConfig,
    stem: Conv2d,
    stages: Vec<Vec<Conv2d>>,
    laterals: Vec<Conv2d>,
    smooths: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_delta: Conv2d,
    fc1: Linear,
    fc2: Linear,
    genus_head: Linear,
    box_head: Linear,
    class_head: Option<Linear>,
}

const ROI_POOL: usize = 7;
const ROI_SAMPLES: usize = 2;

impl Detector {
    /// Build a freshly initialized detector. Every parameter tensor draws
    /// from its own seed stream derived from (seed, tensor name), so adding
    /// or removing one layer never shifts another layer's initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let a = config.anchor_ratios.len();
        let fpn = config.fpn_channels;
        let stem = Conv2d::new("stem", 3, config.stem_channels, 4, 4, 0, seed);
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            let mut blocks = vec![Conv2d::new(&format!("stage{i}.0"), cin, cout, 3, 2, 1, seed)];
            for j in 0..config.blocks_per_stage {
                blocks.push(Conv2d::new(&format!("stage{i}.{}", j + 1), cout, cout, 3, 1, 1, seed));
            }
            stages.push(blocks);
            cin = cout;
        }
        let laterals = config
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&format!("lateral{i}"), c, fpn, 1, 1, 0, seed))
            .collect();
        let smooths = (0..config.levels())
            .map(|i| Conv2d::new(&format!("smooth{i}"), fpn, fpn, 3, 1, 1, seed))
            .collect();
        let rpn_conv = Conv2d::new("rpn.conv", fpn, fpn, 3, 1, 1, seed);
        let rpn_obj = Conv2d::new("rpn.obj", fpn, a, 1, 1, 0, seed).with_init_std(0.01, seed);
        let rpn_delta = Conv2d::new("rpn.delta", fpn, 4 * a, 1, 1, 0, seed).with_init_std(0.01, seed);
        let m = config.roi_feature_dim;
        let fc1 = Linear::new("roi.fc1", fpn * ROI_POOL * ROI_POOL, m, seed);
        let fc2 = Linear::new("roi.fc2", m, m, seed);
        let genus_head = Linear::new("head.genus", m, config.num_genera + 1, seed).with_init_std(0.01, seed);
        let box_head = Linear::new("head.box", m, 4, seed).with_init_std(0.01, seed);
        let class_head = if config.class_branch {
            Some(Linear::new("head.class", m, crate::taxonomy::NUM_CLASSES + 1, seed).with_init_std(0.01, seed))
        } else {
            None
        };
        Ok(Detector {
            config,
            stem,
            stages,
            laterals,
            smooths,
            rpn_conv,
            rpn_obj,
            rpn_delta,
            fc1,
            fc2,
            genus_head,
            box_head,
            class_head,
        })
    }

    /// Count of scalar parameters (for reporting).
    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p: ParamRef<'_>| n += p.v.len());
        n
    }
}

impl HasParams for Detector {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.stem.visit_params(f);
        for blocks in &mut self.stages {
            for b in blocks {
                b.visit_params(f);
            }
        }
        for l in &mut self.laterals {
            l.visit_params(f);
        }
        for s in &mut self.smooths {
            s.visit_params(f);
        }
        self.rpn_conv.visit_params(f);
        self.rpn_obj.visit_params(f);
        self.rpn_delta.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
        self.genus_head.visit_params(f);
        self.box_head.visit_params(f);
        if let Some(ch) = &mut self.class_head {
            ch.visit_params(f);
        }
    }
}

/// Saved activations from the trunk needed by the backward pass.
struct TrunkActs {
    stem_cols: Array2<f32>,
    stem_out: Array3<f32>,
    stage_cols: Vec<Vec<Array2<f32>>>,
    stage_out: Vec<Vec<Array3<f32>>>,
    lat_cols: Vec<Array2<f32>>,
    /// Merged top-down maps before smoothing.
    t: Vec<Array3<f32>>,
    smooth_cols: Vec<Array2<f32>>,
    /// Final pyramid maps.
    p: Vec<Array3<f32>>,
    rpn_cols: Vec<Array2<f32>>,
    rpn_out: Vec<Array3<f32>>,
    obj_cols: Vec<Array2<f32>>,
    obj_out: Vec<Array3<f32>>,
    delta_cols: Vec<Array2<f32>>,
    delta_out: Vec<Array3<f32>>,
}

/// Saved activations from the region head.
struct RoiActs {
    boxes: Vec<BoundingBox>,
    level_of: Vec<usize>,
    pooled_flat: Array2<f32>,
    fc1_out: Array2<f32>,
    fc2_out: Array2<f32>,
}

impl Detector {
    fn forward_trunk(&self, image: &Array3<f32>) -> Result<TrunkActs> {
        let s = self.config.image_size;
        if image.dim() != (3, s, s) {
            return Err(Error::Config(format!(
                "input is {:?}, model expects (3, {s}, {s})",
                image.dim()
            )));
        }
        let (mut stem_out, stem_cols) = self.stem.forward(image);
        relu_inplace(&mut stem_out);
        let mut stage_cols = Vec::new();
        let mut stage_out: Vec<Vec<Array3<f32>>> = Vec::new();
        let mut x = &stem_out;
        for blocks in &self.stages {
            let mut cols_i = Vec::new();
            let mut outs_i = Vec::new();
            for b in blocks {
                let (mut y, c) = b.forward(x);
                relu_inplace(&mut y);
                cols_i.push(c);
                outs_i.push(y);
                x = outs_i.last().unwrap();
            }
            stage_cols.push(cols_i);
            stage_out.push(outs_i);
            x = stage_out.last().unwrap().last().unwrap();
        }
        let levels = self.config.levels();
        let mut lat_cols = Vec::with_capacity(levels);
        let mut lat_out = Vec::with_capacity(levels);
        for (i, l) in self.laterals.iter().enumerate() {
            let (y, c) = l.forward(stage_out[i].last().unwrap());
            lat_cols.push(c);
            lat_out.push(y);
        }
        // top-down merge: t[top] = lateral; t[i] = lateral + upsample(t[i+1])
        let mut t = vec![Array3::<f32>::zeros((0, 0, 0)); levels];
        t[levels - 1] = lat_out.pop().unwrap();
        for i in (0..levels - 1).rev() {
            let (_, h, w) = lat_out[i].dim();
            let up = upsample_nearest(&t[i + 1], (h, w));
            t[i] = lat_out.pop().unwrap() + &up;
        }
        let mut smooth_cols = Vec::with_capacity(levels);
        let mut p = Vec::with_capacity(levels);
        for i in 0..levels {
            let (y, c) = self.smooths[i].forward(&t[i]);
            smooth_cols.push(c);
            p.push(y);
        }
        let mut rpn_cols = Vec::new();
        let mut rpn_out = Vec::new();
        let mut obj_cols = Vec::new();
        let mut obj_out = Vec::new();
        let mut delta_cols = Vec::new();
        let mut delta_out = Vec::new();
        for pi in &p {
            let (mut y, c) = self.rpn_conv.forward(pi);
            relu_inplace(&mut y);
            let (yo, co) = self.rpn_obj.forward(&y);
            let (yd, cd) = self.rpn_delta.forward(&y);
            rpn_cols.push(c);
            rpn_out.push(y);
            obj_cols.push(co);
            obj_out.push(yo);
            delta_cols.push(cd);
            delta_out.push(yd);
        }
        Ok(TrunkActs {
            stem_cols,
            stem_out,
            stage_cols,
            stage_out,
            lat_cols,
            t,
            smooth_cols,
            p,
            rpn_cols,
            rpn_out,
            obj_cols,
            obj_out,
            delta_cols,
            delta_out,
        })
    }

    /// Flatten the per-level objectness/delta maps into tile-anchor order:
    /// (level, row, col, ratio).
    fn flatten_rpn(&self, trunk: &TrunkActs) -> (Vec<f64>, Vec<[f64; 4]>) {
        let a = self.config.anchor_ratios.len();
        let mut scores = Vec::new();
        let mut deltas = Vec::new();
        for (obj, del) in trunk.obj_out.iter().zip(trunk.delta_out.iter()) {
            let (_, h, w) = obj.dim();
            for row in 0..h {
                for col in 0..w {
                    for ai in 0..a {
                        scores.push(obj[[ai, row, col]] as f64);
                        deltas.push([
                            del[[ai * 4, row, col]] as f64,
                            del[[ai * 4 + 1, row, col]] as f64,
                            del[[ai * 4 + 2, row, col]] as f64,
                            del[[ai * 4 + 3, row, col]] as f64,
                        ]);
                    }
                }
            }
        }
        (scores, deltas)
    }

    /// Decode, filter, and NMS the proposal set.
    fn proposals(&self, anchors: &[BoundingBox], scores: &[f64], deltas: &[[f64; 4]]) -> Vec<BoundingBox> {
        let s = self.config.image_size as f64;
        let order = argsort_desc(scores);
        let mut cands: Vec<(BoundingBox, f64)> = Vec::with_capacity(self.config.pre_nms_top_n.min(order.len()));
        for &i in order.iter().take(self.config.pre_nms_top_n) {
            if let Ok(b) = decode_deltas(&anchors[i], &deltas[i], Some((s, s))) {
                if b.width() >= 1e-3 && b.height() >= 1e-3 {
                    cands.push((b, scores[i]));
                }
            }
        }
        let kept = nms(&cands, self.config.rpn_nms_iou);
        kept.into_iter()
            .take(self.config.post_nms_top_n)
            .map(|i| cands[i].0)
            .collect()
    }

    /// Route each box to the pyramid level whose anchor size is closest to
    /// the box scale (ties to the finer level).
    fn level_for_box(&self, b: &BoundingBox) -> usize {
        let scale = b.area().sqrt();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &sz) in self.config.anchor_sizes.iter().enumerate() {
            let d = (scale - sz).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Pool regions and run the shared fully connected trunk plus heads.
    /// Returns activations and (genus, box, class) raw outputs including the
    /// background columns.
    fn roi_forward(
        &self,
        trunk: &TrunkActs,
        boxes: Vec<BoundingBox>,
    ) -> (RoiActs, Array2<f32>, Array2<f32>, Array2<f32>) {
        let fpn = self.config.fpn_channels;
        let strides = self.config.strides();
        let r = boxes.len();
        let level_of: Vec<usize> = boxes.iter().map(|b| self.level_for_box(b)).collect();
        let mut pooled_flat = Array2::<f32>::zeros((r, fpn * ROI_POOL * ROI_POOL));
        for (ri, b) in boxes.iter().enumerate() {
            let lvl = level_of[ri];
            let pooled = roi_align(&trunk.p[lvl], std::slice::from_ref(b), strides[lvl] as f64, ROI_POOL, ROI_SAMPLES);
            let flat = pooled.into_shape_with_order((1, fpn * ROI_POOL * ROI_POOL)).unwrap();
            pooled_flat.row_mut(ri).assign(&flat.row(0));
        }
        let mut fc1_out = self.fc1.forward(&pooled_flat);
        relu2_inplace(&mut fc1_out);
        let mut fc2_out = self.fc2.forward(&fc1_out);
        relu2_inplace(&mut fc2_out);
        let genus_logits = self.genus_head.forward(&fc2_out);
        let box_deltas = self.box_head.forward(&fc2_out);
        let class_logits = match &self.class_head {
            Some(ch) => ch.forward(&fc2_out),
            None => Array2::zeros((r, crate::taxonomy::NUM_CLASSES + 1)),
        };
        (
            RoiActs { boxes, level_of, pooled_flat, fc1_out, fc2_out },
            genus_logits,
            box_deltas,
            class_logits,
        )
    }

    /// Inference-mode forward pass exposing raw per-region outputs.
    pub fn forward(&self, image: &Array3<f32>) -> Result<ForwardOutputs> {
        let trunk = self.forward_trunk(image)?;
        let grid = self.config.anchor_grid()?;
        let anchors = tile_anchors(&grid, &self.config.feature_dims())?;
        let (scores, deltas) = self.flatten_rpn(&trunk);
        let proposals = self.proposals(&anchors, &scores, &deltas);
        let (acts, genus_full, box_deltas, class_full) = self.roi_forward(&trunk, proposals);
        let g = self.config.num_genera;
        let c = crate::taxonomy::NUM_CLASSES;
        Ok(ForwardOutputs {
            proposals: acts.boxes,
            box_deltas,
            genus_logits: genus_full.slice(ndarray::s![.., ..g]).to_owned(),
            class_logits: class_full.slice(ndarray::s![.., ..c]).to_owned(),
            genus_logits_full: genus_full,
            class_logits_full: class_full,
        })
    }

    /// Final predictions: score-floor filter, per-genus NMS, confidence
    /// sorted. Score vectors are foreground-renormalized softmax outputs.
    pub fn predict(&self, image: &Array3<f32>, score_floor: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let out = self.forward(image)?;
        let g = self.config.num_genera;
        let c = crate::taxonomy::NUM_CLASSES;
        let s = self.config.image_size as f64;
        let mut cands: Vec<(usize, Detection)> = Vec::new();
        for (ri, prop) in out.proposals.iter().enumerate() {
            let genus_row: Vec<f64> = (0..g + 1).map(|j| out.genus_logits_full[[ri, j]] as f64).collect();
            let p_genus = loss::softmax(&genus_row);
            let fg = &p_genus[..g];
            let label = argmax(fg);
            let confidence = fg[label];
            if confidence < score_floor {
                continue;
            }
            let deltas = [
                out.box_deltas[[ri, 0]] as f64,
                out.box_deltas[[ri, 1]] as f64,
                out.box_deltas[[ri, 2]] as f64,
                out.box_deltas[[ri, 3]] as f64,
            ];
            let Ok(bbox) = decode_deltas(prop, &deltas, Some((s, s))) else {
                continue;
            };
            if bbox.width() < 1e-3 || bbox.height() < 1e-3 {
                continue;
            }
            let fg_sum: f64 = fg.iter().sum();
            let genus_scores: Vec<f64> = fg.iter().map(|&v| v / fg_sum.max(1e-12)).collect();
            let class_scores = if self.class_head.is_some() {
                let class_row: Vec<f64> = (0..c + 1).map(|j| out.class_logits_full[[ri, j]] as f64).collect();
                let p_class = loss::softmax(&class_row);
                let cf = &p_class[..c];
                let cf_sum: f64 = cf.iter().sum();
                cf.iter().map(|&v| v / cf_sum.max(1e-12)).collect()
            } else {
                vec![1.0 / c as f64; c]
            };
            cands.push((label, Detection { bbox, genus_scores, class_scores, confidence }));
        }
        // per-genus NMS
        let mut kept: Vec<Detection> = Vec::new();
        for label in 0..g {
            let group: Vec<&Detection> = cands.iter().filter(|(l, _)| *l == label).map(|(_, d)| d).collect();
            if group.is_empty() {
                continue;
            }
            let scored: Vec<(BoundingBox, f64)> = group.iter().map(|d| (d.bbox, d.confidence)).collect();
            for i in nms(&scored, nms_iou) {
                kept.push(group[i].clone());
            }
        }
        kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        Ok(kept)
    }
}

/// Everything assembled for one optimization step on one image.
struct ImageStepPlan {
    /// Sampled anchor flat indices with binary targets.
    rpn_sampled: Vec<(usize, f64)>,
    /// Positive anchors: (flat index, encoded target deltas).
    rpn_pos: Vec<(usize, [f64; 4])>,
    /// Sampled region boxes with genus/class labels.
    roi_boxes: Vec<BoundingBox>,
    roi_genus: Vec<usize>,
    roi_class: Vec<usize>,
    /// Positive region list: (row in roi_boxes, target deltas).
    roi_pos: Vec<(usize, [f64; 4])>,
}

impl Detector {
    /// Match and sample proposal-stage anchors.
    fn plan_rpn(
        &self,
        anchors: &[BoundingBox],
        gt: &[Instance],
        rng: &mut ChaCha8Rng,
    ) -> (Vec<(usize, f64)>, Vec<(usize, [f64; 4])>) {
        let s = self.config.image_size as f64;
        let inside: Vec<usize> = (0..anchors.len())
            .filter(|&i| {
                let b = &anchors[i];
                b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= s && b.y2 <= s
            })
            .collect();
        let mut label: Vec<i8> = vec![-1; anchors.len()]; // -1 ignore, 0 neg, 1 pos
        let mut matched: Vec<usize> = vec![0; anchors.len()];
        let mut best_per_gt: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gt.len()];
        for &i in &inside {
            let mut best_iou = 0.0;
            let mut best_gt = usize::MAX;
            for (j, inst) in gt.iter().enumerate() {
                let v = iou_unchecked(&anchors[i], &inst.bbox);
                if v > best_iou {
                    best_iou = v;
                    best_gt = j;
                }
                if v > best_per_gt[j].0 {
                    best_per_gt[j] = (v, i);
                }
            }
            if best_gt != usize::MAX && best_iou >= self.config.rpn_pos_iou {
                label[i] = 1;
                matched[i] = best_gt;
            } else if best_iou < self.config.rpn_neg_iou {
                label[i] = 0;
            }
        }
        // every ground-truth box recruits its best-overlapping anchor
        for (j, &(v, i)) in best_per_gt.iter().enumerate() {
            if i != usize::MAX && v > 0.0 {
                label[i] = 1;
                matched[i] = j;
            }
        }
        let mut pos: Vec<usize> = inside.iter().copied().filter(|&i| label[i] == 1).collect();
        let mut neg: Vec<usize> = inside.iter().copied().filter(|&i| label[i] == 0).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let n_pos = pos
            .len()
            .min((self.config.rpn_batch as f64 * self.config.rpn_pos_fraction) as usize);
        let n_neg = neg.len().min(self.config.rpn_batch - n_pos);
        pos.truncate(n_pos);
        neg.truncate(n_neg);
        let mut sampled: Vec<(usize, f64)> = pos.iter().map(|&i| (i, 1.0)).collect();
        sampled.extend(neg.iter().map(|&i| (i, 0.0)));
        let rpn_pos = pos
            .iter()
            .map(|&i| {
                let t = encode_deltas(&anchors[i], &gt[matched[i]].bbox).expect("valid boxes");
                (i, t)
            })
            .collect();
        (sampled, rpn_pos)
    }

    /// Match, sample, and encode region-stage targets.
    fn plan_roi(
        &self,
        proposals: &[BoundingBox],
        gt: &[Instance],
        taxonomy: &Taxonomy,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<BoundingBox>, Vec<usize>, Vec<usize>, Vec<(usize, [f64; 4])>)> {
        let targets = assign_targets(proposals, gt, taxonomy, self.config.roi_pos_iou)?;
        let mut pos: Vec<usize> = (0..proposals.len()).filter(|&i| targets[i].gt_index.is_some()).collect();
        let mut bg: Vec<usize> = (0..proposals.len()).filter(|&i| targets[i].gt_index.is_none()).collect();
        pos.shuffle(rng);
        bg.shuffle(rng);
        let n_pos = pos
            .len()
            .min((self.config.roi_batch as f64 * self.config.roi_pos_fraction) as usize);
        let n_bg = bg.len().min(self.config.roi_batch - n_pos);
        pos.truncate(n_pos);
        bg.truncate(n_bg);
        let mut boxes = Vec::with_capacity(n_pos + n_bg);
        let mut genus = Vec::with_capacity(n_pos + n_bg);
        let mut class = Vec::with_capacity(n_pos + n_bg);
        let mut roi_pos = Vec::with_capacity(n_pos);
        for (row, &i) in pos.iter().chain(bg.iter()).enumerate() {
            boxes.push(proposals[i]);
            genus.push(targets[i].genus_label);
            class.push(targets[i].class_label);
            if let Some(j) = targets[i].gt_index {
                let t = encode_deltas(&proposals[i], &gt[j].bbox)?;
                roi_pos.push((row, t));
            }
        }
        Ok((boxes, genus, class, roi_pos))
    }

    /// One fused forward/backward pass over a batch, accumulating parameter
    /// gradients (scaled by 1/batch) and returning the batch-mean loss.
    pub fn train_step(
        &mut self,
        batch: &[(Array3<f32>, Vec<Instance>)],
        taxonomy: &Taxonomy,
        weights: &LossWeights,
        sample_seed: u64,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Config("train_step needs a non-empty batch".into()));
        }
        let grid = self.config.anchor_grid()?;
        let anchors = tile_anchors(&grid, &self.config.feature_dims())?;
        let scale = 1.0 / batch.len() as f64;
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for (bi, (image, gt)) in batch.iter().enumerate() {
            let mut rng = crate::util::rng_from(sample_seed, &[bi as u64]);
            let trunk = self.forward_trunk(image)?;
            let (scores, deltas) = self.flatten_rpn(&trunk);
            let mut proposals = self.proposals(&anchors, &scores, &deltas);
            for inst in gt {
                proposals.push(inst.bbox);
            }
            let (rpn_sampled, rpn_pos) = self.plan_rpn(&anchors, gt, &mut rng);
            let (roi_boxes, roi_genus, roi_class, roi_pos) = self.plan_roi(&proposals, gt, taxonomy, &mut rng)?;
            let plan = ImageStepPlan { rpn_sampled, rpn_pos, roi_boxes, roi_genus, roi_class, roi_pos };
            let (acts, genus_logits, box_deltas, class_logits) = self.roi_forward(&trunk, plan.roi_boxes.clone());

            let r = acts.boxes.len();
            let gcols = self.config.num_genera + 1;
            let ccols = crate::taxonomy::NUM_CLASSES + 1;
            let inputs = DetectionLossInputs {
                rpn_obj_logits: plan.rpn_sampled.iter().map(|&(i, _)| scores[i]).collect(),
                rpn_obj_targets: plan.rpn_sampled.iter().map(|&(_, t)| t).collect(),
                rpn_box_deltas: plan.rpn_pos.iter().map(|&(i, _)| deltas[i]).collect(),
                rpn_box_targets: plan.rpn_pos.iter().map(|&(_, t)| t).collect(),
                rpn_normalizer: plan.rpn_sampled.len(),
                genus_logits: Array2::from_shape_fn((r, gcols), |(i, j)| genus_logits[[i, j]] as f64),
                genus_targets: plan.roi_genus.clone(),
                class_logits: if self.class_head.is_some() {
                    Array2::from_shape_fn((r, ccols), |(i, j)| class_logits[[i, j]] as f64)
                } else {
                    Array2::zeros((0, 0))
                },
                class_targets: if self.class_head.is_some() { plan.roi_class.clone() } else { Vec::new() },
                roi_box_deltas: plan
                    .roi_pos
                    .iter()
                    .map(|&(row, _)| {
                        [
                            box_deltas[[row, 0]] as f64,
                            box_deltas[[row, 1]] as f64,
                            box_deltas[[row, 2]] as f64,
                            box_deltas[[row, 3]] as f64,
                        ]
                    })
                    .collect(),
                roi_box_targets: plan.roi_pos.iter().map(|&(_, t)| t).collect(),
                roi_normalizer: r,
            };
            let (breakdown, grads) = compute_loss(&inputs, weights)?;
            sums.0 += breakdown.l_box * scale;
            sums.1 += breakdown.l_genus * scale;
            sums.2 += breakdown.l_cls * scale;
            self.backward(&trunk, &acts, &plan, &grads, weights, scale as f32)?;
        }
        LossBreakdown::compose(sums.0, sums.1, sums.2, weights)
    }

    /// Backward pass: heads -> pooled features -> pyramid -> backbone.
    fn backward(
        &mut self,
        trunk: &TrunkActs,
        acts: &RoiActs,
        plan: &ImageStepPlan,
        grads: &loss::DetectionLossGrads,
        weights: &LossWeights,
        scale: f32,
    ) -> Result<()> {
        let g = self.config.num_genera;
        let c = crate::taxonomy::NUM_CLASSES;
        let r = acts.boxes.len();
        let levels = self.config.levels();
        let strides = self.config.strides();
        let a = self.config.anchor_ratios.len();

        // ---- region heads ----
        let mut d_genus = Array2::<f32>::zeros((r, g + 1));
        for i in 0..r {
            for j in 0..g + 1 {
                d_genus[[i, j]] = (grads.genus[[i, j]] * scale as f64) as f32;
            }
        }
        let mut d_box = Array2::<f32>::zeros((r, 4));
        for (k, &(row, _)) in plan.roi_pos.iter().enumerate() {
            for j in 0..4 {
                d_box[[row, j]] = (grads.roi_box[k][j] * scale as f64) as f32;
            }
        }
        let mut d_fc2 = self.genus_head.backward(&acts.fc2_out, &d_genus);
        d_fc2 += &self.box_head.backward(&acts.fc2_out, &d_box);
        if weights.lambda != 0.0 {
            if let Some(ch) = &mut self.class_head {
                let mut d_class = Array2::<f32>::zeros((r, c + 1));
                for i in 0..r {
                    for j in 0..c + 1 {
                        d_class[[i, j]] = (grads.class[[i, j]] * scale as f64) as f32;
                    }
                }
                d_fc2 += &ch.backward(&acts.fc2_out, &d_class);
            }
        }
        relu2_backward(&acts.fc2_out, &mut d_fc2);
        let mut d_fc1 = self.fc2.backward(&acts.fc1_out, &d_fc2);
        relu2_backward(&acts.fc1_out, &mut d_fc1);
        let d_flat = self.fc1.backward(&acts.pooled_flat, &d_fc1);

        // ---- scatter pooled gradients into the pyramid ----
        let fpn = self.config.fpn_channels;
        let mut d_p: Vec<Array3<f32>> = trunk.p.iter().map(|p| Array3::zeros(p.dim())).collect();
        for ri in 0..r {
            let lvl = acts.level_of[ri];
            let row = d_flat.row(ri);
            let d_pooled = ndarray::Array4::from_shape_vec((1, fpn, ROI_POOL, ROI_POOL), row.to_vec()).unwrap();
            roi_align_backward(
                &mut d_p[lvl],
                std::slice::from_ref(&acts.boxes[ri]),
                strides[lvl] as f64,
                ROI_SAMPLES,
                &d_pooled,
            );
        }

        // ---- proposal-stage heads ----
        let dims = self.config.feature_dims();
        let mut offsets = Vec::with_capacity(levels);
        let mut off = 0usize;
        for &(h, w) in &dims {
            offsets.push(off);
            off += h * w * a;
        }
        let locate = |flat: usize| -> (usize, usize, usize, usize) {
            let lvl = (0..levels).rev().find(|&l| flat >= offsets[l]).unwrap();
            let local = flat - offsets[lvl];
            let ai = local % a;
            let cell = local / a;
            let (_, w) = dims[lvl];
            (lvl, cell / w, cell % w, ai)
        };
        let mut d_obj: Vec<Array3<f32>> = trunk.obj_out.iter().map(|o| Array3::zeros(o.dim())).collect();
        let mut d_delta: Vec<Array3<f32>> = trunk.delta_out.iter().map(|o| Array3::zeros(o.dim())).collect();
        for (k, &(i, _)) in plan.rpn_sampled.iter().enumerate() {
            let (lvl, row, col, ai) = locate(i);
            d_obj[lvl][[ai, row, col]] += (grads.rpn_obj[k] * scale as f64) as f32;
        }
        for (k, &(i, _)) in plan.rpn_pos.iter().enumerate() {
            let (lvl, row, col, ai) = locate(i);
            for j in 0..4 {
                d_delta[lvl][[ai * 4 + j, row, col]] += (grads.rpn_box[k][j] * scale as f64) as f32;
            }
        }
        for lvl in 0..levels {
            let rdim = trunk.rpn_out[lvl].dim();
            let mut d_rpn = self.rpn_obj.backward(&trunk.obj_cols[lvl], rdim, &d_obj[lvl]);
            d_rpn += &self.rpn_delta.backward(&trunk.delta_cols[lvl], rdim, &d_delta[lvl]);
            relu_backward(&trunk.rpn_out[lvl], &mut d_rpn);
            d_p[lvl] += &self.rpn_conv.backward(&trunk.rpn_cols[lvl], trunk.p[lvl].dim(), &d_rpn);
        }

        // ---- pyramid top-down merge, finest level first ----
        let mut d_lat: Vec<Array3<f32>> = Vec::with_capacity(levels);
        let mut carry: Option<Array3<f32>> = None;
        for lvl in 0..levels {
            let mut d_t = self.smooths[lvl].backward(&trunk.smooth_cols[lvl], trunk.t[lvl].dim(), &d_p[lvl]);
            if let Some(up) = carry.take() {
                d_t += &up;
            }
            if lvl + 1 < levels {
                let (_, sh, sw) = trunk.t[lvl + 1].dim();
                carry = Some(upsample_nearest_backward(&d_t, (sh, sw)));
            }
            d_lat.push(d_t);
        }

        // ---- backbone ----
        let mut d_stage_out: Vec<Array3<f32>> = Vec::with_capacity(levels);
        for lvl in 0..levels {
            let src_dims = trunk.stage_out[lvl].last().unwrap().dim();
            d_stage_out.push(self.laterals[lvl].backward(&trunk.lat_cols[lvl], src_dims, &d_lat[lvl]));
        }
        let mut carry_down: Option<Array3<f32>> = None;
        for lvl in (0..levels).rev() {
            let mut d = d_stage_out[lvl].clone();
            if let Some(cd) = carry_down.take() {
                d += &cd;
            }
            let blocks = &mut self.stages[lvl];
            for j in (0..blocks.len()).rev() {
                relu_backward(&trunk.stage_out[lvl][j], &mut d);
                let input_dims = if j > 0 {
                    trunk.stage_out[lvl][j - 1].dim()
                } else if lvl > 0 {
                    trunk.stage_out[lvl - 1].last().unwrap().dim()
                } else {
                    trunk.stem_out.dim()
                };
                d = blocks[j].backward(&trunk.stage_cols[lvl][j], input_dims, &d);
            }
            carry_down = Some(d);
        }
        let mut d_stem = carry_down.unwrap();
        relu_backward(&trunk.stem_out, &mut d_stem);
        let _ = self.stem.backward(&trunk.stem_cols, (3, self.config.image_size, self.config.image_size), &d_stem);
        Ok(())
    }
}
