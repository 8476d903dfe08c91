//! Two-stage detector with a shared/private split backbone.
//!
//! `E_b` (base encoder) feeds two parallel encoders: `E_s` produces the
//! domain-shared features used for detection, `E_p` the domain-private ones.
//! A fully convolutional domain discriminator `D_glb` classifies either
//! stream. Detection runs an RPN over anchors, ROIAlign, a three-layer
//! instance MLP and linear classification/regression heads.

pub mod boxes;
pub mod checkpoint;
pub mod targets;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{softmax_rows, Tape, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth_data::ImageSample;
use crate::tensor::Tensor;
use boxes::{anchor_grid, decode, nms, score_order, BBox, DeltaWeights, UNIT_WEIGHTS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// Total spatial reduction from image to the shared/private feature grid.
pub const FEATURE_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub num_classes: usize,
    /// Scales the reference channel widths (256 into `E_p`, 512 out of it).
    pub width_multiplier: f64,
    pub mlp_dim: usize,
    pub roi_size: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_nms: f64,
    pub rpn_top_n_train: usize,
    pub rpn_top_n_test: usize,
    pub det_nms: f64,
    pub score_floor: f64,
    pub max_detections: usize,
    pub grl_lambda: f64,
    /// Reuse shared-stream proposals for the private streams instead of
    /// running the RPN on private features.
    pub shared_proposals: bool,
    pub head_delta_weights: DeltaWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            num_classes: 3,
            width_multiplier: 0.25,
            mlp_dim: 128,
            roi_size: 7,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_top_n: 300,
            rpn_nms: 0.7,
            rpn_top_n_train: 64,
            rpn_top_n_test: 32,
            det_nms: 0.3,
            score_floor: 0.05,
            max_detections: 50,
            grl_lambda: 1.0,
            shared_proposals: false,
            head_delta_weights: [10.0, 10.0, 5.0, 5.0],
        }
    }
}

/// Channel widths derived from the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub base: usize,
    pub shared_mid: usize,
    pub feature: usize,
    pub disc: [usize; 4],
}

impl ModelConfig {
    pub fn widths(&self) -> Widths {
        let ch = |c: f64| ((c * self.width_multiplier).round() as usize).max(1);
        Widths {
            base: ch(256.0),
            shared_mid: ch(256.0),
            feature: ch(512.0),
            disc: [ch(512.0), ch(256.0), ch(128.0), ch(64.0)],
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn feature_size(&self) -> usize {
        self.resolution / FEATURE_STRIDE
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.resolution == 0 || !self.resolution.is_multiple_of(FEATURE_STRIDE) {
            return err(format!(
                "resolution {} must be a positive multiple of {FEATURE_STRIDE} so shared and private grids align",
                self.resolution
            ));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return err(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            ));
        }
        if self.mlp_dim == 0 || self.roi_size == 0 {
            return err("mlp_dim and roi_size must be positive".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return err("anchor scales and ratios must be non-empty".into());
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_ratios)
            .any(|&v| !(v > 0.0))
        {
            return err("anchor scales and ratios must be positive".into());
        }
        if self.rpn_top_n_train == 0 || self.rpn_top_n_test == 0 || self.rpn_pre_nms_top_n == 0 {
            return err("proposal counts must be positive".into());
        }
        for (name, v) in [
            ("rpn_nms", self.rpn_nms),
            ("det_nms", self.det_nms),
            ("score_floor", self.score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.grl_lambda >= 0.0) {
            return err(format!(
                "grl_lambda must be non-negative, got {}",
                self.grl_lambda
            ));
        }
        if self.head_delta_weights.iter().any(|&w| !(w > 0.0)) {
            return err("head_delta_weights must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Fc {
    pub w: ParamId,
    pub b: ParamId,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask(u32);

impl GradMask {
    pub const NONE: GradMask = GradMask(0);
    pub const ALL: GradMask = GradMask(u32::MAX);

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & (1 << g as u32) != 0
    }

    pub fn without(self, g: ParamGroup) -> Self {
        GradMask(self.0 & !(1 << g as u32))
    }

    pub fn with(self, g: ParamGroup) -> Self {
        GradMask(self.0 | (1 << g as u32))
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        groups.iter().fold(GradMask::NONE, |m, &g| m.with(g))
    }
}

/// The four global feature maps, all `C x h x w` of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    pub f_sha_s: Tensor<T>,
    pub f_sha_t: Tensor<T>,
    pub f_pri_s: Tensor<T>,
    pub f_pri_t: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug)]
pub struct DetectorModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub base: Vec<Conv>,
    pub shared: Vec<Conv>,
    pub private: Vec<Conv>,
    pub disc: Vec<Conv>,
    pub rpn_conv: Conv,
    pub rpn_cls: Conv,
    pub rpn_reg: Conv,
    pub mlp: Vec<Fc>,
    pub cls_head: Fc,
    pub reg_head: Fc,
    pub ins_disc: Vec<Fc>,
    anchors: Vec<BBox>,
}

impl<T: Scalar> Clone for DetectorModel<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            base: self.base.clone(),
            shared: self.shared.clone(),
            private: self.private.clone(),
            disc: self.disc.clone(),
            rpn_conv: self.rpn_conv,
            rpn_cls: self.rpn_cls,
            rpn_reg: self.rpn_reg,
            mlp: self.mlp.clone(),
            cls_head: self.cls_head,
            reg_head: self.reg_head,
            ins_disc: self.ins_disc.clone(),
            anchors: self.anchors.clone(),
        }
    }
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        init: Option<f64>,
    ) -> Conv {
        let fan_in = cin * k * k;
        let init = init.map_or(Init::He { fan_in }, Init::Normal);
        let w = self.store.add(
            format!("{name}.weight"),
            group,
            &[cout, cin, k, k],
            init,
            self.rng,
        );
        let b = self.store.add(
            format!("{name}.bias"),
            group,
            &[cout],
            Init::Zeros,
            self.rng,
        );
        Conv { w, b, pad: k / 2 }
    }

    fn fc(
        &mut self,
        name: &str,
        group: ParamGroup,
        din: usize,
        dout: usize,
        init: Option<f64>,
    ) -> Fc {
        let init = init.map_or(Init::He { fan_in: din }, Init::Normal);
        let w = self.store.add(
            format!("{name}.weight"),
            group,
            &[din, dout],
            init,
            self.rng,
        );
        let b = self.store.add(
            format!("{name}.bias"),
            group,
            &[dout],
            Init::Zeros,
            self.rng,
        );
        Fc { w, b }
    }
}

impl<T: Scalar> DetectorModel<T> {
    /// Builds a freshly initialised model. Hidden layers use He-normal
    /// weights; output heads use `N(0, 0.01^2)` (`0.001` for box regression).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let w = cfg.widths();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        use ParamGroup::*;

        let base = vec![
            b.conv("eb.0", BaseEncoder, 3, w.base, 3, None),
            b.conv("eb.1", BaseEncoder, w.base, w.base, 3, None),
        ];
        let shared = vec![
            b.conv("es.0", SharedEncoder, w.base, w.shared_mid, 3, None),
            b.conv("es.1", SharedEncoder, w.shared_mid, w.shared_mid, 3, None),
            b.conv("es.2", SharedEncoder, w.shared_mid, w.feature, 3, None),
            b.conv("es.3", SharedEncoder, w.feature, w.feature, 3, None),
        ];
        let private = vec![
            b.conv("ep.0", PrivateEncoder, w.base, w.shared_mid, 3, None),
            b.conv("ep.1", PrivateEncoder, w.shared_mid, w.feature, 3, None),
            b.conv("ep.2", PrivateEncoder, w.feature, w.feature, 3, None),
        ];
        let mut disc = Vec::new();
        let mut cin = w.feature;
        for (i, &cout) in w.disc.iter().enumerate() {
            disc.push(b.conv(&format!("dglb.{i}"), Discriminator, cin, cout, 3, None));
            cin = cout;
        }
        disc.push(b.conv("dglb.4", Discriminator, cin, 2, 3, Some(0.01)));

        let a = cfg.num_anchors();
        let rpn_conv = b.conv("rpn.conv", Rpn, w.feature, w.feature, 3, None);
        let rpn_cls = b.conv("rpn.cls", Rpn, w.feature, a, 1, Some(0.01));
        let rpn_reg = b.conv("rpn.reg", Rpn, w.feature, 4 * a, 1, Some(0.01));

        let flat = w.feature * cfg.roi_size * cfg.roi_size;
        let d = cfg.mlp_dim;
        let mlp = vec![
            b.fc("mlp.0", InstanceMlp, flat, d, None),
            b.fc("mlp.1", InstanceMlp, d, d, None),
            b.fc("mlp.2", InstanceMlp, d, d, None),
        ];
        let cls_head = b.fc("cls", ClsHead, d, cfg.num_classes + 1, Some(0.01));
        let reg_head = b.fc("reg", RegHead, d, 4 * cfg.num_classes, Some(0.001));
        let hid = (d / 4).max(2);
        let ins_disc = vec![
            b.fc("insdisc.0", InstanceDiscriminator, d, hid, None),
            b.fc("insdisc.1", InstanceDiscriminator, hid, 2, Some(0.01)),
        ];

        let fs = cfg.feature_size();
        let anchors = anchor_grid(
            fs,
            fs,
            FEATURE_STRIDE as f64,
            &cfg.anchor_scales,
            &cfg.anchor_ratios,
        );
        Ok(Self {
            cfg,
            store,
            base,
            shared,
            private,
            disc,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            mlp,
            cls_head,
            reg_head,
            ins_disc,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    fn param(&self, tape: &mut Tape<T>, id: ParamId, mask: GradMask) -> Var {
        tape.param(&self.store, id, mask.contains(self.store.group(id)))
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, c: &Conv, mask: GradMask, relu: bool) -> Var {
        let w = self.param(tape, c.w, mask);
        let b = self.param(tape, c.b, mask);
        let y = tape.conv2d(x, w, b, c.pad);
        if relu {
            tape.relu(y)
        } else {
            y
        }
    }

    fn fc(&self, tape: &mut Tape<T>, x: Var, f: &Fc, mask: GradMask, relu: bool) -> Var {
        let w = self.param(tape, f.w, mask);
        let b = self.param(tape, f.b, mask);
        let y = tape.linear(x, w, b);
        if relu {
            tape.relu(y)
        } else {
            y
        }
    }

    /// Network input: `3 x H x W`, pixel values centred on zero.
    pub fn image_tensor(&self, img: &ImageSample) -> Tensor<T> {
        assert!(
            img.width == self.cfg.resolution && img.height == self.cfg.resolution,
            "image {} is {}x{}, model expects {}x{}",
            img.id,
            img.width,
            img.height,
            self.cfg.resolution,
            self.cfg.resolution
        );
        Tensor::from_vec(
            &[3, img.height, img.width],
            img.to_chw()
                .into_iter()
                .map(|v| T::of(v as f64 - 0.5))
                .collect(),
        )
    }

    pub fn encode_base(&self, tape: &mut Tape<T>, x: Var, mask: GradMask) -> Var {
        let y = self.conv(tape, x, &self.base[0], mask, true);
        let y = self.conv(tape, y, &self.base[1], mask, true);
        tape.maxpool2(y)
    }

    pub fn encode_shared(&self, tape: &mut Tape<T>, base: Var, mask: GradMask) -> Var {
        let y = self.conv(tape, base, &self.shared[0], mask, true);
        let y = self.conv(tape, y, &self.shared[1], mask, true);
        let y = tape.maxpool2(y);
        let y = self.conv(tape, y, &self.shared[2], mask, true);
        let y = self.conv(tape, y, &self.shared[3], mask, true);
        tape.maxpool2(y)
    }

    pub fn encode_private(&self, tape: &mut Tape<T>, base: Var, mask: GradMask) -> Var {
        let y = self.conv(tape, base, &self.private[0], mask, true);
        let y = tape.maxpool2(y);
        let y = self.conv(tape, y, &self.private[1], mask, true);
        let y = tape.maxpool2(y);
        self.conv(tape, y, &self.private[2], mask, true)
    }

    /// `2 x h x w` domain logits.
    pub fn discriminate(&self, tape: &mut Tape<T>, feat: Var, mask: GradMask) -> Var {
        let last = self.disc.len() - 1;
        self.disc
            .iter()
            .enumerate()
            .fold(feat, |y, (i, c)| self.conv(tape, y, c, mask, i != last))
    }

    /// Objectness logits `A x h x w` and deltas `4A x h x w`.
    pub fn rpn_head(&self, tape: &mut Tape<T>, feat: Var, mask: GradMask) -> (Var, Var) {
        let h = self.conv(tape, feat, &self.rpn_conv, mask, true);
        let obj = self.conv(tape, h, &self.rpn_cls, mask, false);
        let deltas = self.conv(tape, h, &self.rpn_reg, mask, false);
        (obj, deltas)
    }

    /// ROIAlign then the three-layer MLP; row `i` belongs to `boxes[i]`.
    pub fn instance_vectors(
        &self,
        tape: &mut Tape<T>,
        feat: Var,
        boxes: &[BBox],
        mask: GradMask,
    ) -> Var {
        assert!(!boxes.is_empty(), "instance_vectors needs at least one box");
        let arr: Vec<[f64; 4]> = boxes.iter().map(BBox::to_array).collect();
        let pooled = tape.roi_align(feat, &arr, 1.0 / FEATURE_STRIDE as f64, self.cfg.roi_size);
        let y = self.fc(tape, pooled, &self.mlp[0], mask, true);
        let y = self.fc(tape, y, &self.mlp[1], mask, true);
        self.fc(tape, y, &self.mlp[2], mask, true)
    }

    /// Class logits `N x (C+1)` (column 0 is background) and class-specific
    /// deltas `N x 4C`.
    pub fn heads(&self, tape: &mut Tape<T>, inst: Var, mask: GradMask) -> (Var, Var) {
        let cls = self.fc(tape, inst, &self.cls_head, mask, false);
        let reg = self.fc(tape, inst, &self.reg_head, mask, false);
        (cls, reg)
    }

    /// Two-way domain logits for a `1 x D` instance vector, shaped `2 x 1 x 1`.
    pub fn instance_discriminate(&self, tape: &mut Tape<T>, v: Var, mask: GradMask) -> Var {
        let y = self.fc(tape, v, &self.ins_disc[0], mask, true);
        let y = self.fc(tape, y, &self.ins_disc[1], mask, false);
        tape.reshape(y, &[2, 1, 1])
    }

    /// Decodes, clips and suppresses RPN outputs into at most `top_n`
    /// proposals. Never empty: falls back to the whole image.
    pub fn proposals(&self, obj: &Tensor<T>, deltas: &Tensor<T>, top_n: usize) -> Vec<Proposal> {
        propose(
            obj,
            deltas,
            &self.anchors,
            self.cfg.num_anchors(),
            self.cfg.resolution as f64,
            self.cfg.rpn_pre_nms_top_n,
            self.cfg.rpn_nms,
            top_n,
        )
    }

    /// Shared-path detection on one image. Reads no private-encoder or
    /// discriminator parameters.
    pub fn detect(&self, image: &ImageSample) -> Vec<Detection> {
        let mut tape = Tape::new();
        let x = tape.constant(self.image_tensor(image));
        let mask = GradMask::NONE;
        let base = self.encode_base(&mut tape, x, mask);
        let feat = self.encode_shared(&mut tape, base, mask);
        let (obj, deltas) = self.rpn_head(&mut tape, feat, mask);
        let props = self.proposals(tape.value(obj), tape.value(deltas), self.cfg.rpn_top_n_test);
        let rois: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let inst = self.instance_vectors(&mut tape, feat, &rois, mask);
        let (cls, reg) = self.heads(&mut tape, inst, mask);
        self.postprocess(&rois, tape.value(cls), tape.value(reg))
    }

    fn postprocess(&self, rois: &[BBox], cls: &Tensor<T>, reg: &Tensor<T>) -> Vec<Detection> {
        let c = self.cfg.num_classes;
        let res = self.cfg.resolution as f64;
        let probs = softmax_rows(cls.data(), c + 1);
        let mut out = Vec::new();
        for class in 0..c {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (i, roi) in rois.iter().enumerate() {
                let score = probs[i * (c + 1) + class + 1].f64();
                if !(score >= self.cfg.score_floor) {
                    continue;
                }
                let d = &reg.row(i)[4 * class..4 * class + 4];
                let deltas = [d[0].f64(), d[1].f64(), d[2].f64(), d[3].f64()];
                let b = decode(roi, deltas, self.cfg.head_delta_weights).clip(res, res);
                if b.is_valid() {
                    boxes.push(b);
                    scores.push(score);
                }
            }
            for k in nms(&boxes, &scores, self.cfg.det_nms) {
                out.push(Detection {
                    bbox: boxes[k],
                    class_id: class,
                    score: scores[k],
                });
            }
        }
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        let order = score_order(&scores);
        order
            .into_iter()
            .take(self.cfg.max_detections)
            .map(|i| out[i])
            .collect()
    }

    /// Global features of a source/target pair:
    /// shared `E_s(E_b(x))` and private `E_p(E_b(x))` for each image.
    pub fn forward_global(&self, x_s: &ImageSample, x_t: &ImageSample) -> FeatureBundle<T> {
        let mut tape = Tape::new();
        let mask = GradMask::NONE;
        let mut streams = Vec::with_capacity(2);
        for img in [x_s, x_t] {
            let x = tape.constant(self.image_tensor(img));
            let b = self.encode_base(&mut tape, x, mask);
            let s = self.encode_shared(&mut tape, b, mask);
            let p = self.encode_private(&mut tape, b, mask);
            streams.push((s, p));
        }
        FeatureBundle {
            f_sha_s: tape.value(streams[0].0).clone(),
            f_sha_t: tape.value(streams[1].0).clone(),
            f_pri_s: tape.value(streams[0].1).clone(),
            f_pri_t: tape.value(streams[1].1).clone(),
        }
    }

    /// `E_s(E_b(x))` for one image.
    pub fn shared_features(&self, img: &ImageSample) -> Tensor<T> {
        let mut tape = Tape::new();
        let x = tape.constant(self.image_tensor(img));
        let b = self.encode_base(&mut tape, x, GradMask::NONE);
        let s = self.encode_shared(&mut tape, b, GradMask::NONE);
        tape.value(s).clone()
    }

    /// `E_p(E_b(x))` for one image.
    pub fn private_features(&self, img: &ImageSample) -> Tensor<T> {
        let mut tape = Tape::new();
        let x = tape.constant(self.image_tensor(img));
        let b = self.encode_base(&mut tape, x, GradMask::NONE);
        let p = self.encode_private(&mut tape, b, GradMask::NONE);
        tape.value(p).clone()
    }
}

/// Proposal generation over a flat anchor list (see [`DetectorModel::proposals`]).
#[allow(clippy::too_many_arguments)]
pub fn propose<T: Scalar>(
    obj: &Tensor<T>,
    deltas: &Tensor<T>,
    anchors: &[BBox],
    num_anchor_types: usize,
    image_size: f64,
    pre_nms_top_n: usize,
    nms_thresh: f64,
    top_n: usize,
) -> Vec<Proposal> {
    let a = num_anchor_types;
    let hw = obj.len() / a;
    assert_eq!(
        anchors.len(),
        hw * a,
        "anchor count does not match objectness map"
    );
    let od = obj.data();
    let dd = deltas.data();
    let scores: Vec<f64> = (0..anchors.len())
        .map(|i| {
            let (loc, k) = (i / a, i % a);
            let z = od[k * hw + loc].f64();
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let mut boxes = Vec::new();
    let mut kept_scores = Vec::new();
    let mut kept_anchor = Vec::new();
    for i in score_order(&scores).into_iter() {
        if boxes.len() >= pre_nms_top_n {
            break;
        }
        let (loc, k) = (i / a, i % a);
        let d = [0, 1, 2, 3].map(|j| dd[(k * 4 + j) * hw + loc].f64());
        let b = decode(&anchors[i], d, UNIT_WEIGHTS).clip(image_size, image_size);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            boxes.push(b);
            kept_scores.push(scores[i]);
            kept_anchor.push(i);
        }
    }
    let mut out: Vec<Proposal> = nms(&boxes, &kept_scores, nms_thresh)
        .into_iter()
        .take(top_n)
        .map(|k| Proposal {
            bbox: boxes[k],
            score: kept_scores[k],
            anchor: kept_anchor[k],
        })
        .collect();
    if out.is_empty() {
        out.push(Proposal {
            bbox: BBox::new(0.0, 0.0, image_size, image_size),
            score: 0.0,
            anchor: usize::MAX,
        });
    }
    out
}

/// ROIAlign of a single box from a `C x h x w` feature (`stride` image pixels
/// per feature cell) into `C x k x k`.
pub fn roi_align<T: Scalar>(
    feature: &Tensor<T>,
    bbox: &BBox,
    stride: f64,
    out_size: usize,
) -> Tensor<T> {
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let y = tape.roi_align(f, &[bbox.to_array()], 1.0 / stride, out_size);
    let c = feature.shape()[0];
    tape.value(y).clone().reshape(&[c, out_size, out_size])
}
