//! Training objectives: detection, adversarial global alignment, global
//! triplet disentanglement (GTD), instance similarity disentanglement (ISD)
//! and the instance-level design variants.
//!
//! Each objective has a tape builder (for training) and a value-only wrapper
//! over plain tensors (for inspection and tests). The wrappers run the same
//! tape code on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::autograd::Var;
use crate::detector::targets::{RoiTargets, RpnTargets};
use crate::detector::{DetectorModel, GradMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Triplet margin `m`.
pub const DEFAULT_MARGIN: f64 = 0.25;

/// Per-step loss values. Disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_det: f64,
    pub l_di: f64,
    pub l_ds: f64,
    pub l_tri: f64,
    pub l_gtd: f64,
    pub l_isd_intra: f64,
    pub l_isd_inter: f64,
    pub l_isd: f64,
    /// The active instance-level variant term (`ins-simmax` or `ins-td`).
    pub l_variant: f64,
    pub l_total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 10] = [
        "l_det",
        "l_di",
        "l_ds",
        "l_tri",
        "l_gtd",
        "l_isd_intra",
        "l_isd_inter",
        "l_isd",
        "l_variant",
        "l_total",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.l_det,
            self.l_di,
            self.l_ds,
            self.l_tri,
            self.l_gtd,
            self.l_isd_intra,
            self.l_isd_inter,
            self.l_isd,
            self.l_variant,
            self.l_total,
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Drop the adversarial global alignment term (source-only training).
    pub no_di: bool,
    pub no_gtd: bool,
    pub no_isd: bool,
    pub no_ds: bool,
    pub no_tri: bool,
    pub no_intra: bool,
    pub no_inter: bool,
}

impl AblationFlags {
    pub fn ds_on(&self) -> bool {
        !self.no_gtd && !self.no_ds
    }

    pub fn tri_on(&self) -> bool {
        !self.no_gtd && !self.no_tri
    }

    pub fn intra_on(&self) -> bool {
        !self.no_isd && !self.no_intra
    }

    pub fn inter_on(&self) -> bool {
        !self.no_isd && !self.no_inter
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    None,
    InsSimmax,
    InsTd,
}

/// Unweighted sum of the enabled parts. Disabled parts are zeroed.
pub fn total_loss(parts: LossReport, flags: &AblationFlags, variant: Variant) -> LossReport {
    let l_di = if flags.no_di { 0.0 } else { parts.l_di };
    let l_ds = if flags.ds_on() { parts.l_ds } else { 0.0 };
    let l_tri = if flags.tri_on() { parts.l_tri } else { 0.0 };
    let l_isd_intra = if flags.intra_on() {
        parts.l_isd_intra
    } else {
        0.0
    };
    let l_isd_inter = if flags.inter_on() {
        parts.l_isd_inter
    } else {
        0.0
    };
    let l_variant = if variant == Variant::None {
        0.0
    } else {
        parts.l_variant
    };
    let l_gtd = l_ds + l_tri;
    let l_isd = l_isd_intra + l_isd_inter;
    LossReport {
        l_det: parts.l_det,
        l_di,
        l_ds,
        l_tri,
        l_gtd,
        l_isd_intra,
        l_isd_inter,
        l_isd,
        l_variant,
        l_total: parts.l_det + l_di + l_gtd + l_isd + l_variant,
    }
}

// ---- tape builders -------------------------------------------------------

/// Source maps labelled 0, target maps labelled 1, summed spatial-mean CE.
/// Used for both the adversarial term (inputs behind a GRL) and the
/// domain-specific term (no GRL).
pub fn domain_ce<T: Scalar>(tape: &mut Tape<T>, pred_s: Var, pred_t: Var) -> Var {
    let a = tape.cross_entropy_map(pred_s, 0);
    let b = tape.cross_entropy_map(pred_t, 1);
    tape.add(a, b)
}

/// `0.5 * (max(d(ss,st) - d(ss,ps) + m, 0) + max(d(ss,st) - d(st,pt) + m, 0))`.
pub fn triplet<T: Scalar>(tape: &mut Tape<T>, ss: Var, st: Var, ps: Var, pt: Var, m: f64) -> Var {
    let d_shared = tape.softmax_distance(ss, st);
    let d_s = tape.softmax_distance(ss, ps);
    let d_t = tape.softmax_distance(st, pt);
    let hinge = |tape: &mut Tape<T>, d_neg: Var| {
        let diff = tape.sub(d_shared, d_neg);
        let shifted = tape.add_const(diff, T::of(m));
        tape.relu(shifted)
    };
    let h1 = hinge(tape, d_s);
    let h2 = hinge(tape, d_t);
    let sum = tape.add(h1, h2);
    tape.scale(sum, T::of(0.5))
}

/// ROI-mean vectors of the four instance streams (`N_k x D` each).
pub fn instance_means<T: Scalar>(tape: &mut Tape<T>, streams: [Var; 4]) -> [Var; 4] {
    streams.map(|v| tape.mean_rows(v))
}

/// `(intra, inter)` from ROI-mean vectors ordered `[sha_s, sha_t, pri_s, pri_t]`.
pub fn isd<T: Scalar>(tape: &mut Tape<T>, means: [Var; 4]) -> (Var, Var) {
    let [ss, st, ps, pt] = means;
    let a = tape.cosine_sim(ss, ps);
    let b = tape.cosine_sim(st, pt);
    let intra = tape.add(a, b);
    let inter = tape.cosine_sim(ps, pt);
    (intra, inter)
}

/// `1 - sim(sha_s, sha_t)` on ROI-mean vectors.
pub fn ins_simmax<T: Scalar>(tape: &mut Tape<T>, sha_s: Var, sha_t: Var) -> Var {
    let s = tape.cosine_sim(sha_s, sha_t);
    let neg = tape.scale(s, -T::one());
    tape.add_const(neg, T::one())
}

/// The global GTD machinery applied to instance-discriminator predictions:
/// adversarial CE on shared predictions (already behind a GRL), plain CE on
/// private predictions, and the triplet on the non-reversed predictions.
/// Prediction maps are `2 x 1 x 1`, ordered `[sha_s, sha_t, pri_s, pri_t]`.
pub fn ins_td_from_predictions<T: Scalar>(
    tape: &mut Tape<T>,
    adv_shared: [Var; 2],
    preds: [Var; 4],
    m: f64,
) -> Var {
    let adv = domain_ce(tape, adv_shared[0], adv_shared[1]);
    let ds = domain_ce(tape, preds[2], preds[3]);
    let tri = triplet(tape, preds[0], preds[1], preds[2], preds[3], m);
    tape.sum_scalars(&[adv, ds, tri])
}

/// Full `ins-td` term through the model's instance discriminator.
pub fn ins_td<T: Scalar>(
    model: &DetectorModel<T>,
    tape: &mut Tape<T>,
    means: [Var; 4],
    mask: GradMask,
    m: f64,
) -> Var {
    let row = |tape: &mut Tape<T>, v: Var| {
        let d = tape.value(v).len();
        tape.reshape(v, &[1, d])
    };
    let rows = means.map(|v| row(tape, v));
    let lambda = model.cfg.grl_lambda;
    let adv_in = [tape.grl(rows[0], lambda), tape.grl(rows[1], lambda)];
    let adv = adv_in.map(|v| model.instance_discriminate(tape, v, mask));
    let preds = rows.map(|v| model.instance_discriminate(tape, v, mask));
    ins_td_from_predictions(tape, adv, preds, m)
}

/// Detection loss components as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct DetParts {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
}

impl DetParts {
    pub fn total<T: Scalar>(&self, tape: &mut Tape<T>) -> Var {
        tape.sum_scalars(&[self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg])
    }
}

/// RPN binary CE and smooth-L1 over sampled anchors, head CE over `C+1`
/// classes and class-specific smooth-L1 over sampled ROIs. Regression sums
/// are divided by the size of the sampled set.
///
/// `obj` is `A x h x w` and `deltas` `4A x h x w` with anchor index
/// `(y * w + x) * A + a`; `cls` is `N x (C+1)` and `reg` `N x 4C`.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    obj: Var,
    deltas: Var,
    num_anchor_types: usize,
    rpn: &RpnTargets,
    cls: Var,
    reg: Var,
    roi: &RoiTargets,
) -> DetParts {
    let a = num_anchor_types;
    let hw = tape.value(obj).len() / a;
    let obj_idx: Vec<usize> = rpn.anchors.iter().map(|&i| (i % a) * hw + i / a).collect();
    let obj_t: Vec<T> = rpn.labels.iter().map(|&l| T::of(l)).collect();
    let rpn_cls = tape.bce_logits(obj, &obj_idx, &obj_t);

    let mut d_idx = Vec::new();
    let mut d_t = Vec::new();
    for &(i, t) in &rpn.fg {
        for (j, &v) in t.iter().enumerate() {
            d_idx.push(((i % a) * 4 + j) * hw + i / a);
            d_t.push(T::of(v));
        }
    }
    let rpn_reg = tape.smooth_l1(deltas, &d_idx, &d_t, rpn.anchors.len().max(1) as f64);

    let head_cls = tape.cross_entropy_rows(cls, &roi.labels);
    let width = tape.value(reg).shape()[1];
    let mut r_idx = Vec::new();
    let mut r_t = Vec::new();
    for &(row, class, t) in &roi.fg {
        for (j, &v) in t.iter().enumerate() {
            r_idx.push(row * width + 4 * class + j);
            r_t.push(T::of(v));
        }
    }
    let head_reg = tape.smooth_l1(reg, &r_idx, &r_t, roi.rois.len().max(1) as f64);
    DetParts {
        rpn_cls,
        rpn_reg,
        head_cls,
        head_reg,
    }
}

// ---- value-level wrappers -----------------------------------------------

fn eval_scalar<T: Scalar>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars);
    tape.scalar(out).f64()
}

/// Spatial-mean squared distance between channel softmaxes of two
/// `2 x h x w` logit maps.
pub fn softmax_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape()[0], 2, "softmax_distance expects two channels");
    eval_scalar(&[a, b], |t, v| t.softmax_distance(v[0], v[1]))
}

pub fn loss_di<T: Scalar>(pred_sha_s: &Tensor<T>, pred_sha_t: &Tensor<T>) -> f64 {
    eval_scalar(&[pred_sha_s, pred_sha_t], |t, v| domain_ce(t, v[0], v[1]))
}

pub fn loss_ds<T: Scalar>(pred_pri_s: &Tensor<T>, pred_pri_t: &Tensor<T>) -> f64 {
    eval_scalar(&[pred_pri_s, pred_pri_t], |t, v| domain_ce(t, v[0], v[1]))
}

pub fn loss_tri<T: Scalar>(
    ss: &Tensor<T>,
    st: &Tensor<T>,
    ps: &Tensor<T>,
    pt: &Tensor<T>,
    m: f64,
) -> f64 {
    eval_scalar(&[ss, st, ps, pt], |t, v| {
        triplet(t, v[0], v[1], v[2], v[3], m)
    })
}

pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    crate::autograd::cosine_value(a, b).f64()
}

/// `(l_intra, l_inter)` from four `N_k x D` instance matrices ordered
/// `[sha_s, sha_t, pri_s, pri_t]`.
pub fn loss_isd<T: Scalar>(streams: [&Tensor<T>; 4]) -> (f64, f64) {
    let mut tape = Tape::new();
    let vars = streams.map(|t| tape.constant(t.clone()));
    let means = instance_means(&mut tape, vars);
    let (intra, inter) = isd(&mut tape, means);
    (tape.scalar(intra).f64(), tape.scalar(inter).f64())
}

pub fn variant_ins_simmax<T: Scalar>(sha_s: &Tensor<T>, sha_t: &Tensor<T>) -> f64 {
    eval_scalar(&[sha_s, sha_t], |t, v| {
        let m = instance_means(t, [v[0], v[1], v[0], v[1]]);
        ins_simmax(t, m[0], m[1])
    })
}

pub fn smooth_l1<T: Scalar>(x: T) -> f64 {
    crate::autograd::smooth_l1_value(x).f64()
}
