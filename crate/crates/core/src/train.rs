//! Optimisation loop: paired source/target steps, momentum SGD with a
//! two-phase learning rate, warmup-then-freeze of the base encoder,
//! ablation and variant wiring, checkpoints and resumable metrics.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::detector::checkpoint::Checkpoint;
use crate::detector::targets::{roi_targets, rpn_targets, SamplingConfig};
use crate::detector::{boxes::BBox, DetectorModel, GradMask, ModelConfig, ModelError};
use crate::losses::{self, total_loss, AblationFlags, LossReport, Variant};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::synth_data::{load_dataset, DataError, Domain, ImageSample};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("leak guard: target sample {id} still carries annotations at loss computation")]
    LeakGuard { id: String },
    #[error("non-finite loss term {term} at step {iter}")]
    NonFinite { term: &'static str, iter: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

impl TrainError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            TrainError::Config { .. } | TrainError::Model(ModelError::Config(_))
        )
    }
}

fn config_err(field: &str, message: impl Into<String>) -> TrainError {
    TrainError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Every training knob, flat. Model fields are flattened in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Fraction of `total_iters` spent at `lr_phase1`.
    pub phase_split: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Source-only detection steps with a trainable base encoder, before
    /// the base encoder is frozen and adaptation starts.
    pub warmup_iters: usize,
    pub margin: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub no_di: bool,
    pub no_gtd: bool,
    pub no_isd: bool,
    pub no_ds: bool,
    pub no_tri: bool,
    pub no_intra: bool,
    pub no_inter: bool,
    pub ins_simmax: bool,
    pub ins_td: bool,
    /// Keep the triplet term from updating the global discriminator.
    pub tri_stop_grad: bool,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 7000,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            phase_split: 5.0 / 7.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_iters: 500,
            margin: losses::DEFAULT_MARGIN,
            seed: 0,
            checkpoint_every: 1000,
            no_di: false,
            no_gtd: false,
            no_isd: false,
            no_ds: false,
            no_tri: false,
            no_intra: false,
            no_inter: false,
            ins_simmax: false,
            ins_td: false,
            tri_stop_grad: false,
            model: ModelConfig::default(),
        }
    }
}

/// Named flag bundles covering the ablation and design-variant grid.
pub const PRESETS: [&str; 11] = [
    "no-da",
    "baseline",
    "ddf",
    "wo-gtd",
    "wo-isd",
    "wo-ds",
    "wo-tri",
    "wo-intra",
    "wo-inter",
    "ins-simmax",
    "ins-td",
];

impl TrainConfig {
    /// Parses flat TOML, rejecting keys that are not config fields.
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let table: toml::Table = s
            .parse()
            .map_err(|e: toml::de::Error| config_err("<file>", e.message()))?;
        let known = Self::known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(config_err(k, "unknown configuration key"));
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = known
                .iter()
                .find(|k| msg.contains(&format!("`{k}`")))
                .cloned()
                .unwrap_or_default();
            config_err(&field, msg)
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn known_keys() -> BTreeSet<String> {
        match toml::Table::try_from(TrainConfig::default()) {
            Ok(t) => t.keys().cloned().collect(),
            Err(e) => panic!("default config is not a TOML table: {e}"),
        }
    }

    /// Turns on the flags of a named preset, on top of the current ones.
    pub fn apply_preset(&mut self, name: &str) -> Result<(), TrainError> {
        match name {
            "no-da" => {
                self.no_di = true;
                self.no_gtd = true;
                self.no_isd = true;
            }
            "baseline" => {
                self.no_gtd = true;
                self.no_isd = true;
            }
            "ddf" => {}
            "wo-gtd" => self.no_gtd = true,
            "wo-isd" => self.no_isd = true,
            "wo-ds" => self.no_ds = true,
            "wo-tri" => self.no_tri = true,
            "wo-intra" => self.no_intra = true,
            "wo-inter" => self.no_inter = true,
            "ins-simmax" => {
                self.no_isd = true;
                self.ins_simmax = true;
            }
            "ins-td" => {
                self.no_isd = true;
                self.ins_td = true;
            }
            other => {
                return Err(config_err(
                    "preset",
                    format!(
                        "unknown preset {other:?}; expected one of {}",
                        PRESETS.join(", ")
                    ),
                ))
            }
        }
        Ok(())
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            no_di: self.no_di,
            no_gtd: self.no_gtd,
            no_isd: self.no_isd,
            no_ds: self.no_ds,
            no_tri: self.no_tri,
            no_intra: self.no_intra,
            no_inter: self.no_inter,
        }
    }

    pub fn variant(&self) -> Result<Variant, TrainError> {
        match (self.ins_simmax, self.ins_td) {
            (true, true) => Err(config_err(
                "ins_td",
                "ins_simmax and ins_td are mutually exclusive instance-level variants",
            )),
            (true, false) => Ok(Variant::InsSimmax),
            (false, true) => Ok(Variant::InsTd),
            (false, false) => Ok(Variant::None),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_iters == 0 {
            return Err(config_err("total_iters", "must be positive"));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase1.is_finite()) {
            return Err(config_err(
                "lr_phase1",
                format!("must be positive, got {}", self.lr_phase1),
            ));
        }
        if !(self.lr_phase2 >= 0.0 && self.lr_phase2 < self.lr_phase1) {
            return Err(config_err(
                "lr_phase2",
                format!("must be in [0, lr_phase1), got {}", self.lr_phase2),
            ));
        }
        if !(self.phase_split > 0.0 && self.phase_split < 1.0) {
            return Err(config_err(
                "phase_split",
                format!("must be in (0, 1), got {}", self.phase_split),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return Err(config_err(
                "margin",
                format!("must be in (0, 2], got {}", self.margin),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(config_err("checkpoint_every", "must be positive"));
        }
        if self.variant()? != Variant::None && !self.no_isd {
            return Err(config_err(
                if self.ins_td { "ins_td" } else { "ins_simmax" },
                "instance-level variants replace ISD; set no_isd = true",
            ));
        }
        self.model.validate().map_err(|e| match e {
            ModelError::Config(m) => config_err("model", m),
            other => TrainError::Model(other),
        })
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }
}

/// Step learning rate: `lr_phase1` for `iter < ceil(phase_split * total_iters)`,
/// `lr_phase2` afterwards.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    assert!(
        iter < cfg.total_iters,
        "iteration {iter} outside schedule of {} steps",
        cfg.total_iters
    );
    let boundary = (cfg.phase_split * cfg.total_iters as f64 - 1e-9).ceil() as usize;
    if iter < boundary {
        cfg.lr_phase1
    } else {
        cfg.lr_phase2
    }
}

/// One momentum-SGD update: `v <- mu v + g + wd theta`, `theta <- theta - lr v`.
/// A missing gradient counts as zero.
pub fn sgd_update<T: Scalar>(
    theta: &mut [T],
    velocity: &mut [T],
    grad: Option<&[T]>,
    lr: f64,
    mu: f64,
    wd: f64,
) {
    let (lr, mu, wd) = (T::of(lr), T::of(mu), T::of(wd));
    for i in 0..theta.len() {
        let g = grad.map_or(T::zero(), |g| g[i]);
        velocity[i] = mu * velocity[i] + g + wd * theta[i];
        theta[i] -= lr * velocity[i];
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded per-epoch shuffles of `0..n`, cycled.
#[derive(Debug, Clone)]
pub struct DataOrder {
    n: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

impl DataOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        assert!(n > 0, "cannot order an empty list");
        let mut o = Self {
            n,
            seed,
            epoch: usize::MAX,
            perm: Vec::new(),
        };
        o.load_epoch(0);
        o
    }

    fn load_epoch(&mut self, epoch: usize) {
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch as u64)));
        self.perm = perm;
        self.epoch = epoch;
    }

    /// Dataset index used at global position `k`.
    pub fn index(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        if epoch != self.epoch {
            self.load_epoch(epoch);
        }
        self.perm[k % self.n]
    }
}

/// Optimiser and loop position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub iter: usize,
    pub velocity: Vec<Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct StoredState {
    iter: usize,
    train_config_hash: String,
    velocity: Vec<Vec<f64>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &DetectorModel<T>) -> Self {
        let velocity = model
            .store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self { iter: 0, velocity }
    }

    fn to_json(&self, cfg: &TrainConfig) -> serde_json::Value {
        let s = StoredState {
            iter: self.iter,
            train_config_hash: cfg.hash(),
            velocity: self
                .velocity
                .iter()
                .map(|v| v.data().iter().map(|x| x.f64()).collect())
                .collect(),
        };
        serde_json::to_value(s).expect("state serializes")
    }

    fn from_json(
        v: &serde_json::Value,
        model: &DetectorModel<T>,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let s: StoredState = serde_json::from_value(v.clone())
            .map_err(|e| config_err("resume", format!("bad train state: {e}")))?;
        if s.train_config_hash != cfg.hash() {
            return Err(config_err(
                "resume",
                "checkpoint was written with a different training config",
            ));
        }
        let params = model.store.params();
        if s.velocity.len() != params.len() {
            return Err(config_err(
                "resume",
                "momentum buffers do not match the model",
            ));
        }
        let velocity = params
            .iter()
            .zip(&s.velocity)
            .map(|(p, v)| {
                if v.len() != p.value.len() {
                    return Err(config_err(
                        "resume",
                        format!("momentum buffer for {} has wrong size", p.name),
                    ));
                }
                Ok(Tensor::from_f64(p.value.shape(), v))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            iter: s.iter,
            velocity,
        })
    }
}

fn step_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, 0x7374_6570), iter as u64))
}

/// One paired step: features, every enabled loss, one SGD update.
/// Returns the report; the learning rate used is `lr_schedule(state.iter)`
/// (clamped to the last scheduled step).
pub fn train_step<T: Scalar>(
    model: &mut DetectorModel<T>,
    state: &mut TrainState<T>,
    x_s: &ImageSample,
    x_t: &ImageSample,
    cfg: &TrainConfig,
) -> Result<LossReport, TrainError> {
    if x_t.annotation_count() > 0 {
        return Err(TrainError::LeakGuard { id: x_t.id.clone() });
    }
    let iter = state.iter;
    let lr = lr_schedule(iter.min(cfg.total_iters.saturating_sub(1)), cfg);
    let flags = cfg.flags();
    let variant = cfg.variant()?;
    let warm = iter < cfg.warmup_iters;
    let mask = if warm {
        GradMask::ALL
    } else {
        GradMask::ALL.without(ParamGroup::BaseEncoder)
    };
    let sampling = SamplingConfig::default();
    let mut rng = step_rng(cfg.seed, iter);
    let mut tape = Tape::new();
    let m = &*model;

    // supervised detection on the source image
    let xs = tape.constant(m.image_tensor(x_s));
    let bs = m.encode_base(&mut tape, xs, mask);
    let ss = m.encode_shared(&mut tape, bs, mask);
    let (obj, deltas) = m.rpn_head(&mut tape, ss, mask);
    let props_s: Vec<BBox> = m
        .proposals(tape.value(obj), tape.value(deltas), m.cfg.rpn_top_n_train)
        .iter()
        .map(|p| p.bbox)
        .collect();
    let gt = x_s.annotations();
    let gt_boxes: Vec<BBox> = gt.iter().map(|a| a.bbox).collect();
    let rpn_t = rpn_targets(m.anchors(), &gt_boxes, &sampling, &mut rng);
    let roi_t = roi_targets(&props_s, gt, m.cfg.head_delta_weights, &sampling, &mut rng);
    let inst = m.instance_vectors(&mut tape, ss, &roi_t.rois, mask);
    let (cls, reg) = m.heads(&mut tape, inst, mask);
    let det = losses::detection_loss(
        &mut tape,
        obj,
        deltas,
        m.cfg.num_anchors(),
        &rpn_t,
        cls,
        reg,
        &roi_t,
    );
    let l_det = det.total(&mut tape);

    let mut terms = vec![l_det];
    let mut parts = LossReport {
        l_det: tape.scalar(l_det).f64(),
        ..Default::default()
    };
    let isd_on = flags.intra_on() || flags.inter_on();
    let need_private = flags.ds_on() || flags.tri_on() || isd_on || variant == Variant::InsTd;
    let need_target = !flags.no_di || need_private || variant != Variant::None;

    if !warm && need_target {
        let xt = tape.constant(m.image_tensor(x_t));
        let bt = m.encode_base(&mut tape, xt, mask);
        let st = m.encode_shared(&mut tape, bt, mask);
        let private = need_private.then(|| {
            let ps = m.encode_private(&mut tape, bs, mask);
            let pt = m.encode_private(&mut tape, bt, mask);
            (ps, pt)
        });

        if !flags.no_di {
            let lambda = m.cfg.grl_lambda;
            let gs = tape.grl(ss, lambda);
            let gt_ = tape.grl(st, lambda);
            let ds = m.discriminate(&mut tape, gs, mask);
            let dt = m.discriminate(&mut tape, gt_, mask);
            let l = losses::domain_ce(&mut tape, ds, dt);
            parts.l_di = tape.scalar(l).f64();
            terms.push(l);
        }

        if let Some((ps, pt)) = private {
            let tri_mask = if cfg.tri_stop_grad {
                mask.without(ParamGroup::Discriminator)
            } else {
                mask
            };
            let mut pri_preds = None;
            if flags.tri_on() {
                // shared streams pass the feature-side adaptation gradient at the
                // same strength as the reversal layer
                let lambda = m.cfg.grl_lambda;
                let (ss_in, st_in) = if lambda == 1.0 {
                    (ss, st)
                } else {
                    (tape.scale_grad(ss, lambda), tape.scale_grad(st, lambda))
                };
                let p = [ss_in, st_in, ps, pt].map(|f| m.discriminate(&mut tape, f, tri_mask));
                let l = losses::triplet(&mut tape, p[0], p[1], p[2], p[3], cfg.margin);
                parts.l_tri = tape.scalar(l).f64();
                terms.push(l);
                if tri_mask == mask {
                    pri_preds = Some((p[2], p[3]));
                }
            }
            if flags.ds_on() {
                let (a, b) = match pri_preds {
                    Some(p) => p,
                    None => (
                        m.discriminate(&mut tape, ps, mask),
                        m.discriminate(&mut tape, pt, mask),
                    ),
                };
                let l = losses::domain_ce(&mut tape, a, b);
                parts.l_ds = tape.scalar(l).f64();
                terms.push(l);
            }
        }

        if isd_on || variant != Variant::None {
            let stream_boxes = |tape: &mut Tape<T>, feat| -> Vec<BBox> {
                let (o, d) = m.rpn_head(tape, feat, mask);
                m.proposals(tape.value(o), tape.value(d), m.cfg.rpn_top_n_train)
                    .iter()
                    .map(|p| p.bbox)
                    .collect()
            };
            let boxes_st = stream_boxes(&mut tape, st);
            let i_ss = m.instance_vectors(&mut tape, ss, &props_s, mask);
            let i_st = m.instance_vectors(&mut tape, st, &boxes_st, mask);
            let mean_ss = tape.mean_rows(i_ss);
            let mean_st = tape.mean_rows(i_st);
            let pri_means = private.map(|(ps, pt)| {
                let (bps, bpt) = if m.cfg.shared_proposals {
                    (props_s.clone(), boxes_st.clone())
                } else {
                    (stream_boxes(&mut tape, ps), stream_boxes(&mut tape, pt))
                };
                let i_ps = m.instance_vectors(&mut tape, ps, &bps, mask);
                let i_pt = m.instance_vectors(&mut tape, pt, &bpt, mask);
                (tape.mean_rows(i_ps), tape.mean_rows(i_pt))
            });
            if isd_on {
                let (mps, mpt) = pri_means.expect("private streams computed for ISD");
                let (intra, inter) = losses::isd(&mut tape, [mean_ss, mean_st, mps, mpt]);
                // same adaptation strength as the shared-stream triplet gradient
                let lambda = m.cfg.grl_lambda;
                let weigh = |tape: &mut Tape<T>, x: Var| {
                    if lambda == 1.0 {
                        x
                    } else {
                        tape.scale_grad(x, lambda)
                    }
                };
                if flags.intra_on() {
                    parts.l_isd_intra = tape.scalar(intra).f64();
                    let x = weigh(&mut tape, intra);
                    terms.push(x);
                }
                if flags.inter_on() {
                    parts.l_isd_inter = tape.scalar(inter).f64();
                    let x = weigh(&mut tape, inter);
                    terms.push(x);
                }
            }
            match variant {
                Variant::None => {}
                Variant::InsSimmax => {
                    let l = losses::ins_simmax(&mut tape, mean_ss, mean_st);
                    parts.l_variant = tape.scalar(l).f64();
                    terms.push(l);
                }
                Variant::InsTd => {
                    let (mps, mpt) = pri_means.expect("private streams computed for ins-td");
                    let l = losses::ins_td(
                        m,
                        &mut tape,
                        [mean_ss, mean_st, mps, mpt],
                        mask,
                        cfg.margin,
                    );
                    parts.l_variant = tape.scalar(l).f64();
                    terms.push(l);
                }
            }
        }
    }

    let report = total_loss(parts, &flags, variant);
    if let Some(term) = report.first_non_finite() {
        return Err(TrainError::NonFinite { term, iter });
    }
    let total = tape.sum_scalars(&terms);
    let grads = tape.backward(total);
    let trainable = tape.trainable_params();
    drop(tape);
    for id in trainable {
        let g = grads.get(id).map(|g| g.data());
        let v = state.velocity[id.index()].data_mut();
        sgd_update(
            model.store.value_mut(id).data_mut(),
            v,
            g,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
    }
    state.iter += 1;
    Ok(report)
}

/// Model, optimiser state and data order for an in-memory run.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: DetectorModel<T>,
    pub state: TrainState<T>,
    source: Vec<ImageSample>,
    target: Vec<ImageSample>,
    order_s: DataOrder,
    order_t: DataOrder,
}

impl<T: Scalar> Trainer<T> {
    /// Target samples are stripped of annotations here.
    pub fn new(
        cfg: TrainConfig,
        source: Vec<ImageSample>,
        target: Vec<ImageSample>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = DetectorModel::new(cfg.model.clone(), cfg.seed)?;
        let state = TrainState::new(&model);
        Self::assemble(cfg, model, state, source, target)
    }

    pub fn resume(
        cfg: TrainConfig,
        ckpt: &Checkpoint,
        source: Vec<ImageSample>,
        target: Vec<ImageSample>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = ckpt.to_model::<T>(Some(&cfg.model))?;
        let stored = ckpt
            .train_state
            .as_ref()
            .ok_or_else(|| config_err("resume", "checkpoint has no training state"))?;
        let state = TrainState::from_json(stored, &model, &cfg)?;
        Self::assemble(cfg, model, state, source, target)
    }

    fn assemble(
        cfg: TrainConfig,
        model: DetectorModel<T>,
        state: TrainState<T>,
        source: Vec<ImageSample>,
        target: Vec<ImageSample>,
    ) -> Result<Self, TrainError> {
        if source.is_empty() {
            return Err(config_err("source", "dataset has zero source images"));
        }
        if target.is_empty() {
            return Err(config_err("target", "dataset has zero target images"));
        }
        let res = cfg.model.resolution;
        if let Some(bad) = source
            .iter()
            .chain(&target)
            .find(|s| s.width != res || s.height != res)
        {
            return Err(config_err(
                "resolution",
                format!(
                    "sample {} is {}x{}, config expects {res}x{res}",
                    bad.id, bad.width, bad.height
                ),
            ));
        }
        let target: Vec<ImageSample> = target
            .into_iter()
            .map(ImageSample::into_unlabeled)
            .collect();
        let order_s = DataOrder::new(source.len(), mix(cfg.seed, 1));
        let order_t = DataOrder::new(target.len(), mix(cfg.seed, 2));
        Ok(Self {
            cfg,
            model,
            state,
            source,
            target,
            order_s,
            order_t,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.iter >= self.cfg.total_iters
    }

    /// Runs one step; returns `(step, lr, report)`.
    pub fn step(&mut self) -> Result<(usize, f64, LossReport), TrainError> {
        let k = self.state.iter;
        let lr = lr_schedule(k.min(self.cfg.total_iters - 1), &self.cfg);
        let xs = &self.source[self.order_s.index(k)];
        let xt = &self.target[self.order_t.index(k)];
        let report = train_step(&mut self.model, &mut self.state, xs, xt, &self.cfg)?;
        Ok((k, lr, report))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.state.to_json(&self.cfg)))
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.json";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps_run: usize,
}

pub fn metrics_header() -> Vec<&'static str> {
    let mut h = vec!["step", "lr"];
    h.extend(LossReport::FIELDS);
    h
}

fn metrics_row(step: usize, lr: f64, r: &LossReport) -> Vec<String> {
    let mut row = vec![step.to_string(), format!("{lr:e}")];
    row.extend(r.values().iter().map(|v| format!("{v:e}")));
    row
}

/// Parses a metrics file back into `(step, lr, report)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, f64, LossReport)>, TrainError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |i: usize| -> Result<f64, TrainError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| io_err(path, format!("bad field {i}")))
        };
        let v: Vec<f64> = (2..12).map(num).collect::<Result<_, _>>()?;
        let report = LossReport {
            l_det: v[0],
            l_di: v[1],
            l_ds: v[2],
            l_tri: v[3],
            l_gtd: v[4],
            l_isd_intra: v[5],
            l_isd_inter: v[6],
            l_isd: v[7],
            l_variant: v[8],
            l_total: v[9],
        };
        out.push((num(0)? as usize, num(1)?, report));
    }
    Ok(out)
}

/// Source images come from `source_dir`, target images (annotations
/// dropped) from `target_dir`; the two may be the same directory.
pub fn load_domains(
    source_dir: &Path,
    target_dir: &Path,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>), TrainError> {
    let source = load_dataset(source_dir)?.domain(Domain::Source);
    let target: Vec<ImageSample> = load_dataset(target_dir)?
        .samples
        .into_iter()
        .filter(|s| s.domain == Domain::Target)
        .map(ImageSample::into_unlabeled)
        .collect();
    Ok((source, target))
}

/// Full training run on disk. With `resume`, continues from that
/// checkpoint and rewrites the metrics file from its step onward.
pub fn run_training<T: Scalar>(
    cfg: &TrainConfig,
    source_dir: &Path,
    target_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (source, target) = load_domains(source_dir, target_dir)?;
    let mut trainer = match resume {
        None => Trainer::<T>::new(cfg.clone(), source, target)?,
        Some(p) => Trainer::<T>::resume(cfg.clone(), &Checkpoint::load(p)?, source, target)?,
    };
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let start = trainer.state.iter;
    let kept = if start > 0 && metrics_path.is_file() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.0 < start)
            .collect()
    } else {
        Vec::new()
    };
    let mut wtr = csv::Writer::from_path(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    wtr.write_record(metrics_header())
        .map_err(|e| io_err(&metrics_path, e))?;
    for (k, lr, r) in &kept {
        wtr.write_record(metrics_row(*k, *lr, r))
            .map_err(|e| io_err(&metrics_path, e))?;
    }
    let t0 = std::time::Instant::now();
    while !trainer.is_done() {
        let (k, lr, report) = trainer.step()?;
        wtr.write_record(metrics_row(k, lr, &report))
            .map_err(|e| io_err(&metrics_path, e))?;
        let done = trainer.state.iter;
        if done % 100 == 0 {
            wtr.flush().map_err(|e| io_err(&metrics_path, e))?;
            log::info!(
                "step {done}/{} total {:.4} det {:.4} ({:.1} ms/step)",
                cfg.total_iters,
                report.l_total,
                report.l_det,
                t0.elapsed().as_secs_f64() * 1e3 / (done - start) as f64
            );
        }
        if done % cfg.checkpoint_every == 0 && done < cfg.total_iters {
            let p = ckpt_dir.join(format!("ckpt_{done:06}.json"));
            trainer.checkpoint().save(&p)?;
        }
    }
    wtr.flush().map_err(|e| io_err(&metrics_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_path)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics: metrics_path,
        steps_run: trainer.state.iter - start,
    })
}
