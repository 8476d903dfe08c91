//! Central finite-difference checks of every differentiable op and loss at
//! 64-bit precision, 20 random instances each. Each check returns the first
//! failure as an error message.

use ddf_core::autograd::{Tape, Var};
use ddf_core::detector::boxes::BBox;
use ddf_core::detector::targets::{RoiTargets, RpnTargets};
use ddf_core::losses;
use ddf_core::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;
/// Below this magnitude gradients are compared absolutely.
const FLOOR: f64 = 1e-6;
const INSTANCES: usize = 20;
/// Elements perturbed per input tensor (all of them when smaller).
const MAX_PROBED: usize = 48;

/// Every check, by name.
pub type Check = fn() -> Result<(), String>;

pub const SUITE: &[(&str, Check)] = &[
    ("conv2d", conv2d),
    ("relu", relu),
    ("maxpool", maxpool),
    ("linear", linear),
    ("roi_align", roi_align),
    ("reductions_and_arithmetic", reductions_and_arithmetic),
    (
        "grl_composition_flips_and_scales",
        grl_composition_flips_and_scales,
    ),
    ("grl_half_example", grl_half_example),
    ("loss_di_through_grl", loss_di_through_grl),
    ("loss_ds", loss_ds),
    ("loss_tri", loss_tri),
    ("softmax_distance_op", softmax_distance_op),
    ("loss_isd", loss_isd),
    ("loss_det_components", loss_det_components),
    ("cross_entropy_ops", cross_entropy_ops),
    (
        "scale_grad_composition_scales",
        scale_grad_composition_scales,
    ),
];

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor64 {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor64::from_vec(shape, v)
}

fn eval(inputs: &[Tensor64], f: &Build) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let out = f(&mut t, &vars);
    t.scalar(out)
}

fn analytic(inputs: &[Tensor64], f: &Build) -> Vec<Tensor64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let out = f(&mut t, &vars);
    let g = t.backward_all(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, x)| {
            g[v.index()]
                .clone()
                .unwrap_or_else(|| Tensor64::zeros(x.shape()))
        })
        .collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between `scale * grad(f_analytic)` and the
/// central difference of `f_numeric`, over a seeded subset of elements.
fn max_error(
    inputs: &[Tensor64],
    f_analytic: &Build,
    f_numeric: &Build,
    scale: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let grads = analytic(inputs, f_analytic);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let n = x.len();
        let idx: Vec<usize> = if n <= MAX_PROBED {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, MAX_PROBED).into_vec()
        };
        for i in idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let fd = (eval(&plus, f_numeric) - eval(&minus, f_numeric)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k].data()[i], scale[k] * fd));
        }
    }
    worst
}

fn check(
    name: &str,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor64>,
    f: &Build,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for i in 0..INSTANCES {
        let inputs = instance(&mut rng);
        let ones = vec![1.0; inputs.len()];
        let e = max_error(&inputs, f, f, &ones, &mut rng);
        ensure(e < TOL, || {
            format!("{name}: instance {i} relative error {e:e}")
        })?;
    }
    Ok(())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Dot product with a fixed random vector, turning any node into a scalar
/// with a generic gradient.
fn probe(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let n = t.value(v).len();
    let row = t.reshape(v, &[1, n]);
    let w = randn(&mut ChaCha8Rng::seed_from_u64(seed), &[n, 1], 1.0);
    let w = t.constant(w);
    let b = t.constant(Tensor64::zeros(&[1]));
    t.linear(row, w, b)
}

/// Rejects draws that sit within `gap` of zero (ReLU and hinge kinks).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor64 {
    let mut x = randn(rng, shape, 1.0);
    for v in x.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 {
                -gap - v.abs()
            } else {
                gap + v.abs()
            };
        }
    }
    x
}

pub fn conv2d() -> Result<(), String> {
    for pad in [0, 1] {
        check(
            &format!("conv2d pad {pad}"),
            |r| {
                vec![
                    randn(r, &[3, 6, 5], 1.0),
                    randn(r, &[4, 3, 3, 3], 0.5),
                    randn(r, &[4], 0.5),
                ]
            },
            &move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], pad);
                probe(t, y, 1)
            },
        )?;
    }
    Ok(())
}

pub fn relu() -> Result<(), String> {
    check(
        "relu",
        |r| vec![away_from_zero(r, &[2, 4, 4], 1e-3)],
        &|t, v| {
            let y = t.relu(v[0]);
            probe(t, y, 2)
        },
    )?;
    Ok(())
}

pub fn maxpool() -> Result<(), String> {
    check("maxpool2", |r| vec![randn(r, &[2, 6, 6], 1.0)], &|t, v| {
        let y = t.maxpool2(v[0]);
        probe(t, y, 3)
    })?;
    Ok(())
}

pub fn linear() -> Result<(), String> {
    check(
        "linear",
        |r| {
            vec![
                randn(r, &[5, 7], 1.0),
                randn(r, &[7, 3], 0.5),
                randn(r, &[3], 0.5),
            ]
        },
        &|t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            probe(t, y, 4)
        },
    )?;
    Ok(())
}

pub fn roi_align() -> Result<(), String> {
    let mut box_rng = ChaCha8Rng::seed_from_u64(99);
    let boxes: Vec<Vec<[f64; 4]>> = (0..INSTANCES)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let x1 = box_rng.gen_range(0.0..40.0);
                    let y1 = box_rng.gen_range(0.0..40.0);
                    [
                        x1,
                        y1,
                        x1 + box_rng.gen_range(4.0..24.0),
                        y1 + box_rng.gen_range(4.0..24.0),
                    ]
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, b) in boxes.iter().enumerate() {
        let inputs = vec![randn(&mut rng, &[2, 8, 8], 1.0)];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.roi_align(v[0], b, 1.0 / 8.0, 3);
            probe(t, y, 5)
        };
        let e = max_error(&inputs, &f, &f, &[1.0], &mut rng);
        ensure(e < TOL, || {
            format!("roi_align: instance {i} relative error {e:e}")
        })?;
    }
    Ok(())
}

pub fn reductions_and_arithmetic() -> Result<(), String> {
    check("mean_rows", |r| vec![randn(r, &[4, 6], 1.0)], &|t, v| {
        let y = t.mean_rows(v[0]);
        probe(t, y, 6)
    })?;
    check(
        "spatial_mean",
        |r| vec![randn(r, &[3, 4, 5], 1.0)],
        &|t, v| {
            let y = t.spatial_mean(v[0]);
            probe(t, y, 7)
        },
    )?;
    check(
        "add sub scale",
        |r| vec![randn(r, &[6], 1.0), randn(r, &[6], 1.0)],
        &|t, v| {
            let a = t.add(v[0], v[1]);
            let s = t.sub(a, v[1]);
            let s = t.scale(s, 1.7);
            let s = t.add_const(s, 0.3);
            let m = t.add(s, v[1]);
            probe(t, m, 8)
        },
    )?;
    Ok(())
}

pub fn grl_composition_flips_and_scales() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..INSTANCES {
        let lambda = rng.gen_range(0.0..2.0);
        let inputs = vec![randn(&mut rng, &[2, 3, 3], 1.0)];
        let with = |t: &mut Tape<f64>, v: &[Var]| {
            let g = t.grl(v[0], lambda);
            probe(t, g, 9)
        };
        let without = |t: &mut Tape<f64>, v: &[Var]| probe(t, v[0], 9);
        let e = max_error(&inputs, &with, &without, &[-lambda], &mut rng);
        ensure(e < TOL, || {
            format!("grl: instance {i} (lambda {lambda}) relative error {e:e}")
        })?;
    }
    Ok(())
}

pub fn grl_half_example() -> Result<(), String> {
    // sum(grl(x, 0.5)^2) at x = (1, 2); the square comes from the quadratic
    // zone of smooth-L1: 0.5 (y/4)^2 summed, times 32
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let g = t.grl(v[0], 0.5);
        let q = t.scale(g, 0.25);
        let s = t.smooth_l1(q, &[0, 1], &[0.0, 0.0], 1.0);
        t.scale(s, 32.0)
    };
    let x = vec![Tensor64::from_vec(&[2], vec![1.0, 2.0])];
    let g = analytic(&x, &f);
    ensure(g[0].data() == [-1.0, -2.0], || {
        format!("grl 0.5 gradient {:?}", g[0].data())
    })?;
    let plain = |t: &mut Tape<f64>, v: &[Var]| {
        let q = t.scale(v[0], 0.25);
        let s = t.smooth_l1(q, &[0, 1], &[0.0, 0.0], 1.0);
        t.scale(s, 32.0)
    };
    for i in 0..2 {
        let mut p = x.clone();
        p[0].data_mut()[i] += STEP;
        let mut m = x.clone();
        m[0].data_mut()[i] -= STEP;
        let fd = -0.5 * (eval(&p, &plain) - eval(&m, &plain)) / (2.0 * STEP);
        ensure((fd - g[0].data()[i]).abs() < 1e-6, || {
            format!("grl 0.5 finite difference {fd}")
        })?;
    }
    Ok(())
}

pub fn loss_di_through_grl() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..INSTANCES {
        let lambda = rng.gen_range(0.1..1.5);
        let inputs = vec![
            randn(&mut rng, &[3, 4, 4], 1.0),
            randn(&mut rng, &[3, 4, 4], 1.0),
            randn(&mut rng, &[2, 3, 3, 3], 0.5),
            randn(&mut rng, &[2], 0.5),
        ];
        let build = |grl: bool| {
            move |t: &mut Tape<f64>, v: &[Var]| {
                let (fs, ft) = if grl {
                    (t.grl(v[0], lambda), t.grl(v[1], lambda))
                } else {
                    (v[0], v[1])
                };
                let ps = t.conv2d(fs, v[2], v[3], 1);
                let pt = t.conv2d(ft, v[2], v[3], 1);
                losses::domain_ce(t, ps, pt)
            }
        };
        // features see the flipped, scaled gradient; the discriminator sees the plain one
        let e = max_error(
            &inputs,
            &build(true),
            &build(false),
            &[-lambda, -lambda, 1.0, 1.0],
            &mut rng,
        );
        ensure(e < TOL, || {
            format!("l_di: instance {i} relative error {e:e}")
        })?;
    }
    Ok(())
}

pub fn loss_ds() -> Result<(), String> {
    check(
        "l_ds",
        |r| vec![randn(r, &[2, 3, 3], 2.0), randn(r, &[2, 3, 3], 2.0)],
        &|t, v| losses::domain_ce(t, v[0], v[1]),
    )?;
    Ok(())
}

fn tri_instance(rng: &mut ChaCha8Rng, m: f64) -> Vec<Tensor64> {
    loop {
        let p: Vec<Tensor64> = (0..4).map(|_| randn(rng, &[2, 2, 3], 1.5)).collect();
        let d = |a: &Tensor64, b: &Tensor64| losses::softmax_distance(a, b);
        let h1 = d(&p[0], &p[1]) - d(&p[0], &p[2]) + m;
        let h2 = d(&p[0], &p[1]) - d(&p[1], &p[3]) + m;
        if h1.abs() > 1e-3 && h2.abs() > 1e-3 {
            return p;
        }
    }
}

pub fn loss_tri() -> Result<(), String> {
    for m in [0.25, 0.0, 1.0] {
        check(
            &format!("l_tri m {m}"),
            |r| tri_instance(r, m),
            &move |t, v| losses::triplet(t, v[0], v[1], v[2], v[3], m),
        )?;
    }
    Ok(())
}

pub fn softmax_distance_op() -> Result<(), String> {
    check(
        "softmax_distance",
        |r| vec![randn(r, &[2, 3, 2], 1.0), randn(r, &[2, 3, 2], 1.0)],
        &|t, v| t.softmax_distance(v[0], v[1]),
    )?;
    Ok(())
}

fn isd_instance(rng: &mut ChaCha8Rng) -> Vec<Tensor64> {
    (0..4).map(|k| randn(rng, &[2 + k, 6], 1.0)).collect()
}

pub fn loss_isd() -> Result<(), String> {
    let means = |t: &mut Tape<f64>, v: &[Var]| losses::instance_means(t, [v[0], v[1], v[2], v[3]]);
    check("l_isd_intra", isd_instance, &move |t, v| {
        let m = means(t, v);
        losses::isd(t, m).0
    })?;
    check("l_isd_inter", isd_instance, &move |t, v| {
        let m = means(t, v);
        losses::isd(t, m).1
    })?;
    check("ins_simmax", isd_instance, &move |t, v| {
        let m = means(t, v);
        losses::ins_simmax(t, m[0], m[1])
    })?;
    Ok(())
}

/// Random detection targets whose regression residuals stay clear of the
/// smooth-L1 transition at |r| = 1.
fn det_instance(rng: &mut ChaCha8Rng) -> (Vec<Tensor64>, RpnTargets, RoiTargets) {
    let (a, h, w, n, c) = (3, 4, 4, 6, 3);
    let obj = randn(rng, &[a, h, w], 1.0);
    let deltas = randn(rng, &[4 * a, h, w], 1.0);
    let cls = randn(rng, &[n, c + 1], 1.0);
    let reg = randn(rng, &[n, 4 * c], 1.0);
    let clear = |rng: &mut ChaCha8Rng, base: f64| loop {
        let t: f64 = StandardNormal.sample(rng);
        if ((base - t).abs() - 1.0).abs() > 1e-3 {
            return t;
        }
    };
    let anchors = rand::seq::index::sample(rng, a * h * w, 10).into_vec();
    let labels: Vec<f64> = (0..10).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
    let hw = h * w;
    let fg = anchors[..4]
        .iter()
        .map(|&i| {
            let mut t = [0.0; 4];
            for (j, v) in t.iter_mut().enumerate() {
                *v = clear(rng, deltas.data()[((i % a) * 4 + j) * hw + i / a]);
            }
            (i, t)
        })
        .collect();
    let rpn = RpnTargets {
        anchors,
        labels,
        fg,
    };
    let roi_labels: Vec<usize> = (0..n).map(|i| if i < 3 { 1 + i % c } else { 0 }).collect();
    let roi_fg = (0..3)
        .map(|row| {
            let class = roi_labels[row] - 1;
            let mut t = [0.0; 4];
            for (j, v) in t.iter_mut().enumerate() {
                *v = clear(rng, reg.data()[row * 4 * c + 4 * class + j]);
            }
            (row, class, t)
        })
        .collect();
    let roi = RoiTargets {
        rois: vec![BBox::new(0.0, 0.0, 1.0, 1.0); n],
        labels: roi_labels,
        fg: roi_fg,
    };
    (vec![obj, deltas, cls, reg], rpn, roi)
}

pub fn loss_det_components() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..INSTANCES {
        let (inputs, rpn, roi) = det_instance(&mut rng);
        for part in 0..5 {
            let f = |t: &mut Tape<f64>, v: &[Var]| {
                let p = losses::detection_loss(t, v[0], v[1], 3, &rpn, v[2], v[3], &roi);
                match part {
                    0 => p.rpn_cls,
                    1 => p.rpn_reg,
                    2 => p.head_cls,
                    3 => p.head_reg,
                    _ => p.total(t),
                }
            };
            let e = max_error(&inputs, &f, &f, &[1.0; 4], &mut rng);
            ensure(e < TOL, || {
                format!("l_det part {part}: instance {i} relative error {e:e}")
            })?;
        }
    }
    Ok(())
}

pub fn cross_entropy_ops() -> Result<(), String> {
    check(
        "cross_entropy_map",
        |r| vec![randn(r, &[3, 2, 2], 1.5)],
        &|t, v| t.cross_entropy_map(v[0], 2),
    )?;
    check(
        "cross_entropy_rows",
        |r| vec![randn(r, &[4, 3], 1.5)],
        &|t, v| t.cross_entropy_rows(v[0], &[0, 2, 1, 1]),
    )?;
    check("bce_logits", |r| vec![randn(r, &[8], 1.5)], &|t, v| {
        t.bce_logits(v[0], &[0, 3, 5, 7], &[1.0, 0.0, 1.0, 0.0])
    })?;
    Ok(())
}

pub fn scale_grad_composition_scales() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..INSTANCES {
        let lambda = rng.gen_range(0.0..2.0);
        let inputs = vec![randn(&mut rng, &[2, 3, 3], 1.0)];
        let with = |t: &mut Tape<f64>, v: &[Var]| {
            let g = t.scale_grad(v[0], lambda);
            probe(t, g, 10)
        };
        let without = |t: &mut Tape<f64>, v: &[Var]| probe(t, v[0], 10);
        let e = max_error(&inputs, &with, &without, &[lambda], &mut rng);
        ensure(e < TOL, || {
            format!("scale_grad: instance {i} (lambda {lambda}) relative error {e:e}")
        })?;
    }
    Ok(())
}
