//! Finite-difference gradient checks against an independent f64 evaluator.
//!
//! Each check builds a scalar on a [`Graph`], takes its analytic gradient,
//! and compares sampled coordinates with central differences of the same
//! scalar recomputed by plain nested loops in 64-bit floats. The reference
//! code below shares nothing with the graph kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dropclass::{importance_maps, Schedules};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::Padding;
use crate::model::{init_model, Model, ModelConfig};
use crate::tensor::{Tensor, IGNORE_LABEL};
use crate::trainer::{build_objective, Mode};

pub const DEFAULT_STEP: f64 = 1e-3;
/// Step for whole-network objectives. Their ReLUs put kinks within 1e-3 of
/// a few sampled coordinates in networks this small, where a wide central
/// difference averages two slopes; the f64 reference keeps a narrow step
/// free of cancellation.
pub const OBJECTIVE_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-3;
pub const PASS_FRACTION: f64 = 0.95;
pub const MIN_COORDS: usize = 30;
/// Gradients smaller than this are compared absolutely; f32 forward values
/// cannot resolve a relative error of 1e-3 below it.
pub const ABS_FLOOR: f64 = 1e-4;

/// `(f(t + h e_i) - f(t - h e_i)) / (2h)`, evaluated in f64. `f` receives
/// the perturbed point as f64 values in `t`'s layout.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> f64,
    t: &Tensor,
    coordinate: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract(
            "finite_difference_gradient",
            format!("step must be > 0, got {step}"),
        ));
    }
    if coordinate >= t.len() {
        return Err(Error::contract(
            "finite_difference_gradient",
            format!(
                "coordinate {coordinate} out of range for {} values",
                t.len()
            ),
        ));
    }
    let mut x: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    let x0 = x[coordinate];
    let (hi, lo) = (x0 + step, x0 - step);
    x[coordinate] = hi;
    let f_hi = f(&x);
    x[coordinate] = lo;
    let f_lo = f(&x);
    Ok((f_hi - f_lo) / (hi - lo))
}

/// Relative error with an absolute floor on the scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub within_tolerance: usize,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn pass_fraction(&self) -> f64 {
        self.within_tolerance as f64 / self.coordinates as f64
    }

    pub fn passed(&self) -> bool {
        self.coordinates >= MIN_COORDS && self.pass_fraction() >= PASS_FRACTION
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

fn compare(name: &str, pairs: &[(f64, f64)]) -> CheckResult {
    let errs: Vec<f64> = pairs.iter().map(|&(a, n)| relative_error(a, n)).collect();
    CheckResult {
        name: name.to_string(),
        coordinates: pairs.len(),
        within_tolerance: errs.iter().filter(|&&e| e <= REL_TOLERANCE).count(),
        max_relative_error: errs.iter().copied().fold(0.0, f64::max),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("finite")
}

fn sample_coords(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}

// ---- f64 reference evaluator ----

struct Shape4 {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
}

fn ref_conv(
    x: &[f64],
    xs: &Shape4,
    k: &[f64],
    kdims: [usize; 4],
    bias: &[f64],
    same: bool,
) -> (Vec<f64>, Shape4) {
    let [kh, kw, cin, cout] = kdims;
    assert_eq!(cin, xs.c);
    let (ph, pw) = if same { (kh / 2, kw / 2) } else { (0, 0) };
    let oh = xs.h + 2 * ph + 1 - kh;
    let ow = xs.w + 2 * pw + 1 - kw;
    let mut out = vec![0.0; xs.b * oh * ow * cout];
    for b in 0..xs.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = oy as isize + dy as isize - ph as isize;
                            let ix = ox as isize + dx as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv =
                                    x[((b * xs.h + iy as usize) * xs.w + ix as usize) * cin + ci];
                                let kv = k[((dy * kw + dx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    (
        out,
        Shape4 {
            b: xs.b,
            h: oh,
            w: ow,
            c: cout,
        },
    )
}

fn ref_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn ref_softmax(px: &[f64]) -> Vec<f64> {
    let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = px.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn ref_cross_entropy(
    logits: &[f64],
    c: usize,
    labels: &[u8],
    weights: &[f32],
    masked: Option<usize>,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        count += 1;
        if Some(y as usize) == masked {
            continue;
        }
        let probs = ref_softmax(&logits[p * c..(p + 1) * c]);
        total += -(weights[y as usize] as f64) * probs[y as usize].ln();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn ref_prob_mean(logits: &[f64], c: usize, class: usize) -> f64 {
    let pixels = logits.len() / c;
    let mut total = 0.0;
    for p in 0..pixels {
        total += ref_softmax(&logits[p * c..(p + 1) * c])[class];
    }
    total / pixels as f64
}

/// Parameter tensors of `model` as f64, in [`Model::params`] order.
struct RefParams<'a> {
    values: Vec<&'a [f64]>,
    dims: Vec<Vec<usize>>,
}

fn split_params<'a>(model: &Model, flat: &'a [f64]) -> RefParams<'a> {
    let mut values = Vec::new();
    let mut dims = Vec::new();
    let mut off = 0;
    for p in model.params() {
        values.push(&flat[off..off + p.len()]);
        dims.push(p.shape().to_vec());
        off += p.len();
    }
    RefParams { values, dims }
}

fn kdims(d: &[usize]) -> [usize; 4] {
    [d[0], d[1], d[2], d[3]]
}

/// The per-mode training objective in f64 with the importance maps held at
/// the given constants.
#[allow(clippy::too_many_arguments)]
fn ref_objective(
    model: &Model,
    flat: &[f64],
    images: &Tensor,
    labels: &[u8],
    weights: &[f32],
    mode: Mode,
    sched: &Schedules,
    z: Option<usize>,
    s_maps: &[Vec<f64>],
) -> f64 {
    let p = split_params(model, flat);
    let [b, h, w, c0] = *images.shape() else {
        panic!("batched images")
    };
    let mut a: Vec<f64> = images.data().iter().map(|&v| v as f64).collect();
    let mut shape = Shape4 { b, h, w, c: c0 };
    let layers = model.extractor.len();
    for l in 0..layers {
        let (out, s) = ref_conv(
            &a,
            &shape,
            p.values[2 * l],
            kdims(&p.dims[2 * l]),
            p.values[2 * l + 1],
            true,
        );
        a = ref_relu(&out);
        shape = s;
    }
    let (ck, cb) = (2 * layers, 2 * layers + 1);
    let (mk, mb) = (2 * layers + 2, 2 * layers + 3);
    let n = model.num_classes();
    let (logits, _) = ref_conv(
        &a,
        &shape,
        p.values[ck],
        kdims(&p.dims[ck]),
        p.values[cb],
        true,
    );
    let ce = ref_cross_entropy(&logits, n, labels, weights, None);
    let lambda = sched.lambda as f64;
    match mode {
        Mode::Baseline => ce,
        Mode::AblationLabelDrop => {
            (1.0 - lambda) * ce + lambda * ref_cross_entropy(&logits, n, labels, weights, z)
        }
        Mode::Dropclass | Mode::AblationNoSup => {
            let k = shape.c;
            let item = h * w * k;
            let mut agg = vec![0.0; a.len()];
            for (cls, s) in s_maps.iter().enumerate() {
                if Some(cls) == z {
                    continue;
                }
                for (i, v) in agg.iter_mut().enumerate() {
                    let prod = a[i] * s[i % item];
                    if prod > 0.0 {
                        *v += prod;
                    }
                }
            }
            let gain = model
                .config
                .compensation_gain
                .map_or((h * w * n) as f64, |g| g as f64);
            let scaled: Vec<f64> = agg.iter().map(|v| v / n as f64 * gain).collect();
            let (comp, cs) = ref_conv(
                &scaled,
                &shape,
                p.values[mk],
                kdims(&p.dims[mk]),
                p.values[mb],
                true,
            );
            let (dl, _) = ref_conv(
                &comp,
                &cs,
                p.values[ck],
                kdims(&p.dims[ck]),
                p.values[cb],
                true,
            );
            let ce_drop = ref_cross_entropy(&dl, n, labels, weights, z);
            let alpha = if mode == Mode::Dropclass {
                sched.alpha as f64
            } else {
                0.0
            };
            let sup = z.map_or(0.0, |z| ref_prob_mean(&dl, n, z));
            (1.0 - lambda) * ce + lambda * ce_drop + alpha * sup
        }
    }
}

// ---- individual checks ----

fn check_conv2d(rng: &mut ChaCha8Rng, coords: usize) -> Result<CheckResult> {
    let x = random_tensor(rng, &[2, 5, 5, 3], -1.0, 1.0);
    let k = random_tensor(rng, &[3, 3, 3, 4], -0.5, 0.5);
    let b = random_tensor(rng, &[4], -0.5, 0.5);
    let r = random_tensor(rng, &[2, 5, 5, 4], -1.0, 1.0);

    let mut g = Graph::new();
    let (xi, ki, bi) = (g.param(x.clone()), g.param(k.clone()), g.param(b.clone()));
    let y = g.conv2d(xi, ki, bi, Padding::Same)?;
    let weighted = g.hadamard_const(y, &r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;

    let xs = || Shape4 {
        b: 2,
        h: 5,
        w: 5,
        c: 3,
    };
    let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (xd, kd, bd, rd) = (f64s(&x), f64s(&k), f64s(&b), f64s(&r));
    let objective = |xv: &[f64], kv: &[f64], bv: &[f64]| {
        let (out, _) = ref_conv(xv, &xs(), kv, [3, 3, 3, 4], bv, true);
        out.iter().zip(&rd).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut pairs = Vec::new();
    let per = coords.div_ceil(2);
    for i in sample_coords(rng, x.len(), per) {
        let n = finite_difference_gradient(|v| objective(v, &kd, &bd), &x, i, DEFAULT_STEP)?;
        pairs.push((grads.get(xi).expect("input grad").data()[i] as f64, n));
    }
    for i in sample_coords(rng, k.len(), per) {
        let n = finite_difference_gradient(|v| objective(&xd, v, &bd), &k, i, DEFAULT_STEP)?;
        pairs.push((grads.get(ki).expect("kernel grad").data()[i] as f64, n));
    }
    for i in 0..b.len() {
        let n = finite_difference_gradient(|v| objective(&xd, &kd, v), &b, i, DEFAULT_STEP)?;
        pairs.push((grads.get(bi).expect("bias grad").data()[i] as f64, n));
    }
    Ok(compare("conv2d", &pairs))
}

fn check_relu(rng: &mut ChaCha8Rng, coords: usize) -> Result<CheckResult> {
    let x = random_tensor(rng, &[6, 6, 4], -1.0, 1.0);
    let r = random_tensor(rng, &[6, 6, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let y = g.relu(xi)?;
    let weighted = g.hadamard_const(y, &r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let rd: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    let mut pairs = Vec::new();
    for i in sample_coords(rng, x.len(), coords) {
        let n = finite_difference_gradient(
            |v| ref_relu(v).iter().zip(&rd).map(|(a, b)| a * b).sum(),
            &x,
            i,
            DEFAULT_STEP,
        )?;
        pairs.push((grads.get(xi).expect("grad").data()[i] as f64, n));
    }
    Ok(compare("relu", &pairs))
}

fn check_softmax(rng: &mut ChaCha8Rng, coords: usize) -> Result<CheckResult> {
    let c = 5;
    let x = random_tensor(rng, &[4, 4, c], -2.0, 2.0);
    let r = random_tensor(rng, &[4, 4, c], -1.0, 1.0);
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let y = g.softmax_channels(xi)?;
    let weighted = g.hadamard_const(y, &r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let rd: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    let f = |v: &[f64]| -> f64 {
        v.chunks_exact(c)
            .zip(rd.chunks_exact(c))
            .map(|(px, w)| {
                ref_softmax(px)
                    .iter()
                    .zip(w)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    };
    let mut pairs = Vec::new();
    for i in sample_coords(rng, x.len(), coords) {
        let n = finite_difference_gradient(f, &x, i, DEFAULT_STEP)?;
        pairs.push((grads.get(xi).expect("grad").data()[i] as f64, n));
    }
    Ok(compare("softmax_channels", &pairs))
}

fn check_cross_entropy(rng: &mut ChaCha8Rng, coords: usize) -> Result<CheckResult> {
    let c = 4;
    let x = random_tensor(rng, &[2, 4, 4, c], -2.0, 2.0);
    let labels: Vec<u8> = (0..32)
        .map(|i| {
            if i % 9 == 4 {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..c as u8)
            }
        })
        .collect();
    let weights = [1.0, 2.5, 0.5, 1.5];
    let mut pairs = Vec::new();
    for masked in [None, Some(2)] {
        let mut g = Graph::new();
        let xi = g.param(x.clone());
        let loss = g.cross_entropy(xi, &labels, &weights, masked)?;
        let grads = g.backward(loss)?;
        for i in sample_coords(rng, x.len(), coords.div_ceil(2)) {
            let n = finite_difference_gradient(
                |v| ref_cross_entropy(v, c, &labels, &weights, masked),
                &x,
                i,
                DEFAULT_STEP,
            )?;
            pairs.push((grads.get(xi).expect("grad").data()[i] as f64, n));
        }
    }
    Ok(compare("cross_entropy", &pairs))
}

fn check_prob_mean(rng: &mut ChaCha8Rng, coords: usize) -> Result<CheckResult> {
    let c = 4;
    let x = random_tensor(rng, &[2, 3, 3, c], -2.0, 2.0);
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let loss = g.channel_prob_mean(xi, 1)?;
    let grads = g.backward(loss)?;
    let mut pairs = Vec::new();
    for i in sample_coords(rng, x.len(), coords) {
        let n = finite_difference_gradient(|v| ref_prob_mean(v, c, 1), &x, i, DEFAULT_STEP)?;
        pairs.push((grads.get(xi).expect("grad").data()[i] as f64, n));
    }
    Ok(compare("channel_prob_mean", &pairs))
}

/// Conv, ReLU, conv on a random input; parameter gradients of a weighted
/// sum at the default step.
fn check_conv_net(rng: &mut ChaCha8Rng, coords: usize) -> Result<CheckResult> {
    let x = random_tensor(rng, &[2, 6, 6, 3], 0.0, 1.0);
    let k1 = random_tensor(rng, &[3, 3, 3, 6], -0.5, 0.5);
    let b1 = random_tensor(rng, &[6], -0.1, 0.1);
    let k2 = random_tensor(rng, &[3, 3, 6, 4], -0.5, 0.5);
    let b2 = random_tensor(rng, &[4], -0.1, 0.1);
    let r = random_tensor(rng, &[2, 6, 6, 4], -1.0, 1.0);
    let params = [&k1, &b1, &k2, &b2];

    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let ids: Vec<_> = params.iter().map(|p| g.param((*p).clone())).collect();
    let h = g.conv2d(xi, ids[0], ids[1], Padding::Same)?;
    let h = g.relu(h)?;
    let y = g.conv2d(h, ids[2], ids[3], Padding::Same)?;
    let weighted = g.hadamard_const(y, &r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;

    let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (xd, rd) = (f64s(&x), f64s(&r));
    let base: Vec<Vec<f64>> = params.iter().map(|p| f64s(p)).collect();
    let net = |vals: &[&[f64]]| {
        let (h, hs) = ref_conv(
            &xd,
            &Shape4 {
                b: 2,
                h: 6,
                w: 6,
                c: 3,
            },
            vals[0],
            [3, 3, 3, 6],
            vals[1],
            true,
        );
        let (y, _) = ref_conv(&ref_relu(&h), &hs, vals[2], [3, 3, 6, 4], vals[3], true);
        y.iter().zip(&rd).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut pairs = Vec::new();
    for (which, p) in params.iter().enumerate() {
        let take = if p.shape().len() == 1 {
            p.len()
        } else {
            coords.div_ceil(2)
        };
        for i in sample_coords(rng, p.len(), take) {
            let numeric = finite_difference_gradient(
                |v| {
                    let mut vals: Vec<&[f64]> = base.iter().map(Vec::as_slice).collect();
                    vals[which] = v;
                    net(&vals)
                },
                p,
                i,
                DEFAULT_STEP,
            )?;
            pairs.push((
                grads.get(ids[which]).expect("param grad").data()[i] as f64,
                numeric,
            ));
        }
    }
    Ok(compare("conv_net", &pairs))
}

/// Small model with every parameter moved off its initial value, so biases
/// and the identity compensation conv are exercised too.
fn perturbed_model(rng: &mut ChaCha8Rng, classes: usize) -> Result<Model> {
    let mut cfg = ModelConfig::new(classes);
    cfg.widths = vec![3, 4];
    let mut model = init_model(&cfg, rng.gen())?;
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Ok(model)
}

/// Gradient of the full training objective with respect to every parameter
/// tensor, importance maps held constant on both sides.
pub fn check_objective(rng: &mut ChaCha8Rng, mode: Mode, coords: usize) -> Result<CheckResult> {
    let n = 4;
    let model = perturbed_model(rng, n)?;
    let images = random_tensor(rng, &[2, 5, 5, 3], 0.0, 1.0);
    let labels: Vec<u8> = (0..50)
        .map(|i| {
            if i % 11 == 3 {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..n as u8)
            }
        })
        .collect();
    let weights = [1.0, 1.5, 0.75, 2.0];
    let sched = Schedules::fixed(0.5, 1.0, 10.0);
    let z = if mode == Mode::Baseline {
        None
    } else {
        Some(1)
    };

    let mut g = Graph::new();
    let nodes = model.bind(&mut g);
    let x = g.input(images.clone());
    let obj = build_objective(
        &mut g, &model, &nodes, x, &labels, &weights, mode, &sched, z,
    )?;
    let mut grads = g.backward(obj.loss)?;
    let analytic: Vec<f32> = nodes
        .all()
        .into_iter()
        .zip(model.params())
        .flat_map(|(id, p)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
                .into_data()
        })
        .collect();

    let features = model.extract_features(&images.index_outer(0))?;
    let s_maps: Vec<Vec<f64>> = importance_maps(&model, &features)?
        .iter()
        .map(|s| s.data().iter().map(|&v| v as f64).collect())
        .collect();
    let flat_data: Vec<f32> = model
        .params()
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    let flat = Tensor::new(vec![flat_data.len()], flat_data)?;

    // stratify so every parameter tensor is sampled
    let mut picks = Vec::new();
    let mut off = 0;
    let tensors = model.params().len();
    for p in model.params() {
        for i in sample_coords(rng, p.len(), coords.div_ceil(tensors).max(2)) {
            picks.push(off + i);
        }
        off += p.len();
    }
    let f = |v: &[f64]| {
        ref_objective(
            &model, v, &images, &labels, &weights, mode, &sched, z, &s_maps,
        )
    };
    let mut pairs = Vec::with_capacity(picks.len());
    for i in picks {
        let numeric = finite_difference_gradient(f, &flat, i, OBJECTIVE_STEP)?;
        pairs.push((analytic[i] as f64, numeric));
    }
    Ok(compare(&format!("objective[{}]", mode.as_str()), &pairs))
}

/// The 1x1 classifier's summed logit for class `c` has derivative `W[c,k]`
/// with respect to feature channel `k` at any pixel. Returns the largest
/// deviation over every class, channel and sampled pixel.
pub fn classifier_weight_identity(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = perturbed_model(rng, 4)?;
    let k = model.feature_channels();
    let a = random_tensor(rng, &[3, 3, k], 0.0, 1.0);
    let kernel: Vec<f64> = model
        .classifier
        .kernel
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let bias: Vec<f64> = model
        .classifier
        .bias
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut worst = 0.0f64;
    for c in 0..4 {
        let f = |v: &[f64]| {
            let (out, _) = ref_conv(
                v,
                &Shape4 {
                    b: 1,
                    h: 3,
                    w: 3,
                    c: k,
                },
                &kernel,
                [1, 1, k, 4],
                &bias,
                true,
            );
            out.chunks_exact(4).map(|px| px[c]).sum::<f64>()
        };
        for i in sample_coords(rng, a.len(), 8) {
            let d = finite_difference_gradient(f, &a, i, DEFAULT_STEP)?;
            worst = worst.max((d - model.classifier_weight(c, i % k) as f64).abs());
        }
    }
    Ok(worst)
}

/// Every check at `coords` sampled coordinates (at least [`MIN_COORDS`]).
pub fn run_suite(seed: u64, coords: usize) -> Result<GradCheckReport> {
    let coords = coords.max(MIN_COORDS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        check_conv2d(&mut rng, coords)?,
        check_relu(&mut rng, coords)?,
        check_softmax(&mut rng, coords)?,
        check_cross_entropy(&mut rng, coords)?,
        check_prob_mean(&mut rng, coords)?,
        check_conv_net(&mut rng, coords)?,
    ];
    for mode in [
        Mode::Baseline,
        Mode::Dropclass,
        Mode::AblationNoSup,
        Mode::AblationLabelDrop,
    ] {
        checks.push(check_objective(&mut rng, mode, coords)?);
    }
    Ok(GradCheckReport { checks })
}
