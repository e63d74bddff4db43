//! Class-specific feature extraction and the class-drop branch.
//!
//! For a class `c`, the importance map is the spatial average of
//! `d logit_c / d A`. With a 1x1 classifier that derivative is the kernel row
//! `W[c, :]` at the matching pixel and zero elsewhere, so the map is
//! `W[c, k] / (h * w)` at every position. [`importance_map`] uses that closed
//! form; [`importance_map_autodiff`] differentiates the recorded classifier
//! and exists to check it.
//!
//! Importance maps enter the training graph as constants: no gradient flows
//! from the drop branch back into the classifier through them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::Padding;
use crate::model::{Model, ModelNodes};
use crate::tensor::Tensor;

/// Everything the drop branch computes for one forward pass.
#[derive(Clone, Debug)]
pub struct DropState {
    pub importance_maps: Vec<Tensor>,
    pub class_features: Vec<Tensor>,
    pub dropped_class: Option<usize>,
    /// Mean of the surviving class features (divisor is always `|C|`).
    pub aggregated: Tensor,
    /// Output of the compensation conv.
    pub compensated: Tensor,
    pub dropped_logits: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub total_iterations: usize,
    pub iteration: usize,
    pub lambda: f32,
    pub drop_probability: f32,
    pub alpha: f32,
}

impl Schedules {
    pub fn at(iteration: usize, total_iterations: usize, alpha: f32) -> Result<Self> {
        let (lambda, drop_probability) = schedule_at(iteration, total_iterations)?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::contract(
                "schedules",
                format!("alpha must be >= 0, got {alpha}"),
            ));
        }
        Ok(Schedules {
            total_iterations,
            iteration,
            lambda,
            drop_probability,
            alpha,
        })
    }

    /// A schedule pinned at fixed values, independent of the iteration.
    pub fn fixed(lambda: f32, drop_probability: f32, alpha: f32) -> Self {
        Schedules {
            total_iterations: 0,
            iteration: 0,
            lambda,
            drop_probability,
            alpha,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f32,
    pub l_ce_drop: f32,
    pub l_seg: f32,
    pub l_sup: f32,
    pub l_total: f32,
}

/// Linear ramp shared by the loss balance and the drop probability: `t / T`.
pub fn schedule_at(t: usize, total: usize) -> Result<(f32, f32)> {
    if total == 0 {
        return Err(Error::contract(
            "schedule_at",
            "total iterations must be > 0",
        ));
    }
    if t > total {
        return Err(Error::contract(
            "schedule_at",
            format!("iteration {t} beyond total {total}"),
        ));
    }
    let r = (t as f64 / total as f64) as f32;
    Ok((r, r))
}

fn spatial_dims(a: &Tensor) -> Result<(usize, usize, usize)> {
    match *a.shape() {
        [h, w, k] | [_, h, w, k] => Ok((h, w, k)),
        ref s => Err(Error::shape(
            "importance_map",
            format!("features must be [h,w,k] or [b,h,w,k], got {s:?}"),
        )),
    }
}

fn check_class(model: &Model, c: usize) -> Result<()> {
    if c >= model.num_classes() {
        return Err(Error::InvalidClass {
            class: c,
            count: model.num_classes(),
        });
    }
    Ok(())
}

/// Closed-form importance map `S^c` with shape `[h, w, k]`.
pub fn importance_map(model: &Model, a: &Tensor, c: usize) -> Result<Tensor> {
    check_class(model, c)?;
    let (h, w, k) = spatial_dims(a)?;
    if k != model.feature_channels() {
        return Err(Error::shape(
            "importance_map",
            format!(
                "{k} feature channels, model has {}",
                model.feature_channels()
            ),
        ));
    }
    let inv_area = 1.0 / (h * w) as f32;
    let row: Vec<f32> = (0..k)
        .map(|ch| model.classifier_weight(c, ch) * inv_area)
        .collect();
    let data = row.iter().copied().cycle().take(h * w * k).collect();
    Ok(Tensor::from_parts(vec![h, w, k], data))
}

/// `S^c` by differentiating `sum_{u,v} logit_c / (h*w)` through the recorded
/// classifier. Same shape as `a`.
pub fn importance_map_autodiff(model: &Model, a: &Tensor, c: usize) -> Result<Tensor> {
    check_class(model, c)?;
    let (h, w, _) = spatial_dims(a)?;
    let mut g = Graph::new();
    let nodes = model.bind_frozen(&mut g);
    let ai = g.param(a.clone());
    let logits = model.classify_node(&mut g, &nodes, ai)?;
    let mut mask = Tensor::zeros(&[h, w, model.num_classes()]);
    for px in mask.data_mut().chunks_exact_mut(model.num_classes()) {
        px[c] = 1.0;
    }
    let picked = g.hadamard_const(logits, &mask)?;
    let total = g.sum(picked)?;
    let avg = g.scale(total, 1.0 / (h * w) as f32)?;
    let mut grads = g.backward(avg)?;
    grads.take(ai).ok_or_else(|| {
        Error::contract(
            "importance_map_autodiff",
            "no gradient reached the features",
        )
    })
}

/// `A^c = ReLU(A ⊙ S^c)`. `s` matches `a`, or one batch item of it.
pub fn class_feature(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ai = g.input(a.clone());
    let prod = g.hadamard_const(ai, s)?;
    let out = g.relu(prod)?;
    Ok(g.value(out).clone())
}

/// With probability `p` draws a class uniformly from `0..class_count`.
/// Always consumes one uniform draw, plus one more when a class is dropped.
pub fn sample_drop(rng: &mut impl Rng, class_count: usize, p: f32) -> Result<Option<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(
            "sample_drop",
            format!("drop probability {p} outside [0,1]"),
        ));
    }
    if class_count == 0 {
        return Err(Error::contract("sample_drop", "no classes"));
    }
    let u: f64 = rng.gen();
    if u < p as f64 {
        Ok(Some(rng.gen_range(0..class_count)))
    } else {
        Ok(None)
    }
}

/// `(1/|C|) * sum_{c != z} A^c`.
pub fn aggregate(class_features: &[Tensor], z: Option<usize>) -> Result<Tensor> {
    let first = class_features
        .first()
        .ok_or_else(|| Error::shape("aggregate", "no class features"))?;
    let n = class_features.len();
    if let Some(z) = z {
        if z >= n {
            return Err(Error::InvalidClass { class: z, count: n });
        }
    }
    let mut acc = vec![0.0f32; first.len()];
    for (c, f) in class_features.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                "aggregate",
                format!("{:?} vs {:?}", f.shape(), first.shape()),
            ));
        }
        if Some(c) == z {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / n as f32;
    let data = acc.into_iter().map(|v| v * inv).collect();
    Ok(Tensor::from_parts(first.shape().to_vec(), data))
}

/// Graph nodes of the drop branch.
#[derive(Clone, Copy, Debug)]
pub struct DropNodes {
    pub aggregated: NodeId,
    pub compensated: NodeId,
    pub logits: NodeId,
}

/// Records the drop branch on top of the feature node `a`:
/// class features from the constant maps `s_maps`, aggregation without `z`,
/// compensation conv, then the shared classifier.
pub fn drop_branch_node(
    g: &mut Graph,
    model: &Model,
    nodes: &ModelNodes,
    a: NodeId,
    s_maps: &[Tensor],
    z: Option<usize>,
) -> Result<DropNodes> {
    let n = model.num_classes();
    if s_maps.len() != n {
        return Err(Error::shape(
            "drop_forward",
            format!("{} importance maps for {n} classes", s_maps.len()),
        ));
    }
    if let Some(z) = z {
        check_class(model, z)?;
    }
    let aggregated = g.class_aggregate(a, s_maps, z, 1.0 / n as f32)?;
    let (h, w, _) = spatial_dims(g.value(a))?;
    let gain = model.config.compensation_gain.unwrap_or((h * w * n) as f32);
    let gained = g.scale(aggregated, gain)?;
    let (ck, cb) = nodes.compensation;
    let compensated = g.conv2d(gained, ck, cb, Padding::Same)?;
    let logits = model.classify_node(g, nodes, compensated)?;
    Ok(DropNodes {
        aggregated,
        compensated,
        logits,
    })
}

pub fn importance_maps(model: &Model, a: &Tensor) -> Result<Vec<Tensor>> {
    (0..model.num_classes())
        .map(|c| importance_map(model, a, c))
        .collect()
}

/// Runs the full drop branch on features `a` outside of training.
pub fn drop_forward(model: &Model, a: &Tensor, z: Option<usize>) -> Result<DropState> {
    let s_maps = importance_maps(model, a)?;
    let class_features = s_maps
        .iter()
        .map(|s| class_feature(a, s))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let nodes = model.bind_frozen(&mut g);
    let ai = g.input(a.clone());
    let out = drop_branch_node(&mut g, model, &nodes, ai, &s_maps, z)?;
    Ok(DropState {
        importance_maps: s_maps,
        class_features,
        dropped_class: z,
        aggregated: g.value(out.aggregated).clone(),
        compensated: g.value(out.compensated).clone(),
        dropped_logits: g.value(out.logits).clone(),
    })
}

/// Unmasked weighted cross-entropy (all-ones weights give the plain loss).
pub fn loss_ce(logits: &Tensor, labels: &[u8], class_weights: &[f32]) -> Result<f32> {
    let mut g = Graph::new();
    let li = g.input(logits.clone());
    let l = g.cross_entropy(li, labels, class_weights, None)?;
    Ok(g.value(l).item())
}

/// Cross-entropy with pixels labeled `z` zeroed but kept in the denominator.
pub fn loss_ce_drop(
    logits: &Tensor,
    labels: &[u8],
    z: Option<usize>,
    class_weights: &[f32],
) -> Result<f32> {
    let mut g = Graph::new();
    let li = g.input(logits.clone());
    let l = g.cross_entropy(li, labels, class_weights, z)?;
    Ok(g.value(l).item())
}

pub fn loss_seg(l_ce: f32, l_ce_drop: f32, lambda: f32) -> Result<f32> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(
            "loss_seg",
            format!("lambda {lambda} outside [0,1]"),
        ));
    }
    Ok((1.0 - lambda) * l_ce + lambda * l_ce_drop)
}

/// Mean predicted probability of the dropped class; zero when nothing is
/// dropped.
pub fn loss_sup(dropped_logits: &Tensor, z: Option<usize>) -> Result<f32> {
    let Some(z) = z else { return Ok(0.0) };
    let mut g = Graph::new();
    let li = g.input(dropped_logits.clone());
    let l = g.channel_prob_mean(li, z)?;
    Ok(g.value(l).item())
}

pub fn loss_total(l_seg: f32, l_sup: f32, alpha: f32) -> Result<f32> {
    if !(alpha >= 0.0) {
        return Err(Error::contract(
            "loss_total",
            format!("alpha {alpha} must be >= 0"),
        ));
    }
    Ok(l_seg + alpha * l_sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ConvLayer, ModelConfig};
    use crate::tensor::IGNORE_LABEL;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(classes: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            widths: vec![4, 5],
            ..ModelConfig::new(classes)
        };
        init_model(&cfg, seed).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unit_row_gives_constant_sixteenth() {
        let mut m = small_model(3, 1);
        let mut w = Tensor::zeros(&[1, 1, 5, 3]);
        let off = w.offset(&[0, 0, 0, 1]);
        w.data_mut()[off] = 1.0;
        m.classifier.kernel = w;
        let a = random(&[4, 4, 5], 2);
        let s = importance_map_autodiff(&m, &a, 1).unwrap();
        for px in s.data().chunks(5) {
            assert!((px[0] - 1.0 / 16.0).abs() < 1e-9);
            assert!(px[1..].iter().all(|&v| v == 0.0));
        }
        assert!(s.max_abs_diff(&importance_map(&m, &a, 1).unwrap()) <= 1e-9);
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let mut m = small_model(3, 1);
        m.classifier.kernel = Tensor::zeros(&[1, 1, 5, 3]);
        let a = random(&[3, 3, 5], 3);
        assert!(importance_map(&m, &a, 0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(importance_map_autodiff(&m, &a, 0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_matches_autodiff_on_batched_features() {
        let m = small_model(4, 5);
        let a = random(&[2, 5, 6, 5], 6);
        for c in 0..4 {
            let analytic = importance_map(&m, &a, c).unwrap();
            let auto = importance_map_autodiff(&m, &a, c).unwrap();
            for b in 0..2 {
                assert!(auto.index_outer(b).max_abs_diff(&analytic) <= 1e-6);
            }
        }
        assert!(matches!(
            importance_map(&m, &a, 4),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn class_feature_closed_forms() {
        let a = Tensor::new(vec![2], vec![2.0, 2.0]).unwrap();
        let s = Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap();
        assert_eq!(class_feature(&a, &s).unwrap().data(), [0.0, 6.0]);

        let a = random(&[3, 3, 2], 7).map(f32::abs);
        let zero = Tensor::zeros(&[3, 3, 2]);
        assert!(class_feature(&a, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let s = random(&[3, 3, 2], 8).map(f32::abs);
        let got = class_feature(&a, &s).unwrap();
        for ((g, x), y) in got.data().iter().zip(a.data()).zip(s.data()) {
            assert_eq!(*g, x * y);
        }
        assert!(class_feature(&a, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn sample_drop_endpoints_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_drop(&mut rng, 6, 0.0).unwrap().is_none()));
        assert!((0..1000).all(|_| sample_drop(&mut rng, 6, 1.0).unwrap().is_some()));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_drop(&mut rng, 6, 0.5).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert!(sample_drop(&mut rng, 6, 1.5).is_err());
    }

    #[test]
    fn aggregate_keeps_full_divisor() {
        let t = random(&[2, 2, 3], 9);
        let three = vec![t.clone(), t.clone(), t.clone()];
        let got = aggregate(&three, Some(1)).unwrap();
        for (g, v) in got.data().iter().zip(t.data()) {
            assert!((g - 2.0 / 3.0 * v).abs() < 1e-6);
        }
        let all = aggregate(&three, None).unwrap();
        assert!(all.max_abs_diff(&t) < 1e-6);

        let other = random(&[2, 2, 3], 10);
        let got = aggregate(&[t.clone(), other.clone()], Some(0)).unwrap();
        for (g, v) in got.data().iter().zip(other.data()) {
            assert!((g - v / 2.0).abs() < 1e-7);
        }
    }

    #[test]
    fn dropping_a_zero_feature_is_a_no_op() {
        let mut m = small_model(3, 11);
        // class 2 has an all-zero classifier row
        for k in 0..5 {
            let off = m.classifier.kernel.offset(&[0, 0, k, 2]);
            m.classifier.kernel.data_mut()[off] = 0.0;
        }
        let a = m.extract_features(&random(&[4, 4, 3], 12)).unwrap();
        let keep = drop_forward(&m, &a, None).unwrap();
        let drop = drop_forward(&m, &a, Some(2)).unwrap();
        assert_eq!(keep.dropped_logits, drop.dropped_logits);
    }

    #[test]
    fn single_class_identity_compensation_reproduces_classifier() {
        let cfg = ModelConfig {
            widths: vec![4],
            compensation_gain: Some(1.0),
            ..ModelConfig::new(1)
        };
        let m = init_model(&cfg, 13).unwrap();
        let a = m.extract_features(&random(&[3, 4, 3], 14)).unwrap();
        let state = drop_forward(&m, &a, None).unwrap();
        let expect = m.classify(&state.class_features[0]).unwrap();
        assert!(state.dropped_logits.max_abs_diff(&expect) < 1e-6);
        assert!(state
            .class_features
            .iter()
            .all(|f| f.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn drop_branch_differs_from_main_branch() {
        let m = small_model(3, 15);
        let x = random(&[4, 4, 3], 16);
        let (a, y) = m.forward(&x).unwrap();
        let state = drop_forward(&m, &a, None).unwrap();
        assert!(state.dropped_logits.max_abs_diff(&y) > 1e-3);
    }

    #[test]
    fn loss_closed_forms() {
        let uniform = Tensor::zeros(&[2, 2, 4]);
        let labels = [0u8, 1, 2, 3];
        assert!((loss_ce(&uniform, &labels, &[1.0; 4]).unwrap() - 4f32.ln()).abs() < 1e-6);

        let logits = random(&[2, 2, 3], 17);
        let y = [0u8, 1, 0, 1];
        assert_eq!(
            loss_ce_drop(&logits, &y, Some(2), &[1.0; 3]).unwrap(),
            loss_ce(&logits, &y, &[1.0; 3]).unwrap()
        );
        assert_eq!(
            loss_ce_drop(&logits, &[2; 4], Some(2), &[1.0; 3]).unwrap(),
            0.0
        );

        let mut perturbed = logits.clone();
        for c in 0..3 {
            let off = perturbed.offset(&[0, 1, c]);
            perturbed.data_mut()[off] += 5.0 * (c as f32 + 1.0);
        }
        assert_eq!(
            loss_ce_drop(&logits, &y, Some(1), &[1.0; 3]).unwrap(),
            loss_ce_drop(&perturbed, &y, Some(1), &[1.0; 3]).unwrap()
        );

        assert_eq!(loss_seg(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(loss_seg(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(loss_seg(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(loss_seg(2.0, 4.0, 1.5).is_err());

        assert!((loss_sup(&Tensor::zeros(&[3, 3, 5]), Some(2)).unwrap() - 0.2).abs() < 1e-6);
        let mut suppressed = Tensor::zeros(&[2, 2, 3]);
        for px in suppressed.data_mut().chunks_mut(3) {
            px[1] = -80.0;
        }
        assert!(loss_sup(&suppressed, Some(1)).unwrap() < 1e-30);
        assert_eq!(loss_sup(&uniform, None).unwrap(), 0.0);

        assert_eq!(loss_total(1.0, 0.1, 0.0).unwrap(), 1.0);
        assert!((loss_total(1.0, 0.1, 10.0).unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(loss_total(1.0, 0.0, 10.0).unwrap(), 1.0);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let logits = random(&[1, 3, 2], 18);
        let with_ignore = loss_ce(&logits, &[0, IGNORE_LABEL, 1], &[1.0, 1.0]).unwrap();
        let sub = Tensor::new(
            vec![1, 2, 2],
            [&logits.data()[0..2], &logits.data()[4..6]].concat(),
        )
        .unwrap();
        let without = loss_ce(&sub, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!((with_ignore - without).abs() < 1e-6);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(schedule_at(0, 100).unwrap(), (0.0, 0.0));
        assert_eq!(schedule_at(100, 100).unwrap(), (1.0, 1.0));
        assert_eq!(schedule_at(50, 100).unwrap(), (0.5, 0.5));
        assert!(schedule_at(101, 100).is_err());
        assert!(schedule_at(0, 0).is_err());
    }

    #[test]
    fn compensation_layer_is_identity_at_init() {
        let m = small_model(2, 19);
        let want = ConvLayer {
            kernel: {
                let mut t = Tensor::zeros(&[1, 1, 5, 5]);
                for c in 0..5 {
                    let o = t.offset(&[0, 0, c, c]);
                    t.data_mut()[o] = 1.0;
                }
                t
            },
            bias: Tensor::zeros(&[5]),
        };
        assert_eq!(m.compensation, want);
    }
}
