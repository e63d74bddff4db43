//! Training loops: plain cross-entropy, the class-drop objective, and the two
//! ablations, all sharing one SGD-with-momentum step.
//!
//! Two independent ChaCha streams come from the master seed: one orders the
//! data, the other draws dropped classes. Baseline and class-drop runs with
//! the same seed therefore see the same batches.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{duplication_indices, median_frequency_weights, pixel_frequencies, Dataset};
use crate::dropclass::{
    drop_branch_node, importance_maps, loss_seg, loss_total, sample_drop, LossBreakdown, Schedules,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{init_model, Model, ModelConfig, ModelNodes};
use crate::tensor::{LabelMap, Tensor};

const DATA_STREAM: u64 = 1;
const DROP_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Dropclass,
    /// Class-drop objective without the suppression term.
    AblationNoSup,
    /// Drop draws only mask the dropped class's labels on the main logits;
    /// no drop branch.
    AblationLabelDrop,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Dropclass => "dropclass",
            Mode::AblationNoSup => "ablation_no_sup",
            Mode::AblationLabelDrop => "ablation_label_drop",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "dropclass" => Ok(Mode::Dropclass),
            "ablation_no_sup" => Ok(Mode::AblationNoSup),
            "ablation_label_drop" => Ok(Mode::AblationLabelDrop),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected baseline, dropclass, ablation_no_sup or ablation_label_drop)"
            ))),
        }
    }

    fn draws_classes(self) -> bool {
        self != Mode::Baseline
    }

    /// Runs with the drop branch need longer to converge, so they default to
    /// twice the baseline length; label dropping alone trains like baseline.
    pub fn default_iterations(self) -> usize {
        match self {
            Mode::Baseline | Mode::AblationLabelDrop => 3000,
            Mode::Dropclass | Mode::AblationNoSup => 6000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub batch_size: usize,
    /// Initial rate; decays linearly to zero at the last step.
    pub learning_rate: f32,
    pub momentum: f32,
    /// Suppression weight; unused by baseline and the no-suppression ablation.
    pub alpha: f32,
    /// Median-frequency class weights in the cross-entropy terms.
    pub reweighting: bool,
    /// Samples containing this class are visited twice per epoch.
    pub resample_class: Option<usize>,
    pub seed: u64,
    pub model: ModelConfig,
    /// Where a non-finite step dumps its batch.
    pub dump_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: Mode, num_classes: usize) -> Self {
        TrainConfig {
            mode,
            iterations: mode.default_iterations(),
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            alpha: 10.0,
            reweighting: false,
            resample_class: None,
            seed: 0,
            model: ModelConfig::new(num_classes),
            dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if let Some(c) = self.resample_class {
            if c >= self.model.num_classes {
                return bad(format!(
                    "resample_class {c} out of range for {} classes",
                    self.model.num_classes
                ));
            }
        }
        self.model.validate()
    }

    /// Suppression weight actually applied in this mode.
    pub fn effective_alpha(&self) -> f32 {
        match self.mode {
            Mode::Dropclass => self.alpha,
            _ => 0.0,
        }
    }

    pub fn learning_rate_at(&self, t: usize) -> f32 {
        let frac = 1.0 - t as f64 / self.iterations as f64;
        (self.learning_rate as f64 * frac.max(0.0)) as f32
    }
}

/// A stacked batch: images `[B, h, w, 3]` and labels flattened in the same
/// order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::contract("train_step", "batch must be non-empty"));
        }
        let images: Vec<&Tensor> = indices.iter().map(|&i| &dataset.samples[i].image).collect();
        let mut labels =
            Vec::with_capacity(indices.len() * dataset.samples[indices[0]].label.data().len());
        for &i in indices {
            labels.extend_from_slice(dataset.samples[i].label.data());
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The scalar training objective recorded on a graph, plus its parts.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
}

fn weighted(g: &mut Graph, node: NodeId, coef: f32) -> Result<NodeId> {
    if coef == 1.0 {
        Ok(node)
    } else {
        g.scale(node, coef)
    }
}

/// Records the per-mode objective for one batch on `g`.
///
/// Terms whose coefficient is zero are left out of the loss node, so with
/// the ramp at zero the class-drop objective differentiates exactly like the
/// baseline one. Drop-branch values are still recorded for the trace.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    g: &mut Graph,
    model: &Model,
    nodes: &ModelNodes,
    images: NodeId,
    labels: &[u8],
    class_weights: &[f32],
    mode: Mode,
    sched: &Schedules,
    z: Option<usize>,
) -> Result<Objective> {
    let a = model.features_node(g, nodes, images)?;
    let logits = model.classify_node(g, nodes, a)?;
    let ce = g.cross_entropy(logits, labels, class_weights, None)?;
    let l_ce = g.value(ce).item();
    let lambda = sched.lambda;

    match mode {
        Mode::Baseline => Ok(Objective {
            loss: ce,
            breakdown: LossBreakdown {
                l_ce,
                l_ce_drop: 0.0,
                l_seg: l_ce,
                l_sup: 0.0,
                l_total: l_ce,
            },
        }),
        Mode::AblationLabelDrop => {
            let masked = g.cross_entropy(logits, labels, class_weights, z)?;
            let l_ce_drop = g.value(masked).item();
            let loss = compose(g, &[(ce, 1.0 - lambda), (masked, lambda)])?;
            let l_seg = loss_seg(l_ce, l_ce_drop, lambda)?;
            Ok(Objective {
                loss,
                breakdown: LossBreakdown {
                    l_ce,
                    l_ce_drop,
                    l_seg,
                    l_sup: 0.0,
                    l_total: l_seg,
                },
            })
        }
        Mode::Dropclass | Mode::AblationNoSup => {
            let s_maps = importance_maps(model, g.value(a))?;
            let branch = drop_branch_node(g, model, nodes, a, &s_maps, z)?;
            let ce_drop = g.cross_entropy(branch.logits, labels, class_weights, z)?;
            let l_ce_drop = g.value(ce_drop).item();
            let alpha = if mode == Mode::Dropclass {
                sched.alpha
            } else {
                0.0
            };
            let mut terms = vec![(ce, 1.0 - lambda), (ce_drop, lambda)];
            let mut l_sup = 0.0;
            if let Some(z) = z {
                let sup = g.channel_prob_mean(branch.logits, z)?;
                l_sup = g.value(sup).item();
                terms.push((sup, alpha));
            }
            let loss = compose(g, &terms)?;
            let l_seg = loss_seg(l_ce, l_ce_drop, lambda)?;
            Ok(Objective {
                loss,
                breakdown: LossBreakdown {
                    l_ce,
                    l_ce_drop,
                    l_seg,
                    l_sup,
                    l_total: loss_total(l_seg, l_sup, alpha)?,
                },
            })
        }
    }
}

/// Weighted sum of scalar nodes, skipping zero coefficients.
fn compose(g: &mut Graph, terms: &[(NodeId, f32)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(node, coef) in terms {
        if coef == 0.0 {
            continue;
        }
        let term = weighted(g, node, coef)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        // every coefficient zero: a constant zero loss
        None => {
            let first = terms[0].0;
            g.scale(first, 0.0)
        }
    }
}

/// `v <- m*v + g; p <- p - lr*v` for every parameter.
pub fn sgd_update(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    learning_rate: f32,
    momentum: f32,
    velocity: &mut [Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_update",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_update",
                format!(
                    "param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ),
            ));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= learning_rate * *vi;
        }
    }
    Ok(())
}

/// Model parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        TrainState { model, velocity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub z: Option<usize>,
}

/// One optimization step: draw the dropped class (when the mode uses one),
/// record the objective, backpropagate and update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    sched: &Schedules,
    config: &TrainConfig,
    class_weights: &[f32],
    learning_rate: f32,
    drop_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::contract("train_step", "batch must be non-empty"));
    }
    let n = state.model.num_classes();
    let z = if config.mode.draws_classes() {
        sample_drop(drop_rng, n, sched.drop_probability)?
    } else {
        None
    };

    let mut g = Graph::new();
    let nodes = state.model.bind(&mut g);
    let x = g.input(batch.images.clone());
    let obj = build_objective(
        &mut g,
        &state.model,
        &nodes,
        x,
        &batch.labels,
        class_weights,
        config.mode,
        sched,
        z,
    )?;
    let b = obj.breakdown;
    if ![b.l_ce, b.l_ce_drop, b.l_seg, b.l_sup, b.l_total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads = g.backward(obj.loss)?;
    let grads: Vec<Tensor> = nodes
        .all()
        .into_iter()
        .zip(state.model.params())
        .map(|(id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::contract(
            "train_step",
            format!("non-finite gradient for parameter {i}"),
        ));
    }
    let mut params = state.model.params_mut();
    sgd_update(
        &mut params,
        &grads,
        learning_rate,
        config.momentum,
        &mut state.velocity,
    )?;
    Ok(StepOutcome { breakdown: b, z })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub lambda: f32,
    pub p_drop: f32,
    pub z: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub model: Model,
    /// Every class drawn, one entry per step.
    pub drawn: Vec<Option<usize>>,
    pub class_weights: Vec<f32>,
    pub wall_clock: Duration,
}

pub const TRACE_HEADER: &str = "iteration,l_ce,l_ce_drop,l_seg,l_sup,l_total,lambda,p_drop,z";

/// Loss trace as CSV; floats use the shortest round-trip form and `z` is
/// empty when nothing was dropped.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let b = &r.breakdown;
        let z = r.z.map(|z| z.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration, b.l_ce, b.l_ce_drop, b.l_seg, b.l_sup, b.l_total, r.lambda, r.p_drop, z
        )
        .expect("writing to a String");
    }
    out
}

/// Endless stream of sample indices, reshuffled at every epoch boundary.
struct EpochSampler {
    order: Vec<usize>,
    base: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(base: Vec<usize>, rng: ChaCha8Rng) -> Self {
        let mut s = EpochSampler {
            order: Vec::new(),
            base,
            pos: 0,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.clone_from(&self.base);
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn class_weights_for(dataset: &Dataset, reweighting: bool) -> Result<Vec<f32>> {
    if !reweighting {
        return Ok(vec![1.0; dataset.num_classes()]);
    }
    let freqs = pixel_frequencies(dataset);
    Ok(median_frequency_weights(&freqs)?
        .into_iter()
        .map(|w| w as f32)
        .collect())
}

/// Trains a fresh model initialized from `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    let model = init_model(&config.model, config.seed)?;
    train_from(dataset, config, model, |_| {})
}

/// Trains `model` in place of a fresh one; `on_step` sees every trace row.
pub fn train_from(
    dataset: &Dataset,
    config: &TrainConfig,
    model: Model,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("train", "training set is empty"));
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::contract(
            "train",
            format!(
                "dataset has {} classes, model {}",
                dataset.num_classes(),
                model.num_classes()
            ),
        ));
    }
    let start = Instant::now();
    let class_weights = class_weights_for(dataset, config.reweighting)?;
    let mut sampler = EpochSampler::new(
        duplication_indices(dataset, config.resample_class),
        seeded_stream(config.seed, DATA_STREAM),
    );
    let mut drop_rng = seeded_stream(config.seed, DROP_STREAM);
    let mut state = TrainState::new(model);
    let alpha = config.effective_alpha();
    let mut trace = Vec::with_capacity(config.iterations);
    let mut drawn = Vec::with_capacity(config.iterations);

    for t in 0..config.iterations {
        let sched = Schedules::at(t, config.iterations, alpha)?;
        let batch = Batch::from_dataset(dataset, &sampler.next_batch(config.batch_size))?;
        let lr = config.learning_rate_at(t);
        let out = match train_step(
            &mut state,
            &batch,
            &sched,
            config,
            &class_weights,
            lr,
            &mut drop_rng,
        ) {
            Ok(out) => out,
            Err(
                e @ (Error::NonFinite { .. }
                | Error::Contract {
                    op: "train_step", ..
                }),
            ) => {
                let mut detail = format!("{e}; batch samples {:?}", batch.indices);
                if let Some(dir) = &config.dump_dir {
                    match dump_batch(dir, t, &batch, dataset) {
                        Ok(p) => detail.push_str(&format!("; batch dumped to {}", p.display())),
                        Err(d) => detail.push_str(&format!("; dump failed: {d}")),
                    }
                }
                return Err(Error::NonFiniteLoss {
                    iteration: t,
                    detail,
                });
            }
            Err(e) => return Err(e),
        };
        let row = TraceRow {
            iteration: t,
            breakdown: out.breakdown,
            lambda: sched.lambda,
            p_drop: sched.drop_probability,
            z: out.z,
        };
        if t % 100 == 0 {
            log::debug!("step {t}: l_total {}", row.breakdown.l_total);
        }
        on_step(&row);
        drawn.push(out.z);
        trace.push(row);
    }
    Ok(TrainReport {
        trace,
        model: state.model,
        drawn,
        class_weights,
        wall_clock: start.elapsed(),
    })
}

fn dump_batch(dir: &Path, iteration: usize, batch: &Batch, dataset: &Dataset) -> Result<PathBuf> {
    let out = dir.join(format!("nonfinite_step_{iteration}"));
    batch.images.save(&out.join("images.dct1"))?;
    for (j, &i) in batch.indices.iter().enumerate() {
        let l: &LabelMap = &dataset.samples[i].label;
        l.save(&out.join(format!("label_{j}.dcl1")))?;
    }
    let note = format!("iteration={iteration}\nsamples={:?}\n", batch.indices);
    crate::io::write_atomic(&out.join("batch.txt"), note.as_bytes())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Sample;
    use crate::datagen::{generate_dataset, SceneSpec, Split};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut spec = SceneSpec::default_benchmark();
        spec.image_size = 16;
        for c in &mut spec.classes {
            c.size_min = c.size_min.min(4).max(if c.size_min == 0 { 0 } else { 1 });
            c.size_max = c.size_max.min(5).max(c.size_min);
            if let crate::datagen::Shape::Rectangle {
                height_min,
                height_max,
            } = &mut c.shape
            {
                *height_min = (*height_min).min(3);
                *height_max = (*height_max).min(4);
            }
            if let crate::datagen::Shape::Disc = c.shape {
                c.size_min = 1;
                c.size_max = 1;
            }
        }
        generate_dataset(&spec, n, seed, Split::Train).unwrap()
    }

    fn small_config(mode: Mode, n: usize) -> TrainConfig {
        let mut c = TrainConfig::new(mode, n);
        c.model.widths = vec![4, 6];
        c.batch_size = 2;
        c.iterations = 6;
        c.seed = 11;
        c
    }

    #[test]
    fn momentum_free_step_is_plain_descent() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let mut v = vec![Tensor::zeros(&[2])];
        for step in 1..=3 {
            sgd_update(&mut [&mut p], std::slice::from_ref(&g), 0.1, 0.0, &mut v).unwrap();
            let want = [1.0 - 0.05 * step as f32, -1.0 - 0.025 * step as f32];
            assert!((p.data()[0] - want[0]).abs() < 1e-6 && (p.data()[1] - want[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut v = vec![Tensor::zeros(&[3])];
        for _ in 0..10 {
            sgd_update(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1, 0.9, &mut v).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(p) = p^2 from p = 1 with lr 0.1 and momentum 0.9, against an f64
        // scalar simulation of the same recurrence. The heavy-ball iterate
        // contracts by sqrt(0.9) per step, so |p| is still ~2.9e-3 at step
        // 100 and stays below 1e-3 only from step 131 on.
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut v = vec![Tensor::zeros(&[1])];
        let (mut sp, mut sv) = (1.0f64, 0.0f64);
        for step in 1..=200 {
            let g = Tensor::new(vec![1], vec![2.0 * p.data()[0]]).unwrap();
            sgd_update(&mut [&mut p], &[g], 0.1, 0.9, &mut v).unwrap();
            sv = 0.9 * sv + 2.0 * sp;
            sp -= 0.1 * sv;
            assert!((p.data()[0] as f64 - sp).abs() < 1e-5, "step {step}");
            if step == 100 {
                assert!((sp + 0.002_851_4).abs() < 1e-6, "{sp}");
            }
            if step > 130 {
                assert!(p.data()[0].abs() < 1e-3, "step {step}: {}", p.data()[0]);
            }
        }
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = vec![Tensor::zeros(&[2])];
        assert!(sgd_update(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1, 0.9, &mut v).is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let ds = tiny_dataset(4, 0);
        let mut cfg = small_config(Mode::Dropclass, 6);
        cfg.learning_rate = 0.0;
        cfg.iterations = 3;
        let model = init_model(&cfg.model, 3).unwrap();
        let report = train_from(&ds, &cfg, model.clone(), |_| {}).unwrap();
        assert_eq!(report.model.params(), model.params());
        assert!(report.trace.iter().all(|r| r.breakdown.l_ce > 0.0));
    }

    #[test]
    fn first_dropclass_step_is_plain_ce() {
        let ds = tiny_dataset(4, 0);
        let cfg = small_config(Mode::Dropclass, 6);
        let report = train(&ds, &cfg).unwrap();
        let r0 = &report.trace[0];
        assert_eq!(r0.lambda, 0.0);
        assert_eq!(r0.z, None);
        assert_eq!(r0.breakdown.l_total, r0.breakdown.l_ce);
    }

    #[test]
    fn single_iteration_run() {
        let ds = tiny_dataset(3, 0);
        let mut cfg = small_config(Mode::Baseline, 6);
        cfg.iterations = 1;
        assert_eq!(train(&ds, &cfg).unwrap().trace.len(), 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = tiny_dataset(5, 2);
        for mode in [
            Mode::Baseline,
            Mode::Dropclass,
            Mode::AblationNoSup,
            Mode::AblationLabelDrop,
        ] {
            let cfg = small_config(mode, 6);
            let a = train(&ds, &cfg).unwrap();
            let b = train(&ds, &cfg).unwrap();
            assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
            assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        }
    }

    #[test]
    fn frozen_ramp_matches_baseline_trajectory() {
        let ds = tiny_dataset(5, 4);
        let base_cfg = small_config(Mode::Baseline, 6);
        let base = train(&ds, &base_cfg).unwrap();

        let drop_cfg = small_config(Mode::Dropclass, 6);
        let class_weights = vec![1.0; 6];
        let mut sampler = EpochSampler::new(
            (0..ds.len()).collect(),
            seeded_stream(drop_cfg.seed, DATA_STREAM),
        );
        let mut drop_rng = seeded_stream(drop_cfg.seed, DROP_STREAM);
        let mut state = TrainState::new(init_model(&drop_cfg.model, drop_cfg.seed).unwrap());
        for t in 0..drop_cfg.iterations {
            let sched = Schedules::fixed(0.0, 0.0, drop_cfg.alpha);
            let batch = Batch::from_dataset(&ds, &sampler.next_batch(drop_cfg.batch_size)).unwrap();
            let lr = drop_cfg.learning_rate_at(t);
            let out = train_step(
                &mut state,
                &batch,
                &sched,
                &drop_cfg,
                &class_weights,
                lr,
                &mut drop_rng,
            )
            .unwrap();
            assert_eq!(out.z, None);
            assert_eq!(out.breakdown.l_ce, base.trace[t].breakdown.l_ce);
        }
        assert_eq!(state.model.to_bytes(), base.model.to_bytes());
    }

    #[test]
    fn no_sup_total_is_seg() {
        let ds = tiny_dataset(5, 1);
        let mut cfg = small_config(Mode::AblationNoSup, 6);
        cfg.iterations = 10;
        let report = train(&ds, &cfg).unwrap();
        assert!(report.trace.iter().any(|r| r.z.is_some()));
        for r in &report.trace {
            assert_eq!(r.breakdown.l_total, r.breakdown.l_seg);
        }
    }

    #[test]
    fn composition_holds_in_every_mode() {
        let ds = tiny_dataset(5, 1);
        for mode in [
            Mode::Baseline,
            Mode::Dropclass,
            Mode::AblationNoSup,
            Mode::AblationLabelDrop,
        ] {
            let mut cfg = small_config(mode, 6);
            cfg.iterations = 10;
            let alpha = cfg.effective_alpha();
            for r in train(&ds, &cfg).unwrap().trace {
                let b = r.breakdown;
                let lambda = if mode == Mode::Baseline {
                    0.0
                } else {
                    r.lambda
                };
                let want = (1.0 - lambda) * b.l_ce + lambda * b.l_ce_drop + alpha * b.l_sup;
                assert!((b.l_total - want).abs() <= 1e-6, "{mode:?}: {b:?}");
                assert!((b.l_total - (b.l_seg + alpha * b.l_sup)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn label_drop_masks_original_logits() {
        let ds = tiny_dataset(4, 3);
        let mut cfg = small_config(Mode::AblationLabelDrop, 6);
        cfg.iterations = 20;
        let report = train(&ds, &cfg).unwrap();
        assert!(report.trace.iter().any(|r| r.z.is_some()));
        for r in &report.trace {
            assert_eq!(r.breakdown.l_sup, 0.0);
            if r.z.is_none() {
                assert_eq!(r.breakdown.l_ce_drop, r.breakdown.l_ce);
            } else {
                assert!(r.breakdown.l_ce_drop <= r.breakdown.l_ce);
            }
        }
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![
            TraceRow {
                iteration: 0,
                breakdown: LossBreakdown {
                    l_ce: 1.5,
                    l_ce_drop: 0.0,
                    l_seg: 1.5,
                    l_sup: 0.0,
                    l_total: 1.5,
                },
                lambda: 0.0,
                p_drop: 0.0,
                z: None,
            },
            TraceRow {
                iteration: 1,
                breakdown: LossBreakdown {
                    l_ce: 1.0,
                    l_ce_drop: 2.0,
                    l_seg: 1.5,
                    l_sup: 0.25,
                    l_total: 4.0,
                },
                lambda: 0.5,
                p_drop: 0.5,
                z: Some(3),
            },
        ];
        let csv = trace_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines[1], "0,1.5,0,1.5,0,1.5,0,0,");
        assert_eq!(lines[2], "1,1,2,1.5,0.25,4,0.5,0.5,3");
    }

    #[test]
    fn linear_learning_rate_decay() {
        let mut cfg = TrainConfig::new(Mode::Baseline, 3);
        cfg.iterations = 4;
        assert_eq!(cfg.learning_rate_at(0), 0.05);
        assert!((cfg.learning_rate_at(2) - 0.025).abs() < 1e-9);
        assert!(cfg.learning_rate_at(4) == 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Mode::Dropclass, 6);
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Mode::Dropclass, 6);
        cfg.resample_class = Some(6);
        assert!(cfg.validate().is_err());
        assert!(Mode::parse("dropclass").is_ok());
        assert!(Mode::parse("drop").is_err());
    }

    #[test]
    fn epochs_visit_every_index_once() {
        let mut s = EpochSampler::new(vec![0, 1, 2, 2, 3], seeded_stream(1, DATA_STREAM));
        let mut seen = s.next_batch(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 2, 3]);
    }

    #[test]
    fn non_finite_input_aborts_with_dump() {
        let ds = tiny_dataset(2, 0);
        let mut bad = ds.clone();
        let big = Tensor::full(bad.samples[0].image.shape(), 3.0e38);
        bad.samples[0] = Sample {
            image: big.clone(),
            ..bad.samples[0].clone()
        };
        bad.samples[1] = Sample {
            image: big,
            ..bad.samples[1].clone()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Mode::Baseline, 6);
        cfg.model.widths = vec![8, 8, 8];
        cfg.dump_dir = Some(dir.path().to_path_buf());
        match train(&bad, &cfg) {
            Err(Error::NonFiniteLoss {
                iteration: 0,
                detail,
            }) => {
                assert!(detail.contains("dumped"), "{detail}");
                assert!(dir.path().join("nonfinite_step_0/images.dct1").exists());
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    fn toy_two_class(n: usize) -> Dataset {
        // left half class 0 (dark), right half class 1 (bright), with the
        // boundary column varying per sample
        let mut spec = SceneSpec::default_benchmark();
        spec.classes.truncate(2);
        spec.frequency_targets = vec![0.0, 0.5];
        spec.cooccurrence_rules.clear();
        spec.image_size = 8;
        let samples = (0..n)
            .map(|i| {
                let split = 2 + i % 5;
                let mut img = Vec::with_capacity(8 * 8 * 3);
                let mut lab = Vec::with_capacity(64);
                for _y in 0..8 {
                    for x in 0..8 {
                        let c = (x >= split) as u8;
                        let v = if c == 1 { 0.9 } else { 0.1 };
                        img.extend_from_slice(&[v, v, v]);
                        lab.push(c);
                    }
                }
                Sample {
                    image: Tensor::new(vec![8, 8, 3], img).unwrap(),
                    label: LabelMap::new(8, 8, lab).unwrap(),
                    seed: i as u64,
                }
            })
            .collect();
        Dataset::new(samples, spec, Split::Train).unwrap()
    }

    #[test]
    fn learns_separable_toy_problem() {
        let ds = toy_two_class(200);
        let mut cfg = TrainConfig::new(Mode::Baseline, 2);
        cfg.model.widths = vec![4, 4];
        cfg.iterations = 500;
        cfg.batch_size = 4;
        cfg.seed = 5;
        let report = train(&ds, &cfg).unwrap();
        let first = report.trace[0].breakdown.l_ce;
        let last = report.trace.last().unwrap().breakdown.l_ce;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }
}
