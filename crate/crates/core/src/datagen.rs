//! Synthetic road scenes with controllable class co-occurrence and pixel
//! imbalance, plus the dataset manipulations used by the baselines and the
//! erasure protocol.
//!
//! Each class is one shape family (a full-width band anchored to the top or
//! bottom edge, an axis-aligned rectangle, or a disc) painted in class-index
//! order, so later classes occlude earlier ones. A co-occurrence rule ties a
//! subject class to a companion: when the subject is present, with
//! probability `rho` it is placed in the stated relation to the companion;
//! otherwise it is placed independently and the companion is removed from
//! the scene.
//!
//! Presence probabilities are derived from the frequency targets and the
//! expected shape areas, accounting for the companion presence that rules
//! force.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor, IGNORE_LABEL};

pub const MAX_LAYOUT_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum Shape {
    /// Full-width band; the size range is its height in rows.
    Band { anchor: Anchor },
    /// Size range is the width; the height range is carried here.
    Rectangle {
        height_min: usize,
        height_max: usize,
    },
    /// Size range is the radius.
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    pub size_min: usize,
    pub size_max: usize,
    pub color: [f32; 3],
    /// Per-object colour offset range (uniform in `±jitter` per channel);
    /// per-pixel noise is uniform in `±jitter/2`.
    pub jitter: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Above,
    Overlapping,
    Adjacent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooccurrenceRule {
    pub subject: usize,
    pub companion: usize,
    pub rho: f64,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub cooccurrence_rules: Vec<CooccurrenceRule>,
    pub frequency_targets: Vec<f64>,
    pub background: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[h, w, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub spec: SceneSpec,
    pub split: Split,
}

pub mod classes {
    pub const BACKGROUND: usize = 0;
    pub const SKY: usize = 1;
    pub const ROAD: usize = 2;
    pub const CAR: usize = 3;
    pub const BIKE: usize = 4;
    pub const RIDER: usize = 5;
}

impl SceneSpec {
    /// Six-class road scene: background, sky band, dominant road band, car
    /// above the road, rare bike on the road and the rarest class, rider,
    /// above the bike.
    pub fn default_benchmark() -> SceneSpec {
        let class = |name: &str, shape, size_min, size_max, color, jitter| ClassSpec {
            name: name.into(),
            shape,
            size_min,
            size_max,
            color,
            jitter,
        };
        SceneSpec {
            image_size: 64,
            classes: vec![
                class(
                    "background",
                    Shape::Band {
                        anchor: Anchor::Top,
                    },
                    0,
                    0,
                    [0.45, 0.55, 0.35],
                    0.08,
                ),
                class(
                    "sky",
                    Shape::Band {
                        anchor: Anchor::Top,
                    },
                    10,
                    18,
                    [0.55, 0.72, 0.95],
                    0.08,
                ),
                class(
                    "road",
                    Shape::Band {
                        anchor: Anchor::Bottom,
                    },
                    22,
                    32,
                    [0.35, 0.35, 0.38],
                    0.06,
                ),
                class(
                    "car",
                    Shape::Rectangle {
                        height_min: 5,
                        height_max: 8,
                    },
                    10,
                    16,
                    [0.78, 0.22, 0.2],
                    0.1,
                ),
                class("bike", Shape::Disc, 2, 3, [0.2, 0.25, 0.8], 0.08),
                class(
                    "rider",
                    Shape::Rectangle {
                        height_min: 4,
                        height_max: 6,
                    },
                    2,
                    3,
                    [0.9, 0.8, 0.2],
                    0.1,
                ),
            ],
            cooccurrence_rules: vec![
                CooccurrenceRule {
                    subject: classes::RIDER,
                    companion: classes::BIKE,
                    rho: 1.0,
                    relation: Relation::Above,
                },
                CooccurrenceRule {
                    subject: classes::CAR,
                    companion: classes::ROAD,
                    rho: 1.0,
                    relation: Relation::Above,
                },
                CooccurrenceRule {
                    subject: classes::BIKE,
                    companion: classes::ROAD,
                    rho: 1.0,
                    relation: Relation::Overlapping,
                },
            ],
            frequency_targets: vec![0.0, 0.22, 0.40, 0.018, 0.0045, 0.0018],
            background: classes::BACKGROUND,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        if n == 0 || n > 255 {
            return Err(Error::SceneSpec(format!("class count {n} outside 1..=255")));
        }
        if self.image_size < 4 {
            return Err(Error::SceneSpec("image_size must be >= 4".into()));
        }
        if self.background >= n {
            return Err(Error::SceneSpec(format!(
                "background index {} out of range",
                self.background
            )));
        }
        if self.frequency_targets.len() != n {
            return Err(Error::SceneSpec(format!(
                "{} frequency targets for {n} classes",
                self.frequency_targets.len()
            )));
        }
        if self
            .frequency_targets
            .iter()
            .any(|&f| !(0.0..=1.0).contains(&f))
        {
            return Err(Error::SceneSpec(
                "frequency targets must lie in [0,1]".into(),
            ));
        }
        let total: f64 = self
            .frequency_targets
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != self.background)
            .map(|(_, f)| f)
            .sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::SceneSpec(format!(
                "frequency targets sum to {total} > 1"
            )));
        }
        for (c, cls) in self.classes.iter().enumerate() {
            if c == self.background {
                continue;
            }
            if cls.size_min > cls.size_max || cls.size_min == 0 {
                return Err(Error::SceneSpec(format!(
                    "class {} has invalid size range",
                    cls.name
                )));
            }
            if let Shape::Rectangle {
                height_min,
                height_max,
            } = cls.shape
            {
                if height_min > height_max || height_min == 0 {
                    return Err(Error::SceneSpec(format!(
                        "class {} has invalid height range",
                        cls.name
                    )));
                }
            }
        }
        for r in &self.cooccurrence_rules {
            if r.subject >= n || r.companion >= n {
                return Err(Error::SceneSpec(format!(
                    "rule references missing class ({} -> {})",
                    r.subject, r.companion
                )));
            }
            if r.subject == r.companion
                || r.subject == self.background
                || r.companion == self.background
            {
                return Err(Error::SceneSpec(
                    "rules must relate two distinct non-background classes".into(),
                ));
            }
            if !(0.0..=1.0).contains(&r.rho) {
                return Err(Error::SceneSpec(format!("rho {} outside [0,1]", r.rho)));
            }
        }
        Ok(())
    }

    pub fn rule_name(&self, r: &CooccurrenceRule) -> String {
        format!(
            "({} {:?} {}, rho={})",
            self.classes[r.subject].name, r.relation, self.classes[r.companion].name, r.rho
        )
    }

    /// Expected pixel share of one instance of class `c`.
    fn expected_area_share(&self, c: usize) -> f64 {
        let cls = &self.classes[c];
        let s = self.image_size as f64;
        let mean = |lo: usize, hi: usize| (lo + hi) as f64 / 2.0;
        match cls.shape {
            Shape::Band { .. } => mean(cls.size_min, cls.size_max) * s / (s * s),
            Shape::Rectangle {
                height_min,
                height_max,
            } => mean(cls.size_min, cls.size_max) * mean(height_min, height_max) / (s * s),
            Shape::Disc => {
                let n = (cls.size_max - cls.size_min + 1) as f64;
                (cls.size_min..=cls.size_max)
                    .map(|r| disc_area(r) as f64)
                    .sum::<f64>()
                    / n
                    / (s * s)
            }
        }
    }

    /// Probability that class `c` is drawn on its own, before rules force or
    /// suppress it. Resolved in class order; a companion's own presence is
    /// lowered by the presence its subjects force on it.
    pub fn presence_probabilities(&self) -> Vec<f64> {
        let n = self.num_classes();
        let mut overall = vec![0.0f64; n];
        for c in 0..n {
            if c == self.background {
                continue;
            }
            let area = self.expected_area_share(c);
            overall[c] = if area > 0.0 {
                (self.frequency_targets[c] / area).min(1.0)
            } else {
                0.0
            };
        }
        let mut own = overall.clone();
        for r in &self.cooccurrence_rules {
            let ps = overall[r.subject];
            let forced = ps * r.rho;
            let target = overall[r.companion];
            own[r.companion] = if ps >= 1.0 {
                own[r.companion].min(1.0)
            } else {
                ((target - forced) / (1.0 - ps))
                    .clamp(0.0, 1.0)
                    .min(own[r.companion])
            };
        }
        own
    }
}

fn disc_area(r: usize) -> usize {
    let r = r as isize;
    let mut n = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                n += 1;
            }
        }
    }
    n
}

#[derive(Clone, Copy, Debug)]
struct Region {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Region {
    fn bottom(&self) -> usize {
        self.top + self.height
    }
    fn right(&self) -> usize {
        self.left + self.width
    }
}

#[derive(Clone, Copy, Debug)]
enum Placement {
    Independent,
    Related { rule: usize },
}

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn object_extent(rng: &mut ChaCha8Rng, cls: &ClassSpec) -> (usize, usize) {
    match cls.shape {
        Shape::Rectangle {
            height_min,
            height_max,
        } => (
            pick(rng, height_min, height_max),
            pick(rng, cls.size_min, cls.size_max),
        ),
        Shape::Disc => {
            let d = 2 * pick(rng, cls.size_min, cls.size_max) + 1;
            (d, d)
        }
        Shape::Band { .. } => unreachable!("bands have no object extent"),
    }
}

/// Tries to place an object box of `(h, w)` for the given relation to the
/// companion region.
fn place_related(
    rng: &mut ChaCha8Rng,
    size: usize,
    extent: (usize, usize),
    relation: Relation,
    comp: Region,
    comp_shape: Shape,
) -> Option<Region> {
    let (h, w) = extent;
    if h > size || w > size {
        return None;
    }
    let clamp_left = |center: isize| -> Option<usize> {
        let left = center - (w as isize) / 2;
        (left >= 0 && left as usize + w <= size).then_some(left as usize)
    };
    match relation {
        Relation::Above => {
            // stand on the companion's topmost pixel in a random column of it
            let center = rng.gen_range(comp.left..comp.right());
            let top = comp_top_at(comp, comp_shape, center);
            if top < h {
                return None;
            }
            let left = clamp_left(center as isize)?;
            Some(Region {
                top: top - h,
                left,
                height: h,
                width: w,
            })
        }
        Relation::Overlapping => {
            let cy = rng.gen_range(comp.top as isize..comp.bottom() as isize);
            let cx = rng.gen_range(comp.left as isize..comp.right() as isize);
            let top = cy - (h as isize) / 2;
            let left = cx - (w as isize) / 2;
            if top < 0 || left < 0 || top as usize + h > size || left as usize + w > size {
                return None;
            }
            Some(Region {
                top: top as usize,
                left: left as usize,
                height: h,
                width: w,
            })
        }
        Relation::Adjacent => {
            let right_side = rng.gen_bool(0.5);
            let left = if right_side {
                comp.right()
            } else {
                comp.left.checked_sub(w)?
            };
            if left + w > size {
                return None;
            }
            let lo = comp.top.saturating_sub(h - 1);
            let hi = comp.bottom().saturating_sub(1).min(size - h);
            if lo > hi {
                return None;
            }
            Some(Region {
                top: pick(rng, lo, hi),
                left,
                height: h,
                width: w,
            })
        }
    }
}

/// Topmost painted row of a laid-out region in column `x`.
fn comp_top_at(r: Region, shape: Shape, x: usize) -> usize {
    match shape {
        Shape::Disc => {
            let rad = (r.height / 2) as isize;
            let dx = x as isize - (r.left + r.width / 2) as isize;
            let mut dy = rad;
            while dy * dy + dx * dx > rad * rad {
                dy -= 1;
            }
            ((r.top + r.height / 2) as isize - dy) as usize
        }
        _ => r.top,
    }
}

fn place_independent(rng: &mut ChaCha8Rng, size: usize, extent: (usize, usize)) -> Option<Region> {
    let (h, w) = extent;
    if h > size || w > size {
        return None;
    }
    Some(Region {
        top: pick(rng, 0, size - h),
        left: pick(rng, 0, size - w),
        height: h,
        width: w,
    })
}

fn jittered_color(rng: &mut ChaCha8Rng, cls: &ClassSpec) -> [f32; 3] {
    let j = cls.jitter;
    let mut c = cls.color;
    if j > 0.0 {
        for v in &mut c {
            *v += rng.gen_range(-j..=j);
        }
    }
    c
}

/// Generates one scene. Deterministic in `(spec, seed)`.
pub fn generate_sample(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let size = spec.image_size;
    let n = spec.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let own = spec.presence_probabilities();

    let mut present: Vec<bool> = (0..n)
        .map(|c| c != spec.background && rng.gen_bool(own[c]))
        .collect();
    let mut placement = vec![Placement::Independent; n];
    // rules are resolved subject-first in declaration order
    let mut suppressed = vec![false; n];
    for (i, r) in spec.cooccurrence_rules.iter().enumerate() {
        if !present[r.subject] {
            continue;
        }
        if rng.gen_bool(r.rho) {
            present[r.companion] = true;
            placement[r.subject] = Placement::Related { rule: i };
        } else {
            suppressed[r.companion] = true;
        }
    }
    for c in 0..n {
        if suppressed[c] {
            present[c] = false;
        }
    }
    // a subject whose companion got suppressed by another rule loses the relation
    for c in 0..n {
        if let Placement::Related { rule } = placement[c] {
            if !present[spec.cooccurrence_rules[rule].companion] {
                placement[c] = Placement::Independent;
            }
        }
    }

    let mut label = LabelMap::filled(size, size, spec.background as u8);
    let mut colors = vec![[0.0f32; 3]; n];
    colors[spec.background] = jittered_color(&mut rng, &spec.classes[spec.background]);
    let mut regions: Vec<Option<Region>> = vec![None; n];

    // Bands and related placements need the companion's region, so companions
    // are laid out before their subjects regardless of index.
    // A failed object retries its own box first; if that never fits (the
    // companion landed somewhere hopeless), the whole scene is laid out again.
    let order = layout_order(spec);
    'scene: for attempt in 0..MAX_LAYOUT_RETRIES {
        regions.iter_mut().for_each(|r| *r = None);
        for &c in &order {
            if !present[c] {
                continue;
            }
            let cls = &spec.classes[c];
            colors[c] = jittered_color(&mut rng, cls);
            let region = match cls.shape {
                Shape::Band { anchor } => {
                    let h = pick(&mut rng, cls.size_min, cls.size_max).min(size);
                    let top = match anchor {
                        Anchor::Top => 0,
                        Anchor::Bottom => size - h,
                    };
                    Region {
                        top,
                        left: 0,
                        height: h,
                        width: size,
                    }
                }
                _ => {
                    let mut placed = None;
                    for _ in 0..MAX_LAYOUT_RETRIES {
                        let extent = object_extent(&mut rng, cls);
                        let candidate = match placement[c] {
                            Placement::Independent => place_independent(&mut rng, size, extent),
                            Placement::Related { rule } => {
                                let r = &spec.cooccurrence_rules[rule];
                                let comp = regions[r.companion].expect("companion laid out first");
                                place_related(
                                    &mut rng,
                                    size,
                                    extent,
                                    r.relation,
                                    comp,
                                    spec.classes[r.companion].shape,
                                )
                            }
                        };
                        if candidate.is_some() {
                            placed = candidate;
                            break;
                        }
                    }
                    match placed {
                        Some(p) => p,
                        None if attempt + 1 < MAX_LAYOUT_RETRIES => continue 'scene,
                        None => {
                            let rule = match placement[c] {
                                Placement::Related { rule } => {
                                    spec.rule_name(&spec.cooccurrence_rules[rule])
                                }
                                Placement::Independent => format!("(independent {})", cls.name),
                            };
                            return Err(Error::Generation {
                                rule,
                                retries: MAX_LAYOUT_RETRIES,
                            });
                        }
                    }
                }
            };
            regions[c] = Some(region);
        }
        break;
    }

    // paint in class-index order
    for c in 0..n {
        let Some(r) = regions[c] else { continue };
        match spec.classes[c].shape {
            Shape::Disc => {
                let rad = (r.height / 2) as isize;
                let (cy, cx) = (
                    (r.top + r.height / 2) as isize,
                    (r.left + r.width / 2) as isize,
                );
                for y in r.top..r.bottom() {
                    for x in r.left..r.right() {
                        let (dy, dx) = (y as isize - cy, x as isize - cx);
                        if dy * dy + dx * dx <= rad * rad {
                            label.set(y, x, c as u8);
                        }
                    }
                }
            }
            _ => {
                for y in r.top..r.bottom() {
                    for x in r.left..r.right() {
                        label.set(y, x, c as u8);
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(size * size * 3);
    for &l in label.data() {
        let cls = &spec.classes[l as usize];
        let noise = cls.jitter / 2.0;
        for ch in 0..3 {
            let v = colors[l as usize][ch]
                + if noise > 0.0 {
                    rng.gen_range(-noise..=noise)
                } else {
                    0.0
                };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![size, size, 3], data)?,
        label,
        seed,
    })
}

/// Class order in which regions are laid out: every rule's companion before
/// its subject, otherwise by index.
fn layout_order(spec: &SceneSpec) -> Vec<usize> {
    let n = spec.num_classes();
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    fn visit(
        c: usize,
        spec: &SceneSpec,
        done: &mut Vec<bool>,
        order: &mut Vec<usize>,
        depth: usize,
    ) {
        if done[c] || depth > spec.num_classes() {
            return;
        }
        for r in spec.cooccurrence_rules.iter().filter(|r| r.subject == c) {
            visit(r.companion, spec, done, order, depth + 1);
        }
        if !done[c] {
            done[c] = true;
            order.push(c);
        }
    }
    for c in 0..n {
        visit(c, spec, &mut done, &mut order, 0);
    }
    order
}

/// Sample `i` is generated from seed `base_seed + i`.
pub fn generate_dataset(
    spec: &SceneSpec,
    n: usize,
    base_seed: u64,
    split: Split,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::SceneSpec("dataset size must be >= 1".into()));
    }
    spec.validate()?;
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        spec: spec.clone(),
        split,
    })
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, spec: SceneSpec, split: Split) -> Result<Dataset> {
        let first = samples
            .first()
            .ok_or_else(|| Error::SceneSpec("dataset must be non-empty".into()))?;
        let shape = first.image.shape().to_vec();
        if samples.iter().any(|s| s.image.shape() != shape.as_slice()) {
            return Err(Error::SceneSpec("samples differ in image size".into()));
        }
        Ok(Dataset {
            samples,
            spec,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Mean colour over every pixel of every image.
    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            for px in s.image.data().chunks_exact(3) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v as f64;
                }
                count += 1;
            }
        }
        acc.map(|a| (a / count.max(1) as f64) as f32)
    }

    /// Writes `<dir>/<split>/img_<i>.dct1` and `lab_<i>.dcl1`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let split_dir = dir.join(self.split.as_str());
        let mut written = Vec::with_capacity(2 * self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let img = split_dir.join(format!("img_{i}.dct1"));
            let lab = split_dir.join(format!("lab_{i}.dcl1"));
            s.image.save(&img)?;
            s.label.save(&lab)?;
            written.push(img);
            written.push(lab);
        }
        Ok(written)
    }

    /// Loads a split written by [`Dataset::save`]; sample seeds come from
    /// the manifest.
    pub fn load(dir: &Path, split: Split) -> Result<Dataset> {
        let manifest = DatasetManifest::load(dir)?;
        let info = manifest.splits.get(split.as_str()).ok_or_else(|| {
            Error::format(
                dir.join(MANIFEST_FILE),
                format!("no {} split", split.as_str()),
            )
        })?;
        let split_dir = dir.join(split.as_str());
        let mut samples = Vec::with_capacity(info.count);
        for i in 0..info.count {
            let image = Tensor::load(&split_dir.join(format!("img_{i}.dct1")))?;
            let label = LabelMap::load(&split_dir.join(format!("lab_{i}.dcl1")))?;
            if image.shape() != [label.height(), label.width(), 3] {
                return Err(Error::format(
                    split_dir.join(format!("img_{i}.dct1")),
                    "image/label size mismatch",
                ));
            }
            let n = manifest.spec.num_classes();
            if let Some(&bad) = label
                .data()
                .iter()
                .find(|&&l| l != IGNORE_LABEL && l as usize >= n)
            {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    count: n,
                });
            }
            samples.push(Sample {
                image,
                label,
                seed: info.base_seed.wrapping_add(i as u64),
            });
        }
        Dataset::new(samples, manifest.spec, split)
    }
}

pub const MANIFEST_FILE: &str = "spec.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub count: usize,
    pub base_seed: u64,
}

/// `spec.json` at the dataset root: the scene spec plus per-split sizes and
/// base seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SceneSpec,
    pub splits: BTreeMap<String, SplitInfo>,
}

impl DatasetManifest {
    pub fn new(spec: SceneSpec) -> Self {
        DatasetManifest {
            format: "dropclass-dataset/1".into(),
            spec,
            splits: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::io::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        m.spec.validate()?;
        Ok(m)
    }
}

/// Share of non-ignored pixels per class.
pub fn pixel_frequencies(dataset: &Dataset) -> Vec<f64> {
    pixel_frequencies_of(
        dataset.samples.iter().map(|s| &s.label),
        dataset.num_classes(),
    )
}

pub fn pixel_frequencies_of<'a>(
    labels: impl Iterator<Item = &'a LabelMap>,
    num_classes: usize,
) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for l in labels {
        for &v in l.data() {
            if v != IGNORE_LABEL && (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .into_iter()
        .map(|c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect()
}

/// `median(f) / f_c` per class.
pub fn median_frequency_weights(frequencies: &[f64]) -> Result<Vec<f64>> {
    if let Some(c) = frequencies.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::ZeroFrequency { class: c });
    }
    let mut sorted = frequencies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite frequencies"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(frequencies.iter().map(|&f| median / f).collect())
}

/// Pixels of class `c` get the fill colour and the ignore label.
pub fn erase_class(sample: &Sample, c: usize, fill: [f32; 3]) -> Sample {
    let mut out = sample.clone();
    if c >= IGNORE_LABEL as usize {
        return out;
    }
    let data = out.image.data_mut();
    for (i, l) in out.label.data_mut().iter_mut().enumerate() {
        if *l as usize == c {
            *l = IGNORE_LABEL;
            data[3 * i..3 * i + 3].copy_from_slice(&fill);
        }
    }
    out
}

/// Every sample containing class `c` appears twice (adjacent), others once.
pub fn resample_with_duplication(dataset: &Dataset, c: usize) -> Dataset {
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        samples.push(s.clone());
        if c < IGNORE_LABEL as usize && s.label.contains(c as u8) {
            samples.push(s.clone());
        }
    }
    Dataset {
        samples,
        spec: dataset.spec.clone(),
        split: dataset.split,
    }
}

/// Index list form of [`resample_with_duplication`], used by the trainer to
/// avoid copying images.
pub fn duplication_indices(dataset: &Dataset, c: Option<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        out.push(i);
        if let Some(c) = c {
            if c < IGNORE_LABEL as usize && s.label.contains(c as u8) {
                out.push(i);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::classes::*;
    use super::*;
    use proptest::prelude::*;

    fn with_rho(rho: f64) -> SceneSpec {
        let mut spec = SceneSpec::default_benchmark();
        spec.cooccurrence_rules[0].rho = rho;
        spec
    }

    fn toy_spec(n: usize) -> SceneSpec {
        let mut spec = SceneSpec::default_benchmark();
        spec.image_size = 4;
        spec.classes.truncate(n);
        spec.frequency_targets.truncate(n);
        spec.cooccurrence_rules.clear();
        spec
    }

    fn sample_from(labels: Vec<u8>, h: usize, w: usize) -> Sample {
        let image = Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect(),
        )
        .unwrap();
        Sample {
            image,
            label: LabelMap::new(h, w, labels).unwrap(),
            seed: 0,
        }
    }

    #[test]
    fn default_spec_is_valid() {
        SceneSpec::default_benchmark().validate().unwrap();
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = SceneSpec::default_benchmark();
        let a = generate_sample(&spec, 42).unwrap();
        let b = generate_sample(&spec, 42).unwrap();
        assert_eq!(a.image.to_bytes(), b.image.to_bytes());
        assert_eq!(a.label, b.label);
    }

    #[test]
    fn images_in_unit_range_and_labels_valid() {
        let spec = SceneSpec::default_benchmark();
        for seed in 0..50 {
            let s = generate_sample(&spec, seed).unwrap();
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s
                .label
                .data()
                .iter()
                .all(|&l| (l as usize) < spec.num_classes()));
        }
    }

    #[test]
    fn rider_always_sits_on_a_bike_when_rho_is_one() {
        let spec = with_rho(1.0);
        let mut riders = 0;
        for seed in 0..400 {
            let s = generate_sample(&spec, seed).unwrap();
            if !s.label.contains(RIDER as u8) {
                continue;
            }
            riders += 1;
            assert!(
                s.label.contains(BIKE as u8),
                "seed {seed}: rider without bike"
            );
            // the row under the rider's bottom edge holds bike pixels
            let l = &s.label;
            let bottom = (0..64)
                .rev()
                .find(|&y| (0..64).any(|x| l.get(y, x) == RIDER as u8))
                .unwrap();
            let cols: Vec<usize> = (0..64)
                .filter(|&x| l.get(bottom, x) == RIDER as u8)
                .collect();
            assert!(bottom + 1 < 64);
            assert!(
                cols.iter().any(|&x| l.get(bottom + 1, x) == BIKE as u8),
                "seed {seed}"
            );
        }
        assert!(riders > 50);
    }

    fn cooccurrence_rate(spec: &SceneSpec, seeds: u64) -> (f64, f64, f64) {
        let (mut both, mut rider, mut bike) = (0, 0, 0);
        for seed in 0..seeds {
            let s = generate_sample(spec, seed).unwrap();
            let (r, b) = (s.label.contains(RIDER as u8), s.label.contains(BIKE as u8));
            both += (r && b) as u32;
            rider += r as u32;
            bike += b as u32;
        }
        let n = seeds as f64;
        (both as f64 / n, rider as f64 / n, bike as f64 / n)
    }

    #[test]
    fn rho_zero_breaks_cooccurrence() {
        let (both, rider, bike) = cooccurrence_rate(&with_rho(0.0), 1000);
        let chance = rider * bike;
        let sigma = (chance * (1.0 - chance) / 1000.0).sqrt();
        assert!(both <= chance + 3.0 * sigma, "both {both} chance {chance}");
    }

    #[test]
    fn cooccurrence_is_monotone_in_rho() {
        let rates: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&r| cooccurrence_rate(&with_rho(r), 1000).0)
            .collect();
        assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "{rates:?}");
    }

    #[test]
    fn rider_finds_room_when_the_bike_lands_near_the_top() {
        // free bikes can sit too high for a rider; the scene must be redrawn
        let mut spec = SceneSpec::default_benchmark();
        spec.cooccurrence_rules[2].rho = 0.0;
        for seed in 0..400 {
            generate_sample(&spec, seed).unwrap();
        }
    }

    #[test]
    fn infeasible_layout_names_the_rule() {
        let mut spec = SceneSpec::default_benchmark();
        // riders as tall as the image never fit above a bike
        spec.classes[RIDER].shape = Shape::Rectangle {
            height_min: 64,
            height_max: 64,
        };
        spec.frequency_targets[RIDER] = 0.2;
        let err = (0..20)
            .find_map(|s| generate_sample(&spec, s).err())
            .expect("some seed fails");
        match err {
            Error::Generation { rule, retries } => {
                assert!(rule.contains("rider") && rule.contains("bike"), "{rule}");
                assert_eq!(retries, MAX_LAYOUT_RETRIES);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dataset_seeds_and_disjoint_streams() {
        let spec = SceneSpec::default_benchmark();
        let one = generate_dataset(&spec, 1, 5, Split::Train).unwrap();
        assert_eq!(one.len(), 1);
        let a = generate_dataset(&spec, 30, 100, Split::Train).unwrap();
        assert_eq!(a.samples[3].seed, 103);
        assert_eq!(a.samples[3], generate_sample(&spec, 103).unwrap());
        let b = generate_dataset(&spec, 30, 1000, Split::Train).unwrap();
        let hashes: std::collections::HashSet<String> = a
            .samples
            .iter()
            .map(|s| crate::io::sha256_hex(&s.image.to_bytes()))
            .collect();
        assert!(b
            .samples
            .iter()
            .all(|s| !hashes.contains(&crate::io::sha256_hex(&s.image.to_bytes()))));
        assert!(generate_dataset(&spec, 0, 0, Split::Train).is_err());
    }

    #[test]
    fn default_dataset_meets_frequency_targets() {
        let spec = SceneSpec::default_benchmark();
        let ds = generate_dataset(&spec, 2000, 0, Split::Train).unwrap();
        let f = pixel_frequencies(&ds);
        for (c, (&got, &want)) in f.iter().zip(&spec.frequency_targets).enumerate() {
            if c == spec.background {
                continue;
            }
            assert!(
                (got - want).abs() <= 0.3 * want,
                "class {c}: {got} vs {want}"
            );
        }
        assert!(f[RIDER] < 0.01);
        assert!(f.iter().cloned().fold(0.0, f64::max) > 0.30);
        assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn frequencies_closed_forms() {
        let spec = toy_spec(3);
        let all0 = Dataset::new(
            vec![sample_from(vec![0; 4], 2, 2)],
            spec.clone(),
            Split::Train,
        )
        .unwrap();
        assert_eq!(pixel_frequencies(&all0), vec![1.0, 0.0, 0.0]);
        let half = Dataset::new(
            vec![sample_from(vec![0, 1, 0, 1], 2, 2)],
            spec,
            Split::Train,
        )
        .unwrap();
        assert_eq!(pixel_frequencies(&half), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn median_weights_closed_forms() {
        assert_eq!(median_frequency_weights(&[0.25; 4]).unwrap(), vec![1.0; 4]);
        let w = median_frequency_weights(&[0.1, 0.2, 0.7]).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        assert!((w[2] - 0.2 / 0.7).abs() < 1e-12);
        assert!(matches!(
            median_frequency_weights(&[0.5, 0.0, 0.5]),
            Err(Error::ZeroFrequency { class: 1 })
        ));
    }

    #[test]
    fn median_weight_ratio_on_cityscapes_shares() {
        // road 36.9%, motorcycle 0.1%
        let w = median_frequency_weights(&[0.369, 0.001, 0.05]).unwrap();
        assert!((w[1] / w[0] - 369.0).abs() < 1e-9);
    }

    #[test]
    fn erase_closed_forms() {
        let fill = [0.5, 0.25, 0.125];
        let s = sample_from(vec![0, 1, 0, 1], 2, 2);
        assert_eq!(erase_class(&s, 2, fill), s);

        let full = sample_from(vec![1; 4], 2, 2);
        let e = erase_class(&full, 1, fill);
        assert!(e.label.data().iter().all(|&l| l == IGNORE_LABEL));
        for px in e.image.data().chunks(3) {
            assert_eq!(px, fill);
        }

        let e = erase_class(&s, 1, fill);
        assert_eq!(e.image.data()[..3], s.image.data()[..3]);
        let spec = toy_spec(3);
        let ds = Dataset::new(vec![e], spec, Split::Val).unwrap();
        assert_eq!(pixel_frequencies(&ds), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn duplication_counts() {
        let spec = toy_spec(3);
        let samples = vec![
            sample_from(vec![0, 0, 0, 2], 2, 2),
            sample_from(vec![0; 4], 2, 2),
            sample_from(vec![2; 4], 2, 2),
        ];
        let ds = Dataset::new(samples, spec, Split::Train).unwrap();
        assert_eq!(resample_with_duplication(&ds, 1).samples, ds.samples);
        let r = resample_with_duplication(&ds, 2);
        assert_eq!(r.len(), 3 + 2);
        assert_eq!(r.samples[0], r.samples[1]);
        let only = Dataset::new(
            vec![ds.samples[2].clone(), ds.samples[0].clone()],
            ds.spec.clone(),
            Split::Train,
        )
        .unwrap();
        assert_eq!(resample_with_duplication(&only, 2).len(), 4);
        assert_eq!(duplication_indices(&ds, Some(2)), vec![0, 0, 1, 2, 2]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default_benchmark();
        let ds = generate_dataset(&spec, 3, 7, Split::Val).unwrap();
        ds.save(dir.path()).unwrap();
        let mut m = DatasetManifest::new(spec);
        m.splits.insert(
            "val".into(),
            SplitInfo {
                count: 3,
                base_seed: 7,
            },
        );
        m.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), Split::Val).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert!(Dataset::load(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_rules() {
        let mut spec = SceneSpec::default_benchmark();
        spec.cooccurrence_rules[0].companion = 9;
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::default_benchmark();
        spec.cooccurrence_rules[0].rho = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::default_benchmark();
        spec.frequency_targets[1] = 0.9;
        assert!(spec.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn erase_is_idempotent(seed in 0u64..10_000, c in 0usize..6) {
            let s = generate_sample(&SceneSpec::default_benchmark(), seed).unwrap();
            let fill = [0.4, 0.5, 0.6];
            let once = erase_class(&s, c, fill);
            prop_assert_eq!(erase_class(&once, c, fill), once);
        }

        #[test]
        fn frequencies_sum_to_one(seed in 0u64..10_000, n in 1usize..5, erase in 0usize..6) {
            let spec = SceneSpec::default_benchmark();
            let mut ds = generate_dataset(&spec, n, seed, Split::Train).unwrap();
            ds.samples[0] = erase_class(&ds.samples[0], erase, [0.0; 3]);
            let f = pixel_frequencies(&ds);
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
