//! Segmentation metrics and the bias analyses: per-class IoU, the class
//! erasure benchmark, classifier-weight cosine correlation and class
//! activation map export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datagen::{erase_class, Dataset, Sample};
use crate::dropclass::importance_map;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{LabelMap, Tensor, IGNORE_LABEL};

/// Anything that labels a sample.
pub trait Segmenter: Sync {
    fn segment(&self, sample: &Sample) -> Result<LabelMap>;
}

impl Segmenter for Model {
    fn segment(&self, sample: &Sample) -> Result<LabelMap> {
        self.predict(&sample.image)
    }
}

/// Returns the ground truth: a model that cannot be fooled by context.
pub struct LabelCopy;

impl Segmenter for LabelCopy {
    fn segment(&self, sample: &Sample) -> Result<LabelMap> {
        Ok(sample.label.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// `None` where the class never occurs in prediction or label.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Mean over the rarer half of the classes; set by [`IoUReport::with_frequencies`].
    pub miou_dagger: Option<f64>,
    pub frequencies: Vec<f64>,
}

impl IoUReport {
    /// Attaches training-split frequencies and the rare-half mean.
    pub fn with_frequencies(mut self, frequencies: &[f64]) -> Result<Self> {
        self.miou_dagger = Some(miou_dagger(&self, frequencies)?);
        self.frequencies = frequencies.to_vec();
        Ok(self)
    }
}

/// Confusion counts per class over many maps.
#[derive(Clone, Debug, Default, PartialEq)]
struct Counts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Counts {
    fn new(n: usize) -> Self {
        Counts {
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
        }
    }

    fn add_map(&mut self, pred: &LabelMap, label: &LabelMap) {
        let n = self.tp.len();
        for (&p, &l) in pred.data().iter().zip(label.data()) {
            if l == IGNORE_LABEL {
                continue;
            }
            if p == l {
                self.tp[l as usize] += 1;
            } else {
                if (p as usize) < n {
                    self.fp[p as usize] += 1;
                }
                self.fn_[l as usize] += 1;
            }
        }
    }

    fn merge(mut self, other: Counts) -> Counts {
        for (a, b) in [
            (&mut self.tp, other.tp),
            (&mut self.fp, other.fp),
            (&mut self.fn_, other.fn_),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }

    fn report(&self) -> IoUReport {
        let iou: Vec<Option<f64>> = (0..self.tp.len())
            .map(|c| {
                let union = self.tp[c] + self.fp[c] + self.fn_[c];
                (union > 0).then(|| self.tp[c] as f64 / union as f64)
            })
            .collect();
        IoUReport {
            miou: mean_defined(iou.iter().copied()),
            iou,
            miou_dagger: None,
            frequencies: Vec::new(),
        }
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn check_labels(map: &LabelMap, num_classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = map
        .data()
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
    {
        return Err(Error::contract(
            "iou_per_class",
            format!("{what} value {bad} out of range for {num_classes} classes"),
        ));
    }
    Ok(())
}

/// `TP / (TP + FP + FN)` per class, pooled over all maps; pixels labeled
/// ignore count nowhere.
pub fn iou_per_class(
    predictions: &[LabelMap],
    labels: &[LabelMap],
    num_classes: usize,
) -> Result<IoUReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "iou_per_class",
            format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let mut counts = Counts::new(num_classes);
    for (p, l) in predictions.iter().zip(labels) {
        if (p.height(), p.width()) != (l.height(), l.width()) {
            return Err(Error::shape(
                "iou_per_class",
                format!(
                    "prediction {}x{} vs label {}x{}",
                    p.height(),
                    p.width(),
                    l.height(),
                    l.width()
                ),
            ));
        }
        check_labels(l, num_classes, "label")?;
        check_labels(p, num_classes, "prediction")?;
        counts.add_map(p, l);
    }
    Ok(counts.report())
}

/// Mean IoU over the `floor(|C|/2)` least frequent classes (ties go to the
/// lower index), skipping classes whose IoU is undefined.
pub fn miou_dagger(report: &IoUReport, frequencies: &[f64]) -> Result<f64> {
    let set = rare_half(frequencies);
    if frequencies.len() != report.iou.len() {
        return Err(Error::shape(
            "miou_dagger",
            format!(
                "{} frequencies for {} classes",
                frequencies.len(),
                report.iou.len()
            ),
        ));
    }
    Ok(mean_defined(set.into_iter().map(|c| report.iou[c])))
}

/// Class indices of the rarer half, rarest first.
pub fn rare_half(frequencies: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frequencies.len()).collect();
    order.sort_by(|&a, &b| frequencies[a].total_cmp(&frequencies[b]).then(a.cmp(&b)));
    order.truncate(frequencies.len() / 2);
    order
}

/// Least frequent class (lowest index on ties).
pub fn rarest_class(frequencies: &[f64]) -> Option<usize> {
    let mut order: Vec<usize> = (0..frequencies.len()).collect();
    order.sort_by(|&a, &b| frequencies[a].total_cmp(&frequencies[b]).then(a.cmp(&b)));
    order.first().copied()
}

fn counts_over(
    segmenter: &dyn Segmenter,
    samples: &[Sample],
    num_classes: usize,
) -> Result<Counts> {
    samples
        .par_iter()
        .map(|s| {
            let pred = segmenter.segment(s)?;
            if (pred.height(), pred.width()) != (s.label.height(), s.label.width()) {
                return Err(Error::shape(
                    "evaluate",
                    "prediction size differs from label",
                ));
            }
            check_labels(&pred, num_classes, "prediction")?;
            let mut c = Counts::new(num_classes);
            c.add_map(&pred, &s.label);
            Ok(c)
        })
        .try_reduce(|| Counts::new(num_classes), |a, b| Ok(a.merge(b)))
}

/// Segments every sample and scores it.
pub fn evaluate(segmenter: &dyn Segmenter, dataset: &Dataset) -> Result<IoUReport> {
    Ok(counts_over(segmenter, &dataset.samples, dataset.num_classes())?.report())
}

/// For each evaluated class, the three classes whose erasure hurt it most on
/// the reference model. Reused verbatim to score other models.
#[derive(Clone, Debug, PartialEq)]
pub struct ErasureSets {
    pub top3: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErasureRow {
    pub class: usize,
    pub top3: Vec<usize>,
    pub iou_intact: Option<f64>,
    /// Mean IoU over the three erased copies.
    pub iou_erased: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErasureReport {
    pub rows: Vec<ErasureRow>,
    pub miou_intact: f64,
    pub miou_erased: f64,
    pub sets: ErasureSets,
    /// `erased_iou[x][y]`: IoU of class `y` on the copy with `x` erased.
    pub erased_iou: Vec<Vec<Option<f64>>>,
}

impl ErasureReport {
    pub fn row(&self, class: usize) -> &ErasureRow {
        &self.rows[class]
    }
}

/// Scores `segmenter` on the intact set and on one erased copy per class.
/// With `sets = None` the Top-3 erasers are ranked on this segmenter (it is
/// the reference); otherwise the given sets are used unchanged.
pub fn erasure_benchmark(
    segmenter: &dyn Segmenter,
    val: &Dataset,
    fill: [f32; 3],
    sets: Option<&ErasureSets>,
) -> Result<ErasureReport> {
    let n = val.num_classes();
    if n < 4 {
        return Err(Error::TooFewClasses(n));
    }
    if let Some(s) = sets {
        if s.top3.len() != n
            || s.top3
                .iter()
                .any(|t| t.len() != 3 || t.iter().any(|&c| c >= n))
        {
            return Err(Error::contract(
                "erasure_benchmark",
                "erasure sets do not match the class count",
            ));
        }
    }
    let intact = evaluate(segmenter, val)?;
    let mut erased_iou = Vec::with_capacity(n);
    for x in 0..n {
        let copy: Vec<Sample> = val
            .samples
            .iter()
            .map(|s| erase_class(s, x, fill))
            .collect();
        let r = counts_over(segmenter, &copy, n)?.report();
        let mut row = r.iou;
        row[x] = None;
        erased_iou.push(row);
    }

    let sets = match sets {
        Some(s) => s.clone(),
        None => ErasureSets {
            top3: (0..n)
                .map(|y| rank_erasers(y, &intact.iou, &erased_iou))
                .collect(),
        },
    };

    let rows: Vec<ErasureRow> = (0..n)
        .map(|y| {
            let top3 = sets.top3[y].clone();
            let vals: Vec<Option<f64>> = top3.iter().map(|&x| erased_iou[x][y]).collect();
            let iou_erased = if vals.iter().all(Option::is_some) {
                Some(vals.iter().flatten().sum::<f64>() / vals.len() as f64)
            } else {
                None
            };
            let iou_intact = intact.iou[y];
            ErasureRow {
                class: y,
                top3,
                iou_intact,
                iou_erased,
                delta: iou_erased.zip(iou_intact).map(|(e, i)| e - i),
            }
        })
        .collect();
    let both: Vec<&ErasureRow> = rows.iter().filter(|r| r.delta.is_some()).collect();
    Ok(ErasureReport {
        miou_intact: mean_defined(both.iter().map(|r| r.iou_intact)),
        miou_erased: mean_defined(both.iter().map(|r| r.iou_erased)),
        rows,
        sets,
        erased_iou,
    })
}

/// Classes other than `y`, ordered by how much erasing them lowers `y`'s
/// IoU (largest drop first, lower index on ties); the first three.
fn rank_erasers(y: usize, intact: &[Option<f64>], erased: &[Vec<Option<f64>>]) -> Vec<usize> {
    let base = intact[y].unwrap_or(0.0);
    let mut cands: Vec<(usize, f64)> = (0..intact.len())
        .filter(|&x| x != y)
        .map(|x| (x, erased[x][y].map_or(f64::NEG_INFINITY, |v| base - v)))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.into_iter().take(3).map(|(x, _)| x).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub matrix: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
}

impl CorrelationReport {
    pub fn mean_row_sum(&self) -> f64 {
        self.row_sums.iter().sum::<f64>() / self.row_sums.len() as f64
    }
}

/// Cosine similarity between classifier weight rows.
pub fn weight_correlation(model: &Model) -> Result<CorrelationReport> {
    let n = model.num_classes();
    let k = model.feature_channels();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            (0..k)
                .map(|ch| model.classifier_weight(c, ch) as f64)
                .collect()
        })
        .collect();
    cosine_matrix(&rows)
}

pub fn cosine_matrix(rows: &[Vec<f64>]) -> Result<CorrelationReport> {
    let n = rows.len();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(class) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroNormRow { class });
    }
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let v = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    let row_sums = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| matrix[i][j]).sum())
        .collect();
    Ok(CorrelationReport { matrix, row_sums })
}

/// `ReLU(sum_k S^c ⊙ A)` per pixel, as `[h, w]`, before normalization.
pub fn gradcam_raw(model: &Model, x: &Tensor, c: usize) -> Result<Tensor> {
    let a = model.extract_features(x)?;
    let s = importance_map(model, &a, c)?;
    let [h, w, k] = *a.shape() else {
        return Err(Error::shape(
            "export_gradcam",
            "expected a single [h,w,3] image",
        ));
    };
    let data = a
        .data()
        .chunks_exact(k)
        .zip(s.data().chunks_exact(k))
        .map(|(av, sv)| av.iter().zip(sv).map(|(p, q)| p * q).sum::<f32>().max(0.0))
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn normalize_map(raw: &Tensor) -> Tensor {
    let max = raw.data().iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        raw.map(|v| v / max)
    } else {
        raw.clone()
    }
}

/// Writes the normalized map as a plain PGM at `path` and the raw values as
/// CSV next to it (same stem, `.csv`). Returns both paths.
pub fn export_gradcam(
    model: &Model,
    x: &Tensor,
    c: usize,
    path: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let raw = gradcam_raw(model, x, c)?;
    let norm = normalize_map(&raw);
    let (h, w) = (raw.shape()[0], raw.shape()[1]);
    let mut pgm = format!("P2\n{w} {h}\n255\n");
    for row in norm.data().chunks_exact(w) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v * 255.0).round() as u32).to_string())
            .collect();
        pgm.push_str(&line.join(" "));
        pgm.push('\n');
    }
    let mut csv = String::new();
    for row in raw.data().chunks_exact(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    let csv_path = path.with_extension("csv");
    crate::io::write_atomic(path, pgm.as_bytes())?;
    crate::io::write_atomic(&csv_path, csv.as_bytes())?;
    Ok((path.to_path_buf(), csv_path))
}

/// Share of a map's mass inside the pixels labeled `c`.
pub fn mass_inside(map: &Tensor, label: &LabelMap, c: usize) -> f64 {
    let total: f64 = map.data().iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = map
        .data()
        .iter()
        .zip(label.data())
        .filter(|(_, &l)| l as usize == c)
        .map(|(&v, _)| v as f64)
        .sum();
    inside / total
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

pub const IOU_HEADER: &str = "class,name,iou";

/// One line per class, then `mIoU` and `mIoU_dagger` lines.
pub fn iou_csv(report: &IoUReport, names: &[String]) -> String {
    let mut out = format!("{IOU_HEADER}\n");
    for (c, v) in report.iou.iter().enumerate() {
        writeln!(
            out,
            "{c},{},{}",
            names.get(c).map_or("", String::as_str),
            fmt_opt(*v)
        )
        .expect("string write");
    }
    writeln!(out, "mIoU,,{}", fmt_f(report.miou)).expect("string write");
    writeln!(
        out,
        "mIoU_dagger,,{}",
        report.miou_dagger.map(fmt_f).unwrap_or_default()
    )
    .expect("string write");
    out
}

pub const ERASURE_HEADER: &str = "class,name,top1,top2,top3,iou_intact,iou_erased,delta";

pub fn erasure_csv(report: &ErasureReport, names: &[String]) -> String {
    let mut out = format!("{ERASURE_HEADER}\n");
    for r in &report.rows {
        let t: Vec<String> = r.top3.iter().map(|c| c.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.class,
            names.get(r.class).map_or("", String::as_str),
            t.join(","),
            fmt_opt(r.iou_intact),
            fmt_opt(r.iou_erased),
            fmt_opt(r.delta)
        )
        .expect("string write");
    }
    writeln!(
        out,
        "mIoU,,,,,{},{},{}",
        fmt_f(report.miou_intact),
        fmt_f(report.miou_erased),
        fmt_f(report.miou_erased - report.miou_intact)
    )
    .expect("string write");
    out
}

pub fn correlation_csv(report: &CorrelationReport, names: &[String]) -> String {
    let n = report.matrix.len();
    let label = |c: usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut out = String::from("class");
    for c in 0..n {
        out.push(',');
        out.push_str(&label(c));
    }
    out.push_str(",row_sum\n");
    for (i, row) in report.matrix.iter().enumerate() {
        out.push_str(&label(i));
        for v in row {
            write!(out, ",{v:.6}").expect("string write");
        }
        writeln!(out, ",{:.6}", report.row_sums[i]).expect("string write");
    }
    writeln!(
        out,
        "mean_row_sum,{}{:.6}",
        ",".repeat(n),
        report.mean_row_sum()
    )
    .expect("string write");
    out
}
