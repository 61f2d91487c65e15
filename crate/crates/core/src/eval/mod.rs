//! Scoring predicted label maps against ground truth.
//!
//! Predicted labels carry no semantics, so each predicted cluster is first
//! matched one-to-one to a ground-truth class by maximizing the number of
//! agreeing pixels; IoU and pixel accuracy are computed under that matching.

pub mod hungarian;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian_assign, matched_count};

use crate::error::{Error, Result};
use crate::types::LabelMap;

/// Pixel counts of (predicted label, ground-truth class) pairs.
///
/// Labels are kept as raw ids; [`ConfusionMatrix::matrix`] densifies them
/// into contiguous row and column indices. Counts from several images can
/// be accumulated before a single assignment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfusionMatrix {
    pairs: BTreeMap<(u32, u32), u64>,
    /// Classes that must appear as columns even with no pixels.
    classes: Vec<u32>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixes the ground-truth column set (e.g. all 27 COCO classes).
    pub fn with_classes(classes: impl IntoIterator<Item = u32>) -> Self {
        let mut classes: Vec<u32> = classes.into_iter().collect();
        classes.sort_unstable();
        classes.dedup();
        Self {
            classes,
            ..Self::default()
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: Option<u32>) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch(format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if Some(g) == ignore {
                continue;
            }
            *self.pairs.entry((p, g)).or_insert(0) += 1;
            self.total += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (&k, &v) in &other.pairs {
            *self.pairs.entry(k).or_insert(0) += v;
        }
        self.total += other.total;
        self.classes.extend(&other.classes);
        self.classes.sort_unstable();
        self.classes.dedup();
    }

    /// Number of scored pixels.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn pred_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.pairs.keys().map(|&(p, _)| p).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn gt_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.pairs.keys().map(|&(_, g)| g).chain(self.classes.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Dense `P x G` counts with rows in ascending predicted id order and
    /// columns in ascending class id order.
    pub fn matrix(&self) -> Array2<i64> {
        let pred = self.pred_ids();
        let gt = self.gt_ids();
        let pi: BTreeMap<u32, usize> = pred.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let gi: BTreeMap<u32, usize> = gt.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut m = Array2::zeros((pred.len(), gt.len()));
        for (&(p, g), &c) in &self.pairs {
            m[[pi[&p], gi[&g]]] = c as i64;
        }
        m
    }
}

/// Builds the confusion matrix of a single prediction.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, ignore: Option<u32>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    cm.add(pred, gt, ignore)?;
    Ok(cm)
}

/// Predicted-to-class matching over the densified matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pred_ids: Vec<u32>,
    pub gt_ids: Vec<u32>,
    /// `mapping[i]` is the column matched to row `i`.
    pub mapping: Vec<Option<usize>>,
    pub matched_count: u64,
}

impl Assignment {
    /// Raw predicted id -> raw class id.
    pub fn as_map(&self) -> BTreeMap<u32, u32> {
        self.mapping
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (self.pred_ids[r], self.gt_ids[c])))
            .collect()
    }
}

pub fn assign(cm: &ConfusionMatrix) -> Assignment {
    let m = cm.matrix();
    let mapping = hungarian_assign(&m);
    let matched = matched_count(&m, &mapping);
    Assignment {
        pred_ids: cm.pred_ids(),
        gt_ids: cm.gt_ids(),
        mapping,
        matched_count: matched as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Thing,
    Stuff,
}

/// Names and thing/stuff kinds of ground-truth classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub classes: BTreeMap<u32, (String, ClassKind)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u32,
    pub name: Option<String>,
    pub kind: Option<ClassKind>,
    pub matched_pred: Option<u32>,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BsdStrategy {
    All,
    Fine,
    Coarse,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdScores {
    pub all: f64,
    pub fine: f64,
    pub coarse: f64,
    pub mean: f64,
}

impl BsdScores {
    pub fn get(&self, s: BsdStrategy) -> f64 {
        match s {
            BsdStrategy::All => self.all,
            BsdStrategy::Fine => self.fine,
            BsdStrategy::Coarse => self.coarse,
            BsdStrategy::Mean => self.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou_all: f64,
    pub miou_things: Option<f64>,
    pub miou_stuff: Option<f64>,
    pub pixel_acc: f64,
    pub per_class: Vec<ClassScore>,
    pub assignment: Option<Assignment>,
    pub bsd: Option<BsdScores>,
    pub num_images: usize,
    pub missing: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-class IoU and pixel accuracy under `assignment`.
///
/// Pixels of predicted clusters left unmatched count as misses for the class
/// they fall on.
pub fn miou(cm: &ConfusionMatrix, assignment: &Assignment, split: Option<&ClassSplit>) -> Result<EvalReport> {
    if cm.total() == 0 {
        return Err(Error::EmptyEval);
    }
    let m = cm.matrix();
    let (p, g) = m.dim();
    let row_sums: Vec<u64> = (0..p).map(|r| m.row(r).sum() as u64).collect();
    let col_sums: Vec<u64> = (0..g).map(|c| m.column(c).sum() as u64).collect();
    let mut matched_row = vec![None; g];
    for (r, c) in assignment.mapping.iter().enumerate() {
        if let Some(c) = c {
            matched_row[*c] = Some(r);
        }
    }
    let mut per_class = Vec::with_capacity(g);
    let mut tp_total = 0u64;
    for c in 0..g {
        let class_id = assignment.gt_ids[c];
        let (tp, pred_size) = match matched_row[c] {
            Some(r) => (m[[r, c]] as u64, row_sums[r]),
            None => (0, 0),
        };
        tp_total += tp;
        let fp = pred_size - tp;
        let fn_ = col_sums[c] - tp;
        let union = tp + fp + fn_;
        let meta = split.and_then(|s| s.classes.get(&class_id));
        per_class.push(ClassScore {
            class_id,
            name: meta.map(|(n, _)| n.clone()),
            kind: meta.map(|&(_, k)| k),
            matched_pred: matched_row[c].map(|r| assignment.pred_ids[r]),
            tp,
            fp,
            fn_,
            iou: (union > 0).then(|| tp as f64 / union as f64),
        });
    }
    let miou_all = mean(per_class.iter().filter_map(|c| c.iou)).unwrap_or(0.0);
    let by_kind = |kind: ClassKind| {
        split.and_then(|_| mean(per_class.iter().filter(|c| c.kind == Some(kind)).filter_map(|c| c.iou)))
    };
    Ok(EvalReport {
        miou_all,
        miou_things: by_kind(ClassKind::Thing),
        miou_stuff: by_kind(ClassKind::Stuff),
        pixel_acc: tp_total as f64 / cm.total() as f64,
        per_class,
        assignment: Some(assignment.clone()),
        bsd: None,
        num_images: 1,
        missing: Vec::new(),
    })
}

/// Confusion, assignment and scores in one call.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, ignore: Option<u32>) -> Result<EvalReport> {
    let cm = confusion(pred, gt, ignore)?;
    miou(&cm, &assign(&cm), None)
}

/// Per-image mIoU of `pred` against every annotation, combined by the four
/// counting strategies.
pub fn bsd500_scores(pred: &LabelMap, variants: &[LabelMap], ignore: Option<u32>) -> Result<BsdScores> {
    if variants.is_empty() {
        return Err(Error::NoGroundTruth("no ground-truth variants".into()));
    }
    let scores: Vec<f64> = variants
        .iter()
        .map(|gt| evaluate(pred, gt, ignore).map(|r| r.miou_all))
        .collect::<Result<_>>()?;
    let segments: Vec<usize> = variants.iter().map(|v| v.distinct(ignore).len()).collect();
    // first variant wins ties in both directions
    let mut fine = 0;
    let mut coarse = 0;
    for i in 1..variants.len() {
        if segments[i] > segments[fine] {
            fine = i;
        }
        if segments[i] < segments[coarse] {
            coarse = i;
        }
    }
    let all = scores.iter().sum::<f64>() / scores.len() as f64;
    let (fine, coarse) = (scores[fine], scores[coarse]);
    Ok(BsdScores {
        all,
        fine,
        coarse,
        mean: (all + fine + coarse) / 3.0,
    })
}

/// Averages per-image reports (segments-as-entities protocol).
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::EmptyEval);
    }
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let bsd = if reports.iter().all(|r| r.bsd.is_some()) {
        let b = |s: BsdStrategy| avg(&|r: &EvalReport| r.bsd.unwrap().get(s));
        Some(BsdScores {
            all: b(BsdStrategy::All),
            fine: b(BsdStrategy::Fine),
            coarse: b(BsdStrategy::Coarse),
            mean: b(BsdStrategy::Mean),
        })
    } else {
        None
    };
    Ok(EvalReport {
        miou_all: avg(&|r| r.miou_all),
        miou_things: None,
        miou_stuff: None,
        pixel_acc: avg(&|r| r.pixel_acc),
        per_class: Vec::new(),
        assignment: None,
        bsd,
        num_images: reports.len(),
        missing: Vec::new(),
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::decode(path, e.to_string()))
    }

    /// One row per class: id, name, kind, matched prediction, tp, fp, fn, iou.
    pub fn write_class_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
        let csv_err = |e: csv::Error| Error::Config(e.to_string());
        w.write_record(["class_id", "name", "kind", "matched_pred", "tp", "fp", "fn", "iou"])
            .map_err(csv_err)?;
        for c in &self.per_class {
            let kind = match c.kind {
                Some(ClassKind::Thing) => "thing",
                Some(ClassKind::Stuff) => "stuff",
                None => "",
            };
            w.write_record([
                c.class_id.to_string(),
                c.name.clone().unwrap_or_default(),
                kind.to_string(),
                c.matched_pred.map(|p| p.to_string()).unwrap_or_default(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.iou.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Human-readable summary lines.
    pub fn summary(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "images      {}", self.num_images)?;
        writeln!(out, "mIoU all    {:.4}", self.miou_all)?;
        if let Some(v) = self.miou_things {
            writeln!(out, "mIoU things {v:.4}")?;
        }
        if let Some(v) = self.miou_stuff {
            writeln!(out, "mIoU stuff  {v:.4}")?;
        }
        writeln!(out, "pAcc        {:.4}", self.pixel_acc)?;
        if let Some(b) = self.bsd {
            writeln!(out, "BSD All {:.4}  Fine {:.4}  Coarse {:.4}  Mean {:.4}", b.all, b.fine, b.coarse, b.mean)?;
        }
        if !self.missing.is_empty() {
            writeln!(out, "missing     {}", self.missing.len())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lm(rows: Vec<Vec<u32>>) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        LabelMap::from_vec(h, w, rows.concat()).unwrap()
    }

    /// Label maps whose confusion matrix equals `cm` exactly.
    fn maps_from_counts(cm: &Array2<i64>) -> (LabelMap, LabelMap) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for ((r, c), &n) in cm.indexed_iter() {
            for _ in 0..n {
                p.push(r as u32);
                g.push(c as u32);
            }
        }
        let n = p.len();
        (LabelMap::from_vec(1, n, p).unwrap(), LabelMap::from_vec(1, n, g).unwrap())
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = lm(vec![vec![0, 0, 1], vec![1, 1, 0]]);
        let cm = confusion(&gt, &gt, None).unwrap();
        assert_eq!(cm.matrix(), array![[3i64, 0], [0, 3]]);
        let r = evaluate(&gt, &gt, None).unwrap();
        assert_eq!(r.miou_all, 1.0);
        assert_eq!(r.pixel_acc, 1.0);
    }

    #[test]
    fn constant_prediction_row() {
        let pred = lm(vec![vec![0; 4]]);
        let gt = lm(vec![vec![0, 0, 1, 1]]);
        assert_eq!(confusion(&pred, &gt, None).unwrap().matrix(), array![[2i64, 2]]);
    }

    #[test]
    fn ignored_pixels_are_dropped() {
        let pred = lm(vec![vec![0, 1, 1, 0]]);
        let gt = lm(vec![vec![0, 255, 1, 255]]);
        let cm = confusion(&pred, &gt, Some(255)).unwrap();
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn shape_mismatch() {
        let a = lm(vec![vec![0, 1]]);
        let b = lm(vec![vec![0], vec![1]]);
        assert!(matches!(confusion(&a, &b, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn hand_computed_miou() {
        let (pred, gt) = maps_from_counts(&array![[5, 1], [2, 7]]);
        let r = evaluate(&pred, &gt, None).unwrap();
        assert!((r.per_class[0].iou.unwrap() - 5.0 / 8.0).abs() < 1e-12);
        assert!((r.per_class[1].iou.unwrap() - 7.0 / 10.0).abs() < 1e-12);
        assert!((r.miou_all - 0.6625).abs() < 1e-12);
        assert!((r.pixel_acc - 12.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_cluster_pixels_are_misses() {
        // three clusters, two classes: cluster 2 stays unmatched
        let (pred, gt) = maps_from_counts(&array![[4, 0], [0, 4], [1, 1]]);
        let r = evaluate(&pred, &gt, None).unwrap();
        assert_eq!(r.per_class[0].fn_, 1);
        assert!((r.per_class[0].iou.unwrap() - 0.8).abs() < 1e-12);
        assert!((r.pixel_acc - 0.8).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_leave_the_mean() {
        let mut cm = ConfusionMatrix::with_classes([0, 1, 2]);
        let pred = lm(vec![vec![0, 0, 1, 1]]);
        let gt = lm(vec![vec![0, 0, 1, 1]]);
        cm.add(&pred, &gt, None).unwrap();
        let r = miou(&cm, &assign(&cm), None).unwrap();
        assert_eq!(r.per_class.len(), 3);
        assert_eq!(r.per_class[2].iou, None);
        assert_eq!(r.miou_all, 1.0);
    }

    #[test]
    fn empty_eval() {
        let pred = lm(vec![vec![0, 1]]);
        let gt = lm(vec![vec![255, 255]]);
        assert!(matches!(evaluate(&pred, &gt, Some(255)), Err(Error::EmptyEval)));
    }

    #[test]
    fn things_and_stuff_split() {
        let mut split = ClassSplit::default();
        split.classes.insert(0, ("person".into(), ClassKind::Thing));
        split.classes.insert(1, ("sky".into(), ClassKind::Stuff));
        let (pred, gt) = maps_from_counts(&array![[5, 1], [2, 7]]);
        let cm = confusion(&pred, &gt, None).unwrap();
        let r = miou(&cm, &assign(&cm), Some(&split)).unwrap();
        assert!((r.miou_things.unwrap() - 5.0 / 8.0).abs() < 1e-12);
        assert!((r.miou_stuff.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bsd_single_variant() {
        let gt = lm(vec![vec![0, 0, 1, 1]]);
        let pred = lm(vec![vec![3, 3, 3, 5]]);
        let s = bsd500_scores(&pred, &[gt], None).unwrap();
        assert_eq!(s.all, s.fine);
        assert_eq!(s.fine, s.coarse);
        assert_eq!(s.coarse, s.mean);
    }

    #[test]
    fn bsd_strategy_selection() {
        // variant A (two segments) matches exactly, variant B (four segments) does not
        let a = lm(vec![vec![0, 0, 1, 1]]);
        let b = lm(vec![vec![0, 1, 2, 3]]);
        let pred = lm(vec![vec![7, 7, 9, 9]]);
        let s = bsd500_scores(&pred, &[a.clone(), b.clone()], None).unwrap();
        let sa = evaluate(&pred, &a, None).unwrap().miou_all;
        let sb = evaluate(&pred, &b, None).unwrap().miou_all;
        assert_eq!(sa, 1.0);
        assert_eq!(s.coarse, sa);
        assert_eq!(s.fine, sb);
        assert!((s.all - (sa + sb) / 2.0).abs() < 1e-12);
        assert!((s.mean - (s.all + s.fine + s.coarse) / 3.0).abs() < 1e-12);
        assert!(matches!(bsd500_scores(&pred, &[], None), Err(Error::NoGroundTruth(_))));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = maps_from_counts(&array![[5, 1], [2, 7]]);
        let r = evaluate(&pred, &gt, None).unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::read_json(&dir.path().join("r.json")).unwrap(), r);
        r.write_class_csv(&dir.path().join("c.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
