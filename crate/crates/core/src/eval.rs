//! Count metrics, the clustering baselines and proposal coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facade::{clamp_box, node_features, DetectionBox, FacadeRecord};
use crate::graph::UnionFind;

/// How per-class F1 scores are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    /// Classes weighted by their ground-truth support.
    Weighted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub off_by_one: f64,
}

/// Metrics over rounded predicted counts. Every floor count seen in
/// `truths` is one class for F1.
pub fn metric_suite(preds: &[usize], truths: &[usize], average: F1Average) -> Result<Metrics> {
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("metric_suite needs at least one facade"));
    }
    let n = preds.len() as f64;
    let pairs = || preds.iter().zip(truths).map(|(&p, &t)| (p, t));
    let mae = pairs().map(|(p, t)| p.abs_diff(t) as f64).sum::<f64>() / n;
    let accuracy = pairs().filter(|(p, t)| p == t).count() as f64 / n;
    let off_by_one = pairs().filter(|(p, t)| p.abs_diff(*t) <= 1).count() as f64 / n;

    let classes: BTreeSet<usize> = truths.iter().copied().collect();
    let mut f1 = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, t) in pairs() {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let score = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        f1 += match average {
            F1Average::Macro => score / classes.len() as f64,
            F1Average::Weighted => score * (tp + fn_) as f64 / n,
        };
    }
    Ok(Metrics {
        mae,
        accuracy,
        f1,
        off_by_one,
    })
}

/// One evaluated facade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacadeResult {
    pub facade_id: String,
    pub predicted: f64,
    pub rounded: usize,
    pub truth: usize,
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub facades: Vec<FacadeResult>,
    pub metrics: Metrics,
    pub assignment_accuracy: Option<f64>,
    pub coverage: Option<f64>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, facades: Vec<FacadeResult>, average: F1Average) -> Result<Self> {
        let preds: Vec<usize> = facades.iter().map(|f| f.rounded).collect();
        let truths: Vec<usize> = facades.iter().map(|f| f.truth).collect();
        let metrics = metric_suite(&preds, &truths, average)?;
        Ok(Self {
            method: method.into(),
            facades,
            metrics,
            assignment_accuracy: None,
            coverage: None,
        })
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "facade_id,predicted,rounded,truth,confidence")?;
        for f in &self.facades {
            let conf = f.confidence.map(|c| c.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{conf}", f.facade_id, f.predicted, f.rounded, f.truth)?;
        }
        Ok(())
    }
}

/// Side-by-side comparison, one row per method.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("| Method | MAE | Accuracy | F1 | Off-by-1 |\n|---|---|---|---|---|\n");
    for r in reports {
        let m = r.metrics;
        out.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            r.method, m.mae, m.accuracy, m.f1, m.off_by_one
        ));
    }
    out
}

/// Fraction of nodes whose predicted slot equals the true floor, with true
/// floor ids re-ranked bottom-up so the lowest present floor is slot 0.
pub fn assignment_accuracy(record: &FacadeRecord, slots: &[usize]) -> Result<f64> {
    if slots.len() != record.boxes.len() {
        return Err(Error::invalid(format!(
            "facade `{}`: {} assignments for {} boxes",
            record.facade_id,
            slots.len(),
            record.boxes.len()
        )));
    }
    let ids = record
        .boxes
        .iter()
        .map(|b| b.floor_id)
        .collect::<Option<Vec<u32>>>()
        .ok_or_else(|| Error::invalid(format!("facade `{}` lacks floor ids", record.facade_id)))?;
    if ids.is_empty() {
        return Ok(1.0);
    }
    let rank: BTreeMap<u32, usize> = ids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, f)| (f, i))
        .collect();
    let hits = ids.iter().zip(slots).filter(|(f, s)| rank[f] == **s).count();
    Ok(hits as f64 / ids.len() as f64)
}

/// Normalized y-centers exactly as the graph builder sees them.
pub fn normalized_y_centers(record: &FacadeRecord) -> Result<Vec<f64>> {
    record.validate()?;
    if record.boxes.is_empty() {
        return Err(Error::invalid(format!("facade `{}` has no detections", record.facade_id)));
    }
    let (w, h) = (record.width as f64, record.height as f64);
    record
        .boxes
        .iter()
        .map(|b| node_features(b, w, h).map(|f| f.center_y()))
        .collect()
}

pub const KDE_GRID: usize = 512;
pub const KDE_PEAK_FLOOR: f64 = 0.05;

/// Number of Gaussian-density peaks over normalized y-centers.
pub fn baseline_kde(record: &FacadeRecord, bandwidth: f64) -> Result<usize> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let ys = normalized_y_centers(record)?;
    Ok(kde_peaks(&ys, bandwidth).clamp(1, ys.len()))
}

pub fn kde_peaks(ys: &[f64], bandwidth: f64) -> usize {
    let density: Vec<f64> = (0..KDE_GRID)
        .map(|k| {
            let x = k as f64 / (KDE_GRID - 1) as f64;
            ys.iter().map(|y| (-0.5 * ((x - y) / bandwidth).powi(2)).exp()).sum()
        })
        .collect();
    let max = density.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    let at = |k: isize| {
        if k < 0 || k as usize >= KDE_GRID {
            f64::NEG_INFINITY
        } else {
            density[k as usize]
        }
    };
    // strict rise on the left, non-strict on the right: a flat top counts once
    (0..KDE_GRID as isize)
        .filter(|&k| {
            let d = at(k);
            d >= KDE_PEAK_FLOOR * max && d > at(k - 1) && d >= at(k + 1)
        })
        .count()
}

/// Single-linkage clusters of normalized y-centers, merging while the
/// closest inter-cluster gap is at most `threshold`.
pub fn baseline_agglomerative(record: &FacadeRecord, threshold: f64) -> Result<usize> {
    let ys = normalized_y_centers(record)?;
    Ok(single_linkage_clusters(&ys, threshold))
}

pub fn single_linkage_clusters(ys: &[f64], threshold: f64) -> usize {
    if ys.is_empty() {
        return 0;
    }
    // in one dimension single linkage only ever merges sorted neighbours
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    1 + sorted.windows(2).filter(|w| w[1] - w[0] > threshold).count()
}

/// Shared length of two vertical intervals over the shorter one.
pub fn vertical_overlap_ratio(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let inter = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let shorter = a.h.min(b.h);
    if shorter <= 0.0 {
        return 0.0;
    }
    inter.max(0.0) / shorter
}

/// Components of boxes whose vertical intervals overlap by at least `overlap_threshold`.
pub fn baseline_intersection(record: &FacadeRecord, overlap_threshold: f64) -> Result<usize> {
    record.validate()?;
    if record.boxes.is_empty() {
        return Err(Error::invalid(format!("facade `{}` has no detections", record.facade_id)));
    }
    let (w, h) = (record.width as f64, record.height as f64);
    let boxes: Vec<DetectionBox> = record.boxes.iter().map(|b| clamp_box(b, w, h).0).collect();
    let mut uf = UnionFind::new(boxes.len());
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if vertical_overlap_ratio(&boxes[i], &boxes[j]) >= overlap_threshold {
                uf.union(i, j);
            }
        }
    }
    Ok(uf.set_count())
}

/// `[min top, max bottom]` of the labeled boxes of each floor, bottom floor first.
pub fn floor_bands(record: &FacadeRecord) -> Vec<(f64, f64)> {
    let mut bands: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for b in &record.boxes {
        if let Some(f) = b.floor_id {
            let e = bands.entry(f).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(b.y);
            e.1 = e.1.max(b.y + b.h);
        }
    }
    bands.into_values().collect()
}

/// Fraction of bands that contain at least one proposal center.
pub fn coverage_rate(proposals: &[DetectionBox], bands: &[(f64, f64)]) -> Result<f64> {
    if bands.is_empty() {
        return Err(Error::invalid("coverage needs at least one ground-truth band"));
    }
    let hit = bands
        .iter()
        .filter(|(lo, hi)| {
            proposals.iter().any(|p| {
                let cy = p.center().1;
                *lo <= cy && cy <= *hi
            })
        })
        .count();
    Ok(hit as f64 / bands.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facade::Category;
    use crate::graph::{build_graph, pseudo_labels, GraphConfig};
    use crate::synth::{generate, SynthConfig};

    fn facade(rows: &[(f64, f64)]) -> FacadeRecord {
        FacadeRecord {
            facade_id: "t".into(),
            width: 100,
            height: 100,
            boxes: rows
                .iter()
                .enumerate()
                .map(|(i, &(y, h))| DetectionBox::new(10.0 * i as f64, y, 5.0, h, Category::Window))
                .collect(),
            floor_count: None,
        }
    }

    fn centers(ys: &[f64]) -> FacadeRecord {
        facade(&ys.iter().map(|y| (y * 100.0 - 1.0, 2.0)).collect::<Vec<_>>())
    }

    #[test]
    fn perfect_predictions() {
        let m = metric_suite(&[2, 3, 4, 4], &[2, 3, 4, 4], F1Average::Macro).unwrap();
        assert_eq!(m, Metrics { mae: 0.0, accuracy: 1.0, f1: 1.0, off_by_one: 1.0 });
        let single = metric_suite(&[5, 5], &[5, 5], F1Average::Macro).unwrap();
        assert_eq!(single.f1, 1.0);
    }

    #[test]
    fn hand_computed_metrics() {
        let m = metric_suite(&[3, 5], &[4, 5], F1Average::Macro).unwrap();
        assert_eq!(m.mae, 0.5);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.off_by_one, 1.0);
        // class 4: tp 0 -> 0; class 5: tp 1 fp 0 fn 0 -> 1
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn weighted_f1_uses_support() {
        let preds = [2, 2, 2, 3];
        let truths = [2, 2, 3, 3];
        let macro_ = metric_suite(&preds, &truths, F1Average::Macro).unwrap().f1;
        let weighted = metric_suite(&preds, &truths, F1Average::Weighted).unwrap().f1;
        let (f2, f3) = (2.0 * 2.0 / 5.0, 2.0 * 1.0 / 3.0);
        assert!((macro_ - (f2 + f3) / 2.0).abs() < 1e-12);
        assert!((weighted - (0.5 * f2 + 0.5 * f3)).abs() < 1e-12);
    }

    #[test]
    fn metric_errors_and_order() {
        assert!(metric_suite(&[1], &[1, 2], F1Average::Macro).is_err());
        assert!(metric_suite(&[], &[], F1Average::Macro).is_err());
        let a = metric_suite(&[1, 3, 4, 2], &[1, 2, 4, 4], F1Average::Macro).unwrap();
        let b = metric_suite(&[2, 4, 3, 1], &[4, 4, 2, 1], F1Average::Macro).unwrap();
        assert_eq!(a, b);
        assert!(a.accuracy <= a.off_by_one);
    }

    #[test]
    fn kde_counts_rows() {
        assert_eq!(baseline_kde(&centers(&[0.5, 0.5, 0.5]), 0.02).unwrap(), 1);
        assert_eq!(baseline_kde(&centers(&[0.2, 0.2, 0.8, 0.8]), 0.02).unwrap(), 2);
        assert_eq!(baseline_kde(&centers(&[0.2, 0.2, 0.5, 0.5, 0.8, 0.8]), 0.02).unwrap(), 3);
        assert!(baseline_kde(&centers(&[0.5]), 0.0).is_err());
    }

    #[test]
    fn agglomerative_cases() {
        assert_eq!(baseline_agglomerative(&centers(&[0.4, 0.4, 0.4]), 0.01).unwrap(), 1);
        assert_eq!(single_linkage_clusters(&[0.2, 0.22, 0.6], 0.10), 2);
        assert_eq!(baseline_agglomerative(&centers(&[0.3]), 0.0).unwrap(), 1);
    }

    #[test]
    fn agglomerative_matches_pseudo_count() {
        let cfg = GraphConfig::default();
        for irregular in [false, true] {
            let synth = SynthConfig {
                irregular,
                seed: 5,
                ..Default::default()
            };
            for r in generate(&synth, 100).unwrap() {
                let g = build_graph(&r, &cfg).unwrap();
                let ac = baseline_agglomerative(&r, g.tau).unwrap();
                assert_eq!(ac, pseudo_labels(&g).count, "{}", r.facade_id);
            }
        }
    }

    #[test]
    fn intersection_cases() {
        assert_eq!(baseline_intersection(&facade(&[(10.0, 10.0); 4]), 0.5).unwrap(), 1);
        assert_eq!(baseline_intersection(&facade(&[(0.0, 10.0), (20.0, 10.0), (40.0, 10.0)]), 0.5).unwrap(), 3);
        // [0, 10] and [5, 15] share half of either interval
        assert_eq!(baseline_intersection(&facade(&[(0.0, 10.0), (5.0, 10.0)]), 0.5).unwrap(), 1);
        assert_eq!(baseline_intersection(&facade(&[(0.0, 10.0), (6.0, 10.0)]), 0.5).unwrap(), 2);
    }

    #[test]
    fn baselines_stay_in_range() {
        let synth = SynthConfig {
            irregular: true,
            seed: 9,
            ..Default::default()
        };
        for r in generate(&synth, 50).unwrap() {
            let n = r.boxes.len();
            for c in [
                baseline_kde(&r, 0.02).unwrap(),
                baseline_agglomerative(&r, 0.03).unwrap(),
                baseline_intersection(&r, 0.5).unwrap(),
            ] {
                assert!((1..=n).contains(&c));
            }
        }
    }

    #[test]
    fn coverage_cases() {
        let bands = [(0.0, 10.0), (20.0, 30.0), (40.0, 50.0), (60.0, 70.0)];
        let at = |cy: f64| DetectionBox::new(0.0, cy - 1.0, 2.0, 2.0, Category::Window);
        let all: Vec<_> = [5.0, 25.0, 45.0, 65.0].map(at).to_vec();
        assert_eq!(coverage_rate(&all, &bands).unwrap(), 1.0);
        assert_eq!(coverage_rate(&[], &bands).unwrap(), 0.0);
        assert_eq!(coverage_rate(&[at(5.0), at(45.0), at(15.0)], &bands).unwrap(), 0.5);
        assert!(coverage_rate(&all, &[]).is_err());
    }

    #[test]
    fn assignment_accuracy_reranks_floors() {
        let mut r = facade(&[(80.0, 5.0), (50.0, 5.0), (20.0, 5.0)]);
        for (b, f) in r.boxes.iter_mut().zip([0, 2, 3]) {
            b.floor_id = Some(f);
        }
        assert_eq!(assignment_accuracy(&r, &[0, 1, 2]).unwrap(), 1.0);
        assert!((assignment_accuracy(&r, &[0, 2, 2]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(floor_bands(&r), vec![(80.0, 85.0), (50.0, 55.0), (20.0, 25.0)]);
    }

    #[test]
    fn csv_and_table() {
        let rep = EvalReport::new(
            "kde",
            vec![FacadeResult {
                facade_id: "a".into(),
                predicted: 3.2,
                rounded: 3,
                truth: 3,
                confidence: None,
            }],
            F1Average::Macro,
        )
        .unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "facade_id,predicted,rounded,truth,confidence\na,3.2,3,3,\n");
        assert!(markdown_table(&[rep]).contains("| kde | 0.000 | 1.000 | 1.000 | 1.000 |"));
    }
}
