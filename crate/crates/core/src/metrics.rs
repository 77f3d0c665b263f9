//! Classification metrics, ROC/AUC computation, and curve export.
//!
//! The positive class is high density (label 1) throughout; a score at the
//! decision threshold counts as positive. Ratios with a zero denominator are
//! reported as absent, never as zero.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("labels and scores have different lengths ({labels} vs {scores})")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("label {0} is not binary")]
    BadLabel(usize),
    #[error("scores contain non-finite values")]
    NonFiniteScore,
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Confusion counts at a threshold; positive class is label 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionCounts {
    pub fn from_scores(
        labels: &[usize],
        scores: &[f64],
        threshold: f64,
    ) -> Result<Self, MetricsError> {
        validate(labels, scores)?;
        let mut c = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 0,
        };
        for (&y, &s) in labels.iter().zip(scores) {
            let pred = s >= threshold;
            match (y == 1, pred) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_neg += 1,
                (false, true) => c.false_pos += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

fn ratio(num: usize, denom: usize) -> Option<f64> {
    (denom > 0).then(|| num as f64 / denom as f64)
}

/// F1/accuracy/AUC/sensitivity/specificity at a threshold. Absent entries
/// had a zero denominator (or, for AUC, a single-class input).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub threshold: f64,
}

impl MetricsReport {
    /// CSV row matching the header `f1,acc,auc,sen,spe,threshold`; absent
    /// values are empty cells.
    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            cell(self.f1),
            cell(self.acc),
            cell(self.auc),
            cell(self.sen),
            cell(self.spe),
            self.threshold
        )
    }

    pub const CSV_HEADER: &'static str = "f1,acc,auc,sen,spe,threshold";

    pub fn human_readable(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        format!(
            "F1 {}  ACC {}  AUC {}  SEN {}  SPE {}  (threshold {})",
            cell(self.f1),
            cell(self.acc),
            cell(self.auc),
            cell(self.sen),
            cell(self.spe),
            self.threshold
        )
    }
}

fn validate(labels: &[usize], scores: &[f64]) -> Result<(), MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(MetricsError::BadLabel(bad));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    Ok(())
}

/// Thresholded metrics (AUC excluded; see [`roc_auc`]).
pub fn classification_metrics(
    labels: &[usize],
    scores: &[f64],
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    let c = ConfusionCounts::from_scores(labels, scores, threshold)?;
    Ok(MetricsReport {
        f1: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
        acc: ratio(c.true_pos + c.true_neg, c.total()),
        auc: None,
        sen: ratio(c.true_pos, c.true_pos + c.false_neg),
        spe: ratio(c.true_neg, c.true_neg + c.false_pos),
        threshold,
    })
}

/// Thresholded metrics plus AUC when both classes are present.
pub fn evaluate_scores(
    labels: &[usize],
    scores: &[f64],
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    let mut report = classification_metrics(labels, scores, threshold)?;
    report.auc = roc_auc(labels, scores).ok().map(|c| c.auc);
    Ok(report)
}

/// ROC curve from `(0,0)` to `(1,1)` with tied scores grouped, so the
/// trapezoidal AUC equals the pair-counting statistic
/// `(concordant + ties/2) / (n_pos * n_neg)`.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn roc_auc(labels: &[usize], scores: &[f64]) -> Result<RocCurve, MetricsError> {
    validate(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // advance over the whole tie group at this score
        let score = scores[order[i]];
        let (mut d_tp, mut d_fp) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        tp += d_tp;
        fp += d_fp;
        let (x1, y1) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc })
}

fn write_file(path: &Path, content: &str) -> Result<(), MetricsError> {
    fs::write(path, content).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn curve_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr\n");
    for &(fpr, tpr) in &curve.points {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    out
}

/// Write `<basename>.csv` and `<basename>.svg` for a single curve.
pub fn export_roc(curve: &RocCurve, basename: &Path) -> Result<(), MetricsError> {
    write_file(&basename.with_extension("csv"), &curve_csv(curve))?;
    write_file(
        &basename.with_extension("svg"),
        &render_svg(&[("roc".to_string(), curve.clone())]),
    )
}

/// Write one CSV per curve (`<basename>_<name>.csv`) and a combined
/// `<basename>.svg` with one polyline per model.
pub fn export_roc_set(curves: &[(String, RocCurve)], basename: &Path) -> Result<(), MetricsError> {
    let stem = basename
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "roc".into());
    for (name, curve) in curves {
        let path = basename.with_file_name(format!("{stem}_{name}.csv"));
        write_file(&path, &curve_csv(curve))?;
    }
    write_file(&basename.with_extension("svg"), &render_svg(curves))
}

const SVG_PALETTE: [&str; 6] = [
    "#1b6ca8", "#c0392b", "#27824f", "#8e44ad", "#d4820a", "#2c3e50",
];

/// Fixed 800x600 viewport, unit axes, dashed diagonal, a polyline per curve
/// and a legend with the AUC to three decimals.
fn render_svg(curves: &[(String, RocCurve)]) -> String {
    let (vw, vh) = (800.0, 600.0);
    let (left, right, top, bottom) = (70.0, 20.0, 20.0, 50.0);
    let pw = vw - left - right;
    let ph = vh - top - bottom;
    let px = |fpr: f64| left + fpr * pw;
    let py = |tpr: f64| top + (1.0 - tpr) * ph;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {vw} {vh}\" \
         width=\"{vw}\" height=\"{vh}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" \
         fill=\"none\" stroke=\"black\"/>\n"
    ));
    // ticks and grid
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{:.1}</text>\n",
            px(f),
            vh - bottom + 18.0,
            f
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{:.1}</text>\n",
            left - 8.0,
            py(f) + 4.0,
            f
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">false positive rate</text>\n",
        left + pw / 2.0,
        vh - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">true positive rate</text>\n",
        top + ph / 2.0,
        top + ph / 2.0
    ));
    // chance diagonal
    s.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
         stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    ));
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", px(fpr), py(tpr)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = top + 24.0 + 20.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + 16.0,
            ly - 4.0,
            left + 44.0,
            ly - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\">{name} (AUC {:.3})</text>\n",
            left + 52.0,
            ly,
            curve.auc
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = [1, 0, 1, 0];
        let scores = [0.9, 0.1, 0.8, 0.2];
        let m = evaluate_scores(&labels, &scores, 0.5).unwrap();
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.acc, Some(1.0));
        assert_eq!(m.sen, Some(1.0));
        assert_eq!(m.spe, Some(1.0));
        assert_eq!(m.auc, Some(1.0));
    }

    #[test]
    fn hand_counted_confusion_case() {
        // tp=3, fp=1, fn=1, tn=5
        let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let scores = [0.9, 0.8, 0.7, 0.2, 0.6, 0.1, 0.1, 0.1, 0.2, 0.3];
        let m = classification_metrics(&labels, &scores, 0.5).unwrap();
        assert_eq!(m.sen, Some(0.75));
        assert!((m.spe.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.acc, Some(0.8));
        assert_eq!(m.f1, Some(0.75));
    }

    #[test]
    fn all_negative_predictions_leave_f1_absent() {
        let labels = [1, 0, 1];
        let scores = [0.1, 0.2, 0.3];
        let m = classification_metrics(&labels, &scores, 0.9).unwrap();
        assert_eq!(m.sen, Some(0.0));
        assert_eq!(m.spe, Some(1.0));
        // tp = 0 and fp = 0 but fn > 0, so the F1 denominator is nonzero here;
        // drop the positives entirely for the degenerate case
        let labels = [0, 0, 0];
        let m = classification_metrics(&labels, &scores, 0.9).unwrap();
        assert_eq!(m.f1, None);
        assert_eq!(m.sen, None);
    }

    #[test]
    fn threshold_extremes_saturate_sen_and_spe() {
        let labels = [1, 0, 1, 0, 1];
        let scores = [0.7, 0.4, 0.6, 0.3, 0.9];
        let lo = classification_metrics(&labels, &scores, 0.0).unwrap();
        assert_eq!((lo.sen, lo.spe), (Some(1.0), Some(0.0)));
        let hi = classification_metrics(&labels, &scores, 1.0).unwrap();
        assert_eq!((hi.sen, hi.spe), (Some(0.0), Some(1.0)));
    }

    #[test]
    fn boundary_score_counts_as_positive() {
        let m = classification_metrics(&[1], &[0.5], 0.5).unwrap();
        assert_eq!(m.sen, Some(1.0));
    }

    /// O(n^2) pair-counting oracle: concordant + half of ties.
    fn pair_count_auc(labels: &[usize], scores: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_matches_the_four_pair_hand_case() {
        let labels = [1, 1, 0, 0];
        let scores = [0.9, 0.8, 0.85, 0.7];
        let curve = roc_auc(&labels, &scores).unwrap();
        assert!((curve.auc - 0.75).abs() < 1e-15);
        assert!((pair_count_auc(&labels, &scores) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_extremes() {
        let labels = [0, 0, 1, 1];
        assert!((roc_auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap().auc - 1.0).abs() < 1e-15);
        assert!(roc_auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap().auc.abs() < 1e-15);
    }

    #[test]
    fn auc_equals_pair_counting_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.random_range(5..60);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
                continue;
            }
            // quantized scores produce plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0)
                .collect();
            let curve = roc_auc(&labels, &scores).unwrap();
            let oracle = pair_count_auc(&labels, &scores);
            assert!(
                (curve.auc - oracle).abs() < 1e-12,
                "{} vs {oracle}",
                curve.auc
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let labels: Vec<usize> = (0..40).map(|_| rng.random_range(0..2)).collect();
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = roc_auc(&labels, &scores).unwrap().auc;
        let squashed: Vec<f64> = scores
            .iter()
            .map(|s| 1.0 / (1.0 + (-5.0 * s).exp()))
            .collect();
        let scaled: Vec<f64> = scores.iter().map(|s| 100.0 * s + 3.0).collect();
        assert!((roc_auc(&labels, &squashed).unwrap().auc - base).abs() < 1e-12);
        assert!((roc_auc(&labels, &scaled).unwrap().auc - base).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_is_monotone_and_anchored() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..2)).collect();
        let scores: Vec<f64> = (0..30)
            .map(|_| (rng.random_range(0.0..1.0f64) * 4.0).round() / 4.0)
            .collect();
        let curve = roc_auc(&labels, &scores).unwrap();
        assert_eq!(curve.points[0], (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1, "{w:?}");
        }
        assert!((0.0..=1.0).contains(&curve.auc));
    }

    #[test]
    fn single_class_input_rejected() {
        assert!(matches!(
            roc_auc(&[1, 1, 1], &[0.5, 0.6, 0.7]),
            Err(MetricsError::SingleClass)
        ));
    }

    #[test]
    fn export_writes_deterministic_files_with_one_polyline_per_model() {
        let dir = tempfile::tempdir().unwrap();
        let labels = [1, 0, 1, 0];
        let a = roc_auc(&labels, &[0.9, 0.2, 0.8, 0.4]).unwrap();
        let b = roc_auc(&labels, &[0.6, 0.5, 0.9, 0.1]).unwrap();

        let single = dir.path().join("single");
        export_roc(&a, &single).unwrap();
        let csv = fs::read_to_string(single.with_extension("csv")).unwrap();
        assert!(csv.starts_with("fpr,tpr\n"));
        assert_eq!(csv.lines().count(), 1 + a.points.len());

        let multi = dir.path().join("fig");
        let named = vec![("model_a".to_string(), a), ("model_b".to_string(), b)];
        export_roc_set(&named, &multi).unwrap();
        export_roc_set(&named, &dir.path().join("fig2")).unwrap();
        let svg1 = fs::read_to_string(multi.with_extension("svg")).unwrap();
        let svg2 = fs::read_to_string(dir.path().join("fig2.svg")).unwrap();
        assert_eq!(svg1, svg2);
        assert_eq!(svg1.matches("<polyline").count(), 2);
        assert_eq!(svg1.matches("AUC").count(), 2);
        assert!(dir.path().join("fig_model_a.csv").is_file());
        assert!(dir.path().join("fig_model_b.csv").is_file());
    }
}
