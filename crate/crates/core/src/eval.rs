//! One-pass evaluation: precision, normalized precision and success curves,
//! per-attribute breakdowns and plot files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::bbox::BoundingBox;
use crate::datamodel::{Attribute, SequenceRecord};
use crate::error::{Error, Result};

/// Centre-error thresholds 0..=50 px.
pub const PRECISION_POINTS: usize = 51;
/// IoU thresholds 0, 0.05, .., 1.
pub const SUCCESS_POINTS: usize = 21;
/// Normalized-error thresholds 0, 0.01, .., 0.5.
pub const NORMALIZED_POINTS: usize = 51;
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
pub const NORMALIZED_MAX: f64 = 0.5;

pub fn precision_thresholds() -> Vec<f64> {
    (0..PRECISION_POINTS).map(|i| i as f64).collect()
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / (SUCCESS_POINTS - 1) as f64).collect()
}

pub fn normalized_thresholds() -> Vec<f64> {
    (0..NORMALIZED_POINTS).map(|i| NORMALIZED_MAX * i as f64 / (NORMALIZED_POINTS - 1) as f64).collect()
}

pub fn center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

/// Centre offset divided per axis by the groundtruth size; `None` for a
/// zero-size groundtruth.
pub fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Option<f64> {
    if !gt.has_positive_area() {
        return None;
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Some(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

/// Scores of one frame with a usable groundtruth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub center_error: f64,
    pub normalized_error: f64,
    pub iou: f64,
}

impl FrameScore {
    /// Non-finite predictions score as complete misses.
    pub fn new(pred: &BoundingBox, gt: &BoundingBox) -> Option<Self> {
        let ne = normalized_center_error(pred, gt)?;
        let finite = pred.is_finite();
        Some(Self {
            center_error: if finite { center_error(pred, gt) } else { f64::INFINITY },
            normalized_error: if finite { ne } else { f64::INFINITY },
            iou: if finite && pred.has_positive_area() { pred.iou(gt) } else { 0.0 },
        })
    }

    fn succeeds_at(&self, t: f64) -> bool {
        self.iou > 0.0 && self.iou >= t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeResult {
    pub frames: usize,
    pub pr_at_20: f64,
    pub npr: f64,
    pub sr_auc: f64,
    pub precision_curve: Vec<f64>,
    pub normalized_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
}

impl OpeResult {
    pub fn from_scores(scores: &[FrameScore]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Degenerate("no frame with a groundtruth box to evaluate".into()));
        }
        let n = scores.len() as f64;
        let frac = |ok: &dyn Fn(&FrameScore) -> bool| scores.iter().filter(|s| ok(s)).count() as f64 / n;
        let precision_curve: Vec<f64> =
            precision_thresholds().into_iter().map(|t| frac(&|s| s.center_error <= t)).collect();
        let normalized_curve: Vec<f64> =
            normalized_thresholds().into_iter().map(|t| frac(&|s| s.normalized_error <= t)).collect();
        let success_curve: Vec<f64> = success_thresholds().into_iter().map(|t| frac(&|s| s.succeeds_at(t))).collect();
        let r = Self {
            frames: scores.len(),
            pr_at_20: frac(&|s| s.center_error <= PRECISION_THRESHOLD_PX),
            npr: mean(&normalized_curve),
            sr_auc: mean(&success_curve),
            precision_curve,
            normalized_curve,
            success_curve,
        };
        r.check_monotone()?;
        Ok(r)
    }

    fn check_monotone(&self) -> Result<()> {
        let up = |c: &[f64]| c.windows(2).all(|w| w[0] <= w[1]);
        let in_unit = |c: &[f64]| c.iter().all(|v| (0.0..=1.0).contains(v));
        let curves = [&self.precision_curve, &self.normalized_curve, &self.success_curve];
        if !up(&self.precision_curve) || !up(&self.normalized_curve) {
            return Err(Error::Integrity("precision curve decreases with threshold".into()));
        }
        if !self.success_curve.windows(2).all(|w| w[0] >= w[1]) {
            return Err(Error::Integrity("success curve increases with IoU threshold".into()));
        }
        if !curves.iter().all(|c| in_unit(c)) {
            return Err(Error::Integrity("curve value outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Frame scores of one sequence; frames without a positive-area
/// groundtruth are skipped.
pub fn score_sequence(trajectory: &[BoundingBox], seq: &SequenceRecord) -> Result<Vec<FrameScore>> {
    if trajectory.len() != seq.groundtruth.len() {
        return Err(Error::Integrity(format!(
            "sequence {:?}: trajectory has {} boxes for {} frames",
            seq.name,
            trajectory.len(),
            seq.groundtruth.len()
        )));
    }
    Ok(trajectory
        .iter()
        .zip(&seq.groundtruth)
        .filter_map(|(p, g)| g.as_ref().and_then(|g| FrameScore::new(p, g)))
        .collect())
}

/// Frame-level aggregate over all sequences.
pub fn ope_evaluate(trajectories: &[Vec<BoundingBox>], sequences: &[SequenceRecord]) -> Result<OpeResult> {
    if trajectories.len() != sequences.len() {
        return Err(Error::Integrity(format!(
            "{} trajectories for {} sequences",
            trajectories.len(),
            sequences.len()
        )));
    }
    let mut all = Vec::new();
    for (t, s) in trajectories.iter().zip(sequences) {
        all.extend(score_sequence(t, s)?);
    }
    OpeResult::from_scores(&all)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeReport {
    pub results: BTreeMap<Attribute, OpeResult>,
    /// Requested attributes no sequence carries.
    pub omitted: Vec<Attribute>,
}

/// Metrics over the sequences carrying each attribute code in `codes`
/// (all 17 when empty).
pub fn attribute_report(
    trajectories: &[Vec<BoundingBox>],
    sequences: &[SequenceRecord],
    codes: &[String],
) -> Result<AttributeReport> {
    let wanted: Vec<Attribute> = if codes.is_empty() {
        Attribute::ALL.to_vec()
    } else {
        codes.iter().map(|c| c.parse()).collect::<Result<_>>()?
    };
    if trajectories.len() != sequences.len() {
        return Err(Error::Integrity(format!(
            "{} trajectories for {} sequences",
            trajectories.len(),
            sequences.len()
        )));
    }
    let mut report = AttributeReport { results: BTreeMap::new(), omitted: Vec::new() };
    for a in wanted {
        let (t, s): (Vec<_>, Vec<_>) = trajectories
            .iter()
            .zip(sequences)
            .filter(|(_, s)| s.attributes.contains(&a))
            .map(|(t, s)| (t.clone(), s.clone()))
            .unzip();
        if s.is_empty() {
            report.omitted.push(a);
        } else {
            report.results.insert(a, ope_evaluate(&t, &s)?);
        }
    }
    Ok(report)
}

/// Curve file contents: `metric,threshold,value` rows.
pub fn format_curves(r: &OpeResult) -> String {
    let mut s = String::from("metric,threshold,value\n");
    let sets = [
        ("precision", precision_thresholds(), &r.precision_curve),
        ("normalized_precision", normalized_thresholds(), &r.normalized_curve),
        ("success", success_thresholds(), &r.success_curve),
    ];
    for (name, th, curve) in sets {
        for (t, v) in th.iter().zip(curve.iter()) {
            let _ = writeln!(s, "{name},{t},{v}");
        }
    }
    s
}

/// The three curves of a curve file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub precision: Vec<f64>,
    pub normalized: Vec<f64>,
    pub success: Vec<f64>,
}

impl From<&OpeResult> for Curves {
    fn from(r: &OpeResult) -> Self {
        Self {
            precision: r.precision_curve.clone(),
            normalized: r.normalized_curve.clone(),
            success: r.success_curve.clone(),
        }
    }
}

pub fn parse_curves(text: &str, origin: &str) -> Result<Curves> {
    let mut c = Curves::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { location: format!("{origin}:{}", i + 1), message: m };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", parts.len())));
        }
        let v: f64 = parts[2].trim().parse().map_err(|e| err(format!("{e}")))?;
        match parts[0] {
            "precision" => c.precision.push(v),
            "normalized_precision" => c.normalized.push(v),
            "success" => c.success.push(v),
            other => return Err(err(format!("unknown metric {other:?}"))),
        }
    }
    Ok(c)
}

/// Entries ordered by descending `key`, ties by name.
pub fn rank_by<'a>(entries: &'a [(String, OpeResult)], key: impl Fn(&OpeResult) -> f64) -> Vec<&'a (String, OpeResult)> {
    let mut v: Vec<&(String, OpeResult)> = entries.iter().collect();
    v.sort_by(|a, b| key(&b.1).total_cmp(&key(&a.1)).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Writes `precision.svg`, `success.svg` and one `curves_<name>.csv` per
/// tracker. Legends are ranked by PR@20 and SR respectively.
pub fn emit_plots(entries: &[(String, OpeResult)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, r) in entries {
        let p = out_dir.join(format!("curves_{name}.csv"));
        std::fs::write(&p, format_curves(r)).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    let precision = rank_by(entries, |r| r.pr_at_20);
    let p = out_dir.join("precision.svg");
    plot(
        &p,
        "Precision plot",
        "Location error threshold (px)",
        "Precision",
        50.0,
        &precision
            .iter()
            .map(|(n, r)| (format!("{n} [{:.3}]", r.pr_at_20), precision_thresholds(), r.precision_curve.clone()))
            .collect::<Vec<_>>(),
    )?;
    written.push(p);
    let success = rank_by(entries, |r| r.sr_auc);
    let p = out_dir.join("success.svg");
    plot(
        &p,
        "Success plot",
        "Overlap threshold",
        "Success rate",
        1.0,
        &success
            .iter()
            .map(|(n, r)| (format!("{n} [{:.3}]", r.sr_auc), success_thresholds(), r.success_curve.clone()))
            .collect::<Vec<_>>(),
    )?;
    written.push(p);
    Ok(written)
}

type Series = (String, Vec<f64>, Vec<f64>);

fn plot(path: &Path, title: &str, xlabel: &str, ylabel: &str, xmax: f64, series: &[Series]) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| Error::Image { path: path.to_path_buf(), message: e.to_string() };
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax, 0.0..1.0)
        .map_err(|e| fail(&e))?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw().map_err(|e| fail(&e))?;
    for (i, (label, xs, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(xs.iter().copied().zip(ys.iter().copied()), color.stroke_width(2)))
            .map_err(|e| fail(&e))?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| fail(&e))?;
    root.present().map_err(|e| fail(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic_sequence, SynthConfig};

    fn seq_with(gt: Vec<Option<BoundingBox>>) -> SequenceRecord {
        let cfg = SynthConfig { n_frames: gt.len(), width: 32, height: 32, object_w: 8.0, object_h: 8.0, ..SynthConfig::default() };
        let mut s = generate_synthetic_sequence(&cfg, 0).unwrap();
        s.groundtruth = gt;
        s
    }

    #[test]
    fn center_errors() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(center_error(&a, &a), 0.0);
        assert_eq!(center_error(&BoundingBox::new(3.0, 4.0, 10.0, 10.0), &a), 5.0);
        assert_eq!(normalized_center_error(&BoundingBox::new(10.0, 0.0, 10.0, 10.0), &a), Some(1.0));
        assert_eq!(normalized_center_error(&a, &BoundingBox::new(0.0, 0.0, 0.0, 4.0)), None);
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let gt: Vec<_> = (0..6).map(|i| Some(BoundingBox::new(i as f64, 2.0, 8.0, 6.0))).collect();
        let s = seq_with(gt.clone());
        let r = ope_evaluate(&[gt.into_iter().map(Option::unwrap).collect()], &[s]).unwrap();
        assert_eq!((r.pr_at_20, r.npr, r.sr_auc), (1.0, 1.0, 1.0));
        assert!(r.precision_curve.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn displaced_beyond_threshold_fails_precision() {
        let gt = BoundingBox::new(100.0, 100.0, 200.0, 200.0);
        let s = seq_with(vec![Some(gt); 4]);
        let pred = BoundingBox::new(125.0, 100.0, 200.0, 200.0);
        let r = ope_evaluate(&[vec![pred; 4]], &[s]).unwrap();
        assert_eq!(r.pr_at_20, 0.0);
        assert_eq!(r.precision_curve[25], 1.0);
    }

    #[test]
    fn absent_frames_are_excluded() {
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        let s = seq_with(vec![Some(b), None, Some(BoundingBox::new(0.0, 0.0, 0.0, 0.0)), Some(b)]);
        let far = BoundingBox::new(500.0, 500.0, 4.0, 4.0);
        let r = ope_evaluate(&[vec![b, far, far, b]], &[s]).unwrap();
        assert_eq!(r.frames, 2);
        assert_eq!(r.pr_at_20, 1.0);
    }

    #[test]
    fn length_mismatch_is_integrity_error() {
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        let s = seq_with(vec![Some(b); 3]);
        assert!(matches!(ope_evaluate(&[vec![b; 2]], &[s]), Err(Error::Integrity(_))));
    }

    #[test]
    fn attribute_subsets() {
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        let mut s1 = seq_with(vec![Some(b); 3]);
        let mut s2 = seq_with(vec![Some(b); 3]);
        s1.attributes.insert(Attribute::FastMotion);
        s2.attributes.insert(Attribute::FastMotion);
        s2.attributes.insert(Attribute::MotionBlur);
        let t1 = vec![b; 3];
        let t2 = vec![BoundingBox::new(50.0, 0.0, 4.0, 4.0); 3];
        let seqs = [s1, s2.clone()];
        let trajs = [t1, t2.clone()];
        let rep = attribute_report(&trajs, &seqs, &[]).unwrap();
        assert_eq!(rep.results[&Attribute::FastMotion], ope_evaluate(&trajs, &seqs).unwrap());
        assert_eq!(rep.results[&Attribute::MotionBlur], ope_evaluate(&[t2], &[s2]).unwrap());
        assert_eq!(rep.omitted.len(), 15);
        assert!(matches!(attribute_report(&trajs, &seqs, &["ZZ".into()]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn curves_round_trip_and_plots_rank() {
        let dir = tempfile::tempdir().unwrap();
        let b = BoundingBox::new(10.0, 10.0, 20.0, 20.0);
        let s = seq_with(vec![Some(b); 4]);
        let good = ope_evaluate(&[vec![b; 4]], std::slice::from_ref(&s)).unwrap();
        let bad = ope_evaluate(&[vec![BoundingBox::new(17.0, 13.0, 20.0, 20.0); 4]], &[s]).unwrap();
        let entries = vec![("weak".to_string(), bad), ("strong".to_string(), good.clone())];
        let files = emit_plots(&entries, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("curves_strong.csv")).unwrap();
        assert_eq!(parse_curves(&text, "curves").unwrap(), Curves::from(&good));
        let ranked: Vec<&str> = rank_by(&entries, |r| r.sr_auc).iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ranked, ["strong", "weak"]);
        let svg = std::fs::read_to_string(dir.path().join("success.svg")).unwrap();
        assert!(svg.find("strong").unwrap() < svg.find("weak").unwrap());
    }
}
