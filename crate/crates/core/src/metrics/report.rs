//! Aggregation of per-pair metrics into run-level summaries, sweep curves,
//! CSV/plot artifacts, and a digest that pins report contents for
//! reproducibility checks.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Real;
use crate::render::write_png;

use super::{fmr, registration_recall, MetricThresholds, PairEvaluation};

/// Mean and population standard deviation of one metric over a run,
/// together with how many pairs contributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: Real,
    pub std: Real,
    pub n: usize,
}

impl SummaryStat {
    fn from_values(values: &[Real]) -> Option<SummaryStat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as Real;
        let mean = values.iter().sum::<Real>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        Some(SummaryStat { mean, std: var.sqrt(), n: values.len() })
    }
}

/// Run-level metric summary: per-metric mean/std plus the two recall-style
/// fractions. Dice and chamfer appear when at least one pair carried them;
/// their `n` records how many did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_pairs: usize,
    pub thresholds: MetricThresholds,
    pub inlier_ratio: SummaryStat,
    pub fmr: Real,
    pub registration_recall: Real,
    pub rmse_m: SummaryStat,
    pub rre_deg: SummaryStat,
    pub rte_mm: SummaryStat,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<SummaryStat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cd_mm: Option<SummaryStat>,
}

/// Collapses per-pair records into one summary. Errors on an empty set (an
/// empty test split is a configuration bug, not a zero) and when records
/// disagree on thresholds, which would make the recall fractions
/// incomparable.
pub fn summarize(evals: &[PairEvaluation]) -> Result<EvalSummary> {
    let first = evals
        .first()
        .ok_or_else(|| Error::invalid("cannot summarize an empty evaluation set"))?;
    let thresholds = first.thresholds;
    for e in evals {
        e.validate()?;
        if e.thresholds != thresholds {
            return Err(Error::invalid("evaluation records mix different thresholds"));
        }
    }
    let irs: Vec<Real> = evals.iter().map(|e| e.inlier_ratio).collect();
    let rmses: Vec<Real> = evals.iter().map(|e| e.rmse_m).collect();
    let rres: Vec<Real> = evals.iter().map(|e| e.rre_deg).collect();
    let rtes: Vec<Real> = evals.iter().map(|e| e.rte_mm).collect();
    let dices: Vec<Real> = evals.iter().filter_map(|e| e.dice).collect();
    let cds: Vec<Real> = evals.iter().filter_map(|e| e.cd_mm).collect();
    Ok(EvalSummary {
        n_pairs: evals.len(),
        thresholds,
        inlier_ratio: SummaryStat::from_values(&irs).unwrap(),
        fmr: fmr(&irs, thresholds.tau2)?,
        registration_recall: registration_recall(&rmses, thresholds.rho)?,
        rmse_m: SummaryStat::from_values(&rmses).unwrap(),
        rre_deg: SummaryStat::from_values(&rres).unwrap(),
        rte_mm: SummaryStat::from_values(&rtes).unwrap(),
        dice: SummaryStat::from_values(&dices),
        cd_mm: SummaryStat::from_values(&cds),
    })
}

/// Machine-readable form of a summary.
pub fn summary_toml(summary: &EvalSummary) -> Result<String> {
    toml::to_string_pretty(summary)
        .map_err(|e| Error::invalid(format!("serializing summary: {e}")))
}

/// One sweep sample: the controlled axis value and every pair evaluated
/// under it.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis_value: Real,
    pub evals: Vec<PairEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: Real,
    pub summary: EvalSummary,
}

/// Metric curves along one controlled axis (noise level, overlap bound,
/// point count, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

/// Summarizes each sweep point. Axis values must be finite and strictly
/// increasing so the emitted curves are well-defined.
pub fn sweep_report(axis: &str, points: &[SweepPoint]) -> Result<SweepReport> {
    if axis.trim().is_empty() {
        return Err(Error::invalid("sweep axis needs a name"));
    }
    if points.is_empty() {
        return Err(Error::invalid("sweep with zero points"));
    }
    let mut prev = Real::NEG_INFINITY;
    let mut rows = Vec::with_capacity(points.len());
    for p in points {
        if !p.axis_value.is_finite() || p.axis_value <= prev {
            return Err(Error::invalid(format!(
                "axis values must be finite and strictly increasing; got {} after {}",
                p.axis_value, prev
            )));
        }
        prev = p.axis_value;
        rows.push(SweepRow { axis_value: p.axis_value, summary: summarize(&p.evals)? });
    }
    Ok(SweepReport { axis: axis.to_string(), rows })
}

fn push_opt(line: &mut String, stat: Option<SummaryStat>) {
    match stat {
        Some(s) => line.push_str(&format!(",{:.9},{:.9}", s.mean, s.std)),
        None => line.push_str(",,"),
    }
}

/// Renders the report as CSV with fixed 9-decimal formatting, so equal
/// reports produce byte-equal text.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = format!(
        "{},pairs,ir_mean,ir_std,fmr,rr,rmse_m_mean,rmse_m_std,rre_deg_mean,rre_deg_std,\
         rte_mm_mean,rte_mm_std,dice_mean,dice_std,cd_mm_mean,cd_mm_std",
        report.axis
    );
    for row in &report.rows {
        let s = &row.summary;
        let mut line = format!(
            "\n{:.9},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            row.axis_value,
            s.n_pairs,
            s.inlier_ratio.mean,
            s.inlier_ratio.std,
            s.fmr,
            s.registration_recall,
            s.rmse_m.mean,
            s.rmse_m.std,
            s.rre_deg.mean,
            s.rre_deg.std,
            s.rte_mm.mean,
            s.rte_mm.std,
        );
        push_opt(&mut line, s.dice);
        push_opt(&mut line, s.cd_mm);
        out.push_str(&line);
    }
    out.push('\n');
    out
}

/// SHA-256 of the report text, hex-encoded. Two runs that agree on every
/// emitted number share a digest.
pub fn report_digest(csv: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(csv.as_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN_L: i64 = 48;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 16;
const MARGIN_B: i64 = 32;

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn draw_segment(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let t = s as Real / steps as Real;
        let x = a.0 as Real + (b.0 - a.0) as Real * t;
        let y = a.1 as Real + (b.1 - a.1) as Real * t;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn draw_marker(img: &mut RgbImage, p: (i64, i64), c: [u8; 3]) {
    for dx in -2..=2 {
        for dy in -2..=2 {
            put(img, p.0 + dx, p.1 + dy, c);
        }
    }
}

/// Minimal line plot of one metric curve: framed axes, tick stubs at the
/// data positions, a polyline with square markers. Metric names live in the
/// file name, not the image.
pub fn line_plot(xs: &[Real], ys: &[Real]) -> Result<RgbImage> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "plot needs matching nonempty series, got {} x {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("plot values must be finite"));
    }
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let frame = [70u8, 70, 70];
    let curve = [38u8, 90, 200];
    let (x0, x1) = (MARGIN_L, PLOT_W as i64 - MARGIN_R);
    let (y0, y1) = (PLOT_H as i64 - MARGIN_B, MARGIN_T);
    draw_segment(&mut img, (x0, y0), (x1, y0), frame);
    draw_segment(&mut img, (x0, y0), (x0, y1), frame);
    draw_segment(&mut img, (x0, y1), (x1, y1), frame);
    draw_segment(&mut img, (x1, y0), (x1, y1), frame);

    let (mut xmin, mut xmax) = (xs[0], xs[0]);
    let (mut ymin, mut ymax) = (ys[0], ys[0]);
    for (&x, &y) in xs.iter().zip(ys) {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    // Degenerate (constant) ranges get symmetric padding so the scale below
    // never divides by zero.
    let xpad = (0.05 * (xmax - xmin)).max(1e-9 + 0.05 * xmax.abs().max(1.0) * Real::EPSILON);
    let ypad = if ymax > ymin { 0.05 * (ymax - ymin) } else { 0.5 * ymax.abs().max(1e-3) };
    let (xmin, xmax) = (xmin - xpad, xmax + xpad);
    let (ymin, ymax) = (ymin - ypad, ymax + ypad);
    let sx = |v: Real| x0 + ((v - xmin) / (xmax - xmin) * (x1 - x0) as Real).round() as i64;
    let sy = |v: Real| y0 - ((v - ymin) / (ymax - ymin) * (y0 - y1) as Real).round() as i64;

    for &x in xs {
        let px = sx(x);
        draw_segment(&mut img, (px, y0), (px, y0 + 4), frame);
    }
    let pts: Vec<(i64, i64)> = xs.iter().zip(ys).map(|(&x, &y)| (sx(x), sy(y))).collect();
    for w in pts.windows(2) {
        draw_segment(&mut img, w[0], w[1], curve);
    }
    for &p in &pts {
        draw_marker(&mut img, p, curve);
    }
    Ok(img)
}

/// Paths produced by [`write_sweep_report`].
#[derive(Debug, Clone)]
pub struct SweepArtifacts {
    pub csv_path: PathBuf,
    /// Digest of the CSV text; stable across reruns of an identical sweep.
    pub digest: String,
    pub plot_paths: Vec<PathBuf>,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Writes the sweep CSV plus one PNG line plot per metric curve into `dir`
/// (created if needed). Dice/chamfer curves are emitted only when every row
/// carries them.
pub fn write_sweep_report(report: &SweepReport, dir: &Path) -> Result<SweepArtifacts> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = sweep_csv(report);
    let digest = report_digest(&csv);
    let base = slug(&report.axis);
    let csv_path = dir.join(format!("sweep_{base}.csv"));
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;

    let xs: Vec<Real> = report.rows.iter().map(|r| r.axis_value).collect();
    let mut curves: Vec<(&str, Vec<Real>)> = vec![
        ("rr", report.rows.iter().map(|r| r.summary.registration_recall).collect()),
        ("ir", report.rows.iter().map(|r| r.summary.inlier_ratio.mean).collect()),
        ("fmr", report.rows.iter().map(|r| r.summary.fmr).collect()),
        ("rre_deg", report.rows.iter().map(|r| r.summary.rre_deg.mean).collect()),
        ("rte_mm", report.rows.iter().map(|r| r.summary.rte_mm.mean).collect()),
    ];
    if report.rows.iter().all(|r| r.summary.dice.is_some()) {
        curves.push(("dice", report.rows.iter().map(|r| r.summary.dice.unwrap().mean).collect()));
    }
    if report.rows.iter().all(|r| r.summary.cd_mm.is_some()) {
        curves
            .push(("cd_mm", report.rows.iter().map(|r| r.summary.cd_mm.unwrap().mean).collect()));
    }
    let mut plot_paths = Vec::with_capacity(curves.len());
    for (name, ys) in curves {
        let img = line_plot(&xs, &ys)?;
        let path = dir.join(format!("{base}_{name}.png"));
        write_png(&path, &img)?;
        plot_paths.push(path);
    }
    Ok(SweepArtifacts { csv_path, digest, plot_paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DEFAULT_TAU2;

    fn eval(ir: Real, rmse: Real, dice: Option<Real>) -> PairEvaluation {
        PairEvaluation {
            inlier_ratio: ir,
            rmse_m: rmse,
            rre_deg: 0.4,
            rte_mm: 1.5,
            dice,
            cd_mm: dice.map(|d| 10.0 * (1.0 - d)),
            thresholds: MetricThresholds::default(),
        }
    }

    #[test]
    fn summary_means_match_hand_calculation() {
        let evals = [eval(0.8, 0.004, Some(0.9)), eval(0.2, 0.02, Some(0.7))];
        let s = summarize(&evals).unwrap();
        assert_eq!(s.n_pairs, 2);
        assert!((s.inlier_ratio.mean - 0.5).abs() < 1e-15);
        assert!((s.inlier_ratio.std - 0.3).abs() < 1e-12);
        // 0.8 and 0.2 both exceed tau2 = 0.05.
        assert!((s.fmr - 1.0).abs() < 1e-15);
        // Only the 4 mm RMSE sits below rho = 10 mm.
        assert!((s.registration_recall - 0.5).abs() < 1e-15);
        let dice = s.dice.unwrap();
        assert!((dice.mean - 0.8).abs() < 1e-12);
        assert_eq!(dice.n, 2);
    }

    #[test]
    fn summary_rejects_empty_and_mixed_thresholds() {
        assert!(summarize(&[]).is_err());
        let a = eval(0.5, 0.005, None);
        let mut b = eval(0.5, 0.005, None);
        b.thresholds.rho = 0.02;
        assert!(summarize(&[a, b]).is_err());
    }

    #[test]
    fn partial_dice_coverage_is_reported_with_its_count() {
        let evals = [eval(0.9, 0.001, Some(0.8)), eval(0.9, 0.001, None)];
        let s = summarize(&evals).unwrap();
        let dice = s.dice.unwrap();
        assert_eq!(dice.n, 1);
        assert!((dice.mean - 0.8).abs() < 1e-15);
        assert!(s.cd_mm.unwrap().n == 1);
    }

    #[test]
    fn summary_toml_round_trips() {
        let s = summarize(&[eval(0.7, 0.003, Some(0.85))]).unwrap();
        let text = summary_toml(&s).unwrap();
        let back: EvalSummary = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(text.contains("registration_recall"));
    }

    #[test]
    fn sweep_requires_increasing_axis_and_nonempty_rows() {
        let p = |v: Real| SweepPoint { axis_value: v, evals: vec![eval(0.6, 0.002, None)] };
        assert!(sweep_report("noise", &[p(0.2), p(0.1)]).is_err());
        assert!(sweep_report("noise", &[p(0.2), p(0.2)]).is_err());
        assert!(sweep_report("noise", &[]).is_err());
        assert!(sweep_report("  ", &[p(0.1)]).is_err());
        assert!(sweep_report(
            "noise",
            &[SweepPoint { axis_value: 0.5, evals: vec![] }]
        )
        .is_err());
        assert!(sweep_report("noise", &[p(0.1), p(0.2), p(0.5)]).is_ok());
    }

    #[test]
    fn csv_and_digest_are_deterministic() {
        let points = [
            SweepPoint { axis_value: 0.2, evals: vec![eval(0.9, 0.002, Some(0.95))] },
            SweepPoint { axis_value: 0.5, evals: vec![eval(0.8, 0.004, Some(0.9))] },
        ];
        let a = sweep_report("noise_pct", &points).unwrap();
        let b = sweep_report("noise_pct", &points).unwrap();
        let csv_a = sweep_csv(&a);
        let csv_b = sweep_csv(&b);
        assert_eq!(csv_a, csv_b);
        assert_eq!(report_digest(&csv_a), report_digest(&csv_b));
        assert!(csv_a.starts_with("noise_pct,pairs,ir_mean"));
        assert_eq!(csv_a.trim_end().lines().count(), 3);

        // Any numeric change must shift the digest.
        let mut moved = points.to_vec();
        moved[1].evals[0].rmse_m += 1e-6;
        let c = sweep_report("noise_pct", &moved).unwrap();
        assert_ne!(report_digest(&sweep_csv(&c)), report_digest(&csv_a));
    }

    #[test]
    fn missing_optional_metrics_leave_empty_cells() {
        let points =
            [SweepPoint { axis_value: 1.0, evals: vec![eval(0.9, 0.002, None)] }];
        let csv = sweep_csv(&sweep_report("points", &points).unwrap());
        assert!(csv.trim_end().ends_with(",,,"));
    }

    #[test]
    fn line_plot_draws_curve_pixels() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.2, 0.9, 0.5, 0.7];
        let img = line_plot(&xs, &ys).unwrap();
        assert_eq!((img.width(), img.height()), (PLOT_W, PLOT_H));
        let colored = img.pixels().filter(|p| p.0 != [255, 255, 255]).count();
        assert!(colored > 200, "only {colored} non-background pixels");
        // Flat series still plots.
        assert!(line_plot(&xs, &[0.5; 4]).is_ok());
        assert!(line_plot(&[], &[]).is_err());
        assert!(line_plot(&xs, &ys[..2]).is_err());
        assert!(line_plot(&[Real::NAN, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn sweep_artifacts_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let points = [
            SweepPoint { axis_value: 0.2, evals: vec![eval(0.9, 0.002, Some(0.95))] },
            SweepPoint { axis_value: 0.8, evals: vec![eval(0.7, 0.012, Some(0.85))] },
        ];
        let report = sweep_report("Noise %", &points).unwrap();
        let arts = write_sweep_report(&report, dir.path()).unwrap();
        assert!(arts.csv_path.ends_with("sweep_noise__.csv"));
        let csv = std::fs::read_to_string(&arts.csv_path).unwrap();
        assert_eq!(report_digest(&csv), arts.digest);
        // rr/ir/fmr/rre/rte + dice + cd curves.
        assert_eq!(arts.plot_paths.len(), 7);
        for p in &arts.plot_paths {
            assert!(std::fs::metadata(p).unwrap().len() > 0, "{p:?} empty");
        }
    }

    #[test]
    fn fmr_threshold_is_carried_from_pair_records() {
        let mut a = eval(DEFAULT_TAU2 + 1e-9, 0.002, None);
        let mut b = eval(DEFAULT_TAU2 - 1e-9, 0.002, None);
        a.thresholds.tau2 = DEFAULT_TAU2;
        b.thresholds.tau2 = DEFAULT_TAU2;
        let s = summarize(&[a, b]).unwrap();
        assert!((s.fmr - 0.5).abs() < 1e-15);
    }
}
