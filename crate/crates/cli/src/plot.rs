use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use invbasin::metrics::{tradeoff_ratio, Tradeoff};
use invbasin::nn::Placement;
use invbasin::train::{load_json, Mode};
use invbasin::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{opt, EvalReport};
use crate::runs::{self, write_report};

/// One row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub mode: Mode,
    pub placement: Placement,
    pub static_nse: Option<f64>,
    pub coverage_1sd: f64,
    pub coverage_2sd: f64,
    pub static_mse: f64,
    pub epistemic_mean: f64,
    pub unc_time_mean: f64,
    /// Against the first probabilistic run; only set on phase-2 rows.
    pub tradeoff: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct ScatterRow {
    entity: String,
    feature: String,
    truth: f64,
    mean_pred: f64,
    epistemic: f64,
}

#[derive(Serialize)]
struct MergedReport<'a> {
    command: &'static str,
    runs: &'a [ComparisonRow],
}

fn label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut labels = BTreeSet::new();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for dir in dirs {
        runs::require_dir(dir)?;
        let name = label(dir);
        if !labels.insert(name.clone()) {
            return Err(Error::Config(format!("two runs share the directory name `{name}`")));
        }
        let rep: EvalReport = load_json(&dir.join(runs::REPORT))
            .map_err(|_| Error::Config(format!("{} has no evaluation report; run `evaluate` first", dir.display())))?;
        let m = &rep.metrics;
        rows.push(ComparisonRow {
            run: name.clone(),
            mode: rep.mode,
            placement: rep.placement,
            static_nse: m.static_nse,
            coverage_1sd: m.coverage_1sd,
            coverage_2sd: m.coverage_2sd,
            static_mse: m.static_mse,
            epistemic_mean: m.epistemic_mean,
            unc_time_mean: m.unc_time_mean,
            tradeoff: None,
        });
        let mut r = csv::Reader::from_path(dir.join(runs::UNCERTAINTY))?;
        let pts = r.deserialize().collect::<std::result::Result<Vec<ScatterRow>, _>>()?;
        points.push((name, rep.feature_names.clone(), pts));
    }
    if let Some(base) = rows.iter().find(|r| r.mode == Mode::Probabilistic).cloned() {
        for row in rows.iter_mut().filter(|r| r.mode == Mode::UblPhase2) {
            row.tradeoff = match tradeoff_ratio(base.epistemic_mean, row.epistemic_mean, base.static_mse, row.static_mse) {
                Ok(Tradeoff::Ratio(x)) => Some(x.to_string()),
                Ok(Tradeoff::Dominating) => Some("dominating".into()),
                Err(_) => None,
            };
        }
    }

    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    w.write_record([
        "run", "mode", "placement", "static_nse", "coverage_1sd", "coverage_2sd", "static_mse", "epistemic_mean",
        "unc_time_mean", "tradeoff",
    ])?;
    for r in &rows {
        w.write_record([
            r.run.clone(),
            mode_name(r.mode).into(),
            serde_json::to_value(r.placement)?.as_str().unwrap_or_default().to_string(),
            opt(r.static_nse),
            r.coverage_1sd.to_string(),
            r.coverage_2sd.to_string(),
            r.static_mse.to_string(),
            r.epistemic_mean.to_string(),
            r.unc_time_mean.to_string(),
            r.tradeoff.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("scatter.csv"))?;
    w.write_record(["run", "entity", "feature", "truth", "mean_pred", "epistemic"])?;
    for (name, features, pts) in &points {
        for p in pts {
            w.write_record([
                name.clone(),
                p.entity.clone(),
                p.feature.clone(),
                p.truth.to_string(),
                p.mean_pred.to_string(),
                p.epistemic.to_string(),
            ])?;
        }
        std::fs::write(out.join(format!("scatter_{name}.svg")), scatter_svg(name, features, pts))?;
    }
    w.flush()?;
    write_report(
        out,
        &MergedReport {
            command: "report",
            runs: &rows,
        },
    )
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Deterministic => "deterministic",
        Mode::Probabilistic => "probabilistic",
        Mode::UblPhase2 => "ubl_phase2",
    }
}

const PANEL: f64 = 260.0;
const PAD: f64 = 40.0;

/// Estimated against observed static per feature, with ±σ bars.
fn scatter_svg(title: &str, features: &[String], pts: &[ScatterRow]) -> String {
    let width = features.len() as f64 * (PANEL + PAD) + PAD;
    let height = PANEL + 2.5 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="16" font-size="13">{}</text>"#, escape(title));
    for (j, f) in features.iter().enumerate() {
        let fp: Vec<&ScatterRow> = pts.iter().filter(|p| &p.feature == f).collect();
        let lo = fp.iter().flat_map(|p| [p.truth, p.mean_pred - p.epistemic]).fold(f64::INFINITY, f64::min);
        let hi = fp.iter().flat_map(|p| [p.truth, p.mean_pred + p.epistemic]).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 1.0) };
        let x0 = PAD + j as f64 * (PANEL + PAD);
        let y0 = 1.5 * PAD;
        let sx = |v: f64| x0 + (v - lo) / (hi - lo) * PANEL;
        let sy = |v: f64| y0 + PANEL - (v - lo) / (hi - lo) * PANEL;
        let _ = writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/>"##);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#aaa" stroke-dasharray="4 3"/>"##,
            sx(lo),
            sy(lo),
            sx(hi),
            sy(hi)
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, y0 - 6.0, escape(f));
        let _ = writeln!(s, r#"<text x="{}" y="{}">observed</text>"#, x0 + PANEL / 2.0 - 24.0, y0 + PANEL + 28.0);
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{lo:.2}</text>"#, y0 + PANEL + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.2}</text>"#, x0 + PANEL, y0 + PANEL + 14.0);
        for p in fp {
            let (cx, cy) = (sx(p.truth), sy(p.mean_pred));
            if p.epistemic > 0.0 {
                let _ = writeln!(
                    s,
                    r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#3b7dd8" stroke-opacity="0.6"/>"##,
                    sy(p.mean_pred - p.epistemic),
                    sy(p.mean_pred + p.epistemic)
                );
            }
            let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="2.5" fill="#d8523b"/>"##);
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
