//! Aggregate evaluation report: summary text, metrics JSON and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Evaluation record of one test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    /// Von Mises RMSE over all frames and pixels, MPa.
    pub rmse_stress: f64,
    /// `None` when either damage field has no crack above the threshold.
    pub percent_rmse_path: Option<f64>,
    pub uts_strain: f64,
    pub final_macro_stress: f64,
    /// Largest ground-truth pixel stress of the case, MPa.
    pub max_stress: f64,
    /// Macro stress curves as `(strain, MPa)` points.
    pub curve_truth: Vec<(f64, f64)>,
    pub curve_pred: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    /// Histogram bin width, MPa.
    pub bin_width: f64,
    /// Stress RMSE thresholds, MPa.
    pub stress_thresholds: Vec<f64>,
    /// Path RMSE thresholds, percent.
    pub path_thresholds: Vec<f64>,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            bin_width: 2.0,
            stress_thresholds: vec![10.0, 20.0],
            path_thresholds: vec![5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Lower edge of each bin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub best: String,
    pub median: String,
    pub worst: String,
    pub histogram: Histogram,
    /// `(threshold, fraction of cases strictly below)` for stress RMSE.
    pub stress_fractions: Vec<(f64, f64)>,
    /// Same for path RMSE, counted over cases with a defined path metric.
    pub path_fractions: Vec<(f64, f64)>,
    pub mean_rmse_stress: f64,
}

/// Ranks cases by stress RMSE; the median is the lower middle element.
pub fn summarize(results: &[CaseMetrics], params: &ReportParams) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one case".into()));
    }
    if !(params.bin_width > 0.0) {
        return Err(Error::InvalidArgument("histogram bin width must be positive".into()));
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[a]
            .rmse_stress
            .total_cmp(&results[b].rmse_stress)
            .then_with(|| results[a].id.cmp(&results[b].id))
    });
    let max = results.iter().map(|r| r.rmse_stress).fold(0.0, f64::max);
    let bins = ((max / params.bin_width).floor() as usize) + 1;
    let mut counts = vec![0; bins];
    for r in results {
        counts[((r.rmse_stress / params.bin_width).floor() as usize).min(bins - 1)] += 1;
    }
    let fraction = |values: &[f64], t: f64| {
        if values.is_empty() {
            0.0
        } else {
            values.iter().filter(|&&v| v < t).count() as f64 / values.len() as f64
        }
    };
    let stress: Vec<f64> = results.iter().map(|r| r.rmse_stress).collect();
    let path: Vec<f64> = results.iter().filter_map(|r| r.percent_rmse_path).collect();
    Ok(Summary {
        cases: results.len(),
        best: results[order[0]].id.clone(),
        median: results[order[(order.len() - 1) / 2]].id.clone(),
        worst: results[order[order.len() - 1]].id.clone(),
        histogram: Histogram {
            bin_width: params.bin_width,
            edges: (0..bins).map(|k| k as f64 * params.bin_width).collect(),
            counts,
        },
        stress_fractions: params.stress_thresholds.iter().map(|&t| (t, fraction(&stress, t))).collect(),
        path_fractions: params.path_thresholds.iter().map(|&t| (t, fraction(&path, t))).collect(),
        mean_rmse_stress: stress.iter().sum::<f64>() / stress.len() as f64,
    })
}

pub fn summary_text(results: &[CaseMetrics], summary: &Summary) -> String {
    let mut s = String::new();
    writeln!(s, "cases: {}", summary.cases).unwrap();
    writeln!(s, "best: {}", summary.best).unwrap();
    writeln!(s, "median: {}", summary.median).unwrap();
    writeln!(s, "worst: {}", summary.worst).unwrap();
    writeln!(s, "mean_rmse_stress_mpa: {:.4}", summary.mean_rmse_stress).unwrap();
    for (t, f) in &summary.stress_fractions {
        writeln!(s, "fraction_rmse_stress_below_{t}_mpa: {f:.4}").unwrap();
    }
    for (t, f) in &summary.path_fractions {
        writeln!(s, "fraction_path_rmse_below_{t}_percent: {f:.4}").unwrap();
    }
    writeln!(s).unwrap();
    writeln!(s, "{:<24} {:>14} {:>16} {:>12} {:>16}", "case", "rmse_mpa", "path_rmse_pct", "uts_strain", "final_macro_mpa").unwrap();
    for r in results {
        let path = r.percent_rmse_path.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(
            s,
            "{:<24} {:>14.4} {:>16} {:>12.5} {:>16.4}",
            r.id, r.rmse_stress, path, r.uts_strain, r.final_macro_stress
        )
        .unwrap();
    }
    s
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    id: &'a str,
    rmse_stress: f64,
    percent_rmse_path: Option<f64>,
    uts_strain: f64,
    final_macro_stress: f64,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

pub fn plot_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = h.bin_width * h.counts.len() as f64;
    let y_max = h.counts.iter().copied().max().unwrap_or(1).max(1) as f64 * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("stress RMSE (MPa)")
        .y_desc("cases")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(h.edges.iter().zip(&h.counts).map(|(&x, &c)| {
            Rectangle::new([(x, 0.0), (x + h.bin_width, c as f64)], BLUE.mix(0.6).filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn plot_curves(path: &Path, case: &CaseMetrics) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let all = case.curve_truth.iter().chain(&case.curve_pred);
    let x_max = all.clone().map(|p| p.0).fold(0.0, f64::max).max(1e-6);
    let y_max = all.map(|p| p.1).fold(0.0, f64::max).max(1e-6) * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("applied strain")
        .y_desc("macro von Mises stress (MPa)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(case.curve_truth.iter().copied(), &BLACK))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(case.curve_pred.iter().copied(), &RED))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `summary.txt`, `metrics.json`, `histogram.svg` and one
/// `curves/<id>.svg` per case into `dir`.
pub fn write_report(dir: &Path, results: &[CaseMetrics], params: &ReportParams) -> Result<Summary> {
    let summary = summarize(results, params)?;
    std::fs::create_dir_all(dir.join("curves"))?;
    std::fs::write(dir.join("summary.txt"), summary_text(results, &summary))?;
    let records: Vec<MetricsRecord> = results
        .iter()
        .map(|r| MetricsRecord {
            id: &r.id,
            rmse_stress: r.rmse_stress,
            percent_rmse_path: r.percent_rmse_path,
            uts_strain: r.uts_strain,
            final_macro_stress: r.final_macro_stress,
        })
        .collect();
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "summary": &summary, "cases": records }))?,
    )?;
    plot_histogram(&dir.join("histogram.svg"), &summary.histogram)?;
    for r in results {
        let safe: String = r
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        plot_curves(&dir.join("curves").join(format!("{safe}.svg")), r)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: &str, rmse: f64) -> CaseMetrics {
        CaseMetrics {
            id: id.into(),
            rmse_stress: rmse,
            percent_rmse_path: None,
            uts_strain: 0.008,
            final_macro_stress: 40.0,
            max_stress: 150.0,
            curve_truth: vec![(0.0, 0.0), (0.01, 60.0), (0.02, 40.0)],
            curve_pred: vec![(0.0, 0.0), (0.01, 58.0), (0.02, 45.0)],
        }
    }

    #[test]
    fn single_case_is_best_median_and_worst() {
        let s = summarize(&[case("a", 3.0)], &ReportParams::default()).unwrap();
        assert_eq!((s.best.as_str(), s.median.as_str(), s.worst.as_str()), ("a", "a", "a"));
    }

    #[test]
    fn median_of_three() {
        let s = summarize(&[case("x", 9.0), case("y", 1.0), case("z", 2.0)], &ReportParams::default()).unwrap();
        assert_eq!(s.median, "z");
        assert_eq!(s.best, "y");
        assert_eq!(s.worst, "x");
        assert_eq!(s.histogram.counts, vec![1, 1, 0, 0, 1]);
    }

    #[test]
    fn all_below_twenty_gives_fraction_one() {
        let s = summarize(&[case("a", 4.0), case("b", 19.9)], &ReportParams::default()).unwrap();
        assert_eq!(s.stress_fractions[1], (20.0, 1.0));
        assert_eq!(s.stress_fractions[0], (10.0, 0.5));
        assert!(summarize(&[], &ReportParams::default()).is_err());
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = case("b/1", 5.0);
        c.percent_rmse_path = Some(2.5);
        write_report(dir.path(), &[case("a", 4.0), c], &ReportParams::default()).unwrap();
        for f in ["summary.txt", "metrics.json", "histogram.svg", "curves/a.svg", "curves/b_1.svg"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(!text.is_empty(), "{f}");
        }
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["cases"][0]["percent_rmse_path"], serde_json::Value::Null);
        assert_eq!(json["cases"][1]["percent_rmse_path"], 2.5);
        assert!(std::fs::read_to_string(dir.path().join("histogram.svg")).unwrap().contains("<svg"));
    }
}
