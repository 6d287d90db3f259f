//! File outputs: per-step trace CSV, summary JSON, and simple SVG polyline
//! charts. CSV files use '.' decimals, '\n' line endings and a fixed header
//! row; identical inputs must produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use switchlqr::online::{RegretReport, RunTrace};

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("io {path}: {msg}")]
    Io { path: String, msg: String },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| OutputError::Io {
            path: dir.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| OutputError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Per-step trace CSV. One row per executed step `t`: the pre-step state,
/// the applied input, the stage cost, the committed dwell of the step's
/// epoch, and the cumulative regret against the per-epoch-aligned reference
/// accrual (from the diagnostics `tau_star`; 0 when absent).
pub fn trace_csv(trace: &RunTrace, j_star: Option<&[f64]>) -> String {
    let n = trace.states.first().map(|s| s.len()).unwrap_or(0);
    let m = trace.inputs.first().map(|u| u.len()).unwrap_or(0);
    let mut out = String::from("t,mode,epoch");
    for i in 0..n {
        let _ = write!(out, ",x{i}");
    }
    for i in 0..m {
        let _ = write!(out, ",u{i}");
    }
    out.push_str(",cost,tau_es,cum_regret\n");
    let mut cum = 0.0;
    let mut epoch_step = vec![0u64; trace.epochs.len()];
    for t in 0..trace.costs.len() {
        let k = trace.epoch_per_step[t];
        let ep = &trace.epochs[k];
        let baseline_rate = match (j_star, ep.tau_star) {
            (Some(j), Some(ts)) if epoch_step[k] < ts => j[ep.mode],
            _ => 0.0,
        };
        epoch_step[k] += 1;
        cum += trace.costs[t] - baseline_rate;
        let _ = write!(out, "{t},{},{k}", trace.mode_per_step[t]);
        for i in 0..n {
            let _ = write!(out, ",{}", trace.states[t][i]);
        }
        for i in 0..m {
            let _ = write!(out, ",{}", trace.inputs[t][i]);
        }
        let _ = write!(out, ",{},{},{cum}\n", trace.costs[t], ep.tau_es);
    }
    out
}

pub fn write_trace_csv(
    path: &Path,
    trace: &RunTrace,
    j_star: Option<&[f64]>,
) -> Result<(), OutputError> {
    write_file(path, trace_csv(trace, j_star).as_bytes())
}

/// One replicate's summary entry.
#[derive(Debug, Clone)]
pub struct ReplicateSummary {
    pub ns: u64,
    pub replicate: usize,
    pub seed: u64,
    pub status: String,
    pub regret: Option<RegretReport>,
    pub coverage_rate: Option<f64>,
    pub trace_path: Option<PathBuf>,
}

fn mean_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Aggregate the per-replicate entries into the summary JSON document.
pub fn summary_json(
    config_echo: &serde_json::Value,
    version: &str,
    entries: &[ReplicateSummary],
    bound_violations: usize,
) -> serde_json::Value {
    let mut per_ns: Vec<serde_json::Value> = Vec::new();
    let mut ns_values: Vec<u64> = entries.iter().map(|e| e.ns).collect();
    ns_values.sort_unstable();
    ns_values.dedup();
    for ns in &ns_values {
        let group: Vec<&ReplicateSummary> = entries
            .iter()
            .filter(|e| e.ns == *ns && e.regret.is_some())
            .collect();
        let regrets: Vec<f64> = group
            .iter()
            .map(|e| e.regret.as_ref().unwrap().regret)
            .collect();
        let t_es: Vec<f64> = group
            .iter()
            .map(|e| e.regret.as_ref().unwrap().t_es as f64)
            .collect();
        let coverage: Vec<f64> = group.iter().filter_map(|e| e.coverage_rate).collect();
        let (regret_mean, regret_ci) = mean_ci(&regrets);
        let (t_mean, _) = mean_ci(&t_es);
        let (cov_mean, _) = mean_ci(&coverage);
        per_ns.push(serde_json::json!({
            "ns": ns,
            "replicates_ok": group.len(),
            "regret_mean": regret_mean,
            "regret_ci95": regret_ci,
            "t_es_mean": t_mean,
            "coverage_rate": cov_mean,
        }));
    }
    let replicates: Vec<serde_json::Value> = entries
        .iter()
        .map(|e| {
            serde_json::json!({
                "ns": e.ns,
                "replicate": e.replicate,
                "seed": e.seed,
                "status": e.status,
                "regret": e.regret.as_ref().map(|r| r.regret),
                "j_alg": e.regret.as_ref().map(|r| r.j_alg),
                "j_baseline": e.regret.as_ref().map(|r| r.j_baseline),
                "r1": e.regret.as_ref().map(|r| r.r1),
                "r2": e.regret.as_ref().map(|r| r.r2),
                "t_es": e.regret.as_ref().map(|r| r.t_es),
                "t_star": e.regret.as_ref().map(|r| r.t_star),
                "coverage_rate": e.coverage_rate,
                "trace_csv": e.trace_path.as_ref().map(|p| p.display().to_string()),
            })
        })
        .collect();
    serde_json::json!({
        "version": version,
        "config": config_echo,
        "per_ns": per_ns,
        "replicates": replicates,
        "bound_violations": bound_violations,
    })
}

/// Minimal SVG polyline chart with axes and tick labels.
pub struct SvgChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
    pub log_x: bool,
    pub log_y: bool,
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

impl SvgChart {
    pub fn render(&self) -> String {
        let (w, h) = (640.0, 420.0);
        let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 55.0);
        let tx = |v: f64| if self.log_x { v.max(1e-12).log10() } else { v };
        let ty = |v: f64| if self.log_y { v.max(1e-12).log10() } else { v };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (_, pts) in &self.series {
            for (x, y) in pts {
                xs.push(tx(*x));
                ys.push(ty(*y));
            }
        }
        let (xmin, xmax) = span(&xs);
        let (ymin, ymax) = span(&ys);
        let px = |x: f64| ml + (tx(x) - xmin) / (xmax - xmin) * (w - ml - mr);
        let py = |y: f64| h - mb - (ty(y) - ymin) / (ymax - ymin) * (h - mt - mb);
        let mut svg = String::new();
        let _ = write!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        let _ = write!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
            w / 2.0,
            self.title
        );
        // Axes.
        let _ = write!(
            svg,
            "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - mb,
            w - mr,
            h - mb
        );
        let _ = write!(
            svg,
            "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - mb
        );
        // Tick labels at the extremes.
        for (frac, val) in [(0.0, xmin), (1.0, xmax)] {
            let x = ml + frac * (w - ml - mr);
            let shown = if self.log_x { 10f64.powf(val) } else { val };
            let _ = write!(
                svg,
                "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{shown:.3}</text>\n",
                h - mb + 18.0
            );
        }
        for (frac, val) in [(0.0, ymin), (1.0, ymax)] {
            let y = h - mb - frac * (h - mt - mb);
            let shown = if self.log_y { 10f64.powf(val) } else { val };
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{shown:.3}</text>\n",
                ml - 6.0
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
            (ml + w - mr) / 2.0,
            h - 12.0,
            self.x_label
        );
        let _ = write!(
            svg,
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{}</text>\n",
            (mt + h - mb) / 2.0,
            (mt + h - mb) / 2.0,
            self.y_label
        );
        for (idx, (name, pts)) in self.series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
                .collect();
            let _ = write!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
                w - mr - 150.0,
                mt + 16.0 * (idx as f64 + 1.0)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn span(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn write_svg(path: &Path, chart: &SvgChart) -> Result<(), OutputError> {
    write_file(path, chart.render().as_bytes())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_renders_polyline() {
        let chart = SvgChart {
            title: "test".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![("s".into(), vec![(1.0, 1.0), (2.0, 4.0), (3.0, 9.0)])],
            log_x: false,
            log_y: false,
        };
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn mean_ci_basics() {
        let (m, ci) = mean_ci(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!(ci > 0.0);
    }
}
