//! Result aggregation: the fixed-schema CSV table and static SVG plots
//! (score-area bars, residual histograms, metric-correlation heatmap, and
//! the training-set-size sweep). Everything is rendered from the persisted
//! cell results in canonical matrix order, so identical runs produce
//! byte-identical files.

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{cell_report_path, CellResult};
use std::fmt::Write as _;
use std::path::PathBuf;
use uadbench_core::metrics::{correlation_matrix, reports_to_csv, EvalReport, CORR_COLUMNS};

const PALETTE: [&str; 8] = [
    "#2b6cb0", "#c53030", "#2f855a", "#b7791f", "#6b46c1", "#2c7a7b", "#97266d", "#4a5568",
];

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Horizontal bar chart of one value in [0, 1] per labeled row.
fn bar_chart(title: &str, rows: &[(String, f64)]) -> String {
    let gutter = 280.0;
    let bar_w = 320.0;
    let row_h = 24.0;
    let top = 40.0;
    let height = top + rows.len() as f64 * row_h + 20.0;
    let mut body = String::new();
    writeln!(body, "<text x=\"16\" y=\"24\" font-size=\"15\">{}</text>", esc(title)).unwrap();
    for (i, (label, value)) in rows.iter().enumerate() {
        let y = top + i as f64 * row_h;
        let w = (value.clamp(0.0, 1.0)) * bar_w;
        writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            gutter - 8.0,
            y + 15.0,
            esc(label)
        )
        .unwrap();
        writeln!(
            body,
            "<rect x=\"{gutter:.1}\" y=\"{:.1}\" width=\"{w:.2}\" height=\"16\" fill=\"{}\"/>",
            y + 2.0,
            PALETTE[0]
        )
        .unwrap();
        writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\">{value:.3}</text>",
            gutter + w + 6.0,
            y + 15.0
        )
        .unwrap();
    }
    svg_document(gutter + bar_w + 70.0, height, &body)
}

/// Two overlaid residual histograms (normal vs anomalous voxels).
fn histogram_plot(title: &str, normal: &[f64], anom: &[f64]) -> String {
    let (w, h) = (640.0, 340.0);
    let (x0, y0, pw, ph) = (60.0, 40.0, 540.0, 240.0);
    let peak = normal.iter().chain(anom.iter()).cloned().fold(1e-12, f64::max);
    let mut body = String::new();
    writeln!(body, "<text x=\"16\" y=\"24\" font-size=\"15\">{}</text>", esc(title)).unwrap();
    for (series, color, label, dy) in
        [(normal, PALETTE[0], "normal", 0.0), (anom, PALETTE[1], "anomalous", 16.0)]
    {
        let mut points = String::new();
        for (i, &v) in series.iter().enumerate() {
            let x = x0 + (i as f64 + 0.5) / series.len() as f64 * pw;
            let y = y0 + ph - (v / peak) * ph;
            write!(points, "{x:.1},{y:.1} ").unwrap();
        }
        writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            points.trim_end()
        )
        .unwrap();
        writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{label}</text>",
            x0 + pw - 80.0,
            y0 + 14.0 + dy
        )
        .unwrap();
    }
    writeln!(
        body,
        "<line x1=\"{x0}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        y0 + ph,
        x0 + pw,
        y0 + ph
    )
    .unwrap();
    writeln!(body, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{:.1}\" stroke=\"black\"/>", y0 + ph)
        .unwrap();
    writeln!(body, "<text x=\"{x0}\" y=\"{:.1}\">0</text>", y0 + ph + 16.0).unwrap();
    writeln!(body, "<text x=\"{:.1}\" y=\"{:.1}\">1</text>", x0 + pw - 6.0, y0 + ph + 16.0).unwrap();
    writeln!(
        body,
        "<text x=\"{:.1}\" y=\"{:.1}\">residual intensity</text>",
        x0 + pw / 2.0 - 50.0,
        y0 + ph + 32.0
    )
    .unwrap();
    svg_document(w, h, &body)
}

fn heat_color(r: f64) -> String {
    if r.is_nan() {
        return "#cccccc".into();
    }
    // −1 → blue, 0 → white, +1 → red.
    let t = r.clamp(-1.0, 1.0);
    let (red, green, blue) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", red as u8, green as u8, blue as u8)
}

fn heatmap(title: &str, matrix: &ndarray::Array2<f64>) -> String {
    let cell = 72.0;
    let (x0, y0) = (110.0, 70.0);
    let k = CORR_COLUMNS.len();
    let mut body = String::new();
    writeln!(body, "<text x=\"16\" y=\"24\" font-size=\"15\">{}</text>", esc(title)).unwrap();
    for (i, name) in CORR_COLUMNS.iter().enumerate() {
        writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x0 + (i as f64 + 0.5) * cell,
            y0 - 10.0,
            esc(name)
        )
        .unwrap();
        writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            x0 - 8.0,
            y0 + (i as f64 + 0.55) * cell,
            esc(name)
        )
        .unwrap();
    }
    for i in 0..k {
        for j in 0..k {
            let r = matrix[[i, j]];
            writeln!(
                body,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{}\" stroke=\"#999\"/>",
                x0 + j as f64 * cell,
                y0 + i as f64 * cell,
                heat_color(r)
            )
            .unwrap();
            let label = if r.is_nan() { "n/a".to_string() } else { format!("{r:.2}") };
            writeln!(
                body,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>",
                x0 + (j as f64 + 0.5) * cell,
                y0 + (i as f64 + 0.55) * cell
            )
            .unwrap();
        }
    }
    svg_document(x0 + k as f64 * cell + 40.0, y0 + k as f64 * cell + 40.0, &body)
}

/// Score area against training-set fraction, one line per (method, scorer).
fn sweep_plot(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (x0, y0, pw, ph) = (60.0, 40.0, 420.0, 300.0);
    let mut body = String::new();
    writeln!(body, "<text x=\"16\" y=\"24\" font-size=\"15\">Training-set size sweep (AUPRC)</text>")
        .unwrap();
    for (s, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let mut path = String::new();
        for &(fraction, auprc) in points {
            let x = x0 + fraction * pw;
            let y = y0 + ph - auprc.clamp(0.0, 1.0) * ph;
            write!(path, "{x:.1},{y:.1} ").unwrap();
            writeln!(body, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"/>")
                .unwrap();
        }
        writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.trim_end()
        )
        .unwrap();
        writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            x0 + pw + 12.0,
            y0 + 14.0 + s as f64 * 16.0,
            esc(label)
        )
        .unwrap();
    }
    writeln!(
        body,
        "<line x1=\"{x0}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        y0 + ph,
        x0 + pw,
        y0 + ph
    )
    .unwrap();
    writeln!(body, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{:.1}\" stroke=\"black\"/>", y0 + ph)
        .unwrap();
    writeln!(
        body,
        "<text x=\"{:.1}\" y=\"{:.1}\">training fraction</text>",
        x0 + pw / 2.0 - 45.0,
        y0 + ph + 32.0
    )
    .unwrap();
    svg_document(w, h, &body)
}

fn write_file(path: &PathBuf, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Aggregate every completed cell into the report directory: the CSV
/// table, a score-area bar chart, per-row residual histograms, the metric
/// correlation heatmap (given ≥ 3 rows), and the subsampling sweep plot
/// (given > 1 fraction).
pub fn emit(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let mut results: Vec<CellResult> = Vec::new();
    for &cell in &cfg.cells() {
        let path = cell_report_path(cfg, cell);
        if path.is_file() {
            results.push(crate::pipeline::read_cell_result(&path)?);
        }
    }
    if results.is_empty() {
        return Err(CliError::EmptyResults(cfg.cells_dir()));
    }
    let dir = cfg.report_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;

    let reports: Vec<EvalReport> =
        results.iter().flat_map(|c| c.rows.iter().map(|r| r.report.clone())).collect();
    write_file(&dir.join("results.csv"), &reports_to_csv(&reports))?;

    // Bars over the full-fraction rows (every row when no full fraction
    // was configured).
    let full: Vec<&CellResult> = results.iter().filter(|c| c.fraction == 1.0).collect();
    let bar_source: Vec<&CellResult> =
        if full.is_empty() { results.iter().collect() } else { full };
    let bars: Vec<(String, f64)> = bar_source
        .iter()
        .flat_map(|c| c.rows.iter().map(|r| (r.report.approach.clone(), r.report.auprc)))
        .collect();
    write_file(&dir.join("auprc.svg"), &bar_chart("AUPRC by approach", &bars))?;

    for c in &results {
        for row in &c.rows {
            let name = format!("residuals_{}_{}.svg", c.cell_id, row.scorer);
            let title = format!("Residual histograms — {}", row.report.approach);
            write_file(
                &dir.join(name),
                &histogram_plot(&title, &row.histograms.normal, &row.histograms.anom),
            )?;
        }
    }

    let corr_rows: Vec<EvalReport> = bar_source
        .iter()
        .flat_map(|c| c.rows.iter().map(|r| r.report.clone()))
        .collect();
    if corr_rows.len() >= 3 {
        let matrix = correlation_matrix(&corr_rows)?;
        write_file(
            &dir.join("correlation.svg"),
            &heatmap("Metric correlation across approaches", &matrix),
        )?;
    }

    if cfg.subsample_fractions.len() > 1 {
        // One series per (method, scorer), points ordered by fraction.
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for c in &results {
            for row in &c.rows {
                let label = format!("{} ({})", c.tag, row.scorer);
                let entry = match series.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, points)) => points,
                    None => {
                        series.push((label, Vec::new()));
                        &mut series.last_mut().unwrap().1
                    }
                };
                entry.push((c.fraction, row.report.auprc));
            }
        }
        for (_, points) in &mut series {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        }
        write_file(&dir.join("sweep.svg"), &sweep_plot(&series))?;
    }

    Ok(dir)
}
