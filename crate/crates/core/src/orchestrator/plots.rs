use std::path::{Path, PathBuf};

use super::manifest::RunLayout;
use super::OrchestratorError;
use crate::training::TrainingEvent;

/// Reads a JSON-lines event log. Blank lines are ignored.
pub fn read_events(path: &Path) -> Result<Vec<TrainingEvent>, OrchestratorError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(OrchestratorError::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| OrchestratorError::CorruptEvents(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFiles {
    pub name: String,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub rows: usize,
}

pub const SERIES: [&str; 5] = ["train_loss", "valid_accuracy", "valid_ppl", "learning_rate", "energy_kwh"];

/// `(step, value)` points for one of [`SERIES`].
pub fn series(events: &[TrainingEvent], name: &str) -> Vec<(f64, f64)> {
    let pick = |e: &TrainingEvent| match name {
        "train_loss" => e.train_loss,
        "valid_accuracy" => e.valid_accuracy,
        "valid_ppl" => e.valid_ppl,
        "learning_rate" => e.learning_rate,
        "energy_kwh" => e.energy_kwh,
        _ => f64::NAN,
    };
    events.iter().map(|e| (e.step as f64, pick(e))).collect()
}

/// Writes `{series}.csv` and `{series}.svg` under `reports/plots/` for each
/// of [`SERIES`].
pub fn export_plots(run_dir: &Path) -> Result<Vec<SeriesFiles>, OrchestratorError> {
    let layout = RunLayout::new(run_dir);
    let events = read_events(&layout.events())?;
    if events.is_empty() {
        return Err(OrchestratorError::NoEvents);
    }
    let dir = layout.plots();
    std::fs::create_dir_all(&dir).map_err(|e| OrchestratorError::io(&dir, e))?;
    let mut out = Vec::new();
    for name in SERIES {
        let points = series(&events, name);
        let mut csv = format!("step,{name}\n");
        for (x, y) in &points {
            csv.push_str(&format!("{x},{y}\n"));
        }
        let (csv_path, svg_path) = (dir.join(format!("{name}.csv")), dir.join(format!("{name}.svg")));
        std::fs::write(&csv_path, csv).map_err(|e| OrchestratorError::io(&csv_path, e))?;
        std::fs::write(&svg_path, line_chart(name, &points)).map_err(|e| OrchestratorError::io(&svg_path, e))?;
        out.push(SeriesFiles { name: name.into(), csv: csv_path, svg: svg_path, rows: points.len() });
    }
    Ok(out)
}

/// A bare line chart: axes, min/max labels and one polyline.
pub fn line_chart(title: &str, points: &[(f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const M: f64 = 50.0;
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let ((x0, x1), (y0, y1)) = (range(|p| p.0), range(|p| p.1));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let poly: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    s.push_str(&format!("<title>{title}</title>\n"));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!("<path d=\"M{M} {} L{M} {} L{} {}\" stroke=\"black\" fill=\"none\"/>\n", M, H - M, W - M, H - M));
    s.push_str(&format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n", W / 2.0));
    s.push_str(&format!("<text x=\"{M}\" y=\"{}\" font-size=\"10\">{x0}</text>\n", H - M + 15.0));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{x1}</text>\n", W - M, H - M + 15.0));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{y0:.4}</text>\n", M - 4.0, H - M));
    s.push_str(&format!("<text x=\"{}\" y=\"{M}\" font-size=\"10\" text-anchor=\"end\">{y1:.4}</text>\n", M - 4.0));
    s.push_str(&format!("<polyline points=\"{}\" stroke=\"steelblue\" stroke-width=\"2\" fill=\"none\"/>\n", poly.join(" ")));
    s.push_str("</svg>\n");
    s
}
