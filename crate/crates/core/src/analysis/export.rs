use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{GradientSimilarityReport, LayerSimilarity};
use crate::data::Task;
use crate::error::{Error, Result};

const ABSENT: &str = "NA";

/// CSV of one layer: a header row `task,<labels>` then one row per task,
/// values with six decimals and `NA` for absent entries.
pub fn render_csv(layer: &LayerSimilarity) -> String {
    let labels: Vec<&str> = layer.tasks.iter().map(|t| t.label()).collect();
    let mut out = format!("task,{}\n", labels.join(","));
    for (t, row) in layer.tasks.iter().zip(&layer.matrix) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map_or_else(|| ABSENT.to_string(), |v| format!("{v:.6}")))
            .collect();
        let _ = writeln!(out, "{},{}", t.label(), cells.join(","));
    }
    out
}

/// Inverse of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<(Vec<Task>, Vec<Vec<Option<f64>>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty similarity CSV".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("task") {
        return Err(Error::Format("similarity CSV must start with `task`".into()));
    }
    let tasks = cols.map(str::parse).collect::<Result<Vec<Task>>>()?;
    let mut matrix = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label: Task = cells.next().unwrap_or_default().parse()?;
        if tasks.get(i) != Some(&label) {
            return Err(Error::Format(format!("row {} is `{label}`, expected the header order", i + 1)));
        }
        let row = cells
            .map(|c| match c {
                ABSENT => Ok(None),
                v => v.parse().map(Some).map_err(|_| Error::Format(format!("bad value `{v}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != tasks.len() {
            return Err(Error::Format(format!("row {} has {} values", i + 1, row.len())));
        }
        matrix.push(row);
    }
    if matrix.len() != tasks.len() {
        return Err(Error::Format(format!("{} rows for {} tasks", matrix.len(), tasks.len())));
    }
    Ok((tasks, matrix))
}

/// Diverging colour: blue for −1, white for 0, red for +1.
fn colour(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - (255.0 - c) * v.abs()).round() as u8;
    let (r, g, b) = if v >= 0.0 {
        (fade(178.0), fade(24.0), fade(43.0))
    } else {
        (fade(33.0), fade(102.0), fade(172.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

const CELL: usize = 64;
const MARGIN: usize = 48;

/// Annotated heatmap of one layer. Every task pair is one `rect` with class
/// `cell`; absent pairs are grey, hatched and labelled `n/a`.
pub fn render_svg(layer: &LayerSimilarity) -> String {
    let k = layer.tasks.len();
    let size = MARGIN + k * CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"##,
        w = size + 8,
        h = size + 24
    );
    s.push_str(
        r##"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><rect width="6" height="6" fill="#d9d9d9"/><line x1="0" y1="0" x2="0" y2="6" stroke="#8c8c8c" stroke-width="2"/></pattern></defs>"##,
    );
    s.push('\n');
    let _ = writeln!(s, r#"<text x="4" y="16" font-weight="bold">{}</text>"#, layer.name);
    let top = 24;
    for (i, t) in layer.tasks.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#, top + MARGIN - 8, t.label());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 6,
            top + MARGIN + i * CELL + CELL / 2 + 4,
            t.label()
        );
    }
    for (i, row) in layer.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (MARGIN + j * CELL, top + MARGIN + i * CELL);
            let (class, fill, label) = match v {
                Some(v) => ("cell", colour(*v), format!("{v:.2}")),
                None => ("cell absent", "url(#hatch)".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                r##"<rect class="{class}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<layer>.csv` and `<layer>.svg` per layer group plus
/// `summary.json` into `dir`, returning the written paths.
pub fn export_report(report: &GradientSimilarityReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for layer in &report.layers {
        write(format!("{}.csv", layer.name), render_csv(layer))?;
        write(format!("{}.svg", layer.name), render_svg(layer))?;
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    write("summary.json".into(), json + "\n")?;
    Ok(written)
}
