use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::runner::{RunSummary, SummaryLine};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn bad_line(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("{}: {msg}", path.display()))
}

/// Reads the summary line at the end of a metrics file.
pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = read(path)?;
    let last = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| bad_line(path, "empty metrics file"))?;
    let line: SummaryLine =
        serde_json::from_str(last).map_err(|e| bad_line(path, format!("no summary line ({e})")))?;
    Ok(line.summary)
}

/// Expands a glob into the sorted list of matching files.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| Error::invalid(format!("bad glob `{pattern}`: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Error::io(e.path().to_path_buf(), std::io::Error::other(e.to_string())))?;
        out.push(p);
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub method: String,
    pub partition: String,
    pub drift_isolation: String,
    pub runs: usize,
    /// Accuracy in percent.
    pub mean: f64,
    /// Sample standard deviation (n − 1), 0 for a single run.
    pub std: f64,
}

impl CellStats {
    pub fn cell(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Groups runs by (method, partition, drift isolation). Runs in a cell must
/// differ only by seed.
pub fn summarize(paths: &[PathBuf]) -> Result<Vec<CellStats>> {
    if paths.is_empty() {
        return Err(Error::invalid("no metrics files to summarize"));
    }
    // (method, partition, isolation) -> (config fingerprint, first file, accuracies)
    type Cell = (Value, PathBuf, Vec<f64>);
    let mut cells: BTreeMap<(String, String, String), Cell> = BTreeMap::new();
    for path in paths {
        let s = read_summary(path)?;
        let key = (s.method.clone(), s.partition.clone(), s.drift_isolation.clone());
        let acc = 100.0 * s.final_acc;
        match cells.get_mut(&key) {
            Some((fp, first, accs)) => {
                if *fp != s.config {
                    return Err(Error::invalid(format!(
                        "mixed configs in cell {}/{}: {} vs {}",
                        key.0,
                        key.1,
                        first.display(),
                        path.display()
                    )));
                }
                accs.push(acc);
            }
            None => {
                cells.insert(key, (s.config, path.clone(), vec![acc]));
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|((method, partition, drift_isolation), (_, _, accs))| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let std = if accs.len() > 1 {
                (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            CellStats {
                method,
                partition,
                drift_isolation,
                runs: accs.len(),
                mean,
                std,
            }
        })
        .collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn stats_to_csv(stats: &[CellStats]) -> String {
    let mut out = String::from("method,partition,drift_isolation,runs,mean_acc,std_acc,cell\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.2},{:.2},{}",
            csv_field(&s.method),
            csv_field(&s.partition),
            csv_field(&s.drift_isolation),
            s.runs,
            s.mean,
            s.std,
            csv_field(&s.cell())
        );
    }
    out
}

/// `(t, value)` pairs of one numeric field from a metrics file. Rounds that
/// do not carry the field are skipped; a field no round carries is an error.
pub fn read_series(path: &Path, field: &str) -> Result<Vec<(f64, f64)>> {
    let text = read(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| bad_line(path, format!("line {}: {e}", i + 1)))?;
        if v.get("summary").is_some() {
            continue;
        }
        let t = v.get("t").and_then(Value::as_f64);
        if let (Some(t), Some(y)) = (t, v.get(field).and_then(Value::as_f64)) {
            points.push((t, y));
        }
    }
    if points.is_empty() {
        return Err(Error::invalid(format!("{}: unknown field `{field}`", path.display())));
    }
    Ok(points)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of `field` against round, one polyline per file.
pub fn plot_series(paths: &[PathBuf], field: &str) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let series = paths
        .iter()
        .map(|p| read_series(p, field))
        .collect::<Result<Vec<_>>>()?;
    let all = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">round</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(field)
    );
    for (value, x, y, anchor) in [
        (y0, left - 4.0, bottom, "end"),
        (y1, left - 4.0, top + 4.0, "end"),
        (x0, left, bottom + 16.0, "middle"),
        (x1, right, bottom + 16.0, "middle"),
    ] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{}</text>"#,
            format_tick(value)
        );
    }
    for (i, (points, path)) in series.iter().zip(paths).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let label = path
            .parent()
            .and_then(Path::file_name)
            .or_else(|| path.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            right - 120.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Drops the wall-clock field from every record so runs can be compared
/// byte for byte.
pub fn mask_timing(jsonl: &str) -> String {
    mask_keys(jsonl, &["ms"])
}

/// Re-serializes each JSON line without the given top-level keys.
pub fn mask_keys(jsonl: &str, keys: &[&str]) -> String {
    let mut out = String::with_capacity(jsonl.len());
    for line in jsonl.lines() {
        match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(mut obj)) => {
                for k in keys {
                    obj.remove(*k);
                }
                out.push_str(&Value::Object(obj).to_string());
            }
            _ => out.push_str(line),
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_run(dir: &Path, name: &str, method: &str, acc: f64, config: Value, rounds: &[Value]) -> PathBuf {
        let mut text = String::new();
        for r in rounds {
            text.push_str(&r.to_string());
            text.push('\n');
        }
        let summary = json!({"summary": {
            "method": method, "partition": "dirichlet(0.1)", "drift_isolation": "both", "seed": 0,
            "rounds": rounds.len(), "final_acc": acc, "final_eval_loss": 0.5, "config": config
        }});
        text.push_str(&summary.to_string());
        text.push('\n');
        let path = dir.join(name);
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn mean_and_sample_std() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<PathBuf> = [0.80, 0.82, 0.84]
            .iter()
            .enumerate()
            .map(|(i, &a)| write_run(dir.path(), &format!("r{i}.jsonl"), "fedeve", a, json!({"x": 1}), &[]))
            .collect();
        let stats = summarize(&paths).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].cell(), "82.00 ± 2.00");
        let single = summarize(&paths[..1]).unwrap();
        assert_eq!(single[0].cell(), "80.00 ± 0.00");
        let csv = stats_to_csv(&stats);
        assert_eq!(csv.lines().nth(1).unwrap(), "fedeve,dirichlet(0.1),both,3,82.00,2.00,82.00 ± 2.00");
    }

    #[test]
    fn cells_are_split_and_configs_checked() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a.jsonl", "fedeve", 0.8, json!({"x": 1}), &[]);
        let b = write_run(dir.path(), "b.jsonl", "fedavg", 0.7, json!({"x": 2}), &[]);
        assert_eq!(summarize(&[a.clone(), b]).unwrap().len(), 2);
        let c = write_run(dir.path(), "c.jsonl", "fedeve", 0.7, json!({"x": 3}), &[]);
        let err = summarize(&[a, c]).unwrap_err().to_string();
        assert!(err.contains("mixed configs"), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = summarize(&[PathBuf::from("/no/such/run.jsonl")]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/no/such/run.jsonl"));
    }

    #[test]
    fn glob_expansion_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.jsonl", "a.jsonl", "c.txt"] {
            fs::write(dir.path().join(name), "").unwrap();
        }
        let found = expand_glob(&format!("{}/*.jsonl", dir.path().display())).unwrap();
        let names: Vec<_> = found.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["a.jsonl", "b.jsonl"]);
    }

    fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
        let doc = roxmltree::Document::parse(svg).expect("well-formed xml");
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .map(|n| {
                n.attribute("points")
                    .unwrap()
                    .split(' ')
                    .map(|p| {
                        let (x, y) = p.split_once(',').unwrap();
                        (x.parse().unwrap(), y.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn plot_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let flat = write_run(
            dir.path(),
            "flat.jsonl",
            "fedavg",
            0.5,
            json!({}),
            &[json!({"t": 0, "acc": 0.5}), json!({"t": 1, "acc": 0.5}), json!({"t": 2, "acc": 0.5})],
        );
        let two = write_run(
            dir.path(),
            "two.jsonl",
            "fedavg",
            0.5,
            json!({}),
            &[json!({"t": 0, "acc": 0.1}), json!({"t": 1}), json!({"t": 2, "acc": 0.9})],
        );
        let svg = plot_series(std::slice::from_ref(&flat), "acc").unwrap();
        let lines = polylines(&svg);
        assert_eq!(lines.len(), 1);
        assert!(lines[0].iter().all(|p| p.1 == lines[0][0].1));
        assert!(svg.contains(">acc</text>") && svg.contains(">round</text>"));

        let svg = plot_series(&[flat.clone(), two], "acc").unwrap();
        let lines = polylines(&svg);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].len(), 2);

        let err = plot_series(&[flat], "nope").unwrap_err().to_string();
        assert!(err.contains("nope"));
    }

    #[test]
    fn masking_drops_only_named_keys() {
        let masked = mask_timing("{\"t\":0,\"ms\":12,\"acc\":0.5}\n{\"summary\":{}}\n");
        assert_eq!(masked, "{\"acc\":0.5,\"t\":0}\n{\"summary\":{}}\n");
    }
}
