//! Rendering of analysis artifacts: PGM heatmaps from matrix CSVs, the
//! human-readable markdown report, and the per-directory run manifest.
//!
//! Everything here consumes the CSV/JSON files written by the metrics,
//! circuit, and evaluation layers rather than in-memory structures, so a
//! report can be regenerated from any artifact directory long after the
//! run that produced it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Nearest-neighbor upscale factor for heatmap pixels.
pub const HEATMAP_SCALE: usize = 32;

/// File name of the per-directory run manifest.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Output format of [`render_heatmap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    /// Binary grayscale PGM (P5), min–max normalized, ×32 upscaled.
    Pgm,
    /// Validated CSV passthrough.
    Csv,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown heatmap format {other:?}, expected \"pgm\" or \"csv\""
            ))),
        }
    }
}

/// A rectangular numeric matrix parsed from CSV, plus its header if the
/// first row was non-numeric.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvMatrix {
    pub header: Option<Vec<String>>,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CsvMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Parse a rectangular numeric CSV. The first line is treated as a header
/// when any of its cells fails to parse as a number; every later row must
/// be fully numeric and the same width, otherwise the error names the
/// offending 1-based line.
pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<CsvMatrix> {
    let path_str = path.display().to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (first_no, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        line: 1,
        msg: "empty CSV".into(),
    })?;
    let parse_row = |line: &str| -> Option<Vec<f64>> {
        line.split(',')
            .map(|cell| cell.trim().parse::<f64>().ok())
            .collect()
    };
    let mut header = None;
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    let cols = match parse_row(first) {
        Some(numbers) => {
            let cols = numbers.len();
            values.extend(numbers);
            rows = 1;
            cols
        }
        None => {
            let names: Vec<String> = first.split(',').map(|c| c.trim().to_string()).collect();
            let cols = names.len();
            header = Some(names);
            cols
        }
    };
    for (i, line) in lines {
        let numbers = parse_row(line).ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            line: i + 1,
            msg: "non-numeric cell in matrix row".into(),
        })?;
        if numbers.len() != cols {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: i + 1,
                msg: format!("ragged row: {} cells, expected {cols}", numbers.len()),
            });
        }
        values.extend(numbers);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            path: path_str,
            line: first_no + 1,
            msg: "CSV holds a header but no data rows".into(),
        });
    }
    Ok(CsvMatrix { header, rows, cols, values })
}

/// Render matrix values as a binary P5 PGM: linear min–max normalization
/// onto 0..=255 (a constant matrix maps to mid-gray 128), one matrix cell
/// per `scale`×`scale` pixel block.
pub fn render_pgm(values: &[f64], rows: usize, cols: usize, scale: usize) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixel = |v: f64| -> u8 {
        if span == 0.0 {
            128
        } else {
            ((v - min) / span * 255.0).round() as u8
        }
    };
    let width = cols * scale;
    let height = rows * scale;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height);
    for py in 0..height {
        let row = py / scale;
        for px in 0..width {
            let col = px / scale;
            out.push(pixel(values[row * cols + col]));
        }
    }
    out
}

/// Read a matrix CSV and write it as a PGM heatmap or as validated CSV.
pub fn render_heatmap(csv_path: &Path, out_path: &Path, format: HeatmapFormat) -> Result<()> {
    let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let matrix = parse_matrix_csv(&text, csv_path)?;
    match format {
        HeatmapFormat::Pgm => {
            let bytes = render_pgm(&matrix.values, matrix.rows, matrix.cols, HEATMAP_SCALE);
            fs::write(out_path, bytes).map_err(|e| Error::io(out_path, e))
        }
        HeatmapFormat::Csv => fs::write(out_path, text).map_err(|e| Error::io(out_path, e)),
    }
}

/// The files every differential-report directory must contain
/// (`neurons_layer<k>.csv` files are validated against `meta.json`).
pub const REQUIRED_REPORT_FILES: [&str; 8] = [
    "kl.csv",
    "entropy_pre.csv",
    "entropy_post.csv",
    "entropy_diff.csv",
    "actmag.csv",
    "layer_kl.csv",
    "entropy_fraction.csv",
    "meta.json",
];

fn load_csv(dir: &Path, name: &str) -> Result<CsvMatrix> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_matrix_csv(&text, &path)
}

/// Render the markdown summary of a completed report directory: top-5
/// heads by KL, the decreased-entropy fraction, per-layer KL and ActMag
/// tables, plus circuit layers and the ROUGE table when `circuit.json` /
/// `rouge.csv` are present. Numbers are displayed rounded to four decimal
/// places; the CSVs keep full precision.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut missing: Vec<String> = REQUIRED_REPORT_FILES
        .iter()
        .filter(|name| !dir.join(name).is_file())
        .map(|s| s.to_string())
        .collect();
    // Neuron tables: meta.json tells how many layers to expect.
    let meta: Option<crate::metrics::DiffMeta> = if dir.join("meta.json").is_file() {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?)
    } else {
        None
    };
    if let Some(meta) = &meta {
        for l in 0..meta.n_layers {
            let name = format!("neurons_layer{l}.csv");
            if !dir.join(&name).is_file() {
                missing.push(name);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Report { dir: dir.display().to_string(), missing });
    }
    let meta = meta.expect("meta.json presence checked above");

    let kl = load_csv(dir, "kl.csv")?;
    let layer_kl = load_csv(dir, "layer_kl.csv")?;
    let actmag = load_csv(dir, "actmag.csv")?;
    let fraction = load_csv(dir, "entropy_fraction.csv")?.get(0, 0);

    let mut md = String::new();
    let _ = writeln!(md, "# Differential Analysis Report\n");
    let _ = writeln!(
        md,
        "Comparing **{}** → **{}** over {} examples \
         (corpus fingerprint `{}`, activations from `{}`).\n",
        meta.pre_tag,
        meta.post_tag,
        meta.n_examples,
        meta.fingerprint,
        meta.activation_source.name(),
    );

    // Top-5 heads by KL.
    let mut ranked: Vec<(usize, usize, f64)> = (0..kl.rows)
        .flat_map(|l| (0..kl.cols).map(move |h| (l, h)))
        .map(|(l, h)| (l, h, kl.get(l, h)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let _ = writeln!(md, "## Top heads by attention KL\n");
    let _ = writeln!(md, "| Rank | Layer | Head | KL (nats) |");
    let _ = writeln!(md, "|-----:|------:|-----:|----------:|");
    for (rank, (l, h, v)) in ranked.iter().take(5).enumerate() {
        let _ = writeln!(md, "| {} | {l} | {h} | {v:.4} |", rank + 1);
    }

    let _ = writeln!(md, "\n## Attention entropy\n");
    let _ = writeln!(md, "Fraction of heads with decreased entropy: **{fraction:.4}**");

    let _ = writeln!(md, "\n## Per-layer attention KL\n");
    let labels = layer_kl.header.clone().unwrap_or_default();
    let _ = writeln!(md, "| {} |", labels.join(" | "));
    let _ = writeln!(md, "|{}", "---:|".repeat(labels.len()));
    for r in 0..layer_kl.rows {
        let _ = write!(md, "| {}", layer_kl.get(r, 0) as i64);
        for c in 1..layer_kl.cols {
            let _ = write!(md, " | {:.4}", layer_kl.get(r, c));
        }
        let _ = writeln!(md, " |");
    }

    let _ = writeln!(md, "\n## Per-layer activation magnitude\n");
    let _ = writeln!(md, "| Layer | Pre | Post | Delta | % change |");
    let _ = writeln!(md, "|------:|----:|-----:|------:|---------:|");
    for r in 0..actmag.rows {
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            actmag.get(r, 0) as i64,
            actmag.get(r, 1),
            actmag.get(r, 2),
            actmag.get(r, 3),
            actmag.get(r, 4),
        );
    }

    // Optional circuit section.
    let circuit_path = dir.join("circuit.json");
    if circuit_path.is_file() {
        let spec = crate::circuit::load_circuit(&circuit_path)?;
        let _ = writeln!(md, "\n## Circuit layers\n");
        for (rank, layer) in spec.layers.iter().enumerate() {
            let _ = writeln!(
                md,
                "{}. layer {} — score {:.4}",
                rank + 1,
                layer.layer,
                layer.score
            );
        }
        let salient: Vec<String> = spec
            .heads
            .iter()
            .filter(|h| !h.auxiliary)
            .map(|h| format!("L{}H{} ({:.4})", h.layer, h.head, h.kl))
            .collect();
        if !salient.is_empty() {
            let _ = writeln!(md, "\nSalient heads: {}", salient.join(", "));
        }
    }

    // Optional ROUGE section.
    let rouge_path = dir.join("rouge.csv");
    if rouge_path.is_file() {
        let text = fs::read_to_string(&rouge_path).map_err(|e| Error::io(&rouge_path, e))?;
        let _ = writeln!(md, "\n## Summary quality (ROUGE F1)\n");
        let _ = writeln!(md, "| Model | ROUGE-1 | ROUGE-2 | ROUGE-L |");
        let _ = writeln!(md, "|-------|--------:|--------:|--------:|");
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 10 {
                return Err(Error::Parse {
                    path: rouge_path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected 10 cells, found {}", cells.len()),
                });
            }
            let f1 = |idx: usize| -> Result<f64> {
                cells[idx].trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: rouge_path.display().to_string(),
                    line: i + 1,
                    msg: format!("non-numeric score {:?}", cells[idx]),
                })
            };
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {:.4} |",
                cells[0],
                f1(3)?,
                f1(6)?,
                f1(9)?,
            );
        }
    }

    let _ = writeln!(
        md,
        "\n---\nNumbers are rounded to 4 decimal places for display; \
         the CSV files in this directory hold full precision."
    );
    Ok(md)
}

/// Provenance record written alongside every artifact directory. Reruns
/// with an equal manifest (same command, config, seeds, inputs) reproduce
/// the directory's outputs bitwise in 32-bit mode.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    /// The subcommand that produced the directory.
    pub command: String,
    /// Crate version that ran it.
    pub version: String,
    /// Named seeds in effect, e.g. `train` or `corpus`.
    pub seeds: BTreeMap<String, u64>,
    /// Snapshot of the governing configuration.
    pub config: serde_json::Value,
    /// Named input paths.
    pub inputs: BTreeMap<String, String>,
    /// Artifact paths produced, relative to the manifest's directory.
    pub outputs: Vec<String>,
    /// Pipeline stages that finished, in order.
    pub completed_stages: Vec<String>,
    /// Stage that failed, when the run stopped early.
    pub failure_stage: Option<String>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            completed_stages: Vec::new(),
            failure_stage: None,
            wall_time_secs: 0.0,
        }
    }

    /// Write `manifest.json` into `dir` (exactly one per directory;
    /// rewriting replaces it).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}
