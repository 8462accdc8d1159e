//! Across-seed reduction of the per-cell CSVs and the report table.

use std::path::Path;

use fca_core::federation::Method;
use fca_core::losses::LossWeights;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::runner::{cell_csv_name, CONFIG_FILE, CSV_HEADER};

pub const SUMMARY_FILE: &str = "summary.json";

/// Final-round metrics as fractions in [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub spec_bacc: f64,
    pub spec_bauc: f64,
    pub gen_bacc: f64,
    pub gen_bauc: f64,
    pub avg_bacc: f64,
    pub avg_bauc: f64,
}

impl FinalMetrics {
    fn from_splits(spec_bacc: f64, spec_bauc: f64, gen_bacc: f64, gen_bauc: f64) -> Self {
        FinalMetrics {
            spec_bacc,
            spec_bauc,
            gen_bacc,
            gen_bauc,
            avg_bacc: (spec_bacc + gen_bacc) / 2.0,
            avg_bauc: (spec_bauc + gen_bauc) / 2.0,
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.spec_bacc,
            self.spec_bauc,
            self.gen_bacc,
            self.gen_bauc,
            self.avg_bacc,
            self.avg_bauc,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        FinalMetrics {
            spec_bacc: v[0],
            spec_bauc: v[1],
            gen_bacc: v[2],
            gen_bauc: v[3],
            avg_bacc: v[4],
            avg_bauc: v[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub round: usize,
    pub metrics: FinalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub method: Method,
    pub loss: LossWeights,
    pub seeds: Vec<SeedResult>,
    pub mean: FinalMetrics,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std: FinalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Percent with one decimal, e.g. `75.1±0.4`.
pub fn format_pct(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}", mean * 100.0, std * 100.0)
}

fn results_err(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::Results {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Last evaluated round's aggregate (`ALL`) rows of one cell CSV.
pub fn read_final(path: &Path) -> Result<(usize, FinalMetrics), CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| results_err(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| results_err(path, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(results_err(path, format!("unexpected header {:?}", header)));
    }
    let mut last: Option<(usize, Option<(f64, f64)>, Option<(f64, f64)>)> = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| results_err(path, e.to_string()))?;
        let at = |m: String| results_err(path, format!("row {}: {}", line + 2, m));
        let round: usize = rec[0].parse().map_err(|_| at(format!("bad round {:?}", &rec[0])))?;
        if rec[1] != *"ALL" {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| at(format!("bad value {:?}", s)));
        let pair = (parse(&rec[3])?, parse(&rec[4])?);
        let entry = match &mut last {
            Some(e) if e.0 == round => e,
            _ => last.insert((round, None, None)),
        };
        match &rec[2] {
            "spec" => entry.1 = Some(pair),
            "gen" => entry.2 = Some(pair),
            other => return Err(at(format!("unknown split {:?}", other))),
        }
    }
    match last {
        Some((round, Some(s), Some(g))) => Ok((round, FinalMetrics::from_splits(s.0, s.1, g.0, g.1))),
        _ => Err(results_err(path, "no complete aggregate rows")),
    }
}

/// Rebuilds the summary from `config.toml` and the cell CSVs in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<RunSummary, CliError> {
    let config = crate::config::parse_config(&dir.join(CONFIG_FILE))?;
    summarize_with(&config, dir)
}

pub fn summarize_with(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, CliError> {
    let mut rows = Vec::new();
    for variant in config.variants() {
        let seeds = config
            .seeds
            .iter()
            .map(|&seed| {
                let (round, metrics) = read_final(&dir.join(cell_csv_name(&variant.label, seed)))?;
                Ok(SeedResult { seed, round, metrics })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for i in 0..6 {
            let column: Vec<f64> = seeds.iter().map(|s| s.metrics.values()[i]).collect();
            (mean[i], std[i]) = mean_std(&column);
        }
        rows.push(SummaryRow {
            variant: variant.label,
            method: variant.method,
            loss: variant.loss,
            seeds,
            mean: FinalMetrics::from_values(mean),
            std: FinalMetrics::from_values(std),
        });
    }
    Ok(RunSummary { rows })
}

pub fn write_summary(dir: &Path, summary: &RunSummary) -> Result<(), CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&path, text).map_err(CliError::io(&path))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    serde_json::from_str(&text).map_err(|e| results_err(&path, e.to_string()))
}

/// Aligned table: one row per variant, mean±std percent per column.
pub fn format_table(summary: &RunSummary) -> String {
    let headers = ["method", "S-bACC", "S-bAUC", "G-bACC", "G-bAUC", "avg-bACC", "avg-bAUC"];
    let body: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.variant.clone()];
            cells.extend(
                r.mean
                    .values()
                    .iter()
                    .zip(r.std.values())
                    .map(|(&m, s)| format_pct(m, s)),
            );
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|i| {
            body.iter()
                .map(|row| row[i].chars().count())
                .chain([headers[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<String>| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pad = widths[i] - c.chars().count();
                if i == 0 {
                    format!("{}{}", c, " ".repeat(pad))
                } else {
                    format!("{}{}", " ".repeat(pad), c)
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(headers.iter().map(|h| h.to_string()).collect())];
    out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.extend(body.into_iter().map(line));
    out.join("\n") + "\n"
}
