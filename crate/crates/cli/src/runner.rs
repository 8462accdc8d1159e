//! Executes the (variant, seed) matrix and writes per-cell metric CSVs.

use std::fs::File;
use std::path::{Path, PathBuf};

use fca_core::datagen::{generate, load_csv, normalize, Dataset};
use fca_core::federation::Federation;
use fca_core::metrics::MetricsRecord;
use fca_core::partition::{dirichlet_partition, Partition};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Variant};
use crate::error::CliError;
use crate::summary::{summarize_dir, write_summary, RunSummary};

pub const CONFIG_FILE: &str = "config.toml";
pub const CSV_HEADER: [&str; 5] = ["round", "client_id", "split", "bACC", "bAUC"];

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config's `output_dir`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent cells; `None` uses all cores.
    pub parallel: Option<usize>,
    /// Save a checkpoint every this many rounds under `checkpoints/`.
    pub checkpoint_every: Option<usize>,
}

pub fn cell_csv_name(variant: &str, seed: u64) -> String {
    format!("{}_seed{}.csv", variant, seed)
}

/// Normalized features plus the partition used for one seed.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Partition), fca_core::Error> {
    let raw = match config.csv_schema() {
        Some((path, schema)) => load_csv(path, &schema)?,
        None => generate(&config.synth_spec(seed))?,
    };
    let partition = dirichlet_partition(raw.labels(), &config.partition_spec(seed))?;
    let train: Vec<usize> = partition.train.iter().flatten().copied().collect();
    let data = normalize(&raw, &train)?;
    Ok((data, partition))
}

/// Runs one cell; evaluation records in round order.
pub fn run_cell(
    config: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    checkpoints: Option<(&Path, usize)>,
) -> Result<Vec<MetricsRecord>, CliError> {
    let wrap = |source| CliError::Cell {
        variant: variant.label.clone(),
        seed,
        source,
    };
    let (data, partition) = prepare_data(config, seed).map_err(wrap)?;
    let model = config.model_config(data.dim(), seed);
    let mut fed = Federation::new(&data, &partition, &model, config.plan(variant, seed)).map_err(wrap)?;
    let records = fed
        .run(|f| match checkpoints {
            Some((dir, every)) if f.server.round % every == 0 => f.save_checkpoint(
                &dir.join(format!("{}_seed{}", variant.label, seed))
                    .join(format!("round_{:04}", f.server.round)),
            ),
            _ => Ok(()),
        })
        .map_err(wrap)?;
    Ok(records)
}

fn fmt_value(v: f64) -> String {
    format!("{}", v)
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), CliError> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::Results {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let round = r.round.to_string();
        for c in &r.clients {
            w.write_record([
                round.as_str(),
                &c.client_id.to_string(),
                "spec",
                &fmt_value(c.bacc),
                &c.bauc.map(fmt_value).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        for (split, m) in [("spec", r.specialization), ("gen", r.generalization)] {
            w.write_record([round.as_str(), "ALL", split, &fmt_value(m.bacc), &fmt_value(m.bauc)])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}

/// Runs every cell, writes `config.toml`, one CSV per cell and
/// `summary.json` into the output directory.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let out = opts.out_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_toml()).map_err(CliError::io(&config_path))?;

    if opts.checkpoint_every == Some(0) {
        return Err(CliError::Config("--checkpoint-every must be >= 1".into()));
    }
    let ckpt_dir = out.join("checkpoints");
    let checkpoints = opts.checkpoint_every.map(|every| (ckpt_dir.as_path(), every));

    let cells: Vec<(Variant, u64)> = config
        .variants()
        .into_iter()
        .flat_map(|v| config.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let execute = || -> Vec<Result<(), CliError>> {
        cells
            .par_iter()
            .map(|(variant, seed)| {
                let records = run_cell(config, variant, *seed, checkpoints)?;
                write_metrics_csv(&out.join(cell_csv_name(&variant.label, *seed)), &records)
            })
            .collect()
    };
    let results = match opts.parallel {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {}", e)))?
            .install(execute),
        None => execute(),
    };
    results.into_iter().collect::<Result<Vec<()>, CliError>>()?;

    let summary = summarize_dir(&out)?;
    write_summary(&out, &summary)?;
    Ok(summary)
}
