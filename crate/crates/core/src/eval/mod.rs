//! Datasets, contaminated splits, detection metrics and experiment grids.

mod data;
mod experiment;
mod metrics;

pub use data::{gen_synthetic, load_csv, outlier_count, parse_csv, Dataset, Provenance, SyntheticFamily};
pub use experiment::{
    evaluate_splits, make_splits, reports_to_csv, run_cell, run_experiment, sweep, DataFamily, ExperimentSpec, MetricReport, SeedMetric,
    Splits, SweepParam,
};
pub use metrics::{auc, average_precision, mean_std};
