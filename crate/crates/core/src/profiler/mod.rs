//! Lifecycle events, the overhead / execution-time metrics derived from
//! them, and the benchmark experiments.

mod bench;
mod events;
mod metrics;

pub use events::{
    read_csv, read_csv_file, write_csv, write_csv_file, CsvError, EventKind, ProfileEvent, Recorder, CSV_HEADER,
};
pub use metrics::{compute_metrics, AdaptationBreakdown, Flag, MetricsReport, FLAG_DUPLICATE, FLAG_ORDER};
pub use bench::{
    linear_fit, run_experiment, BenchError, ExperimentId, ExperimentReport, ExperimentRow, ExperimentSpec, LinearFit,
    DEFAULT_SCALE, LONG_KERNEL_S, REPORT_HEADER, SHORT_KERNEL_S,
};
