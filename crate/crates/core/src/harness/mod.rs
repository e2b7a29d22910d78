//! Dataset ingestion, experiment sweeps, result files and plots.

pub mod dataset;
pub mod gradcheck;
pub mod plot;
pub mod results;
pub mod sweep;
pub mod synthetic;

pub use dataset::{load_dataset, split_dataset, DatasetManifest, LabeledImage, SplitDataset};
pub use plot::{emit_plot, AxesSpec};
pub use results::{aggregate, Method, ResultRow, CSV_HEADER};
pub use sweep::{
    run_colorization, run_cs_sweep, ExperimentSpec, Model, ModelBank, RunManifest, SweepOptions, SweepOutcome, Task,
};
