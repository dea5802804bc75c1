use std::path::PathBuf;

use thiserror::Error;

/// Every error is prefixed with the pipeline stage that raised it so the CLI
/// can surface a single, module-qualified line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("core_model: degenerate bounding box ({x_min}, {y_min}, {x_max}, {y_max})")]
    DegenerateBbox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("core_model: invalid grid: {0}")]
    InvalidGrid(String),
    #[error("core_model: invalid raster: {0}")]
    InvalidRaster(String),
    #[error("core_model: malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("yield_ingest: unknown crop '{0}' (no feasibility bounds configured)")]
    UnknownCrop(String),
    #[error("yield_ingest: {0}")]
    Ingest(String),

    #[error("s2_composite: field unusable, all 24 timesteps masked")]
    AllTimestepsMasked,
    #[error("s2_composite: {0}")]
    Composite(String),

    #[error("adm_prep: source raster must be at least 2x2, got {cols}x{rows}")]
    SourceTooSmall { cols: usize, rows: usize },
    #[error("adm_prep: missing daily weather records: {0}")]
    WeatherGap(String),
    #[error("adm_prep: cycle detected in D8 flow graph ({0} cells unresolved)")]
    FlowCycle(usize),
    #[error("adm_prep: {0}")]
    Adm(String),

    #[error("fusion: grid mismatch for {0}")]
    GridMismatch(String),
    #[error("fusion: modality '{0}' selected but not provided")]
    MissingModality(&'static str),
    #[error("fusion: {0}")]
    Fusion(String),

    #[error("models: expected {expected} feature columns, got {got}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("models: all timesteps masked for sample")]
    AllMasked,
    #[error("models: training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("models: {0}")]
    Model(String),

    #[error("evaluation: need at least k={k} fields, got {n}")]
    TooFewFields { n: usize, k: usize },
    #[error("evaluation: targets must be strictly positive (found {0})")]
    NonPositiveTarget(f64),
    #[error("evaluation: R² undefined for constant targets")]
    ConstantTarget,
    #[error("evaluation: {0}")]
    Eval(String),

    #[error("synthgen: {0}")]
    Synth(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
