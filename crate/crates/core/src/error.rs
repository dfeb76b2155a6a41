use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate corners: three or more points are collinear")]
    DegenerateCorners,
    #[error("point maps to the line at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("homography is singular")]
    SingularHomography,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("source image {width}x{height} is smaller than the required {required}x{required}")]
    SourceTooSmall { width: u32, height: u32, required: u32 },
    #[error("dual sample requires two different source images")]
    SameSource,
    #[error("occlusion patch of size {p} does not fit in a {size}x{size} image")]
    PatchTooLarge { p: u32, size: u32 },
    #[error("corrupt manifest at line {line}: {reason}")]
    CorruptManifest { line: usize, reason: String },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("invalid generation config: {0}")]
    InvalidGenConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("checkpoint convention mismatch: expected {expected}, found {found}")]
    ConventionMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("dataset missing or empty: {0}")]
    DatasetMissing(PathBuf),
    #[error("non-finite loss at step {step}; batch dump written to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("image size mismatch: model expects {expected}, data has {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("bad sweep axis: {0}")]
    BadAxis(String),
    #[error("missing ablation variant: {0}")]
    MissingVariant(String),
    #[error("operation requires an FMRH model, got {0}")]
    WrongVariant(String),

    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
