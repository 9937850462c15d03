use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite sample in raster data")]
    NonFinite,

    #[error("a {levels}-level pyramid does not fit a {width}x{height} raster")]
    TooManyLevels {
        levels: usize,
        width: usize,
        height: usize,
    },

    #[error("inpainting mask covers every pixel, nothing to anchor the fill")]
    NothingToAnchor,

    #[error("only {found} correspondences survived, at least 4 are required")]
    InsufficientMatches { found: usize },

    #[error("degenerate point configuration")]
    Degenerate,

    #[error("patch weights select no overlapping pixels")]
    EmptyOverlap,

    #[error("normal equations are singular even with damping")]
    Singular,

    #[error("pair graph is disconnected; frames unreachable from the anchor: {0:?}")]
    Disconnected(Vec<usize>),

    #[error("light slant {0} rad is outside [0, pi/2)")]
    InvalidSlant(f64),

    #[error("view {index} leaves the scene bounds")]
    ViewOutOfBounds { index: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
