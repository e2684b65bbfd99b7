use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("nothing to predict")]
    NothingToPredict,

    #[error("unmaskable caption")]
    UnmaskableCaption,

    #[error("caption has {len} tokens, limit is {max}")]
    CaptionTooLong { len: usize, max: usize },

    #[error("negative pool is empty")]
    EmptyPool,

    #[error("negative has no replaced positions")]
    NoReplacedPositions,

    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("empty gallery")]
    EmptyGallery,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
