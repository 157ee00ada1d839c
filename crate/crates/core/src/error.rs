use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("point cloud is empty: no pixel with valid depth was sampled")]
    EmptyCloud,

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("empty pixel set for entity {0}")]
    EmptyPixelSet(u32),

    #[error("every pixel is masked as dynamic")]
    AllPixelsDynamic,

    #[error("{0}")]
    Gmm(String),

    #[error("keyframe window is empty")]
    EmptyWindow,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("frame {frame}, {stage}: {source}")]
    Stage {
        frame: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn at(frame: usize, stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            frame,
            stage,
            source: Box::new(e),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
