use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Core {
        path: PathBuf,
        #[source]
        source: rga_core::Error,
    },

    #[error(transparent)]
    Model(#[from] rga_core::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn core(path: &Path, source: rga_core::Error) -> Self {
        Error::Core {
            path: path.to_path_buf(),
            source,
        }
    }
}
