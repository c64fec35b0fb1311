use std::path::PathBuf;

use thiserror::Error;

use crate::alphabet::{AlphabetError, Split};
use crate::dataset::DatasetError;
use crate::episodes::{EpisodeError, Violation};
use crate::protonet::ProtoError;

/// Errors from training, evaluation and experiment orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Alphabet(#[from] AlphabetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at episode {episode}")]
    NonFiniteLoss { episode: usize, loss: f64 },
    #[error(
        "episode {episode} drew image {image} from the {found} split while sampling {expected}"
    )]
    SplitLeak {
        episode: usize,
        image: usize,
        expected: Split,
        found: Split,
    },
    #[error("episode {episode} is malformed: {violation}")]
    MalformedEpisode {
        episode: usize,
        violation: Violation,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
