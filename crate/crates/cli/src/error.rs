use std::path::{Path, PathBuf};

use nrvc_core::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_CORRUPTION: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Core(Error::Config(_)) => EXIT_USAGE,
            Self::Core(Error::Format(_) | Error::Unsupported(_)) => EXIT_FORMAT,
            Self::Core(Error::Divergence { .. }) => EXIT_DIVERGENCE,
            Self::Core(Error::Corruption(_)) => EXIT_CORRUPTION,
            _ => EXIT_FAILURE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_taxonomy() {
        assert_eq!(CliError::Core(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Format("x".into())).exit_code(), 3);
        assert_eq!(
            CliError::Core(Error::Unsupported("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(Error::Divergence {
                epoch: 3,
                slice: Some(1)
            })
            .exit_code(),
            4
        );
        assert_eq!(CliError::Core(Error::Corruption("x".into())).exit_code(), 5);
        assert_eq!(CliError::Core(Error::Domain("x".into())).exit_code(), 1);
    }
}
