use thiserror::Error;

use whispersv::audio::AudioError;
use whispersv::corpus::CorpusError;
use whispersv::evaluation::EvalError;
use whispersv::postnet::PostNetError;
use whispersv::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed: max relative error {0:e} exceeds {1:e}")]
    GradCheck(f64, f64),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::GradCheck(..) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
            CliError::GradCheck(..) => "gradcheck",
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(AudioError, CorpusError, EvalError, PostNetError, TrainError, std::io::Error, serde_json::Error);
