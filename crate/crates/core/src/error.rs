use std::io;

use thiserror::Error;

use crate::classify::ClassifyError;
use crate::defense::DefenseError;
use crate::eval::EvalError;
use crate::ingest::IngestError;
use crate::pcap::PcapError;
use crate::script::ScriptError;
use crate::simulate::SimError;
use crate::trace::TraceError;

/// Any error the pipeline can raise.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Simulate(#[from] SimError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad input, 3 when the analysis itself
    /// cannot proceed, 4 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Trace(TraceError::Io(_)) => 4,
            Error::Classify(_) => 3,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Band;

    #[test]
    fn exit_codes() {
        let inseparable = ClassifyError::InseparableBands {
            type1: Band::new(1, 5).unwrap(),
            type2: Band::new(3, 9).unwrap(),
        };
        assert_eq!(Error::from(inseparable).exit_code(), 3);
        assert_eq!(Error::from(ScriptError::PathSyntax("x".into())).exit_code(), 2);
        assert_eq!(Error::from(PcapError::BadMagic(0)).exit_code(), 2);
        let io = Error::io("reading x", io::Error::new(io::ErrorKind::NotFound, "gone"));
        assert_eq!(io.exit_code(), 4);
        assert_eq!(io.to_string(), "reading x: gone");
    }
}
