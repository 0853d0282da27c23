use alloc::string::String;

/// Errors raised by the tensor engine, the network and the trainer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration for {layer}: {detail}")]
    Config { layer: String, detail: String },

    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: String },

    #[error("{op}: no valid pixels")]
    NoValidPixels { op: &'static str },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("data: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    /// Replaces the layer name of a configuration error; other variants pass through.
    pub(crate) fn in_layer(self, name: &str) -> Self {
        match self {
            Error::Config { detail, .. } => Error::Config {
                layer: name.into(),
                detail,
            },
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: alloc::format!("{name}: {detail}"),
            },
            other => other,
        }
    }
}
