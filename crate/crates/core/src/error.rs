use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what}: index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{0}: mask selects no positions")]
    EmptySupervision(&'static str),

    #[error("{0}: degenerate zero-norm vector")]
    DegenerateVector(&'static str),

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("layer {layer} out of range 0..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("parallel segments misaligned: {what} lengths {tgt} vs {en}")]
    Alignment {
        what: &'static str,
        tgt: usize,
        en: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("entropy curve has {found} usable drop(s); need two (profile: {profile:?})")]
    InsufficientStructure { found: usize, profile: Vec<f64> },

    #[error("{what}: need at least {min} values, got {len}")]
    TooShort {
        what: &'static str,
        len: usize,
        min: usize,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::EmptySupervision(_) => "empty_supervision",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::NonFinite(_) => "non_finite",
            Error::Length { .. } => "length",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::Alignment { .. } => "alignment",
            Error::Config(_) => "config",
            Error::InsufficientStructure { .. } => "insufficient_structure",
            Error::TooShort { .. } => "too_short",
            Error::Empty(_) => "empty",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Parse { .. } => "parse",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}
