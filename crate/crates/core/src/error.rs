use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is not unitary (defect {defect:.3e})")]
    NotUnitary { defect: f64 },

    #[error("matrix is not Hermitian (defect {defect:.3e})")]
    NotHermitian { defect: f64 },

    #[error("negative dissipation rate {rate}")]
    NegativeRate { rate: f64 },

    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),

    #[error("channel does not preserve trace (defect {defect:.3e})")]
    NotTracePreserving { defect: f64 },

    #[error("noise too strong for asymptote: eigenvalue magnitude {magnitude:.3e} below floor {floor:.1e}{}", layer_suffix(.layer))]
    NoiseTooStrong {
        magnitude: f64,
        floor: f64,
        layer: Option<String>,
    },

    #[error("inverse square root residual {residual:.3e} exceeds tolerance")]
    InvSqrtResidual { residual: f64 },

    #[error("expectation has imaginary residual {imag:.3e}")]
    Inconsistent { imag: f64 },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("GKIK cannot be applied across mid-circuit measurement {event}")]
    Incompatible { event: String },

    #[error("order {order} exceeds floating-point cap {cap}; use rational mode")]
    Precision { order: usize, cap: usize },

    #[error("ill-conditioned fit: {0}")]
    Conditioning(String),

    #[error("unsupported order {0}")]
    UnsupportedOrder(usize),

    #[error("mitigated denominator {denominator:.3e} below floor (raw numerator {raw_numerator:.6}, raw denominator {raw_denominator:.6})")]
    DivisionUnstable {
        denominator: f64,
        raw_numerator: f64,
        raw_denominator: f64,
    },

    #[error("quadrature did not converge (change {change:.3e} on doubling)")]
    Accuracy { change: f64 },

    #[error("probability {p} outside [0, 1]")]
    ChannelInconsistency { p: f64 },

    #[error("drift schedule covers {covered} shots, plan needs {needed}")]
    Coverage { covered: u64, needed: u64 },

    #[error("echo {mu:.3e} is not positive")]
    CatastrophicNoise { mu: f64 },

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("at {point}: {source}")]
    AtPoint { point: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn layer_suffix(layer: &Option<String>) -> String {
    match layer {
        Some(l) => format!(" in layer `{l}`"),
        None => String::new(),
    }
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn at(self, point: impl Into<String>) -> Self {
        Error::AtPoint {
            point: point.into(),
            source: Box::new(self),
        }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NotUnitary { .. } => "not_unitary",
            Error::NotHermitian { .. } => "not_hermitian",
            Error::NegativeRate { .. } => "negative_rate",
            Error::NumericalOverflow(_) => "numerical_overflow",
            Error::NotTracePreserving { .. } => "not_trace_preserving",
            Error::NoiseTooStrong { .. } => "noise_too_strong",
            Error::InvSqrtResidual { .. } => "inv_sqrt_residual",
            Error::Inconsistent { .. } => "inconsistent",
            Error::Structural(_) => "structural",
            Error::Incompatible { .. } => "incompatible",
            Error::Precision { .. } => "precision",
            Error::Conditioning(_) => "conditioning",
            Error::UnsupportedOrder(_) => "unsupported_order",
            Error::DivisionUnstable { .. } => "division_unstable",
            Error::Accuracy { .. } => "accuracy",
            Error::ChannelInconsistency { .. } => "channel_inconsistency",
            Error::Coverage { .. } => "coverage",
            Error::CatastrophicNoise { .. } => "catastrophic_noise",
            Error::Config { .. } => "config",
            Error::AtPoint { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
