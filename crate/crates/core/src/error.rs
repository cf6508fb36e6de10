//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} has a zero dimension")]
    EmptyDimension { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("leaf tensor contains NaN or Inf")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("gradient output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variables belong to different tapes")]
    TapeMismatch,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("unknown architecture id {0}")]
    UnknownArch(u8),
    #[error("input shape {got:?} invalid for {arch}: expected {want}")]
    InputShape {
        arch: &'static str,
        got: Vec<usize>,
        want: String,
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checkpoint parameters do not match architecture {arch}: {detail}")]
    ArchMismatch { arch: &'static str, detail: String },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset size {0} too small: need at least {1}")]
    TooSmall(usize, usize),
    #[error("tau {0} out of range [1,5]")]
    TauOutOfRange(u32),
    #[error("probability {0} out of range")]
    BadProbability(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("idx file: {0}")]
    Idx(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is NaN")]
    Diverged { epoch: usize, step: usize },
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("advset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("advset format: {0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gradient norm below 1e-14: similarity undefined")]
    UndefinedSimilarity,
    #[error("all samples degenerate")]
    AllDegenerate,
    #[error("empty evaluation set")]
    EmptySet,
    #[error("bound invalid: eps {eps} <= c_G {c_g}")]
    BoundInvalid { eps: f64, c_g: f64 },
    #[error("S_inf {0} outside [-1, 1]")]
    BadSimilarity(f64),
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("constant input: correlation undefined")]
    ConstantInput,
    #[error("design matrix singular")]
    Singular,
    #[error("zero total variance in response")]
    ZeroVariance,
}
