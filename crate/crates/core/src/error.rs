use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point ({x}, {y}, {z}) lies outside the scene bounds")]
    OutOfBounds { x: f64, y: f64, z: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("degenerate scene: {0}")]
    Degenerate(&'static str),
}
