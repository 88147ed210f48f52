use thiserror::Error;

/// Errors raised by the estimators in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point projects behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("degenerate entity: {0}")]
    DegenerateEntity(&'static str),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("fit did not describe a real circle (r^2 = {0})")]
    NonCircleSolution(f64),
    #[error("points are collinear, no supporting plane")]
    DegeneratePlane,
    #[error("no consensus: best hypothesis had {best} inliers, {needed} required")]
    NoConsensus { best: usize, needed: usize },
    #[error("conic is not an ellipse: {0}")]
    NotAnEllipse(String),
    #[error("line through the point does not cross the ellipse twice")]
    NoTwoIntersections,
    #[error("ellipse has no interior pixels")]
    EmptyInterior,
    #[error("degenerate chord (denominator {0:e})")]
    DegenerateChord(f64),
    #[error("candidate center is not inside the ellipse")]
    InvalidCandidate,
    #[error("neither hypothesis admits a rectifying homography")]
    DisambiguationFailed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
