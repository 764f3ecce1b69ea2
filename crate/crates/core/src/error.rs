use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SgError> = std::result::Result<T, E>;

/// Every failure the solver can report. Variants map one-to-one onto the
/// halting conditions of the time-stepping scheme; callers match on them to
/// pick exit codes or decide whether a run left the regime where the step is
/// well defined.
#[derive(Debug, Error)]
pub enum SgError {
    #[error("non-finite value in field `{what}` at sample {index}")]
    NonFiniteField { what: &'static str, index: usize },

    #[error("grid mismatch: {0} vs {1} points per axis")]
    GridMismatch(usize, usize),

    #[error("map solve failed at grid point {point:?} after {iterations} iterations (residual {residual:.3e})")]
    MapSolveFailed {
        point: [usize; 2],
        iterations: usize,
        residual: f64,
    },

    #[error("contraction certificate lost at grid point {point:?}: min eigenvalue {eig:.6e} < guard {guard:.6e}")]
    ContractionLost {
        point: [usize; 2],
        eig: f64,
        guard: f64,
    },

    #[error("elliptic solve failed: {0}")]
    EllipticSingular(String),

    #[error("incompatible right-hand side: mean {mean:.3e} exceeds {tol:.1e}")]
    IncompatibleRhs { mean: f64, tol: f64 },

    #[error("step matrices too large: sup|A| = {a:.3e}, sup|B| = {b:.3e}, bound {bound:.3e}")]
    AbTooLarge { a: f64, b: f64, bound: f64 },

    #[error("degenerate determinant {value:.3e} at grid point {point:?}")]
    DegenerateDeterminant { point: [usize; 2], value: f64 },

    #[error("convexity lost: min eigenvalue of S is {min_eig:.6e} at grid point {point:?}, floor {floor:.6e}")]
    ConvexityLost {
        min_eig: f64,
        floor: f64,
        point: [usize; 2],
    },

    #[error("positivity lost: min height {min:.6e} at grid point {point:?}, floor {floor:.6e}")]
    PositivityLost {
        min: f64,
        floor: f64,
        point: [usize; 2],
    },

    #[error("Newton iteration did not converge: {iterations} iterations, residual {residual:.3e}")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("step increment {increment:.3e} exceeds cap {cap:.3e}")]
    LipschitzCapExceeded { increment: f64, cap: f64 },

    #[error("flow round trip error {error:.3e} exceeds {tol:.3e}")]
    FlowRoundTripFailed { error: f64, tol: f64 },

    #[error("need at least {needed} snapshots, got {got}")]
    InsufficientSnapshots { needed: usize, got: usize },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("snapshot checksum mismatch in {0}")]
    ChecksumMismatch(PathBuf),

    #[error("snapshot version mismatch in {path}: found {found:?}")]
    VersionMismatch { path: PathBuf, found: Vec<u8> },

    #[error("step {step} (t = {t}): {source}")]
    AtStep {
        step: usize,
        t: f64,
        #[source]
        source: Box<SgError>,
    },
}

impl SgError {
    pub fn at_step(self, step: usize, t: f64) -> Self {
        match self {
            e @ SgError::AtStep { .. } => e,
            e => SgError::AtStep {
                step,
                t,
                source: Box::new(e),
            },
        }
    }

    /// The error with any step annotation removed.
    pub fn root(&self) -> &SgError {
        match self {
            SgError::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code for the CLI, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            SgError::ConfigInvalid(_) => 2,
            SgError::Io { .. } => 3,
            SgError::ChecksumMismatch(_) | SgError::VersionMismatch { .. } => 4,
            SgError::MapSolveFailed { .. } | SgError::ContractionLost { .. } => 10,
            SgError::EllipticSingular(_) | SgError::IncompatibleRhs { .. } => 11,
            SgError::NewtonDiverged { .. } | SgError::AbTooLarge { .. } => 12,
            SgError::DegenerateDeterminant { .. }
            | SgError::ConvexityLost { .. }
            | SgError::PositivityLost { .. } => 13,
            SgError::LipschitzCapExceeded { .. } | SgError::FlowRoundTripFailed { .. } => 14,
            SgError::NonFiniteField { .. } | SgError::GridMismatch(..) => 15,
            SgError::InsufficientSnapshots { .. } => 16,
            SgError::AtStep { .. } => unreachable!(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SgError::Io {
            path: path.into(),
            source,
        }
    }
}
