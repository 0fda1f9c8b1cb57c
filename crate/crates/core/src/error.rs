use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transfer function: {0}")]
    InvalidTransferFunction(String),
    #[error("denominator vanishes at f = {f_hz} Hz")]
    PoleAtEvaluation { f_hz: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("curve passes through the winding point at sample {index}")]
    OnBoundary { index: usize },
    #[error("grid too coarse: argument increment {increment:.3} rad at segment {index}")]
    GridTooCoarse { index: usize, increment: f64 },
    #[error("invalid operating point: {0}")]
    InvalidOperatingPoint(String),
    #[error("no feasible damper design (best margin {best_margin:.4})")]
    Infeasible { best_margin: f64 },
    #[error("too many infeasible grid points: {infeasible} of {total}")]
    TooManyInfeasible { infeasible: usize, total: usize },
    #[error("insufficient excitation: |ΔI| = {norm:.3} A below floor {floor:.3} A")]
    InsufficientExcitation { norm: f64, floor: f64 },
    #[error("signal `{0}` did not settle")]
    Unsettled(String),
    #[error("scan refused: {0}")]
    ScanRefused(String),
    #[error("scan at {f_hz} Hz did not settle (window drift {drift:.4})")]
    ScanNotSettled { f_hz: f64, drift: f64 },
    #[error("simulation diverged at t = {t:.4} s")]
    Divergent { t: f64 },
    #[error("R² undefined for output {output}: zero target variance")]
    UndefinedRSquared { output: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("training failed: {0}")]
    Training(String),
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
