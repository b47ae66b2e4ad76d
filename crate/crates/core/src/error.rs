use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("theta = {theta} lies outside the kernel domain [{lo}, {hi}]")]
    Domain { theta: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("series did not converge after {terms} terms (partial sum {partial_sum:e}, last term {last_term:e})")]
    NonConvergent {
        partial_sum: f64,
        last_term: f64,
        terms: usize,
    },

    #[error("coherence table has no entry for {0}")]
    MissingEntry(String),

    #[error("certificate is infeasible (r* = {r_star:e} >= c- = {c_minus:e})")]
    Infeasible { r_star: f64, c_minus: f64 },

    #[error("epsilon = {epsilon:e} is outside the certified basin (epsilon_0 = {epsilon_0:e})")]
    OutOfBasin { epsilon: f64, epsilon_0: f64 },

    #[error("solver diverged after {} iterations (loss {:e})", .trace.len().saturating_sub(1), .trace.last().copied().unwrap_or(f64::NAN))]
    Divergence { trace: Vec<f64> },

    #[error("ill-conditioned system (condition number {condition:e}); most collinear columns belong to modalities {modality_a} and {modality_b}")]
    Conditioning {
        condition: f64,
        modality_a: usize,
        modality_b: usize,
    },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics themselves, as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergent { .. }
                | Error::Infeasible { .. }
                | Error::OutOfBasin { .. }
                | Error::Divergence { .. }
                | Error::Conditioning { .. }
        )
    }
}
