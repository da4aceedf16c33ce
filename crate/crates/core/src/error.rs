use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("transition row for (state {state}, action {action}) sums to {sum}, expected 1")]
    NotStochastic { state: usize, action: usize, sum: f64 },

    #[error("probability p({next}|{state},{action}) = {value} outside [0, 1]")]
    ProbabilityOutOfRange {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("policy has {policy} states but the MDP has {mdp}")]
    DimensionMismatch { policy: usize, mdp: usize },

    #[error("state index {0} out of range")]
    StateOutOfRange(usize),

    #[error("induced chain is not unichain-aperiodic: {0}")]
    NonUnichain(&'static str),

    #[error("mixing time exceeded the cap of {0} steps")]
    MixingCapExceeded(usize),

    #[error("discount factor {0} must lie in [0, 1)")]
    InvalidDiscount(f64),

    #[error("barrier argument {0} is not positive")]
    BarrierDomain(f64),

    #[error("could not make matrix positive definite (jitter exceeded {0})")]
    PositiveDefiniteRepair(f64),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
