use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{flagged} of {paths} paths exploded; scenario is ill-posed")]
    Explosion { flagged: usize, paths: usize },
    #[error("non-finite coefficient: {0}")]
    NonFinite(String),
    #[error("invalid population measure: {0}")]
    Measure(String),
    #[error("invalid preference: {0}")]
    Preference(String),
    #[error("invalid policy input: {0}")]
    Policy(String),
    #[error("market construction failed: {0}")]
    Market(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("scenario invariant violated: {0}")]
    Scenario(String),
    #[error("data file: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
