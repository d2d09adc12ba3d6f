use crate::trainer::TrajectoryLog;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("{0}")]
    Parse(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training blew up; the log holds everything recorded before the abort.
    #[error("loss diverged at t = {time:e} (loss {loss:e})")]
    Diverged {
        time: f64,
        loss: f64,
        log: Box<TrajectoryLog>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

pub(crate) fn dims<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
