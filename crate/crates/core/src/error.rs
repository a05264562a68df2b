use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("path is not regular at xi = {xi} (speed {speed:e})")]
    Regularity { xi: f64, speed: f64 },
    #[error("vehicles {i} and {j} are coincident (distance {dist:e})")]
    Coincident { i: usize, j: usize, dist: f64 },
    #[error("ill-conditioned pseudoinverse (min singular value {min_sv:e})")]
    IllConditioned { min_sv: f64 },
    #[error("algebraic loop unresolvable: {0}")]
    LoopUnresolvable(String),
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("both depth limits violated simultaneously (min z {zmin_obs}, max z {zmax_obs})")]
    DepthLimits { zmin_obs: f64, zmax_obs: f64 },
    #[error("step {step} (t = {t}): {source}")]
    AtStep {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
