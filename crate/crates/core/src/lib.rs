//! Low-rank Bayesian tensor-train neural networks.
//!
//! Weight matrices are held as TT-matrices ([`tt`]); a Gaussian/Gamma prior
//! couples every internal TT rank to a positive scale vector so that unused
//! rank components shrink toward zero during training ([`priors`]). Networks
//! ([`model`]) are trained by MAP gradient ascent or Stein variational
//! gradient descent over a particle ensemble ([`inference`]), after which the
//! ranks are read off the posterior-mean scale vectors and the cores are
//! truncated ([`rank_prune`]). [`data`] loads MNIST IDX files and builds toy
//! datasets.

pub mod data;
pub mod error;
pub mod inference;
mod linalg;
pub mod model;
pub mod priors;
pub mod rank_prune;
pub mod tt;

pub use data::{BatchPlan, DataBatch, Dataset, Split, ToyKind};
pub use error::{Error, Result};
pub use inference::{
    Bandwidth, Ensemble, LambdaUpdate, MapConfig, MapTrainer, Optimizer, Stepper, SvgdConfig,
    SvgdTrainer, TracePoint,
};
pub use model::{Activation, LayerParams, LayerSpec, Network, Particle};
pub use priors::{GammaHyper, InitConfig, LambdaInit, Prior, RankScaleVector, LAMBDA_FLOOR};
pub use rank_prune::{PruneReport, RankEstimate, ThresholdPolicy};
pub use tt::{
    DenseMatrix, FactorizedShape, MultiIndex, ProductRoute, RankVector, TtCore, TtMatrix,
};
