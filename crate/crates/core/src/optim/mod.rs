//! Local optimizers: bounded L-BFGS for hyperparameter training, SQP for the dispatch problems.

pub mod lbfgs;
pub mod qp;
pub mod sqp;
