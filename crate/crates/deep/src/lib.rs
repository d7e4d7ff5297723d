//! Deep BSDE valuation with a from-scratch differentiation and training stack.
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation over dense matrices
//! * [`nn`]: stacked LSTM, per-node feedforward networks, Adam, checkpoints
//! * [`deep_bsde`]: training, multi-trial averaging, CVA and the two-stage risk-free-closeout pipeline
//! * [`gradcheck`]: finite-difference checks of the above

pub mod autodiff;
pub mod deep_bsde;
pub mod gradcheck;
pub mod nn;

pub use autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
pub use deep_bsde::{
    cva_solve, rollout_loss, train, train_multifc_baseline, value_replacement, value_riskfree_closeout, Architecture,
    CvaSummary, DbsdeConfig, DbsdeError, EarlyStop, RecoveryInput, RiskfreeCloseoutSummary, TrainState, TrialSummary,
};
pub use nn::{AdamConfig, AdamState, FcSubnetworks, LstmStack, Network, NnError, ParamSet};
