//! Policy-gradient methods that first maximize the gain and then the bias of
//! a parameterized policy on finite unichain MDPs, in exact and
//! sampling-based forms.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod envs;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod gradients;
pub mod mdp;
pub mod optimizer;
pub mod policy;
pub mod sampling;
