#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autodiff;
pub mod bench;
pub mod bptt;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod eval;
pub mod metrics;
pub mod observation;
pub mod policy;
pub mod ppo;
pub mod pretrain;
pub mod report;
pub mod reward;
pub mod run;
pub mod so3;
