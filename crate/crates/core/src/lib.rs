//! Distributed attention strategies on a simulated multi-machine GPU cluster.

pub mod attention;
pub mod error;
pub mod layout;
pub mod planner;
pub mod simnet;
pub mod strategies;
pub mod tensor;

pub use attention::{finalize, merge, multi_qkv_attention, oracle_attention, partial_attention, AttnPartial};
pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};
