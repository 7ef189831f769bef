//! Selective state space machinery and the unidirectional block built on it.

mod block;
mod scan;

pub use block::{BlockConfig, MambaBlock, MambaStack, NormKind};
pub use scan::{discretize, selective_scan, ssm_conv_oracle};
