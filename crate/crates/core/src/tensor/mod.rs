//! Dense arrays and the reverse-mode tape every model block is built on.

mod array;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use array::DiffArray;
pub use tape::{ArrayId, BnBatchStats, BnRunning, ComputeTape, Mode, BN_EPS, BN_MOMENTUM};
