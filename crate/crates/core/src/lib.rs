//! `tpuc`: a small neural-network compiler for a virtual tensor accelerator.
//!
//! Graphs are imported into the device-independent TOP dialect, optionally
//! calibrated, lowered to the TPU dialect in one of four precisions, tiled
//! into layer groups, assigned DDR addresses and emitted as a `.tpm` program
//! that the bundled simulator executes.

pub mod backend;
pub mod error;
pub mod frontend;
pub mod ir;
pub mod kernels;
pub mod lowering;
pub mod numeric;
pub mod ops;
pub mod pipeline;
pub mod sim;
pub mod tensor_store;
pub mod top;
pub mod tpu;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
