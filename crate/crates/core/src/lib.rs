//! Two-stream tracking backbone with window-partitioned interaction blocks,
//! correlation head, losses, online tracker and a synthetic evaluation harness.

pub mod attention;
pub mod backbone;
pub mod bbox;
pub mod bench;
pub mod checkpoint;
pub mod dump;
pub mod error;
pub mod gim;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod image;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tracker;

pub use error::{CoreError, Result};
