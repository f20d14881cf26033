//! Raw-domain screen demoiréing with a dual raw/YCbCr stream network.

pub mod arch;
pub mod color;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
