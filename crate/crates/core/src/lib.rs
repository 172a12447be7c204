//! Two-time-scale resource allocation for IRS-assisted downlinks serving
//! eMBB and URLLC users.
//!
//! Precoders are optimized per mini-slot for every active URLLC set and the
//! IRS tiles pick codewords once per time slot. See the README for the
//! module map and the command-line harness.

pub mod ao;
pub mod channel;
pub mod codebook;
pub mod codeword;
pub mod convex;
pub mod error;
pub mod fbl;
pub mod harness;
pub mod oracle;
pub mod precoder;
pub mod scenario;

pub use ao::{AllocationSolution, Instance, SchemeKind};
pub use channel::{ChannelSet, CMatrix, CVector};
pub use codebook::Codebook;
pub use codeword::CodewordSelection;
pub use convex::{SolveReport, SolveStatus};
pub use error::{Error, Result};
pub use fbl::UrllcRequirement;
pub use precoder::PrecoderSet;
pub use scenario::{ActiveSetTable, ScenarioConfig, TrafficType};
