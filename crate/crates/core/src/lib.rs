//! Compact per-term spatial summaries over geo-tagged event streams.
//!
//! Each monitored term keeps either a SpaceSaving counter set over grid
//! cells ([`tsum::Tsum`]) or the same counters augmented with distance-band
//! ring counters per center ([`ringsum::Ringsum`]). A power-law location
//! model `p = C * d^-alpha` fitted from the summary estimates the term's
//! frequency in cells the summary does not store.

pub mod codec;
pub mod error;
pub mod eval;
pub mod exec;
pub mod grid;
pub mod ingest;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod query;
pub mod ring_table;
pub mod rings;
pub mod ringsum;
pub mod tsum;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::{CellId, Grid, GridConfig};
pub use ring_table::RingCellTable;
pub use rings::RingSpec;
pub use tsum::{Counter, Tsum};
