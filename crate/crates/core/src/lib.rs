//! Persistent memory objects (PMOs).
//!
//! A PMO is a named, fixed-size region of persistent memory that a process
//! attaches into its address space, updates in place through ordinary
//! pointers and makes durable with [`psync`](store::System::psync). Every
//! psync is all-or-nothing: after a crash the object holds exactly the
//! contents of its latest completed psync.
//!
//! The crate is layered bottom-up:
//!
//! - [`pmem`]: the persistence domain (cached stores, flushes, fences and
//!   uncached atomic writes), simulated or passed through to a mapping;
//! - [`layout`]: the on-media format, formatting, metadata hashtable and
//!   page-granular extent allocation;
//! - [`store`]: the PMO lifecycle, the shadow-copy psync protocol and
//!   post-crash recovery;
//! - [`harness`]: crash injection over the simulated domain, checked against
//!   a logical model of committed contents;
//! - [`demo`]: a sorted linked list with absolute pointers living in a PMO.

pub mod demo;
pub mod error;
pub mod harness;
pub mod layout;
pub mod pmem;
pub mod store;

pub use error::{BusyReason, Error, OutOfSpace, Result};

/// Cache-line size of the modeled platform.
pub const LINE_SIZE: u64 = 64;
/// Page size; the unit of PMO allocation and dirty tracking.
pub const PAGE_SIZE: u64 = 4096;
