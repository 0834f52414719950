use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors returned by the persistence model, the on-media layout and the
/// PMO store.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An offset or length falls outside the addressed object.
    #[error("range error: {0}")]
    Range(String),
    /// The operation is not defined for the given arguments or domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// The device cannot hold (or does not contain) a valid PMO system.
    #[error("format error: {0}")]
    Format(String),
    #[error("device is not formatted as a PMO system (bad magic)")]
    NotFormatted,
    #[error("no PMO named {0:?}")]
    NotFound(String),
    #[error("PMO {0:?} already exists")]
    AlreadyExists(String),
    #[error("out of space: {0}")]
    OutOfSpace(OutOfSpace),
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("busy: {0}")]
    Busy(BusyReason),
    /// Misuse that the API contract leaves undefined; only reported when the
    /// store runs with checks enabled.
    #[error("undefined behavior: {0}")]
    UndefinedBehavior(String),
    /// A crash was injected into psync on purpose (see `PsyncHalt`).
    #[error("injected crash {0}")]
    InjectedCrash(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutOfSpace {
    /// Every metadata hashtable slot holds a live PMO.
    Table,
    /// The data region has no extent large enough.
    Extent,
}

impl fmt::Display for OutOfSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutOfSpace::Table => f.write_str("metadata hashtable is full"),
            OutOfSpace::Extent => f.write_str("data region exhausted"),
        }
    }
}

/// Why an attach or destroy request collided with an existing attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusyReason {
    /// A live process already holds the PMO for writing (">1 writer").
    MultipleWriters,
    /// A read was requested while a live writer holds the PMO.
    ExistingWriter,
    /// A write was requested while readers hold the PMO.
    ReadersPresent,
    /// The PMO is attached and cannot be destroyed.
    Attached,
}

impl fmt::Display for BusyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BusyReason::MultipleWriters => f.write_str("invalid (>1 writer)"),
            BusyReason::ExistingWriter => f.write_str("invalid (existing writer)"),
            BusyReason::ReadersPresent => f.write_str("invalid (readers present)"),
            BusyReason::Attached => f.write_str("PMO is attached"),
        }
    }
}
