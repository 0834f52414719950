//! The shadow-copy psync protocol.
//!
//! ```text
//! W -> P   flush dirty shadow pages and their bitmap lines, fence
//! P -> C   copy dirty shadow pages into the primary, flush, fence;
//!          clear their DIRTY bits, flush, fence
//! C -> W
//! ```
//!
//! A crash in W or P leaves the primary untouched and recovery discards the
//! shadow. A crash in C finds every dirty page durable in the shadow with its
//! DIRTY bit set, and recovery redoes the copy.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::Ordering;

use super::handle::Attachment;
use crate::layout::{clear_bits, PmoState, ShadowLayout, DIRTY, E_STATE};
use crate::pmem::{LineAddr, Medium};
use crate::{Error, Result, LINE_SIZE, PAGE_SIZE};

/// Deliberately broken variants of the protocol, used to check that crash
/// testing catches ordering bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mutation {
    /// No fence between flushing the shadow and entering C.
    DropFence2,
    /// No fence between copying into the primary and clearing DIRTY bits.
    DropFence4,
    /// Bitmap lines flushed only after entering C.
    EarlyCState,
    /// Primary updated before entering C.
    CopyBeforeC,
    /// Bitmap lines never flushed.
    SkipDirtyPersist,
}

impl Mutation {
    pub const ALL: [Mutation; 5] = [
        Mutation::DropFence2,
        Mutation::DropFence4,
        Mutation::EarlyCState,
        Mutation::CopyBeforeC,
        Mutation::SkipDirtyPersist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::DropFence2 => "drop-fence-2",
            Mutation::DropFence4 => "drop-fence-4",
            Mutation::EarlyCState => "early-c-state",
            Mutation::CopyBeforeC => "copy-before-c",
            Mutation::SkipDirtyPersist => "skip-dirty-persist",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mutation::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown mutation {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Where to abandon a psync, leaving the medium as a crash would.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsyncHalt {
    /// After the shadow is durable, still in P.
    BeforeCommit,
    /// Right after entering C, before any page is copied.
    AfterCommit,
}

fn set_state<M: Medium + ?Sized>(m: &M, att: &Attachment, s: PmoState) -> Result<()> {
    m.uncached_atomic_write(att.entry + E_STATE, s as u64)
}

pub(super) fn copy_pages<M: Medium + ?Sized>(
    m: &M,
    shadow: &ShadowLayout,
    primary: u64,
    pages: &[u64],
) -> Result<()> {
    let mut buf = vec![0u8; PAGE_SIZE as usize];
    for &p in pages {
        m.read(shadow.page_addr(p), &mut buf)?;
        let dst = primary + p * PAGE_SIZE;
        m.store(dst, &buf)?;
        m.flush_range(dst, PAGE_SIZE)?;
    }
    Ok(())
}

/// Runs one psync; returns the number of pages copied.
pub(super) fn run<M: Medium + ?Sized>(
    m: &M,
    att: &Attachment,
    mutation: Option<Mutation>,
    halt: Option<PsyncHalt>,
) -> Result<u64> {
    let shadow = att.shadow.expect("write attachment has a shadow");
    let dirty = att.dirty_pages();
    let bitmap_lines: BTreeSet<LineAddr> = dirty
        .iter()
        .map(|&p| LineAddr::containing(shadow.bitmap_byte_addr(p)))
        .collect();
    let is = |x| mutation == Some(x);
    let flush_bitmap = || -> Result<()> {
        for &line in &bitmap_lines {
            m.flush_line(line)?;
        }
        Ok(())
    };
    let halted = |at: &str| {
        att.detach_flag();
        Err(Error::InjectedCrash(format!(
            "psync of {} halted {at}",
            att.name
        )))
    };

    set_state(m, att, PmoState::Persisting)?;
    for &p in &dirty {
        m.flush_range(shadow.page_addr(p), PAGE_SIZE)?;
    }
    if !is(Mutation::SkipDirtyPersist) && !is(Mutation::EarlyCState) {
        flush_bitmap()?;
    }
    if !is(Mutation::DropFence2) {
        m.fence();
    }
    if halt == Some(PsyncHalt::BeforeCommit) {
        return halted("in P");
    }
    if is(Mutation::CopyBeforeC) {
        copy_pages(m, &shadow, att.primary, &dirty)?;
        m.fence();
    }
    set_state(m, att, PmoState::Copying)?;
    if halt == Some(PsyncHalt::AfterCommit) {
        return halted("in C");
    }
    if is(Mutation::EarlyCState) {
        flush_bitmap()?;
    }
    if !is(Mutation::CopyBeforeC) {
        copy_pages(m, &shadow, att.primary, &dirty)?;
        if !is(Mutation::DropFence4) {
            m.fence();
        }
    }
    {
        let mut bitmap = att.bitmap();
        for &p in &dirty {
            clear_bits(&mut bitmap, p, DIRTY);
        }
        for &line in &bitmap_lines {
            let from = line.offset() - shadow.bitmap_addr();
            let to = (from + LINE_SIZE).min(bitmap.len() as u64);
            m.store(line.offset(), &bitmap[from as usize..to as usize])?;
            m.flush_line(line)?;
        }
    }
    m.fence();
    set_state(m, att, PmoState::Write)?;
    for &p in &dirty {
        att.clear_dirty_flag(p);
    }
    debug_assert!(att.psync_active.load(Ordering::Acquire));
    Ok(dirty.len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_names_round_trip() {
        for m in Mutation::ALL {
            assert_eq!(m.name().parse::<Mutation>().unwrap(), m);
        }
        assert!(matches!("nope".parse::<Mutation>(), Err(Error::Config(_))));
    }
}
