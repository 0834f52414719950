use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};

use crate::layout::{set_bits, ShadowLayout, DIRTY, PRESENT};
use crate::pmem::{LineAddr, Medium};
use crate::{Error, Result, PAGE_SIZE};

const FLAG_PRESENT: u8 = 0b01;
const FLAG_DIRTY: u8 = 0b10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessMode {
    Read,
    Write,
}

impl FromStr for AccessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(AccessMode::Read),
            "w" => Ok(AccessMode::Write),
            _ => Err(Error::Domain(format!(
                "access mode must be 'r' or 'w', got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessMode::Read => "r",
            AccessMode::Write => "w",
        })
    }
}

/// In-memory side of one attachment.
pub(crate) struct Attachment {
    pub(super) slot: usize,
    pub(super) name: String,
    pub(super) pid: u64,
    pub(super) mode: AccessMode,
    pub(super) size: u64,
    pub(super) pages: u64,
    /// Absolute byte offset of the primary extent.
    pub(super) primary: u64,
    pub(super) shadow: Option<ShadowLayout>,
    /// Absolute byte offset of the metadata entry.
    pub(super) entry: u64,
    pub(super) base_address: u64,
    flags: Vec<AtomicU8>,
    /// Volatile image of the shadow bitmap; every change is also stored to
    /// the medium.
    pub(super) bitmap: Mutex<Vec<u8>>,
    fault: Mutex<()>,
    pub(super) attached: AtomicBool,
    pub(super) psync_active: AtomicBool,
    /// Completed writes; a psync that sees it change raced with a write.
    pub(super) write_epoch: AtomicU64,
}

pub(super) struct AttachmentInit {
    pub slot: usize,
    pub name: String,
    pub pid: u64,
    pub mode: AccessMode,
    pub size: u64,
    pub primary: u64,
    pub shadow: Option<ShadowLayout>,
    pub entry: u64,
    pub base_address: u64,
}

impl Attachment {
    pub(super) fn new(init: AttachmentInit) -> Self {
        let pages = init.size.div_ceil(PAGE_SIZE);
        let bitmap_len = init.shadow.map_or(0, |s| s.bitmap_len() as usize);
        Attachment {
            slot: init.slot,
            name: init.name,
            pid: init.pid,
            mode: init.mode,
            size: init.size,
            pages,
            primary: init.primary,
            shadow: init.shadow,
            entry: init.entry,
            base_address: init.base_address,
            flags: (0..pages).map(|_| AtomicU8::new(0)).collect(),
            bitmap: Mutex::new(vec![0; bitmap_len]),
            fault: Mutex::new(()),
            attached: AtomicBool::new(true),
            psync_active: AtomicBool::new(false),
            write_epoch: AtomicU64::new(0),
        }
    }

    pub(super) fn check_attached(&self) -> Result<()> {
        if self.attached.load(Ordering::Acquire) {
            Ok(())
        } else {
            Err(Error::UndefinedBehavior(format!(
                "handle for {} is no longer attached",
                self.name
            )))
        }
    }

    pub(super) fn detach_flag(&self) -> bool {
        self.attached.swap(false, Ordering::AcqRel)
    }

    pub(super) fn dirty_pages(&self) -> Vec<u64> {
        (0..self.pages)
            .filter(|&p| self.flags[p as usize].load(Ordering::Acquire) & FLAG_DIRTY != 0)
            .collect()
    }

    pub(super) fn clear_dirty_flag(&self, page: u64) {
        self.flags[page as usize].fetch_and(!FLAG_DIRTY, Ordering::AcqRel);
    }

    pub(super) fn bitmap(&self) -> std::sync::MutexGuard<'_, Vec<u8>> {
        self.bitmap.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn page_source(&self, page: u64) -> u64 {
        match self.shadow {
            Some(s) if self.flags[page as usize].load(Ordering::Acquire) & FLAG_PRESENT != 0 => {
                s.page_addr(page)
            }
            _ => self.primary + page * PAGE_SIZE,
        }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(Error::Range(format!(
                "access {offset}+{len} outside {} bytes of {}",
                self.size, self.name
            ))),
        }
    }

    fn read<M: Medium + ?Sized>(&self, m: &M, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check_attached()?;
        self.check_range(offset, buf.len() as u64)?;
        for (page, at, range) in chunks(offset, buf.len()) {
            m.read(self.page_source(page) + at, &mut buf[range])?;
        }
        Ok(())
    }

    fn write<M: Medium + ?Sized>(&self, m: &M, offset: u64, data: &[u8]) -> Result<()> {
        self.check_attached()?;
        if self.mode == AccessMode::Read {
            return Err(Error::Permission(format!(
                "{} is attached read-only",
                self.name
            )));
        }
        if self.psync_active.load(Ordering::Acquire) {
            return Err(Error::UndefinedBehavior(format!(
                "write to {} concurrent with its psync",
                self.name
            )));
        }
        self.check_range(offset, data.len() as u64)?;
        let shadow = self.shadow.expect("write attachment has a shadow");
        for (page, at, range) in chunks(offset, data.len()) {
            self.fault_in(m, &shadow, page)?;
            m.store(shadow.page_addr(page) + at, &data[range])?;
            self.mark_dirty(m, &shadow, page)?;
        }
        self.write_epoch.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Copies a page into the shadow on first write.
    fn fault_in<M: Medium + ?Sized>(&self, m: &M, shadow: &ShadowLayout, page: u64) -> Result<()> {
        let flag = &self.flags[page as usize];
        if flag.load(Ordering::Acquire) & FLAG_PRESENT != 0 {
            return Ok(());
        }
        let _guard = self.fault.lock().unwrap_or_else(|e| e.into_inner());
        if flag.load(Ordering::Acquire) & FLAG_PRESENT != 0 {
            return Ok(());
        }
        let contents = m.read_vec(self.primary + page * PAGE_SIZE, PAGE_SIZE as usize)?;
        let dst = shadow.page_addr(page);
        m.store(dst, &contents)?;
        m.flush_range(dst, PAGE_SIZE)?;
        {
            let mut bitmap = self.bitmap();
            set_bits(&mut bitmap, page, PRESENT);
            let byte = shadow.bitmap_byte_addr(page);
            m.store(byte, &[bitmap[(page / 4) as usize]])?;
            m.flush_line(LineAddr::containing(byte))?;
        }
        m.fence();
        flag.fetch_or(FLAG_PRESENT, Ordering::AcqRel);
        Ok(())
    }

    fn mark_dirty<M: Medium + ?Sized>(
        &self,
        m: &M,
        shadow: &ShadowLayout,
        page: u64,
    ) -> Result<()> {
        let flag = &self.flags[page as usize];
        if flag.load(Ordering::Acquire) & FLAG_DIRTY != 0 {
            return Ok(());
        }
        let mut bitmap = self.bitmap();
        set_bits(&mut bitmap, page, DIRTY);
        m.store(
            shadow.bitmap_byte_addr(page),
            &[bitmap[(page / 4) as usize]],
        )?;
        flag.fetch_or(FLAG_DIRTY, Ordering::AcqRel);
        Ok(())
    }
}

/// Splits `offset..offset+len` at page boundaries into
/// `(page, offset in page, range in buffer)`.
fn chunks(offset: u64, len: usize) -> impl Iterator<Item = (u64, u64, std::ops::Range<usize>)> {
    let mut done = 0usize;
    std::iter::from_fn(move || {
        if done == len {
            return None;
        }
        let at = offset + done as u64;
        let in_page = at % PAGE_SIZE;
        let n = ((PAGE_SIZE - in_page) as usize).min(len - done);
        let item = (at / PAGE_SIZE, in_page, done..done + n);
        done += n;
        Some(item)
    })
}

/// An attached PMO.
///
/// Reads see the attachment's own unsynced writes. Writes go to the shadow
/// copy and become durable only through [`System::psync`](super::System::psync).
/// Cloning yields another handle to the same attachment, usable from other
/// threads.
pub struct PmoHandle<M: Medium> {
    pub(super) inner: Arc<Attachment>,
    pub(super) medium: Arc<M>,
}

impl<M: Medium> Clone for PmoHandle<M> {
    fn clone(&self) -> Self {
        PmoHandle {
            inner: self.inner.clone(),
            medium: self.medium.clone(),
        }
    }
}

impl<M: Medium> fmt::Debug for PmoHandle<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PmoHandle")
            .field("name", &self.inner.name)
            .field("mode", &self.inner.mode)
            .field("pid", &self.inner.pid)
            .field(
                "base_address",
                &format_args!("{:#x}", self.inner.base_address),
            )
            .finish()
    }
}

impl<M: Medium> PmoHandle<M> {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn size(&self) -> u64 {
        self.inner.size
    }

    pub fn mode(&self) -> AccessMode {
        self.inner.mode
    }

    pub fn pid(&self) -> u64 {
        self.inner.pid
    }

    pub fn is_attached(&self) -> bool {
        self.inner.attached.load(Ordering::Acquire)
    }

    /// Virtual address the PMO is mapped at. It depends only on where the
    /// primary lives on the device, so it is the same on every attach.
    pub fn base_address(&self) -> u64 {
        self.inner.base_address
    }

    /// Translates an address inside the PMO to an offset.
    pub fn offset_of(&self, addr: u64) -> Result<u64> {
        match addr.checked_sub(self.inner.base_address) {
            Some(off) if off < self.inner.size => Ok(off),
            _ => Err(Error::Range(format!(
                "address {addr:#x} is outside {}",
                self.inner.name
            ))),
        }
    }

    pub fn address_of(&self, offset: u64) -> u64 {
        self.inner.base_address + offset
    }

    pub fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.inner.read(&*self.medium, offset, buf)
    }

    pub fn read_vec(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.read(offset, &mut buf)?;
        Ok(buf)
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut buf = [0; 8];
        self.read(offset, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.inner.write(&*self.medium, offset, data)
    }

    pub fn write_u64(&self, offset: u64, v: u64) -> Result<()> {
        self.write(offset, &v.to_le_bytes())
    }

    /// Pages written since the last psync.
    pub fn dirty_pages(&self) -> Vec<u64> {
        self.inner.dirty_pages()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_split_at_pages() {
        let c: Vec<_> = chunks(4090, 10).collect();
        assert_eq!(c, vec![(0, 4090, 0..6), (1, 0, 6..10)]);
        assert_eq!(chunks(0, 0).count(), 0);
        assert_eq!(
            chunks(8192, 4096).collect::<Vec<_>>(),
            vec![(2, 0, 0..4096)]
        );
    }
}
