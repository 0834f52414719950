//! The PMO lifecycle: create, attach, psync, detach, destroy and recovery.

mod handle;
mod psync;
mod recovery;

pub use handle::{AccessMode, PmoHandle};
pub use psync::{Mutation, PsyncHalt};
pub use recovery::{RecoveryAction, RecoveryReport};

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use handle::{Attachment, AttachmentInit};

use crate::layout::{
    self, allocate_extent, find_insert_slot, free_extents, lookup, read_entry, read_header,
    release_extent, FreeExtent, Geometry, HeaderCache, InsertSlot, MetadataEntry, PmoState,
    ShadowLayout, SlotState, SystemHeader, E_BOOT, E_PID, E_READERS, E_SHADOW, E_STATE, H_BOOT,
    TOMBSTONE,
};
use crate::pmem::Medium;
use crate::{BusyReason, Error, OutOfSpace, Result, LINE_SIZE, PAGE_SIZE};

/// Default virtual address of the start of the device in every process.
pub const DEFAULT_PERSISTENT_BASE: u64 = 1 << 46;

#[derive(Clone, Debug)]
pub struct SystemConfig {
    /// Process id used by [`System::attach`].
    pub pid: u64,
    /// Virtual address the device is mapped at.
    pub persistent_base: u64,
    /// Protocol variant used by every psync; `None` is the correct protocol.
    pub mutation: Option<Mutation>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            pid: std::process::id() as u64,
            persistent_base: DEFAULT_PERSISTENT_BASE,
            mutation: None,
        }
    }
}

/// Cumulative operation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub psyncs: u64,
    pub psync_pages_copied: u64,
    pub recovery_pages_copied: u64,
}

#[derive(Default)]
struct Counters {
    psyncs: AtomicU64,
    psync_pages_copied: AtomicU64,
    recovery_pages_copied: AtomicU64,
}

struct Meta {
    hdr: HeaderCache,
    recovery_pending: bool,
    dead: HashSet<u64>,
    attachments: HashMap<usize, Vec<Arc<Attachment>>>,
}

/// A mounted PMO system.
pub struct System<M: Medium> {
    medium: Arc<M>,
    geom: Geometry,
    system_name: String,
    config: SystemConfig,
    meta: Mutex<Meta>,
    counters: Counters,
}

impl<M: Medium> std::fmt::Debug for System<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("System")
            .field("name", &self.system_name)
            .field("geometry", &self.geom)
            .finish()
    }
}

impl<M: Medium> System<M> {
    /// Formats `medium` and mounts the empty system.
    pub fn create(medium: Arc<M>, system_name: &str, max_pmos: u64) -> Result<Self> {
        Self::create_with(medium, system_name, max_pmos, SystemConfig::default())
    }

    pub fn create_with(
        medium: Arc<M>,
        system_name: &str,
        max_pmos: u64,
        config: SystemConfig,
    ) -> Result<Self> {
        let header = layout::format_device(&*medium, system_name, max_pmos)?;
        let geom = header.geometry()?;
        Ok(Self::assemble(medium, &header, geom, config, false))
    }

    /// Opens a formatted device, starting a new boot. Recovery of entries
    /// left mid-operation by the previous boot runs before the first
    /// operation that allocates or changes attachment state.
    pub fn open(medium: Arc<M>) -> Result<Self> {
        Self::open_with(medium, SystemConfig::default())
    }

    pub fn open_with(medium: Arc<M>, config: SystemConfig) -> Result<Self> {
        let (mut header, geom) = read_header(&*medium)?;
        for r in geom.uncached_ranges() {
            medium.mark_uncached(r)?;
        }
        header.boot_id += 1;
        medium.uncached_atomic_write(H_BOOT, header.boot_id)?;
        let mut pending = false;
        for slot in 0..geom.max_pmos as usize {
            let e = read_entry(&*medium, &geom, slot)?;
            if !is_clean(&e) {
                pending = true;
                break;
            }
        }
        Ok(Self::assemble(medium, &header, geom, config, pending))
    }

    /// Opens a device and recovers every entry right away.
    pub fn mount(medium: Arc<M>) -> Result<(Self, Vec<RecoveryReport>)> {
        Self::mount_with(medium, SystemConfig::default())
    }

    pub fn mount_with(medium: Arc<M>, config: SystemConfig) -> Result<(Self, Vec<RecoveryReport>)> {
        let sys = Self::open_with(medium, config)?;
        let reports = sys.recover_all()?;
        Ok((sys, reports))
    }

    fn assemble(
        medium: Arc<M>,
        header: &SystemHeader,
        geom: Geometry,
        config: SystemConfig,
        recovery_pending: bool,
    ) -> Self {
        System {
            medium,
            geom,
            system_name: header.system_name.clone(),
            config,
            meta: Mutex::new(Meta {
                hdr: HeaderCache {
                    next_free: header.next_free,
                    free_list_head: header.free_list_head,
                    boot_id: header.boot_id,
                },
                recovery_pending,
                dead: HashSet::new(),
                attachments: HashMap::new(),
            }),
            counters: Counters::default(),
        }
    }

    pub fn medium(&self) -> &Arc<M> {
        &self.medium
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn system_name(&self) -> &str {
        &self.system_name
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn set_mutation(&mut self, mutation: Option<Mutation>) {
        self.config.mutation = mutation;
    }

    pub fn boot_id(&self) -> u64 {
        self.meta().hdr.boot_id
    }

    pub fn stats(&self) -> Stats {
        Stats {
            psyncs: self.counters.psyncs.load(Ordering::Relaxed),
            psync_pages_copied: self.counters.psync_pages_copied.load(Ordering::Relaxed),
            recovery_pages_copied: self.counters.recovery_pages_copied.load(Ordering::Relaxed),
        }
    }

    fn meta(&self) -> MutexGuard<'_, Meta> {
        self.meta.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn uwrite(&self, at: u64, word: u64) -> Result<()> {
        self.medium.uncached_atomic_write(at, word)
    }

    fn ensure_recovered(&self, meta: &mut Meta) -> Result<()> {
        if meta.recovery_pending {
            self.recover_all_locked(meta)?;
        }
        Ok(())
    }

    fn find(&self, name: &str) -> Result<(usize, MetadataEntry)> {
        lookup(&*self.medium, &self.geom, name)?.ok_or_else(|| Error::NotFound(name.to_owned()))
    }

    /// The metadata entry of `name`.
    pub fn entry(&self, name: &str) -> Result<MetadataEntry> {
        let _meta = self.meta();
        Ok(self.find(name)?.1)
    }

    /// Every live entry, by slot.
    pub fn entries(&self) -> Result<Vec<MetadataEntry>> {
        let _meta = self.meta();
        let mut out = Vec::new();
        for slot in 0..self.geom.max_pmos as usize {
            let e = read_entry(&*self.medium, &self.geom, slot)?;
            if matches!(e.state, SlotState::Live(_)) {
                out.push(e);
            }
        }
        Ok(out)
    }

    /// Current on-media header.
    pub fn header(&self) -> Result<SystemHeader> {
        let _meta = self.meta();
        Ok(read_header(&*self.medium)?.0)
    }

    pub fn free_extents(&self) -> Result<Vec<FreeExtent>> {
        let meta = self.meta();
        free_extents(&*self.medium, &self.geom, meta.hdr.free_list_head)
    }

    /// Allocates a raw extent of data pages; returns its first page.
    pub fn allocate_extent(&self, pages: u64) -> Result<u64> {
        let mut meta = self.meta();
        self.ensure_recovered(&mut meta)?;
        allocate_extent(&*self.medium, &self.geom, &mut meta.hdr, pages)
    }

    /// Frees an extent returned by [`allocate_extent`](Self::allocate_extent).
    /// Freeing pages that are already free, or were never allocated, is a
    /// `Domain` error.
    pub fn free_extent(&self, start: u64, pages: u64) -> Result<()> {
        let mut meta = self.meta();
        release_extent(&*self.medium, &self.geom, &mut meta.hdr, start, pages, true)?;
        Ok(())
    }

    /// Creates a PMO of `size` bytes with zero access keys.
    pub fn pcreate(&self, name: &str, size: u64) -> Result<()> {
        self.pcreate_with_keys(name, size, 0, 0)
    }

    /// Creates a zero-filled PMO of `size` bytes rounded up to whole pages.
    /// Attaching for reading requires `read_key`, for writing (and
    /// destroying) `write_key`.
    pub fn pcreate_with_keys(
        &self,
        name: &str,
        size: u64,
        read_key: u64,
        write_key: u64,
    ) -> Result<()> {
        layout::validate_pmo_name(name)?;
        if size == 0 {
            return Err(Error::Domain("PMO size must be non-zero".into()));
        }
        let mut meta = self.meta();
        self.ensure_recovered(&mut meta)?;
        let slot = match find_insert_slot(&*self.medium, &self.geom, name)? {
            InsertSlot::Free(slot) => slot,
            InsertSlot::Exists(_) => return Err(Error::AlreadyExists(name.to_owned())),
            InsertSlot::Full => return Err(Error::OutOfSpace(OutOfSpace::Table)),
        };
        let pages = layout::pages_for(size);
        let primary = allocate_extent(&*self.medium, &self.geom, &mut meta.hdr, pages)?;
        self.zero(self.geom.data_addr(primary), pages * PAGE_SIZE)?;
        self.medium.fence();

        let at = self.geom.entry_offset(slot);
        let old = read_entry(&*self.medium, &self.geom, slot)?;
        let entry = MetadataEntry::new(name, pages * PAGE_SIZE, primary, read_key, write_key);
        self.medium
            .persist(at + LINE_SIZE, &entry.encode()[LINE_SIZE as usize..])?;
        for (off, word) in [
            (E_PID, old.attached_pid),
            (E_BOOT, old.attach_boot_id),
            (E_READERS, old.reader_count),
            (E_SHADOW, old.shadow_offset.map_or(0, |s| s + 1)),
        ] {
            if word != 0 {
                self.uwrite(at + off, 0)?;
            }
        }
        self.uwrite(at + E_STATE, PmoState::Detached as u64)?;
        self.adjust_count(1)?;
        Ok(())
    }

    fn zero(&self, at: u64, len: u64) -> Result<()> {
        const CHUNK: u64 = 1 << 20;
        let zeros = vec![0u8; CHUNK.min(len) as usize];
        let mut done = 0;
        while done < len {
            let n = (len - done).min(CHUNK);
            self.medium.store(at + done, &zeros[..n as usize])?;
            self.medium.flush_range(at + done, n)?;
            done += n;
        }
        Ok(())
    }

    fn adjust_count(&self, delta: i64) -> Result<()> {
        let at = self.geom.count_offset();
        let count = self.medium.read_u64(at)?.saturating_add_signed(delta);
        self.medium.persist(at, &count.to_le_bytes())
    }

    /// Attaches `name` on behalf of the configured process.
    pub fn attach(&self, name: &str, mode: AccessMode, key: u64) -> Result<PmoHandle<M>> {
        self.attach_as(self.config.pid, name, mode, key)
    }

    /// Attaches `name` on behalf of process `pid`. At most one process may
    /// have a PMO attached for writing, and not while it has readers.
    pub fn attach_as(
        &self,
        pid: u64,
        name: &str,
        mode: AccessMode,
        key: u64,
    ) -> Result<PmoHandle<M>> {
        if pid == 0 {
            return Err(Error::Domain("pid 0 is reserved".into()));
        }
        let mut meta = self.meta();
        if meta.dead.contains(&pid) {
            return Err(Error::Domain(format!("process {pid} has exited")));
        }
        self.ensure_recovered(&mut meta)?;
        let (slot, e) = self.find(name)?;
        let required = match mode {
            AccessMode::Read => e.read_key,
            AccessMode::Write => e.write_key,
        };
        if key != required {
            return Err(Error::Permission(format!("wrong {mode} key for {name}")));
        }
        let state = e.state.live().expect("lookup returns live entries");
        match (state, mode) {
            (PmoState::Write | PmoState::Persisting | PmoState::Copying, AccessMode::Write) => {
                return Err(Error::Busy(BusyReason::MultipleWriters));
            }
            (PmoState::Write | PmoState::Persisting | PmoState::Copying, AccessMode::Read) => {
                return Err(Error::Busy(BusyReason::ExistingWriter));
            }
            (PmoState::Read, AccessMode::Write) => {
                return Err(Error::Busy(BusyReason::ReadersPresent));
            }
            _ => {}
        }
        let at = self.geom.entry_offset(slot);
        let boot = meta.hdr.boot_id;
        let shadow = match mode {
            AccessMode::Write => {
                let pages = e.pages();
                let start = allocate_extent(
                    &*self.medium,
                    &self.geom,
                    &mut meta.hdr,
                    ShadowLayout::extent_pages_for(pages),
                )?;
                let shadow = ShadowLayout::new(&self.geom, start, pages);
                self.zero(shadow.bitmap_addr(), shadow.bitmap_pages * PAGE_SIZE)?;
                self.medium.fence();
                self.uwrite(at + E_PID, pid)?;
                self.uwrite(at + E_BOOT, boot)?;
                self.uwrite(at + E_SHADOW, start + 1)?;
                self.uwrite(at + E_STATE, PmoState::Write as u64)?;
                Some(shadow)
            }
            AccessMode::Read => {
                self.uwrite(at + E_BOOT, boot)?;
                self.uwrite(at + E_PID, pid)?;
                self.uwrite(at + E_READERS, e.reader_count + 1)?;
                if state != PmoState::Read {
                    self.uwrite(at + E_STATE, PmoState::Read as u64)?;
                }
                None
            }
        };
        let primary = self.geom.data_addr(e.primary_offset);
        let att = Arc::new(Attachment::new(AttachmentInit {
            slot,
            name: e.name.clone(),
            pid,
            mode,
            size: e.size,
            primary,
            shadow,
            entry: at,
            base_address: self.config.persistent_base + primary,
        }));
        meta.attachments.entry(slot).or_default().push(att.clone());
        Ok(PmoHandle {
            inner: att,
            medium: self.medium.clone(),
        })
    }

    /// Makes every write through `handle` since the last psync durable, all
    /// or nothing. A no-op for read attachments.
    pub fn psync(&self, handle: &PmoHandle<M>) -> Result<u64> {
        self.psync_inner(handle, None)
    }

    /// Runs a psync that stops at `halt`, leaving the PMO as a crash at that
    /// point would. The handle is detached without cleanup.
    pub fn psync_halting(&self, handle: &PmoHandle<M>, halt: PsyncHalt) -> Result<u64> {
        self.psync_inner(handle, Some(halt))
    }

    fn psync_inner(&self, handle: &PmoHandle<M>, halt: Option<PsyncHalt>) -> Result<u64> {
        let att = &handle.inner;
        att.check_attached()?;
        if att.mode == AccessMode::Read {
            return Ok(0);
        }
        if att.psync_active.swap(true, Ordering::AcqRel) {
            return Err(Error::UndefinedBehavior(format!(
                "concurrent psync of {}",
                att.name
            )));
        }
        let epoch = att.write_epoch.load(Ordering::Acquire);
        let result = psync::run(&*self.medium, att, self.config.mutation, halt);
        att.psync_active.store(false, Ordering::Release);
        let pages = result?;
        if att.write_epoch.load(Ordering::Acquire) != epoch {
            return Err(Error::UndefinedBehavior(format!(
                "{} was written during its psync",
                att.name
            )));
        }
        self.counters.psyncs.fetch_add(1, Ordering::Relaxed);
        self.counters
            .psync_pages_copied
            .fetch_add(pages, Ordering::Relaxed);
        Ok(pages)
    }

    /// Detaches `handle`. Writes not yet psync'd are discarded.
    pub fn detach(&self, handle: PmoHandle<M>) -> Result<()> {
        let att = &handle.inner;
        att.check_attached()?;
        if att.psync_active.load(Ordering::Acquire) {
            return Err(Error::UndefinedBehavior(format!(
                "detach of {} during its psync",
                att.name
            )));
        }
        let mut meta = self.meta();
        if !att.detach_flag() {
            return Err(Error::UndefinedBehavior(format!(
                "{} already detached",
                att.name
            )));
        }
        self.forget(&mut meta, att);
        let e = read_entry(&*self.medium, &self.geom, att.slot)?;
        match att.mode {
            AccessMode::Write => self.teardown(&mut meta, att.slot, &e),
            AccessMode::Read => self.drop_reader(att.slot, &e),
        }
    }

    fn forget(&self, meta: &mut Meta, att: &Arc<Attachment>) {
        if let Some(list) = meta.attachments.get_mut(&att.slot) {
            list.retain(|a| !Arc::ptr_eq(a, att));
            if list.is_empty() {
                meta.attachments.remove(&att.slot);
            }
        }
    }

    fn drop_reader(&self, slot: usize, e: &MetadataEntry) -> Result<()> {
        let at = self.geom.entry_offset(slot);
        let readers = e.reader_count.saturating_sub(1);
        self.uwrite(at + E_READERS, readers)?;
        if readers == 0 {
            self.uwrite(at + E_STATE, PmoState::Detached as u64)?;
            self.uwrite(at + E_PID, 0)?;
            self.uwrite(at + E_BOOT, 0)?;
        }
        Ok(())
    }

    /// Returns an entry to a clean D state, releasing its shadow. Each step
    /// is safe to repeat after a crash.
    fn teardown(&self, meta: &mut Meta, slot: usize, e: &MetadataEntry) -> Result<()> {
        let at = self.geom.entry_offset(slot);
        if e.state != SlotState::Live(PmoState::Detached) {
            self.uwrite(at + E_STATE, PmoState::Detached as u64)?;
        }
        if let Some(start) = e.shadow_offset {
            release_extent(
                &*self.medium,
                &self.geom,
                &mut meta.hdr,
                start,
                ShadowLayout::extent_pages_for(e.pages()),
                false,
            )?;
            self.uwrite(at + E_SHADOW, 0)?;
        }
        for (off, word) in [
            (E_PID, e.attached_pid),
            (E_BOOT, e.attach_boot_id),
            (E_READERS, e.reader_count),
        ] {
            if word != 0 {
                self.uwrite(at + off, 0)?;
            }
        }
        Ok(())
    }

    /// Destroys a detached PMO and frees its storage.
    pub fn pdestroy(&self, name: &str, key: u64) -> Result<()> {
        let mut meta = self.meta();
        self.ensure_recovered(&mut meta)?;
        let (slot, e) = self.find(name)?;
        if key != e.write_key {
            return Err(Error::Permission(format!("wrong write key for {name}")));
        }
        if e.state != SlotState::Live(PmoState::Detached) || meta.attachments.contains_key(&slot) {
            return Err(Error::Busy(BusyReason::Attached));
        }
        let at = self.geom.entry_offset(slot);
        self.uwrite(at + E_STATE, TOMBSTONE as u64)?;
        release_extent(
            &*self.medium,
            &self.geom,
            &mut meta.hdr,
            e.primary_offset,
            e.pages(),
            true,
        )?;
        self.adjust_count(-1)
    }

    /// Simulates the exit of process `pid`: its read attachments are
    /// detached, its write attachments are abandoned and become eligible for
    /// recovery.
    pub fn exit_process(&self, pid: u64) -> Result<()> {
        let mut meta = self.meta();
        meta.dead.insert(pid);
        let mine: Vec<Arc<Attachment>> = meta
            .attachments
            .values()
            .flatten()
            .filter(|a| a.pid == pid)
            .cloned()
            .collect();
        for att in mine {
            att.detach_flag();
            self.forget(&mut meta, &att);
            if att.mode == AccessMode::Read {
                let e = read_entry(&*self.medium, &self.geom, att.slot)?;
                self.drop_reader(att.slot, &e)?;
            } else {
                meta.recovery_pending = true;
            }
        }
        Ok(())
    }

    /// Current contents of a PMO's primary extent.
    pub fn read_primary(&self, name: &str) -> Result<Vec<u8>> {
        let _meta = self.meta();
        let (_, e) = self.find(name)?;
        self.medium
            .read_vec(self.geom.data_addr(e.primary_offset), e.size as usize)
    }
}

/// An entry with nothing for recovery to do.
fn is_clean(e: &MetadataEntry) -> bool {
    match e.state {
        SlotState::Empty | SlotState::Tombstone => true,
        SlotState::Live(PmoState::Detached) => {
            e.shadow_offset.is_none()
                && e.attached_pid == 0
                && e.attach_boot_id == 0
                && e.reader_count == 0
        }
        _ => false,
    }
}
