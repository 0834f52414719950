use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_bounds, DeviceImage, LineAddr, UncachedRanges};
use crate::{Error, Result, LINE_SIZE};

const LINE: usize = LINE_SIZE as usize;

type Line = [u8; LINE];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    Store(Vec<u8>),
    Flush,
    Fence,
    UncachedAtomicWrite(u64),
}

/// One entry of the event log. `addr` is unused for fences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEvent {
    pub seq: u64,
    pub addr: u64,
    pub kind: EventKind,
}

impl ProtocolEvent {
    /// Number of bytes written by the event.
    pub fn len(&self) -> u64 {
        match &self.kind {
            EventKind::Store(data) => data.len() as u64,
            EventKind::UncachedAtomicWrite(_) => 8,
            EventKind::Flush | EventKind::Fence => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Media plus the volatile cache and the write pending queue.
#[derive(Clone, Debug)]
struct Domain {
    media: DeviceImage,
    cache: BTreeMap<u64, Line>,
    pending: BTreeMap<u64, Line>,
}

impl Domain {
    fn new(media: DeviceImage) -> Self {
        Domain {
            media,
            cache: BTreeMap::new(),
            pending: BTreeMap::new(),
        }
    }

    fn media_line(&self, addr: u64) -> Line {
        let mut line = [0u8; LINE];
        self.media.read(addr, &mut line);
        line
    }

    fn volatile_line(&self, addr: u64) -> Line {
        self.cache
            .get(&addr)
            .or_else(|| self.pending.get(&addr))
            .copied()
            .unwrap_or_else(|| self.media_line(addr))
    }

    /// Applies `ev`; returns true when durable media changed.
    fn apply(&mut self, ev: &ProtocolEvent) -> bool {
        match &ev.kind {
            EventKind::Store(data) => {
                let end = ev.addr + data.len() as u64;
                for line in LineAddr::span(ev.addr, data.len() as u64) {
                    let base = line.offset();
                    let mut contents = self.volatile_line(base);
                    let lo = base.max(ev.addr);
                    let hi = (base + LINE_SIZE).min(end);
                    contents[(lo - base) as usize..(hi - base) as usize]
                        .copy_from_slice(&data[(lo - ev.addr) as usize..(hi - ev.addr) as usize]);
                    self.cache.insert(base, contents);
                }
                false
            }
            EventKind::Flush => {
                if let Some(contents) = self.cache.remove(&ev.addr) {
                    self.pending.insert(ev.addr, contents);
                }
                false
            }
            EventKind::Fence => {
                let mut changed = false;
                for (addr, contents) in std::mem::take(&mut self.pending) {
                    if !self.media.matches(addr, &contents) {
                        self.media.write(addr, &contents);
                        changed = true;
                    }
                }
                changed
            }
            EventKind::UncachedAtomicWrite(word) => {
                let bytes = word.to_le_bytes();
                let changed = !self.media.matches(ev.addr, &bytes);
                self.media.write(ev.addr, &bytes);
                changed
            }
        }
    }

    fn read_volatile(&self, offset: u64, buf: &mut [u8]) {
        let end = offset + buf.len() as u64;
        for line in LineAddr::span(offset, buf.len() as u64) {
            let base = line.offset();
            let lo = base.max(offset);
            let hi = (base + LINE_SIZE).min(end);
            let src = (lo - base) as usize..(hi - base) as usize;
            let dst = (lo - offset) as usize..(hi - offset) as usize;
            match self.cache.get(&base).or_else(|| self.pending.get(&base)) {
                Some(contents) => buf[dst].copy_from_slice(&contents[src]),
                None => self.media.read(lo, &mut buf[dst]),
            }
        }
    }
}

/// The durable part of the domain at some crash point: media plus the lines
/// that were flushed but not yet fenced.
#[derive(Clone, Copy, Debug)]
pub struct CrashState<'a> {
    media: &'a DeviceImage,
    pending: &'a BTreeMap<u64, Line>,
}

impl<'a> CrashState<'a> {
    pub fn media(&self) -> &'a DeviceImage {
        self.media
    }

    pub fn pending_lines(&self) -> impl Iterator<Item = LineAddr> + 'a {
        self.pending.keys().map(|&a| LineAddr(a))
    }

    /// Pending lines whose contents differ from media. Only these can make
    /// two crash images differ.
    pub fn effective_lines(&self) -> Vec<(LineAddr, [u8; LINE])> {
        self.pending
            .iter()
            .filter(|(&a, l)| !self.media.matches(a, l.as_slice()))
            .map(|(&a, l)| (LineAddr(a), *l))
            .collect()
    }

    /// Media with the given pending lines applied. Lines that are not
    /// pending are ignored.
    pub fn image<I: IntoIterator<Item = LineAddr>>(&self, survivors: I) -> DeviceImage {
        let mut media = self.media.clone();
        for line in survivors {
            if let Some(contents) = self.pending.get(&line.offset()) {
                media.write(line.offset(), contents);
            }
        }
        media
    }
}

/// A device image a power failure may leave behind.
#[derive(Clone, Debug)]
pub struct CrashImage {
    pub media_snapshot: DeviceImage,
    /// Number of logged events applied before the crash.
    pub crash_point: usize,
    /// Flushed-but-unfenced lines that reached media.
    pub survivors: Vec<LineAddr>,
}

/// Steps through an event log from the trace base, exposing the crash state
/// after each event.
pub struct Replayer<'a> {
    log: &'a [ProtocolEvent],
    domain: Domain,
    position: usize,
    media_version: u64,
}

impl<'a> Replayer<'a> {
    /// Events applied so far; the crash point the current state describes.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Counts durable media changes; equal versions mean equal media.
    pub fn media_version(&self) -> u64 {
        self.media_version
    }

    pub fn step(&mut self) -> Option<&'a ProtocolEvent> {
        let ev = self.log.get(self.position)?;
        if self.domain.apply(ev) {
            self.media_version += 1;
        }
        self.position += 1;
        Some(ev)
    }

    pub fn crash_state(&self) -> CrashState<'_> {
        CrashState {
            media: &self.domain.media,
            pending: &self.domain.pending,
        }
    }

    pub fn read_volatile(&self, offset: u64, buf: &mut [u8]) {
        self.domain.read_volatile(offset, buf)
    }
}

/// Survivor subsets chosen for one crash state; `subsets[i][j]` tells
/// whether the j-th candidate line survives.
#[derive(Clone, Debug)]
pub struct SurvivorSubsets {
    pub exhaustive: bool,
    pub subsets: Vec<Vec<bool>>,
}

/// All subsets of `k` lines when `2^k <= budget`, else exactly `budget`
/// distinct subsets drawn uniformly with `seed`, always including the empty
/// and the full subset.
pub fn survivor_subsets(k: usize, budget: usize, seed: u64) -> SurvivorSubsets {
    if k < usize::BITS as usize && (1usize << k) <= budget {
        let subsets = (0..1usize << k)
            .map(|mask| (0..k).map(|j| mask >> j & 1 == 1).collect())
            .collect();
        return SurvivorSubsets {
            exhaustive: true,
            subsets,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut subsets = Vec::with_capacity(budget);
    let mut push = |s: Vec<bool>, subsets: &mut Vec<Vec<bool>>| {
        if subsets.len() < budget && seen.insert(s.clone()) {
            subsets.push(s);
        }
    };
    push(vec![false; k], &mut subsets);
    push(vec![true; k], &mut subsets);
    while subsets.len() < budget {
        let s = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        push(s, &mut subsets);
    }
    SurvivorSubsets {
        exhaustive: false,
        subsets,
    }
}

/// Simulated persistence domain: durable media, volatile dirty cache lines,
/// flushed-but-unfenced lines and an event log that can be replayed to any
/// crash point.
///
/// Unflushed lines are always lost at a crash; flushed lines not yet ordered
/// by a fence survive or not independently of each other, a whole line at a
/// time.
#[derive(Clone, Debug)]
pub struct PersistenceModel {
    live: Domain,
    base: Domain,
    uncached: UncachedRanges,
    log: Vec<ProtocolEvent>,
    next_seq: u64,
}

impl PersistenceModel {
    pub fn new(size: u64) -> Self {
        Self::from_image(DeviceImage::zeroed(size))
    }

    /// Model whose durable media starts as `image`.
    pub fn from_image(image: impl Into<DeviceImage>) -> Self {
        let live = Domain::new(image.into());
        PersistenceModel {
            base: live.clone(),
            live,
            uncached: UncachedRanges::default(),
            log: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn len(&self) -> u64 {
        self.live.media.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.media.is_empty()
    }

    fn push(&mut self, addr: u64, kind: EventKind) {
        let ev = ProtocolEvent {
            seq: self.next_seq,
            addr,
            kind,
        };
        self.next_seq += 1;
        self.live.apply(&ev);
        self.log.push(ev);
    }

    pub fn store(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        check_bounds(self.len(), offset, data.len() as u64)?;
        self.uncached.check_store(offset, data.len() as u64)?;
        if data.is_empty() {
            return Ok(());
        }
        self.push(offset, EventKind::Store(data.to_vec()));
        Ok(())
    }

    pub fn flush_line(&mut self, line: LineAddr) -> Result<()> {
        LineAddr::new(line.offset())?;
        check_bounds(self.len(), line.offset(), LINE_SIZE)?;
        self.push(line.offset(), EventKind::Flush);
        Ok(())
    }

    pub fn fence(&mut self) {
        self.push(0, EventKind::Fence);
    }

    pub fn uncached_atomic_write(&mut self, offset: u64, word: u64) -> Result<()> {
        check_bounds(self.len(), offset, 8)?;
        self.uncached.check_atomic(offset)?;
        self.push(offset, EventKind::UncachedAtomicWrite(word));
        Ok(())
    }

    /// Declares a line-aligned range uncacheable. Fails if any of its lines
    /// is dirty in the cache or waiting in the pending queue.
    pub fn mark_uncached(&mut self, range: Range<u64>) -> Result<()> {
        let busy = |map: &BTreeMap<u64, Line>| map.range(range.clone()).next().is_some();
        if busy(&self.live.cache) || busy(&self.live.pending) {
            return Err(Error::Domain(format!(
                "range {range:?} still has cached or pending lines"
            )));
        }
        self.uncached.insert(range, self.len())?;
        Ok(())
    }

    pub fn read_durable(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        check_bounds(self.len(), offset, len as u64)?;
        Ok(self.live.media.slice(offset, len))
    }

    pub fn read_volatile(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.read_volatile_into(offset, &mut buf)?;
        Ok(buf)
    }

    pub fn read_volatile_into(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        check_bounds(self.len(), offset, buf.len() as u64)?;
        self.live.read_volatile(offset, buf);
        Ok(())
    }

    /// Durable media as it stands.
    pub fn media(&self) -> &DeviceImage {
        &self.live.media
    }

    pub fn into_media(self) -> DeviceImage {
        self.live.media
    }

    /// What a running CPU would observe across the whole device.
    pub fn volatile_image(&self) -> DeviceImage {
        let mut img = self.live.media.clone();
        for (&addr, contents) in self.live.pending.iter().chain(&self.live.cache) {
            img.write(addr, contents);
        }
        img
    }

    pub fn cached_lines(&self) -> Vec<LineAddr> {
        self.live.cache.keys().map(|&a| LineAddr(a)).collect()
    }

    pub fn pending_lines(&self) -> Vec<LineAddr> {
        self.live.pending.keys().map(|&a| LineAddr(a)).collect()
    }

    /// Events logged since the trace began.
    pub fn events(&self) -> &[ProtocolEvent] {
        &self.log
    }

    /// Number of logged events, which is also the latest crash point.
    pub fn crash_point(&self) -> usize {
        self.log.len()
    }

    /// Forgets the event log; crash points are counted from here on.
    pub fn begin_trace(&mut self) {
        self.base = self.live.clone();
        self.log.clear();
    }

    pub fn replayer(&self) -> Replayer<'_> {
        Replayer {
            log: &self.log,
            domain: self.base.clone(),
            position: 0,
            media_version: 0,
        }
    }

    /// One image per survivor subset of the lines pending after `at` events.
    pub fn enumerate_crash_images(
        &self,
        at: usize,
        budget: usize,
        seed: u64,
    ) -> Result<Vec<CrashImage>> {
        if at > self.log.len() {
            return Err(Error::Range(format!(
                "crash point {at} is beyond the {} logged events",
                self.log.len()
            )));
        }
        let mut replay = self.replayer();
        while replay.position() < at {
            replay.step();
        }
        let state = replay.crash_state();
        let lines: Vec<LineAddr> = state.pending_lines().collect();
        let chosen = survivor_subsets(lines.len(), budget.max(1), seed);
        Ok(chosen
            .subsets
            .iter()
            .map(|mask| {
                let survivors: Vec<LineAddr> = lines
                    .iter()
                    .zip(mask)
                    .filter(|(_, &keep)| keep)
                    .map(|(&l, _)| l)
                    .collect();
                CrashImage {
                    media_snapshot: state.image(survivors.iter().copied()),
                    crash_point: at,
                    survivors,
                }
            })
            .collect())
    }

    /// Writes the durable media to `path`; the file is a plain device image.
    pub fn checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.live.media.to_vec())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(a: u64) -> LineAddr {
        LineAddr::new(a).unwrap()
    }

    #[test]
    fn read_your_own_write() {
        let mut m = PersistenceModel::new(0x4000);
        m.store(0x2000, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(
            m.read_volatile(0x2000, 8).unwrap(),
            [1, 2, 3, 4, 5, 6, 7, 8]
        );
        assert_eq!(m.read_durable(0x2000, 8).unwrap(), [0; 8]);
    }

    #[test]
    fn unflushed_store_is_lost() {
        let mut m = PersistenceModel::new(0x4000);
        m.store(0x2000, &[9; 8]).unwrap();
        let images = m.enumerate_crash_images(m.crash_point(), 16, 0).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].media_snapshot.slice(0x2000, 8), [0; 8]);
    }

    #[test]
    fn flushed_line_survives_only_in_survivor_set() {
        let mut m = PersistenceModel::new(0x4000);
        m.store(0x2000, &[7; 8]).unwrap();
        m.flush_line(line(0x2000)).unwrap();
        let images = m.enumerate_crash_images(m.crash_point(), 16, 0).unwrap();
        assert_eq!(images.len(), 2);
        for img in images {
            let expect = if img.survivors == [line(0x2000)] {
                7
            } else {
                0
            };
            assert_eq!(img.media_snapshot.slice(0x2000, 1), [expect]);
        }
    }

    #[test]
    fn clean_flush_is_logged_noop() {
        let mut m = PersistenceModel::new(0x4000);
        m.flush_line(line(0x1000)).unwrap();
        assert_eq!(m.events().len(), 1);
        assert!(m.pending_lines().is_empty());
    }

    #[test]
    fn fence_makes_flushed_lines_durable() {
        let mut m = PersistenceModel::new(0x4000);
        m.store(0x2000, &[3; 8]).unwrap();
        m.flush_line(line(0x2000)).unwrap();
        m.fence();
        let images = m.enumerate_crash_images(m.crash_point(), 16, 0).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].media_snapshot.slice(0x2000, 1), [3]);
        assert_eq!(
            m.read_durable(0x2000, 8).unwrap(),
            m.read_volatile(0x2000, 8).unwrap()
        );
    }

    #[test]
    fn uncached_write_is_immediately_durable() {
        let mut m = PersistenceModel::new(0x4000);
        m.mark_uncached(0x40..0x80).unwrap();
        m.uncached_atomic_write(0x48, 0xdead_beef).unwrap();
        assert_eq!(
            m.read_durable(0x48, 8).unwrap(),
            0xdead_beefu64.to_le_bytes()
        );
        let before = m.enumerate_crash_images(0, 4, 0).unwrap();
        assert_eq!(before[0].media_snapshot.slice(0x48, 8), [0; 8]);
    }

    #[test]
    fn domain_errors() {
        let mut m = PersistenceModel::new(0x4000);
        m.mark_uncached(0x40..0x80).unwrap();
        assert!(matches!(m.store(0x50, &[1]), Err(Error::Domain(_))));
        assert!(matches!(
            m.uncached_atomic_write(0x100, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            m.uncached_atomic_write(0x44, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(m.store(0x3ffc, &[0; 8]), Err(Error::Range(_))));
        assert!(matches!(m.read_volatile(0x4000, 1), Err(Error::Range(_))));
        m.store(0x100, &[1]).unwrap();
        assert!(matches!(
            m.mark_uncached(0x100..0x140),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampling_includes_extremes() {
        let s = survivor_subsets(20, 50, 7);
        assert!(!s.exhaustive);
        assert_eq!(s.subsets.len(), 50);
        assert!(s.subsets.contains(&vec![false; 20]));
        assert!(s.subsets.contains(&vec![true; 20]));
        let again = survivor_subsets(20, 50, 7);
        assert_eq!(s.subsets, again.subsets);
        let e = survivor_subsets(3, 8, 0);
        assert!(e.exhaustive);
        assert_eq!(e.subsets.len(), 8);
    }
}
