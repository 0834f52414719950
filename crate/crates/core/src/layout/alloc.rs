//! Page-granular extent allocation in the data region.
//!
//! Fresh space comes from a bump pointer in the header. Released extents go
//! on a free list kept sorted by address and coalesced; each node lives in
//! the first 16 bytes of the free extent it describes (`next` absolute byte
//! offset, 0 = end; `pages`). Allocation is first-fit from the front of a
//! node. Every change is published by a single 8-byte pointer or length
//! update (uncached for the header, persisted for a node), so a crash leaves
//! either the old or the new list and at worst leaks an extent.

use super::{Geometry, HeaderCache, H_FREE_HEAD, H_NEXT_FREE};
use crate::pmem::Medium;
use crate::{Error, OutOfSpace, Result, PAGE_SIZE};

/// A run of free data-region pages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreeExtent {
    pub start: u64,
    pub pages: u64,
}

impl FreeExtent {
    pub fn end(&self) -> u64 {
        self.start + self.pages
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    at: u64,
    next: u64,
    ext: FreeExtent,
}

/// Walks the free list, validating it.
pub(crate) fn free_extents<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    head: u64,
) -> Result<Vec<FreeExtent>> {
    Ok(walk(m, geom, head)?.into_iter().map(|n| n.ext).collect())
}

fn walk<M: Medium + ?Sized>(m: &M, geom: &Geometry, head: u64) -> Result<Vec<Node>> {
    let mut nodes: Vec<Node> = Vec::new();
    let mut at = head;
    while at != 0 {
        if at < geom.data_offset
            || !(at - geom.data_offset).is_multiple_of(PAGE_SIZE)
            || geom.data_page(at) >= geom.data_pages
        {
            return Err(Error::Format(format!(
                "free-list node at {at:#x} is out of place"
            )));
        }
        let next = m.read_u64(at)?;
        let pages = m.read_u64(at + 8)?;
        let ext = FreeExtent {
            start: geom.data_page(at),
            pages,
        };
        if pages == 0 || ext.end() > geom.data_pages {
            return Err(Error::Format(format!(
                "free-list node at {at:#x} has bad length {pages}"
            )));
        }
        if let Some(prev) = nodes.last() {
            if prev.ext.end() > ext.start {
                return Err(Error::Format(format!(
                    "free list unsorted or cyclic at {at:#x}"
                )));
            }
        }
        nodes.push(Node { at, next, ext });
        at = next;
    }
    Ok(nodes)
}

fn write_node<M: Medium + ?Sized>(m: &M, at: u64, next: u64, pages: u64) -> Result<()> {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&next.to_le_bytes());
    buf[8..].copy_from_slice(&pages.to_le_bytes());
    m.persist(at, &buf)
}

/// Points `prev.next` (or the list head) at `target`.
fn link<M: Medium + ?Sized>(
    m: &M,
    hdr: &mut HeaderCache,
    prev: Option<&Node>,
    target: u64,
) -> Result<()> {
    match prev {
        Some(p) => m.persist(p.at, &target.to_le_bytes()),
        None => {
            m.uncached_atomic_write(H_FREE_HEAD, target)?;
            hdr.free_list_head = target;
            Ok(())
        }
    }
}

/// Allocates `pages` contiguous data pages; returns the first page.
pub(crate) fn allocate_extent<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    hdr: &mut HeaderCache,
    pages: u64,
) -> Result<u64> {
    if pages == 0 {
        return Err(Error::Domain("cannot allocate an empty extent".into()));
    }
    let nodes = walk(m, geom, hdr.free_list_head)?;
    if let Some(i) = nodes.iter().position(|n| n.ext.pages >= pages) {
        let node = nodes[i];
        let prev = i.checked_sub(1).map(|j| &nodes[j]);
        if node.ext.pages == pages {
            link(m, hdr, prev, node.next)?;
        } else {
            let rest = node.at + pages * PAGE_SIZE;
            write_node(m, rest, node.next, node.ext.pages - pages)?;
            link(m, hdr, prev, rest)?;
        }
        return Ok(node.ext.start);
    }
    let start = hdr.next_free;
    if start + pages > geom.data_pages {
        return Err(Error::OutOfSpace(OutOfSpace::Extent));
    }
    m.uncached_atomic_write(H_NEXT_FREE, start + pages)?;
    hdr.next_free = start + pages;
    Ok(start)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Release {
    Freed,
    AlreadyFree,
}

/// Returns an extent to the free list, coalescing with its neighbours.
///
/// With `strict`, releasing pages that are already free is a `Domain` error;
/// otherwise an extent wholly on the free list is a no-op, which makes
/// recovery re-runnable.
pub(crate) fn release_extent<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    hdr: &mut HeaderCache,
    start: u64,
    pages: u64,
    strict: bool,
) -> Result<Release> {
    let ext = FreeExtent { start, pages };
    if pages == 0 || ext.end() > hdr.next_free {
        return Err(Error::Domain(format!(
            "extent {start}+{pages} is outside the allocated data region ({} pages)",
            hdr.next_free
        )));
    }
    let nodes = walk(m, geom, hdr.free_list_head)?;
    for n in &nodes {
        if n.ext.start <= start && ext.end() <= n.ext.end() {
            if strict {
                return Err(Error::Domain(format!(
                    "double free of extent {start}+{pages}"
                )));
            }
            return Ok(Release::AlreadyFree);
        }
        if n.ext.start < ext.end() && start < n.ext.end() {
            return Err(Error::Domain(format!(
                "extent {start}+{pages} overlaps free extent {}+{}",
                n.ext.start, n.ext.pages
            )));
        }
    }
    let idx = nodes.partition_point(|n| n.ext.start < start);
    let prev = idx.checked_sub(1).map(|j| &nodes[j]);
    let succ = nodes.get(idx);
    let at = geom.data_addr(start);
    match (
        prev.filter(|p| p.ext.end() == start),
        succ.filter(|s| s.ext.start == ext.end()),
    ) {
        (Some(p), Some(s)) => write_node(m, p.at, s.next, p.ext.pages + pages + s.ext.pages)?,
        (Some(p), None) => m.persist(p.at + 8, &(p.ext.pages + pages).to_le_bytes())?,
        (None, Some(s)) => {
            write_node(m, at, s.next, pages + s.ext.pages)?;
            link(m, hdr, prev, at)?;
        }
        (None, None) => {
            write_node(m, at, succ.map_or(0, |s| s.at), pages)?;
            link(m, hdr, prev, at)?;
        }
    }
    Ok(Release::Freed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::SimMedium;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn setup(pages: u64) -> (SimMedium, Geometry, HeaderCache) {
        let geom = Geometry::plan(8192 + 4096 * pages, 1).unwrap();
        let m = SimMedium::new(geom.total_size);
        m.mark_uncached(0x40..0x80).unwrap();
        let hdr = HeaderCache {
            next_free: 0,
            free_list_head: 0,
            boot_id: 1,
        };
        (m, geom, hdr)
    }

    #[test]
    fn bump_then_reuse() {
        let (m, g, mut h) = setup(16);
        let a = allocate_extent(&m, &g, &mut h, 4).unwrap();
        let b = allocate_extent(&m, &g, &mut h, 4).unwrap();
        assert_eq!((a, b, h.next_free), (0, 4, 8));
        release_extent(&m, &g, &mut h, a, 4, true).unwrap();
        assert_eq!(h.free_list_head, g.data_addr(0));
        let c = allocate_extent(&m, &g, &mut h, 3).unwrap();
        assert_eq!(c, 0);
        assert_eq!(
            free_extents(&m, &g, h.free_list_head).unwrap(),
            vec![FreeExtent { start: 3, pages: 1 }]
        );
        assert_eq!(m.read_u64(H_NEXT_FREE).unwrap(), 8);
    }

    #[test]
    fn coalesces_both_sides() {
        let (m, g, mut h) = setup(16);
        for _ in 0..3 {
            allocate_extent(&m, &g, &mut h, 2).unwrap();
        }
        release_extent(&m, &g, &mut h, 0, 2, true).unwrap();
        release_extent(&m, &g, &mut h, 4, 2, true).unwrap();
        release_extent(&m, &g, &mut h, 2, 2, true).unwrap();
        assert_eq!(
            free_extents(&m, &g, h.free_list_head).unwrap(),
            vec![FreeExtent { start: 0, pages: 6 }]
        );
    }

    #[test]
    fn double_free_and_bounds() {
        let (m, g, mut h) = setup(16);
        allocate_extent(&m, &g, &mut h, 4).unwrap();
        release_extent(&m, &g, &mut h, 0, 4, true).unwrap();
        assert!(matches!(
            release_extent(&m, &g, &mut h, 1, 2, true),
            Err(Error::Domain(_))
        ));
        assert_eq!(
            release_extent(&m, &g, &mut h, 1, 2, false).unwrap(),
            Release::AlreadyFree
        );
        assert!(matches!(
            release_extent(&m, &g, &mut h, 4, 1, true),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            allocate_extent(&m, &g, &mut h, 17),
            Err(Error::OutOfSpace(OutOfSpace::Extent))
        ));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u64),
        Free(usize),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                (1u64..6).prop_map(Op::Alloc),
                any::<usize>().prop_map(Op::Free)
            ],
            1..60,
        )
    }

    proptest! {
        #[test]
        fn extents_stay_disjoint(ops in ops()) {
            let (m, g, mut h) = setup(64);
            let mut live: Vec<FreeExtent> = Vec::new();
            for op in ops {
                match op {
                    Op::Alloc(n) => {
                        if let Ok(start) = allocate_extent(&m, &g, &mut h, n) {
                            live.push(FreeExtent { start, pages: n });
                        }
                    }
                    Op::Free(i) if !live.is_empty() => {
                        let e = live.swap_remove(i % live.len());
                        release_extent(&m, &g, &mut h, e.start, e.pages, true).unwrap();
                    }
                    Op::Free(_) => {}
                }
                let free = free_extents(&m, &g, h.free_list_head).unwrap();
                let mut seen = BTreeSet::new();
                for e in live.iter().chain(free.iter()) {
                    for p in e.start..e.end() {
                        prop_assert!(p < h.next_free);
                        prop_assert!(seen.insert(p), "page {} owned twice", p);
                    }
                }
                prop_assert_eq!(seen.len() as u64, h.next_free);
                for w in free.windows(2) {
                    prop_assert!(w[0].end() < w[1].start, "uncoalesced {:?}", w);
                }
            }
        }
    }
}
