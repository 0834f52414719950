//! A sorted singly linked list living inside a PMO.
//!
//! Nodes point at each other with absolute addresses inside the PMO's
//! attach range, the way a C program would store `struct node *next`. The
//! list stays valid across detach and re-attach because a PMO always
//! attaches at the same address.
//!
//! Layout, all words little-endian:
//!
//! ```text
//! 0x00  magic "PMOLIST1"
//! 0x08  bump: offset of the next unused node slot
//! 0x10  count: nodes excluding the sentinel
//! 0x40  sentinel node { data, next }
//! 0x50  nodes...
//! ```

use crate::pmem::Medium;
use crate::store::PmoHandle;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PMOLIST1";
const BUMP: u64 = 0x08;
const COUNT: u64 = 0x10;
const HEAD: u64 = 0x40;
const NODE_SIZE: u64 = 16;
const FIRST_NODE: u64 = HEAD + NODE_SIZE;

pub struct LinkedList<M: Medium> {
    handle: PmoHandle<M>,
}

impl<M: Medium> LinkedList<M> {
    /// Opens the list stored in `handle`, initializing an empty one if the
    /// PMO does not hold a list yet. Initializing needs a write attachment.
    pub fn open_or_init(handle: PmoHandle<M>) -> Result<Self> {
        if handle.size() < FIRST_NODE + NODE_SIZE {
            return Err(Error::Range(format!(
                "{} is too small for a list",
                handle.name()
            )));
        }
        if handle.read_vec(0, 8)? != MAGIC {
            handle.write(0, MAGIC)?;
            handle.write_u64(BUMP, FIRST_NODE)?;
            handle.write_u64(COUNT, 0)?;
            handle.write_u64(HEAD, 0)?;
            handle.write_u64(HEAD + 8, 0)?;
        }
        Ok(LinkedList { handle })
    }

    /// Opens an existing list without writing anything.
    pub fn open(handle: PmoHandle<M>) -> Result<Self> {
        if handle.read_vec(0, 8)? != MAGIC {
            return Err(Error::Format(format!(
                "{} does not hold a list",
                handle.name()
            )));
        }
        Ok(LinkedList { handle })
    }

    pub fn handle(&self) -> &PmoHandle<M> {
        &self.handle
    }

    pub fn into_handle(self) -> PmoHandle<M> {
        self.handle
    }

    pub fn len(&self) -> Result<u64> {
        self.handle.read_u64(COUNT)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Nodes that still fit.
    pub fn remaining(&self) -> Result<u64> {
        let bump = self.handle.read_u64(BUMP)?;
        Ok(self.handle.size().saturating_sub(bump) / NODE_SIZE)
    }

    fn deref(&self, addr: u64) -> Result<u64> {
        let off = self.handle.offset_of(addr)?;
        if off < HEAD
            || !(off - HEAD).is_multiple_of(NODE_SIZE)
            || off + NODE_SIZE > self.handle.size()
        {
            return Err(Error::Format(format!("pointer {addr:#x} is not a node")));
        }
        Ok(off)
    }

    /// Inserts `data` after the last node whose value is below it.
    pub fn insert(&self, data: u64) -> Result<()> {
        let h = &self.handle;
        let bump = h.read_u64(BUMP)?;
        if bump + NODE_SIZE > h.size() {
            return Err(Error::Range(format!(
                "{} has no room for another node",
                h.name()
            )));
        }
        let node = bump;
        h.write_u64(node, data)?;
        h.write_u64(node + 8, 0)?;
        h.write_u64(BUMP, bump + NODE_SIZE)?;

        let mut c = HEAD;
        loop {
            let next = h.read_u64(c + 8)?;
            if next == 0 {
                break;
            }
            let n = self.deref(next)?;
            if h.read_u64(n)? >= data {
                break;
            }
            c = n;
        }
        let tmp = h.read_u64(c + 8)?;
        h.write_u64(node + 8, tmp)?;
        h.write_u64(c + 8, h.address_of(node))?;
        h.write_u64(COUNT, h.read_u64(COUNT)? + 1)?;
        Ok(())
    }

    /// Walks the list and returns its values, checking that every pointer
    /// lands on a node, the values are sorted and the walk ends after
    /// exactly `len` nodes.
    pub fn traverse(&self) -> Result<Vec<u64>> {
        let h = &self.handle;
        let count = h.read_u64(COUNT)?;
        let mut values = Vec::new();
        let mut next = h.read_u64(HEAD + 8)?;
        while next != 0 {
            if values.len() as u64 >= count {
                return Err(Error::Format(format!(
                    "list runs past its count of {count} nodes"
                )));
            }
            let n = self.deref(next)?;
            let v = h.read_u64(n)?;
            if values.last().is_some_and(|&last| last > v) {
                return Err(Error::Format(format!("node at {next:#x} is out of order")));
            }
            values.push(v);
            next = h.read_u64(n + 8)?;
        }
        if values.len() as u64 != count {
            return Err(Error::Format(format!(
                "list has {} nodes, count says {count}",
                values.len()
            )));
        }
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::SimMedium;
    use crate::store::{AccessMode, System};
    use std::sync::Arc;

    #[test]
    fn insert_keeps_order_and_survives_reattach() {
        let m = Arc::new(SimMedium::new(256 << 10));
        let sys = System::create(m, "demo", 4).unwrap();
        sys.pcreate("list", 8192).unwrap();
        let h = sys.attach("list", AccessMode::Write, 0).unwrap();
        let list = LinkedList::open_or_init(h).unwrap();
        for v in [5, 1, 9, 5, 3] {
            list.insert(v).unwrap();
        }
        assert_eq!(list.traverse().unwrap(), [1, 3, 5, 5, 9]);
        let h = list.into_handle();
        sys.psync(&h).unwrap();
        sys.detach(h).unwrap();

        let h = sys.attach("list", AccessMode::Read, 0).unwrap();
        let list = LinkedList::open(h).unwrap();
        assert_eq!(list.traverse().unwrap(), [1, 3, 5, 5, 9]);
    }

    #[test]
    fn traverse_rejects_wild_pointer() {
        let m = Arc::new(SimMedium::new(256 << 10));
        let sys = System::create(m, "demo", 4).unwrap();
        sys.pcreate("list", 4096).unwrap();
        let h = sys.attach("list", AccessMode::Write, 0).unwrap();
        let list = LinkedList::open_or_init(h.clone()).unwrap();
        list.insert(1).unwrap();
        h.write_u64(HEAD + 8, 0x1234).unwrap();
        assert!(list.traverse().is_err());
    }
}
