//! Builds a sorted linked list in a PMO, then re-mounts the device a few
//! times and walks the list through its absolute pointers.
//!
//! ```text
//! cargo run --example linked_list [DEVICE]
//! ```

use std::sync::Arc;

use pmo::demo::LinkedList;
use pmo::pmem::MappedMedium;
use pmo::store::{AccessMode, System};

const KEY: u64 = 0x1157;

fn main() -> pmo::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("pmo-linked-list.img"));

    let medium = Arc::new(MappedMedium::create(&path, 4 << 20)?);
    let sys = System::create(medium, "list-demo", 8)?;
    sys.pcreate_with_keys("numbers", 64 << 10, KEY, KEY)?;

    let list = LinkedList::open_or_init(sys.attach("numbers", AccessMode::Write, KEY)?)?;
    for v in [42, 7, 19, 3, 88, 19, 61] {
        list.insert(v)?;
    }
    let h = list.into_handle();
    sys.psync(&h)?;
    println!("built list at {:#x}", h.base_address());
    sys.detach(h)?;
    drop(sys);

    for cycle in 1..=3 {
        let medium = Arc::new(MappedMedium::open(&path)?);
        let (sys, _) = System::mount(medium)?;
        let list = LinkedList::open(sys.attach("numbers", AccessMode::Read, KEY)?)?;
        println!(
            "mount {cycle}: base {:#x} list {:?}",
            list.handle().base_address(),
            list.traverse()?
        );
        sys.detach(list.into_handle())?;
    }
    Ok(())
}
