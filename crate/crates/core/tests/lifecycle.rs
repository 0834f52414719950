use std::sync::Arc;

use pmo::layout::{Inspection, PmoState, SlotState};
use pmo::pmem::{Medium, SimMedium};
use pmo::store::{AccessMode, PsyncHalt, RecoveryAction, System, SystemConfig};
use pmo::{BusyReason, Error, PAGE_SIZE};

const R: AccessMode = AccessMode::Read;
const W: AccessMode = AccessMode::Write;

fn system() -> System<SimMedium> {
    System::create(Arc::new(SimMedium::new(1 << 20)), "test", 16).unwrap()
}

fn state(sys: &System<SimMedium>, name: &str) -> SlotState {
    sys.entry(name).unwrap().state
}

#[test]
fn sharing_scenarios() {
    let sys = system();
    let (read_key, write_key) = (0xa1, 0xa2);
    // A is read-only: its write key is never handed out.
    sys.pcreate_with_keys("A", PAGE_SIZE, read_key, write_key)
        .unwrap();
    sys.pcreate_with_keys("B", PAGE_SIZE, 0xb, 0xb).unwrap();
    sys.pcreate_with_keys("C", PAGE_SIZE, 0xc, 0xc).unwrap();
    let (p1, p2, p3) = (101, 102, 103);

    let outcomes = [
        sys.attach_as(p1, "A", W, read_key).map(drop),
        sys.attach_as(p2, "B", R, 0xb).map(drop),
        sys.attach_as(p3, "B", R, 0xb).map(drop),
        sys.attach_as(p3, "C", W, 0xc).map(drop),
        sys.attach_as(p2, "C", W, 0xc).map(drop),
        sys.attach_as(p1, "C", R, 0xc).map(drop),
    ];
    assert!(matches!(outcomes[0], Err(Error::Permission(_))));
    assert!(outcomes[1].is_ok());
    assert!(outcomes[2].is_ok());
    assert!(outcomes[3].is_ok());
    assert!(matches!(
        outcomes[4],
        Err(Error::Busy(BusyReason::MultipleWriters))
    ));
    assert!(matches!(
        outcomes[5],
        Err(Error::Busy(BusyReason::ExistingWriter))
    ));
    assert_eq!(
        outcomes[4].as_ref().unwrap_err().to_string(),
        "busy: invalid (>1 writer)"
    );
    assert_eq!(
        outcomes[5].as_ref().unwrap_err().to_string(),
        "busy: invalid (existing writer)"
    );
    assert_eq!(sys.entry("B").unwrap().reader_count, 2);
}

#[test]
fn write_attach_excludes_readers() {
    let sys = system();
    sys.pcreate("X", PAGE_SIZE).unwrap();
    let r = sys.attach_as(1, "X", R, 0).unwrap();
    assert!(matches!(
        sys.attach_as(2, "X", W, 0),
        Err(Error::Busy(BusyReason::ReadersPresent))
    ));
    sys.detach(r).unwrap();
    sys.attach_as(2, "X", W, 0).unwrap();
}

#[test]
fn create_rounds_and_rejects_duplicates() {
    let sys = system();
    sys.pcreate("A", 16384).unwrap();
    let e = sys.entry("A").unwrap();
    assert_eq!(e.state, SlotState::Live(PmoState::Detached));
    assert_eq!((e.size, e.shadow_offset), (16384, None));
    assert!(matches!(
        sys.pcreate("A", 4096),
        Err(Error::AlreadyExists(_))
    ));
    sys.pcreate("tiny", 1).unwrap();
    assert_eq!(sys.entry("tiny").unwrap().size, 4096);
    assert!(matches!(
        sys.pcreate("", 4096),
        Err(Error::Domain(_) | Error::Config(_))
    ));
    assert!(sys.pcreate(&"n".repeat(48), 4096).is_err());
    sys.pcreate(&"n".repeat(47), 4096).unwrap();
}

#[test]
fn table_and_space_exhaustion() {
    let sys = System::create(Arc::new(SimMedium::new(1 << 20)), "t", 2).unwrap();
    sys.pcreate("a", 4096).unwrap();
    sys.pcreate("b", 4096).unwrap();
    assert!(matches!(sys.pcreate("c", 4096), Err(Error::OutOfSpace(_))));
    sys.pdestroy("a", 0).unwrap();
    assert!(matches!(
        sys.pcreate("c", 1 << 30),
        Err(Error::OutOfSpace(_))
    ));
    sys.pcreate("c", 4096).unwrap();
}

#[test]
fn detach_discards_unsynced_writes() {
    let sys = system();
    sys.pcreate("A", 2 * PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    h.write(0, b"kept").unwrap();
    sys.psync(&h).unwrap();
    h.write(0, b"lost").unwrap();
    h.write(PAGE_SIZE, b"lost").unwrap();
    assert_eq!(h.read_vec(0, 4).unwrap(), b"lost");
    sys.detach(h).unwrap();
    let r = sys.attach("A", R, 0).unwrap();
    assert_eq!(r.read_vec(0, 4).unwrap(), b"kept");
    assert_eq!(r.read_vec(PAGE_SIZE, 4).unwrap(), [0; 4]);
}

#[test]
fn reader_count_and_double_detach() {
    let sys = system();
    sys.pcreate("A", PAGE_SIZE).unwrap();
    let a = sys.attach_as(1, "A", R, 0).unwrap();
    let b = sys.attach_as(2, "A", R, 0).unwrap();
    let a2 = a.clone();
    sys.detach(a).unwrap();
    assert_eq!(state(&sys, "A"), SlotState::Live(PmoState::Read));
    assert!(matches!(
        sys.detach(a2.clone()),
        Err(Error::UndefinedBehavior(_))
    ));
    assert!(matches!(sys.psync(&a2), Err(Error::UndefinedBehavior(_))));
    sys.detach(b).unwrap();
    assert_eq!(state(&sys, "A"), SlotState::Live(PmoState::Detached));
}

#[test]
fn read_handles_cannot_write_and_psync_is_ignored() {
    let sys = system();
    sys.pcreate("A", PAGE_SIZE).unwrap();
    let r = sys.attach("A", R, 0).unwrap();
    assert!(matches!(r.write(0, &[1]), Err(Error::Permission(_))));
    assert_eq!(sys.psync(&r).unwrap(), 0);
    assert!(matches!(r.read_vec(PAGE_SIZE - 1, 2), Err(Error::Range(_))));
}

#[test]
fn dirty_set_is_the_union_of_written_pages() {
    let sys = system();
    sys.pcreate("A", 8 * PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    for p in [0, 5, 5, 2] {
        h.write(p * PAGE_SIZE + 7, &[p as u8 + 1]).unwrap();
    }
    assert_eq!(h.dirty_pages(), [0, 2, 5]);
    // A write straddling a page boundary dirties both pages.
    h.write(4 * PAGE_SIZE - 2, &[9; 4]).unwrap();
    assert_eq!(h.dirty_pages(), [0, 2, 3, 4, 5]);
    assert_eq!(sys.psync(&h).unwrap(), 5);
    assert!(h.dirty_pages().is_empty());
    assert_eq!(sys.psync(&h).unwrap(), 0);
    assert_eq!(sys.stats().psync_pages_copied, 5);
}

#[test]
fn psync_twice_leaves_identical_media() {
    let sys = system();
    sys.pcreate("A", 4 * PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    h.write(100, &[7; 300]).unwrap();
    sys.psync(&h).unwrap();
    let first = sys.medium().model().media().clone();
    sys.psync(&h).unwrap();
    assert!(*sys.medium().model().media() == first);
    assert_eq!(sys.read_primary("A").unwrap()[100..400], [7; 300]);
}

#[test]
fn destroy_frees_space_for_reuse() {
    let sys = system();
    sys.pcreate("A", 4 * PAGE_SIZE).unwrap();
    sys.pcreate("B", 2 * PAGE_SIZE).unwrap();
    let a = sys.entry("A").unwrap().primary_offset;
    assert!(matches!(sys.pdestroy("A", 1), Err(Error::Permission(_))));
    let h = sys.attach("A", R, 0).unwrap();
    assert!(matches!(
        sys.pdestroy("A", 0),
        Err(Error::Busy(BusyReason::Attached))
    ));
    sys.detach(h).unwrap();
    sys.pdestroy("A", 0).unwrap();
    assert!(matches!(sys.entry("A"), Err(Error::NotFound(_))));
    assert!(matches!(sys.pdestroy("A", 0), Err(Error::NotFound(_))));
    sys.pcreate("C", 3 * PAGE_SIZE).unwrap();
    assert_eq!(sys.entry("C").unwrap().primary_offset, a);
    assert_eq!(
        Inspection::read(&**sys.medium()).unwrap().allocated_count,
        2
    );
}

#[test]
fn address_is_stable_and_unique() {
    let m = Arc::new(SimMedium::new(1 << 20));
    let sys = System::create(m.clone(), "t", 8).unwrap();
    for (n, pages) in [("a", 1), ("b", 3), ("c", 2)] {
        sys.pcreate(n, pages * PAGE_SIZE).unwrap();
    }
    let bases = |sys: &System<SimMedium>| -> Vec<(u64, u64)> {
        ["a", "b", "c"]
            .iter()
            .map(|n| {
                let h = sys.attach(n, R, 0).unwrap();
                let r = (h.base_address(), h.size());
                sys.detach(h).unwrap();
                r
            })
            .collect()
    };
    let first = bases(&sys);
    drop(sys);
    let (sys, _) = System::mount(m).unwrap();
    assert_eq!(bases(&sys), first);
    let mut ranges = first.clone();
    ranges.sort();
    for w in ranges.windows(2) {
        assert!(w[0].0 + w[0].1 <= w[1].0);
    }
}

#[test]
fn crash_in_write_state_keeps_last_psync() {
    let m = Arc::new(SimMedium::new(1 << 20));
    let sys = System::create(m.clone(), "t", 8).unwrap();
    sys.pcreate("A", 2 * PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    h.write(0, &[1; 64]).unwrap();
    sys.psync(&h).unwrap();
    h.write(0, &[2; 64]).unwrap();
    std::mem::forget(h);
    drop(sys);

    let (sys, reports) = System::mount(m).unwrap();
    assert_eq!(reports[0].state, PmoState::Write);
    assert_eq!(reports[0].action, RecoveryAction::DiscardShadow);
    assert_eq!(sys.read_primary("A").unwrap()[..64], [1; 64]);
    assert_eq!(sys.entry("A").unwrap().shadow_offset, None);
}

#[test]
fn crash_after_commit_rolls_forward() {
    let m = Arc::new(SimMedium::new(1 << 20));
    let sys = System::create(m.clone(), "t", 8).unwrap();
    sys.pcreate("A", 4 * PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    for p in [1, 3] {
        h.write(p * PAGE_SIZE, &[p as u8; 64]).unwrap();
    }
    assert!(matches!(
        sys.psync_halting(&h, PsyncHalt::AfterCommit),
        Err(Error::InjectedCrash(_))
    ));
    drop(sys);

    let (sys, reports) = System::mount(m.clone()).unwrap();
    assert_eq!(reports[0].state, PmoState::Copying);
    assert_eq!(reports[0].action, RecoveryAction::CopyShadowToPrimary(2));
    assert_eq!(reports[0].to_string(), "A: copy-shadow-to-primary 2 pages");
    let c = sys.read_primary("A").unwrap();
    assert_eq!(c[PAGE_SIZE as usize], 1);
    assert_eq!(c[3 * PAGE_SIZE as usize], 3);
    assert_eq!(sys.stats().recovery_pages_copied, 2);
    drop(sys);

    let (_, again) = System::mount(m).unwrap();
    assert_eq!(again[0].action, RecoveryAction::None);
}

#[test]
fn crash_before_commit_rolls_back() {
    let m = Arc::new(SimMedium::new(1 << 20));
    let sys = System::create(m.clone(), "t", 8).unwrap();
    sys.pcreate("A", PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    h.write(0, &[5; 8]).unwrap();
    assert!(sys.psync_halting(&h, PsyncHalt::BeforeCommit).is_err());
    drop(sys);
    let (sys, reports) = System::mount(m).unwrap();
    assert_eq!(reports[0].state, PmoState::Persisting);
    assert_eq!(reports[0].action, RecoveryAction::DiscardShadow);
    assert_eq!(sys.read_primary("A").unwrap()[..8], [0; 8]);
}

#[test]
fn stale_writer_is_recovered_on_attach() {
    let m = Arc::new(SimMedium::new(1 << 20));
    let cfg = |pid| SystemConfig {
        pid,
        ..SystemConfig::default()
    };
    let sys = System::create_with(m.clone(), "t", 8, cfg(7)).unwrap();
    sys.pcreate("A", PAGE_SIZE).unwrap();
    let h = sys.attach("A", W, 0).unwrap();
    h.write(0, &[3; 8]).unwrap();
    sys.psync(&h).unwrap();
    h.write(0, &[4; 8]).unwrap();

    // Same boot, writer process died.
    sys.exit_process(7).unwrap();
    assert!(!h.is_attached());
    let h2 = sys.attach_as(8, "A", W, 0).unwrap();
    assert_eq!(h2.read_vec(0, 8).unwrap(), [3; 8]);
    std::mem::forget(h2);
    drop(sys);

    // Next boot: open without mounting, attach triggers recovery.
    let sys = System::open_with(m, cfg(9)).unwrap();
    let e = sys.entry("A").unwrap();
    assert_eq!(e.state, SlotState::Live(PmoState::Write));
    let h3 = sys.attach("A", W, 0).unwrap();
    assert_eq!(h3.read_vec(0, 8).unwrap(), [3; 8]);
    assert_eq!(sys.entry("A").unwrap().attached_pid, 9);
}

#[test]
fn detached_and_reader_states_recover_without_copies() {
    let m = Arc::new(SimMedium::new(1 << 20));
    let sys = System::create(m.clone(), "t", 8).unwrap();
    sys.pcreate("D", PAGE_SIZE).unwrap();
    sys.pcreate("R", PAGE_SIZE).unwrap();
    std::mem::forget(sys.attach("R", R, 0).unwrap());
    drop(sys);
    let (sys, reports) = System::mount(m).unwrap();
    let by_name = |n: &str| reports.iter().find(|r| r.name == n).unwrap().clone();
    assert_eq!(by_name("D").action, RecoveryAction::None);
    assert_eq!(by_name("R").state, PmoState::Read);
    assert_eq!(by_name("R").action, RecoveryAction::None);
    assert_eq!(sys.stats().recovery_pages_copied, 0);
    assert_eq!(sys.entry("R").unwrap().reader_count, 0);
}

#[test]
fn medium_len_matches_header() {
    let sys = system();
    assert_eq!(sys.header().unwrap().total_size, sys.medium().len());
}
