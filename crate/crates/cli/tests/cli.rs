use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use pmo::pmem::MappedMedium;
use pmo::store::{AccessMode, PsyncHalt, System};
use pmo::PAGE_SIZE;

const STANDARD: &str = "\
create A 4 k1
attach A w k1
write A 0 0x11
write A 2 0x22
psync A
write A 1 0x33
write A 2 0x44
write A 3 0x55
psync A
detach A
crashpoints all
";

fn pmoctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmoctl"))
        .args(args)
        .output()
        .expect("pmoctl runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn formatted(dir: &tempfile::TempDir) -> PathBuf {
    let img = dir.path().join("dev.img");
    let o = Command::new(env!("CARGO_BIN_EXE_mkpmo"))
        .args([
            "--device",
            img.to_str().unwrap(),
            "--size",
            "4MiB",
            "--name",
            "lab",
            "--max-pmos",
            "8",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    img
}

fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(' '))
}

#[test]
fn mkpmo_formats_and_inspect_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("lab.img");
    let o = pmoctl(&[
        "mkpmo",
        "--device",
        img.to_str().unwrap(),
        "--size",
        "16MiB",
        "--name",
        "lab",
        "--max-pmos",
        "64",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("allocated_count 0"));

    let before = sha(&img);
    let o = pmoctl(&["inspect", "--device", img.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(field(&text, "magic"), Some("PMOSYSV1"));
    assert_eq!(field(&text, "system_name"), Some("lab"));
    assert_eq!(field(&text, "total_size"), Some("16777216"));
    assert_eq!(field(&text, "max_pmos"), Some("64"));
    assert!(!text.contains("entry "));
    assert_eq!(sha(&img), before, "inspect wrote to the device");
}

#[test]
fn mkpmo_rejects_tiny_device() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("tiny.img");
    let o = Command::new(env!("CARGO_BIN_EXE_mkpmo"))
        .args(["--device", img.to_str().unwrap(), "--size", "8KiB"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("format error"));
}

#[test]
fn inspect_unformatted_fails() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("zero.img");
    std::fs::write(&img, vec![0u8; 1 << 16]).unwrap();
    let o = pmoctl(&["inspect", "--device", img.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&pmoctl(&["inspect"])), 2);
    assert_eq!(
        code(&pmoctl(&["mkpmo", "--device", "x", "--size", "16MB"])),
        2
    );
    assert_eq!(code(&pmoctl(&["bench", "--workload", "fileserver"])), 2);
    assert_eq!(
        code(&pmoctl(&["crashtest", "--script", "s", "--mutate", "nope"])),
        2
    );
}

#[test]
fn inspect_lists_entries() {
    let dir = tempfile::tempdir().unwrap();
    let img = formatted(&dir);
    {
        let sys = System::open(Arc::new(MappedMedium::open(&img).unwrap())).unwrap();
        sys.pcreate("A", PAGE_SIZE).unwrap();
        sys.pcreate("B", 3 * PAGE_SIZE).unwrap();
    }
    let text = stdout(&pmoctl(&["inspect", "--device", img.to_str().unwrap()]));
    let entries: Vec<&str> = text.lines().filter(|l| l.starts_with("entry ")).collect();
    assert_eq!(entries.len(), 2, "{text}");
    assert!(entries.iter().all(|l| l.contains("state=D")));
    assert!(entries
        .iter()
        .any(|l| l.contains("name=B") && l.contains("size=12288")));
}

#[test]
fn recover_rolls_a_committed_psync_forward() {
    let dir = tempfile::tempdir().unwrap();
    let img = formatted(&dir);
    {
        let sys = System::open(Arc::new(MappedMedium::open(&img).unwrap())).unwrap();
        sys.pcreate("A", 4 * PAGE_SIZE).unwrap();
        sys.pcreate("Q", PAGE_SIZE).unwrap();
        let h = sys.attach("A", AccessMode::Write, 0).unwrap();
        h.write(0, &[7; 64]).unwrap();
        h.write(2 * PAGE_SIZE, &[8; 64]).unwrap();
        sys.psync_halting(&h, PsyncHalt::AfterCommit).unwrap_err();
    }
    let dev = img.to_str().unwrap();
    let text = stdout(&pmoctl(&["inspect", "--device", dev]));
    assert!(
        text.lines()
            .any(|l| l.contains("name=A") && l.contains("state=C")),
        "{text}"
    );

    let o = pmoctl(&["recover", "--device", dev]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("A: copy-shadow-to-primary 2 pages"), "{text}");
    assert!(text.contains("Q: none"), "{text}");

    let text = stdout(&pmoctl(&["inspect", "--device", dev]));
    assert!(text
        .lines()
        .any(|l| l.contains("name=A") && l.contains("state=D") && l.contains("shadow=none")));

    let text = stdout(&pmoctl(&["recover", "--device", dev]));
    assert!(
        text.contains("A: none") && text.contains("Q: none"),
        "{text}"
    );

    let sys = System::open(Arc::new(MappedMedium::open(&img).unwrap())).unwrap();
    let a = sys.read_primary("A").unwrap();
    assert_eq!((a[0], a[2 * PAGE_SIZE as usize]), (7, 8));
}

#[test]
fn crashtest_standard_script_passes() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("std.pmo");
    std::fs::write(&script, STANDARD).unwrap();
    let o = pmoctl(&["crashtest", "--script", script.to_str().unwrap()]);
    let text = stdout(&o);
    assert_eq!(code(&o), 0, "{text}");
    assert_eq!(field(&text, "violations"), Some("0"));
    assert_eq!(field(&text, "recovery_mismatches"), Some("0"));
    assert_eq!(field(&text, "exhaustive"), Some("yes"));
    assert!(text.contains("boundary A v2 "));
}

#[test]
fn crashtest_on_a_device_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = formatted(&dir);
    let before = sha(&img);
    let script = dir.path().join("s.pmo");
    std::fs::write(
        &script,
        "create B 2 7\nattach B w 7\nwrite B 1 0xee\npsync B\n",
    )
    .unwrap();
    let o = pmoctl(&[
        "crashtest",
        "--device",
        img.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(sha(&img), before);
}

#[test]
fn crashtest_mutant_fails_with_minimized_script() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("std.pmo");
    std::fs::write(&script, STANDARD).unwrap();
    let o = pmoctl(&[
        "crashtest",
        "--script",
        script.to_str().unwrap(),
        "--mutate",
        "drop-fence-2",
    ]);
    let text = stdout(&o);
    assert_eq!(code(&o), 1, "{text}");
    let steps: usize = text
        .lines()
        .find_map(|l| {
            l.strip_prefix("minimized ")?
                .strip_suffix(" steps")?
                .parse()
                .ok()
        })
        .expect("minimized script printed");
    assert!(steps <= 5, "{text}");
}

#[test]
fn crashtest_empty_script_is_trivial() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("empty.pmo");
    std::fs::write(&script, "crashpoints all\n").unwrap();
    let o = pmoctl(&["crashtest", "--script", script.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(field(&stdout(&o), "schedules"), Some("1"));
}

#[test]
fn crashtest_bad_script_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.pmo");
    std::fs::write(&script, "create A 4 k1\nteleport A\n").unwrap();
    let o = pmoctl(&["crashtest", "--script", script.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let missing = dir.path().join("missing.pmo");
    assert_eq!(
        code(&pmoctl(&[
            "crashtest",
            "--script",
            missing.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn bench_linkedlist_builds_a_well_formed_list() {
    let o = pmoctl(&[
        "bench",
        "--workload",
        "linkedlist",
        "--threads",
        "2",
        "--delta-ms",
        "20",
        "--duration-s",
        "5",
        "--size",
        "4MiB",
    ]);
    let text = stdout(&o);
    assert_eq!(code(&o), 0, "{text}");
    let nodes: u64 = field(&text, "list_nodes")
        .and_then(|v| v.split_whitespace().next()?.parse().ok())
        .unwrap();
    assert!(nodes > 0);
    assert_eq!(field(&text, "ops").unwrap().parse::<u64>().unwrap(), nodes);
}

#[test]
fn bench_on_a_device_file() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("bench.img");
    let o = pmoctl(&[
        "bench",
        "--device",
        img.to_str().unwrap(),
        "--workload",
        "seqwrite",
        "--duration-s",
        "0.3",
        "--size",
        "1MiB",
    ]);
    assert_eq!(code(&o), 0);
    let text = stdout(&pmoctl(&["inspect", "--device", img.to_str().unwrap()]));
    assert!(
        text.lines()
            .any(|l| l.contains("name=bench") && l.contains("state=D")),
        "{text}"
    );
}
