//! Synchronization-interval workloads.
//!
//! Worker threads update one PMO until `delta` has passed, meet at a
//! barrier, one of them runs psync, and all meet again before the next
//! interval. The run ends after `duration`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmo::demo::LinkedList;
use pmo::layout::ShadowLayout;
use pmo::pmem::{MappedMedium, Medium};
use pmo::store::{AccessMode, PmoHandle, System};
use pmo::{Error, Result, LINE_SIZE, PAGE_SIZE};

use crate::{parse_size, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Workload {
    /// Each thread writes consecutive cache lines of its own stripe.
    Seqwrite,
    /// Cache-line writes at uniformly random offsets.
    Randwrite,
    /// Sorted linked-list insertion with absolute pointers.
    Linkedlist,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Device image to run on; an anonymous mapping if omitted. The file is
    /// reformatted.
    #[arg(long)]
    pub device: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub workload: Workload,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 10)]
    pub delta_ms: u64,
    #[arg(long, default_value_t = 5.0)]
    pub duration_s: f64,
    /// PMO size.
    #[arg(long, value_parser = parse_size, default_value = "64MiB")]
    pub size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// What a benchmark run measured.
#[derive(Clone, Debug, Default)]
pub struct BenchResult {
    pub ops: u64,
    pub elapsed: Duration,
    pub psync_latencies: Vec<Duration>,
    pub pages_copied: u64,
    /// Nodes found by walking the list after re-attach (linkedlist only).
    pub list_nodes: Option<u64>,
}

impl BenchResult {
    pub fn ops_per_sec(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    pub fn pages_per_psync(&self) -> f64 {
        self.pages_copied as f64 / (self.psync_latencies.len().max(1)) as f64
    }

    /// Latency at quantile `q` in [0, 1].
    pub fn percentile(&self, q: f64) -> Duration {
        let mut v = self.psync_latencies.clone();
        if v.is_empty() {
            return Duration::ZERO;
        }
        v.sort();
        let i = ((v.len() - 1) as f64 * q).round() as usize;
        v[i]
    }
}

/// Device size that holds a PMO of `size` bytes plus its shadow.
pub fn device_size_for(size: u64) -> u64 {
    let pages = size.div_ceil(PAGE_SIZE);
    (pages + ShadowLayout::extent_pages_for(pages)) * PAGE_SIZE + (1 << 20)
}

pub fn run(a: &BenchArgs, out: &mut dyn Write) -> Result<Status> {
    if a.threads == 0 || a.delta_ms == 0 || a.duration_s.is_nan() || a.duration_s <= 0.0 {
        return Err(Error::Config(
            "threads, delta and duration must be positive".into(),
        ));
    }
    let dev = device_size_for(a.size);
    let medium = Arc::new(match &a.device {
        Some(path) => MappedMedium::create(path, dev)?,
        None => MappedMedium::anonymous(dev)?,
    });
    let r = run_on(medium, a)?;
    let us = |d: Duration| d.as_secs_f64() * 1e6;
    let mut w = |line: String| writeln!(out, "{line}").map_err(Error::Io);
    w(format!("workload {:?}", a.workload).to_lowercase())?;
    w(format!("threads {}", a.threads))?;
    w(format!("delta_ms {}", a.delta_ms))?;
    w(format!("duration_s {:.3}", r.elapsed.as_secs_f64()))?;
    w(format!("ops {}", r.ops))?;
    w(format!("ops_per_sec {:.0}", r.ops_per_sec()))?;
    w(format!("psyncs {}", r.psync_latencies.len()))?;
    w(format!("pages_copied_per_psync {:.2}", r.pages_per_psync()))?;
    w(format!(
        "psync_latency_us p50 {:.1} p90 {:.1} p99 {:.1} max {:.1}",
        us(r.percentile(0.5)),
        us(r.percentile(0.9)),
        us(r.percentile(0.99)),
        us(r.percentile(1.0))
    ))?;
    if let Some(n) = r.list_nodes {
        w(format!("list_nodes {n} well_formed yes"))?;
    }
    Ok(Status::Ok)
}

enum Worker<M: Medium> {
    Seq { next: u64, lo: u64, hi: u64 },
    Rand(ChaCha8Rng),
    List(Arc<Mutex<LinkedList<M>>>, ChaCha8Rng),
}

impl<M: Medium> Worker<M> {
    fn op(&mut self, h: &PmoHandle<M>, line: &[u8]) -> Result<bool> {
        match self {
            Worker::Seq { next, lo, hi } => {
                h.write(*next, line)?;
                *next += LINE_SIZE;
                if *next >= *hi {
                    *next = *lo;
                }
            }
            Worker::Rand(rng) => {
                let off = rng.gen_range(0..h.size() / LINE_SIZE) * LINE_SIZE;
                h.write(off, line)?;
            }
            Worker::List(list, rng) => {
                let list = list.lock().unwrap_or_else(|e| e.into_inner());
                if list.remaining()? == 0 {
                    return Ok(false);
                }
                list.insert(rng.gen())?;
            }
        }
        Ok(true)
    }
}

/// Runs the workload described by `a` on a fresh system over `medium`.
pub fn run_on<M: Medium>(medium: Arc<M>, a: &BenchArgs) -> Result<BenchResult> {
    let sys = System::create(medium, "bench", 4)?;
    sys.pcreate("bench", a.size)?;
    let h = sys.attach("bench", AccessMode::Write, 0)?;
    let list = match a.workload {
        Workload::Linkedlist => Some(Arc::new(Mutex::new(LinkedList::open_or_init(h.clone())?))),
        _ => None,
    };

    let threads = a.threads;
    let delta = Duration::from_millis(a.delta_ms);
    let duration = Duration::from_secs_f64(a.duration_s);
    let barrier = Barrier::new(threads);
    let latencies = Mutex::new(Vec::new());
    let start = Instant::now();
    let stripe = (h.size() / threads as u64) / LINE_SIZE * LINE_SIZE;

    // Set by the leader between the two barriers, so every worker reads
    // the same value.
    let done = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let fail = |e: Error| {
        failure.lock().unwrap().get_or_insert(e);
    };

    let ops: Vec<u64> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                let (sys, h, barrier, latencies) = (&sys, &h, &barrier, &latencies);
                let (done, failure, fail) = (&done, &failure, &fail);
                let rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(t as u64));
                let mut worker = match (&a.workload, &list) {
                    (Workload::Seqwrite, _) => Worker::Seq {
                        next: t as u64 * stripe,
                        lo: t as u64 * stripe,
                        hi: ((t as u64 + 1) * stripe).max(t as u64 * stripe + LINE_SIZE),
                    },
                    (Workload::Randwrite, _) => Worker::Rand(rng),
                    (Workload::Linkedlist, Some(l)) => Worker::List(l.clone(), rng),
                    (Workload::Linkedlist, None) => unreachable!("list is opened above"),
                };
                s.spawn(move || {
                    let line = [t as u8 + 1; LINE_SIZE as usize];
                    let mut ops = 0;
                    let mut room = true;
                    let mut interval = 1;
                    loop {
                        let deadline = (delta * interval).min(duration);
                        while room && start.elapsed() < deadline {
                            match worker.op(h, &line) {
                                Ok(more) => {
                                    room = more;
                                    ops += more as u64;
                                }
                                Err(e) => {
                                    fail(e);
                                    room = false;
                                }
                            }
                        }
                        if barrier.wait().is_leader() {
                            if failure.lock().unwrap().is_none() {
                                let t0 = Instant::now();
                                match sys.psync(h) {
                                    Ok(_) => latencies.lock().unwrap().push(t0.elapsed()),
                                    Err(e) => fail(e),
                                }
                            }
                            let over =
                                start.elapsed() >= duration || failure.lock().unwrap().is_some();
                            done.store(over, Ordering::Release);
                        }
                        barrier.wait();
                        if done.load(Ordering::Acquire) {
                            return ops;
                        }
                        interval += 1;
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("bench worker panicked"))
            .collect()
    });
    let elapsed = start.elapsed();
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let ops: u64 = ops.iter().sum();
    let pages_copied = sys.stats().psync_pages_copied;

    drop(list);
    sys.detach(h)?;
    let list_nodes = match a.workload {
        Workload::Linkedlist => {
            let h = sys.attach("bench", AccessMode::Read, 0)?;
            let list = LinkedList::open(h)?;
            let n = list.traverse()?.len() as u64;
            if n != ops {
                return Err(Error::Format(format!(
                    "list holds {n} nodes after {ops} inserts"
                )));
            }
            sys.detach(list.into_handle())?;
            Some(n)
        }
        _ => None,
    };
    let psync_latencies = latencies.into_inner().unwrap();
    Ok(BenchResult {
        ops,
        elapsed,
        psync_latencies,
        pages_copied,
        list_nodes,
    })
}
