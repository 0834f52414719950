//! Crash injection over the simulated persistence domain.
//!
//! A [`Script`] runs against a traced [`SimMedium`]. Every crash point of the
//! resulting event log is then turned into crash images, one per subset of
//! the flushed-but-unfenced lines that could have reached media. Each image
//! is mounted, recovered and checked against a logical model of the script:
//! every PMO must hold exactly the contents of one of its committed versions
//! (its creation or a completed psync), and only a version the in-flight
//! step could have been producing or replacing.
//!
//! Pending lines whose contents already match media cannot change the
//! image, so subsets are drawn over the remaining "effective" lines, and
//! images already recovered are not recovered again. A run is exhaustive
//! when every crash point had at most `log2(budget)` effective lines.

mod script;

pub use script::{Key, Script, Step};

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;

use crate::layout::{self, PmoState, SlotState};
use crate::pmem::{survivor_subsets, CrashState, DeviceImage, LineAddr, Medium, SimMedium};
use crate::store::{AccessMode, Mutation, PmoHandle, System, SystemConfig};
use crate::{Error, Result, LINE_SIZE, PAGE_SIZE};

const HARNESS_PID: u64 = 1;

#[derive(Clone, Debug)]
pub struct HarnessConfig {
    /// Size of the device a fresh run formats.
    pub device_size: u64,
    pub max_pmos: u64,
    /// Most survivor subsets tried per crash point.
    pub budget: usize,
    /// Draw `budget` seeded subsets where enumerating all of them would
    /// exceed the budget, instead of failing.
    pub allow_sampling: bool,
    pub seed: u64,
    pub mutation: Option<Mutation>,
    /// Violations kept in a report; the rest are only counted.
    pub keep_violations: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            device_size: 256 << 10,
            max_pmos: 8,
            budget: 4096,
            allow_sampling: false,
            seed: 0,
            mutation: None,
            keep_violations: 32,
        }
    }
}

impl HarnessConfig {
    fn system_config(&self) -> SystemConfig {
        SystemConfig {
            pid: HARNESS_PID,
            mutation: self.mutation,
            ..SystemConfig::default()
        }
    }

    /// A freshly formatted device image of `device_size` bytes.
    pub fn formatted_image(&self) -> Result<DeviceImage> {
        let m = SimMedium::new(self.device_size);
        layout::format_device(&m, "crashtest", self.max_pmos)?;
        Ok(m.into_model().into_media())
    }
}

/// A committed version of a PMO.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Boundary {
    Absent,
    /// Version 0 is the zero-filled creation, version k the k-th psync.
    Version(usize),
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Absent => f.write_str("absent"),
            Boundary::Version(k) => write!(f, "v{k}"),
        }
    }
}

/// Where a crash happened: after `crash_point` logged events, with
/// `survivors` being the pending lines that reached media.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub crash_point: usize,
    pub survivors: Vec<LineAddr>,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "crash_point={} survivors=[", self.crash_point)?;
        for (i, l) in self.survivors.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str("]")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Matched(Boundary),
    Violation(String),
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub schedule: Schedule,
    /// PMO the verdict is about; empty for system-wide problems.
    pub pmo: String,
    /// Recovered contents, `None` when the PMO does not exist.
    pub observed: Option<Vec<u8>>,
    pub outcome: Outcome,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pmo = if self.pmo.is_empty() {
            "<system>"
        } else {
            &self.pmo
        };
        match &self.outcome {
            Outcome::Matched(b) => write!(f, "{}: {pmo} matched {b}", self.schedule),
            Outcome::Violation(msg) => write!(f, "{}: {pmo}: {msg}", self.schedule),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub events: usize,
    pub crash_points: usize,
    pub schedules: usize,
    pub distinct_images: usize,
    pub exhaustive: bool,
    /// Schedules per observed `(pmo, version)`.
    pub histogram: BTreeMap<(String, Boundary), usize>,
    /// The first violations found, in crash point order.
    pub violations: Vec<Verdict>,
    pub violation_count: usize,
}

impl Report {
    /// Distinct committed versions of `pmo` observed after recovery.
    pub fn distinct_states(&self, pmo: &str) -> usize {
        self.histogram
            .keys()
            .filter(|(name, b)| name == pmo && matches!(b, Boundary::Version(_)))
            .count()
    }
}

/// What recovery left on one crash image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Observation {
    pub contents: BTreeMap<String, Vec<u8>>,
    pub problems: Vec<String>,
}

/// The script's effect on the oracle: committed versions of every PMO and
/// the versions acceptable while each step is in flight.
struct Trace {
    medium: Arc<SimMedium>,
    step_ends: Vec<usize>,
    acceptable: Vec<BTreeMap<String, Vec<Boundary>>>,
    final_state: BTreeMap<String, Vec<Boundary>>,
    versions: HashMap<String, Vec<Vec<u8>>>,
}

impl Trace {
    fn expected(&self, crash_point: usize) -> &BTreeMap<String, Vec<Boundary>> {
        match self.step_ends.iter().position(|&end| crash_point < end) {
            Some(i) => &self.acceptable[i],
            None => &self.final_state,
        }
    }

    fn contents(&self, name: &str, b: Boundary) -> Option<&[u8]> {
        match b {
            Boundary::Absent => None,
            Boundary::Version(k) => Some(&self.versions[name][k]),
        }
    }
}

fn execute(script: &Script, config: &HarnessConfig, base: &DeviceImage) -> Result<Trace> {
    let medium = Arc::new(SimMedium::from_image(base.clone()));
    let sys = System::open_with(medium.clone(), config.system_config())?;
    sys.recover_all()?;
    medium.model().begin_trace();

    let mut handles: HashMap<String, PmoHandle<SimMedium>> = HashMap::new();
    let mut volatile: HashMap<String, Vec<u8>> = HashMap::new();
    let mut versions: HashMap<String, Vec<Vec<u8>>> = HashMap::new();
    let mut current: BTreeMap<String, Boundary> = BTreeMap::new();
    let mut step_ends = Vec::new();
    let mut acceptable = Vec::new();

    for (i, step) in script.steps.iter().enumerate() {
        let before = current.clone();
        let name = step.name().to_owned();
        let handle = |handles: &HashMap<String, PmoHandle<SimMedium>>| {
            handles
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Domain(format!("{name} is not attached")))
        };
        let mut run = || -> Result<()> {
            match step {
                Step::Create { pages, key, .. } => {
                    sys.pcreate_with_keys(&name, pages * PAGE_SIZE, key.value, key.value)?;
                    let list = versions.entry(name.clone()).or_default();
                    list.push(vec![0; (pages * PAGE_SIZE) as usize]);
                    current.insert(name.clone(), Boundary::Version(list.len() - 1));
                }
                Step::Attach { mode, key, .. } => {
                    if handles.contains_key(&name) {
                        return Err(Error::Domain(format!("{name} is already attached")));
                    }
                    let h = sys.attach(&name, *mode, key.value)?;
                    if let Some(Boundary::Version(k)) = current.get(&name) {
                        volatile.insert(name.clone(), versions[&name][*k].clone());
                    }
                    handles.insert(name.clone(), h);
                }
                Step::Write {
                    page, byte, span, ..
                } => {
                    let h = handle(&handles)?;
                    let shadow = volatile.get_mut(&name).expect("attached PMO has contents");
                    for (off, len) in Step::write_ranges(*page, *span) {
                        h.write(off, &vec![*byte; len as usize])?;
                        shadow[off as usize..(off + len) as usize].fill(*byte);
                    }
                }
                Step::Psync { .. } => {
                    let h = handle(&handles)?;
                    sys.psync(&h)?;
                    if h.mode() == AccessMode::Write {
                        let list = versions.get_mut(&name).expect("created");
                        list.push(volatile[&name].clone());
                        current.insert(name.clone(), Boundary::Version(list.len() - 1));
                    }
                }
                Step::Detach { .. } => {
                    let h = handle(&handles)?;
                    handles.remove(&name);
                    sys.detach(h)?;
                }
                Step::Destroy { key, .. } => {
                    sys.pdestroy(&name, key.value)?;
                    current.insert(name.clone(), Boundary::Absent);
                }
            }
            Ok(())
        };
        run().map_err(|e| Error::Config(format!("step {} `{step}` failed: {e}", i + 1)))?;
        step_ends.push(medium.model().events().len());
        let mut allowed: BTreeMap<String, Vec<Boundary>> = BTreeMap::new();
        for (n, &b) in &current {
            let prev = before.get(n).copied().unwrap_or(Boundary::Absent);
            let mut set = vec![prev];
            if prev != b {
                set.push(b);
            }
            allowed.insert(n.clone(), set);
        }
        acceptable.push(allowed);
    }
    drop(handles);
    let final_state = current.iter().map(|(n, &b)| (n.clone(), vec![b])).collect();
    Ok(Trace {
        medium,
        step_ends,
        acceptable,
        final_state,
        versions,
    })
}

/// Mounts a crash image and reports what recovery left behind.
pub fn observe(image: DeviceImage, config: &HarnessConfig) -> Observation {
    let medium = Arc::new(SimMedium::from_image(image));
    let sys = match System::mount_with(medium, config.system_config()) {
        Ok((sys, _)) => sys,
        Err(e) => {
            return Observation {
                contents: BTreeMap::new(),
                problems: vec![format!("recovery failed: {e}")],
            }
        }
    };
    let mut obs = Observation::default();
    match check_structure(&sys) {
        Ok(problems) => obs.problems = problems,
        Err(e) => obs.problems.push(format!("structure unreadable: {e}")),
    }
    match sys.entries() {
        Ok(entries) => {
            for e in entries {
                match sys.read_primary(&e.name) {
                    Ok(c) => {
                        obs.contents.insert(e.name, c);
                    }
                    Err(err) => obs.problems.push(format!("{}: {err}", e.name)),
                }
            }
        }
        Err(e) => obs.problems.push(format!("metadata unreadable: {e}")),
    }
    obs
}

/// Invariants of a recovered, quiescent system: every live entry detached
/// and clean, the allocated count right, and all extents in bounds and
/// pairwise disjoint.
pub fn check_structure<M: Medium>(sys: &System<M>) -> Result<Vec<String>> {
    let m = sys.medium();
    let geom = sys.geometry();
    let header = sys.header()?;
    let insp = layout::Inspection::read(&**m)?;
    let mut problems = Vec::new();
    let mut extents: Vec<(u64, u64, String)> = Vec::new();
    let mut live = 0;
    for (slot, e) in &insp.entries {
        match e.state {
            SlotState::Live(PmoState::Detached) => {}
            SlotState::Live(s) => problems.push(format!("{} left in state {s}", e.name)),
            other => problems.push(format!("slot {slot} has state word {:#x}", other.word())),
        }
        live += 1;
        if e.shadow_offset.is_some()
            || e.attached_pid != 0
            || e.attach_boot_id != 0
            || e.reader_count != 0
        {
            problems.push(format!("{} has stale attachment fields", e.name));
        }
        extents.push((
            e.primary_offset,
            e.pages(),
            format!("primary of {}", e.name),
        ));
    }
    if insp.allocated_count != live {
        problems.push(format!(
            "allocated_count {} but {live} live entries",
            insp.allocated_count
        ));
    }
    match sys.free_extents() {
        Ok(free) => extents.extend(
            free.iter()
                .map(|f| (f.start, f.pages, "free extent".to_string())),
        ),
        Err(e) => problems.push(format!("free list: {e}")),
    }
    extents.sort();
    for (start, pages, what) in &extents {
        if start + pages > header.next_free || start + pages > geom.data_pages {
            problems.push(format!(
                "{what} {start}+{pages} beyond next_free {}",
                header.next_free
            ));
        }
    }
    for w in extents.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            problems.push(format!("{} overlaps {}", w[0].2, w[1].2));
        }
    }
    Ok(problems)
}

type ImageKey = (u64, Vec<(LineAddr, [u8; LINE_SIZE as usize])>);

/// Calls `f` for every crash point and chosen survivor subset of `events`
/// logged on `medium`. Returns whether every subset family was exhaustive.
fn for_each_crash<F>(medium: &SimMedium, config: &HarnessConfig, mut f: F) -> Result<(usize, bool)>
where
    F: FnMut(Schedule, ImageKey, &CrashState<'_>) -> Result<ControlFlow<()>>,
{
    let model = medium.model();
    let len = model.events().len();
    let mut replay = model.replayer();
    let mut exhaustive = true;
    for c in 0..=len {
        while replay.position() < c {
            replay.step();
        }
        let state = replay.crash_state();
        let lines = state.effective_lines();
        let chosen = survivor_subsets(
            lines.len(),
            config.budget.max(1),
            config.seed.wrapping_add(c as u64),
        );
        if !chosen.exhaustive && !config.allow_sampling {
            return Err(Error::Config(format!(
                "crash point {c} has {} effective pending lines; 2^{} schedules exceed the \
                 budget of {} and sampling is not allowed",
                lines.len(),
                lines.len(),
                config.budget
            )));
        }
        exhaustive &= chosen.exhaustive;
        for mask in chosen.subsets {
            let survivors: Vec<_> = lines
                .iter()
                .zip(&mask)
                .filter(|(_, &keep)| keep)
                .map(|(l, _)| *l)
                .collect();
            let schedule = Schedule {
                crash_point: c,
                survivors: survivors.iter().map(|(l, _)| *l).collect(),
            };
            if f(schedule, (replay.media_version(), survivors), &state)?.is_break() {
                return Ok((len, false));
            }
        }
    }
    Ok((len, exhaustive))
}

/// Runs `script` on a fresh device and checks every crash image.
pub fn run_exhaustive(script: &Script, config: &HarnessConfig) -> Result<Report> {
    run_on_image(script, config, &config.formatted_image()?)
}

/// Like [`run_exhaustive`], starting from an existing device image.
pub fn run_on_image(script: &Script, config: &HarnessConfig, base: &DeviceImage) -> Result<Report> {
    check(script, config, base, false)
}

fn check(
    script: &Script,
    config: &HarnessConfig,
    base: &DeviceImage,
    stop_early: bool,
) -> Result<Report> {
    let trace = execute(script, config, base)?;
    let mut report = Report::default();
    let mut cache: HashMap<ImageKey, Arc<Observation>> = HashMap::new();
    let (events, exhaustive) = for_each_crash(&trace.medium, config, |schedule, key, state| {
        let obs = match cache.get(&key) {
            Some(o) => o.clone(),
            None => {
                let image = state.image(key.1.iter().map(|(l, _)| *l));
                let o = Arc::new(observe(image, config));
                cache.insert(key, o.clone());
                o
            }
        };
        report.schedules += 1;
        judge(&trace, &schedule, &obs, config, &mut report);
        if stop_early && report.violation_count > 0 {
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    })?;
    report.events = events;
    report.crash_points = events + 1;
    report.distinct_images = cache.len();
    report.exhaustive = exhaustive;
    Ok(report)
}

fn judge(
    trace: &Trace,
    schedule: &Schedule,
    obs: &Observation,
    config: &HarnessConfig,
    report: &mut Report,
) {
    let mut violate = |pmo: &str, msg: String| {
        report.violation_count += 1;
        if report.violations.len() >= config.keep_violations {
            return;
        }
        report.violations.push(Verdict {
            schedule: schedule.clone(),
            pmo: pmo.to_owned(),
            observed: obs.contents.get(pmo).cloned(),
            outcome: Outcome::Violation(msg),
        })
    };
    for p in &obs.problems {
        violate("", p.clone());
    }
    let expected = trace.expected(schedule.crash_point);
    for name in obs.contents.keys() {
        if !expected.contains_key(name) {
            violate(name, "exists but was never created".into());
        }
    }
    for (name, allowed) in expected {
        let seen = obs.contents.get(name).map(Vec::as_slice);
        match allowed.iter().find(|&&b| trace.contents(name, b) == seen) {
            Some(&b) => *report.histogram.entry((name.clone(), b)).or_default() += 1,
            None => {
                let described = describe(trace, name, seen, allowed);
                let allowed: Vec<String> = allowed.iter().map(|b| b.to_string()).collect();
                violate(
                    name,
                    format!(
                        "recovered {described}, expected one of {{{}}}",
                        allowed.join(", ")
                    ),
                );
            }
        }
    }
}

fn describe(trace: &Trace, name: &str, seen: Option<&[u8]>, allowed: &[Boundary]) -> String {
    let Some(bytes) = seen else {
        return "absent".into();
    };
    if let Some(k) = trace
        .versions
        .get(name)
        .and_then(|vs| vs.iter().position(|v| v == bytes))
    {
        return format!("v{k} (out of order)");
    }
    let Some(&newest) = allowed
        .iter()
        .filter(|b| matches!(b, Boundary::Version(_)))
        .max()
    else {
        return "contents of a PMO that should be absent".into();
    };
    let reference = trace.contents(name, newest).unwrap_or_default();
    let pages: BTreeSet<u64> = (0..bytes.len() as u64 / PAGE_SIZE)
        .filter(|&p| {
            let r = (p * PAGE_SIZE) as usize..((p + 1) * PAGE_SIZE) as usize;
            bytes.get(r.clone()) != reference.get(r)
        })
        .collect();
    format!("torn contents (pages differing from {newest}: {pages:?})")
}

/// Recovers the image of one schedule, as [`run_on_image`] did.
pub fn replay(
    script: &Script,
    config: &HarnessConfig,
    base: &DeviceImage,
    schedule: &Schedule,
) -> Result<Observation> {
    let trace = execute(script, config, base)?;
    let model = trace.medium.model();
    if schedule.crash_point > model.events().len() {
        return Err(Error::Range(format!(
            "crash point {} beyond {} events",
            schedule.crash_point,
            model.events().len()
        )));
    }
    let mut r = model.replayer();
    while r.position() < schedule.crash_point {
        r.step();
    }
    let image = r.crash_state().image(schedule.survivors.iter().copied());
    Ok(observe(image, config))
}

/// Greedily drops steps while the script still produces a violation.
pub fn minimize(script: &Script, config: &HarnessConfig, base: &DeviceImage) -> Script {
    let mut best = script.clone();
    loop {
        let mut shrunk = false;
        for i in (0..best.steps.len()).rev() {
            let candidate = best.without(i);
            if check(&candidate, config, base, true).is_ok_and(|r| r.violation_count > 0) {
                best = candidate;
                shrunk = true;
            }
        }
        if !shrunk {
            return best;
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct IdempotenceReport {
    /// Distinct crash images of the script that were recovered.
    pub images: usize,
    /// Crash schedules injected into recovery itself.
    pub recovery_schedules: usize,
    pub mismatches: Vec<String>,
}

fn mask_boot(mut image: DeviceImage) -> DeviceImage {
    image.write(layout::H_BOOT, &[0; 8]);
    image
}

fn recovered_image(
    image: DeviceImage,
    config: &HarnessConfig,
    trace: bool,
) -> Result<(DeviceImage, Arc<SimMedium>)> {
    let m = Arc::new(SimMedium::from_image(image));
    let sys = System::open_with(m.clone(), config.system_config())?;
    if trace {
        m.model().begin_trace();
    }
    sys.recover_all()?;
    drop(sys);
    let out = m.model().volatile_image();
    Ok((mask_boot(out), m))
}

/// Checks that recovery is idempotent and itself crash consistent: for
/// every crash image of `script`, recovering the result of recovery, or the
/// image of a crash at any point during recovery, ends in the same bytes as
/// one uninterrupted recovery (ignoring the boot counter).
pub fn run_recovery_idempotence(
    script: &Script,
    config: &HarnessConfig,
) -> Result<IdempotenceReport> {
    run_recovery_idempotence_on_image(script, config, &config.formatted_image()?)
}

/// Like [`run_recovery_idempotence`], starting from an existing device image.
pub fn run_recovery_idempotence_on_image(
    script: &Script,
    config: &HarnessConfig,
    base: &DeviceImage,
) -> Result<IdempotenceReport> {
    let trace = execute(script, config, base)?;
    let mut images: HashMap<ImageKey, DeviceImage> = HashMap::new();
    for_each_crash(&trace.medium, config, |_, key, state| {
        if let Entry::Vacant(slot) = images.entry(key) {
            let image = state.image(slot.key().1.iter().map(|(l, _)| *l));
            slot.insert(image);
        }
        Ok(ControlFlow::Continue(()))
    })?;
    let mut report = IdempotenceReport {
        images: images.len(),
        ..Default::default()
    };
    let mut keys: Vec<&ImageKey> = images.keys().collect();
    keys.sort();
    for key in keys {
        let image = &images[key];
        let (reference, traced) = recovered_image(image.clone(), config, true)?;
        let (again, _) = recovered_image(reference.clone(), config, false)?;
        if again != reference {
            report.mismatches.push(format!(
                "image at media version {}: second recovery changed the device",
                key.0
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for_each_crash(&traced, config, |schedule, k, state| {
            report.recovery_schedules += 1;
            if !seen.insert(k.clone()) {
                return Ok(ControlFlow::Continue(()));
            }
            let crashed = state.image(k.1.iter().map(|(l, _)| *l));
            let (out, _) = recovered_image(crashed, config, false)?;
            if out != reference {
                report.mismatches.push(format!(
                    "image at media version {}: recovery crashed at {schedule} ends differently",
                    key.0
                ));
            }
            Ok(ControlFlow::Continue(()))
        })?;
    }
    Ok(report)
}
