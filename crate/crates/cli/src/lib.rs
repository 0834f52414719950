//! Operator commands for PMO device images: format, inspect, recover,
//! crash-test and benchmark.
//!
//! Output is plain `key value` text with a fixed field order so scripts can
//! parse it.

pub mod bench;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use pmo::harness::{self, HarnessConfig, Script};
use pmo::layout::{self, Inspection};
use pmo::pmem::{DeviceImage, MappedMedium, Medium};
use pmo::store::{Mutation, System};
use pmo::{Error, Result};

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    /// A violation was found or the command failed.
    Failed = 1,
    /// Bad usage or unparsable input.
    Usage = 2,
}

/// Parses sizes like `4096`, `8KiB`, `16MiB` or `1GiB`.
pub fn parse_size(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = [("GiB", 30), ("MiB", 20), ("KiB", 10)]
        .iter()
        .find_map(|&(suffix, shift)| s.strip_suffix(suffix).map(|d| (d, shift)))
        .unwrap_or((s, 0));
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| format!("bad size {s:?} (expected bytes or a KiB/MiB/GiB suffix)"))?;
    n.checked_mul(1 << shift)
        .ok_or_else(|| format!("size {s:?} is too large"))
}

#[derive(Debug, Parser)]
#[command(name = "pmoctl", version, about = "Manage PMO device images")]
pub struct Pmoctl {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create and format a device image.
    Mkpmo(MkpmoArgs),
    /// Print the header and every live metadata entry. Never writes.
    Inspect(DeviceArgs),
    /// Recover every PMO left mid-operation by a crash.
    Recover(DeviceArgs),
    /// Run a workload script under crash injection.
    Crashtest(CrashtestArgs),
    /// Measure a workload with a psync every delta.
    Bench(bench::BenchArgs),
}

#[derive(Debug, Args)]
#[command(about = "Create and format a PMO device image")]
pub struct MkpmoArgs {
    #[arg(long)]
    pub device: PathBuf,
    #[arg(long, value_parser = parse_size)]
    pub size: u64,
    #[arg(long, default_value = "pmo")]
    pub name: String,
    #[arg(long, default_value_t = 64)]
    pub max_pmos: u64,
}

#[derive(Debug, Args)]
pub struct DeviceArgs {
    #[arg(long)]
    pub device: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrashtestArgs {
    /// Formatted image to start from; a fresh 256 KiB image if omitted.
    #[arg(long)]
    pub device: Option<PathBuf>,
    #[arg(long)]
    pub script: PathBuf,
    /// Most survivor subsets per crash point; beyond it subsets are sampled.
    #[arg(long, default_value_t = 4096)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run against a deliberately broken psync.
    #[arg(long)]
    pub mutate: Option<Mutation>,
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(command: Command, out: &mut dyn Write) -> Status {
    let result = match command {
        Command::Mkpmo(a) => mkpmo(&a, out),
        Command::Inspect(a) => inspect(&a, out),
        Command::Recover(a) => recover(&a, out),
        Command::Crashtest(a) => crashtest(&a, out),
        Command::Bench(a) => bench::run(&a, out),
    };
    match result {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => Status::Usage,
                _ => Status::Failed,
            }
        }
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

pub fn mkpmo(a: &MkpmoArgs, out: &mut dyn Write) -> Result<Status> {
    let m = MappedMedium::create(&a.device, a.size)?;
    layout::format_device(&m, &a.name, a.max_pmos)?;
    m.sync()?;
    write!(out, "{}", Inspection::read(&m)?).map_err(io)?;
    Ok(Status::Ok)
}

pub fn inspect(a: &DeviceArgs, out: &mut dyn Write) -> Result<Status> {
    let image = std::fs::read(&a.device)?;
    write!(out, "{}", Inspection::parse(&image)?).map_err(io)?;
    Ok(Status::Ok)
}

pub fn recover(a: &DeviceArgs, out: &mut dyn Write) -> Result<Status> {
    let m = Arc::new(MappedMedium::open(&a.device)?);
    let (sys, reports) = System::mount(m.clone())?;
    for r in &reports {
        writeln!(out, "{r}").map_err(io)?;
    }
    writeln!(
        out,
        "recovered {} pmos boot_id {}",
        reports.len(),
        sys.boot_id()
    )
    .map_err(io)?;
    m.sync()?;
    Ok(Status::Ok)
}

pub fn crashtest(a: &CrashtestArgs, out: &mut dyn Write) -> Result<Status> {
    let text = std::fs::read_to_string(&a.script)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", a.script.display())))?;
    let script = Script::parse(&text)?;
    let config = HarnessConfig {
        budget: a.budget,
        allow_sampling: true,
        seed: a.seed,
        mutation: a.mutate,
        ..HarnessConfig::default()
    };
    let base = match &a.device {
        Some(path) => DeviceImage::from(std::fs::read(path)?),
        None => config.formatted_image()?,
    };
    let report = harness::run_on_image(&script, &config, &base)?;
    let idem = harness::run_recovery_idempotence_on_image(&script, &config, &base)?;

    let mut w = |line: String| writeln!(out, "{line}").map_err(io);
    if let Some(m) = a.mutate {
        w(format!("mutation {m}"))?;
    }
    w(format!("events {}", report.events))?;
    w(format!("crash_points {}", report.crash_points))?;
    w(format!("schedules {}", report.schedules))?;
    w(format!("distinct_images {}", report.distinct_images))?;
    w(format!(
        "exhaustive {}",
        if report.exhaustive { "yes" } else { "no" }
    ))?;
    for ((name, boundary), n) in &report.histogram {
        w(format!("boundary {name} {boundary} {n}"))?;
    }
    w(format!("recovery_images {}", idem.images))?;
    w(format!("recovery_schedules {}", idem.recovery_schedules))?;
    w(format!("recovery_mismatches {}", idem.mismatches.len()))?;
    for m in &idem.mismatches {
        w(format!("mismatch {m}"))?;
    }
    w(format!("violations {}", report.violation_count))?;
    for v in &report.violations {
        w(format!("violation {v}"))?;
    }
    if report.violation_count == 0 && idem.mismatches.is_empty() {
        return Ok(Status::Ok);
    }
    if report.violation_count > 0 {
        let small = harness::minimize(&script, &config, &base);
        w(format!("minimized {} steps", small.steps.len()))?;
        for line in small.to_string().lines() {
            w(format!("  {line}"))?;
        }
    }
    Ok(Status::Failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("16MiB").unwrap(), 16 << 20);
        assert_eq!(parse_size("8KiB").unwrap(), 8192);
        assert_eq!(parse_size("1GiB").unwrap(), 1 << 30);
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert!(parse_size("16MB").is_err());
        assert!(parse_size("lots").is_err());
    }
}
