//! Workload scripts for crash testing.
//!
//! One command per line, `#` starts a comment:
//!
//! ```text
//! create A 4 k1          # 4-page PMO, read and write key k1
//! attach A w k1
//! write A 2 0xA5         # stamp the first and last line of page 2
//! write A 2 0xA5 128 64  # fill bytes 128..192 of page 2
//! psync A
//! detach A
//! destroy A k1
//! crashpoints all
//! ```
//!
//! Keys are hex (`0x..`), decimal, or up to 8 ASCII bytes read as a
//! little-endian integer.

use std::fmt;
use std::str::FromStr;

use crate::store::AccessMode;
use crate::{Error, Result, LINE_SIZE, PAGE_SIZE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Create {
        name: String,
        pages: u64,
        key: Key,
    },
    Attach {
        name: String,
        mode: AccessMode,
        key: Key,
    },
    Write {
        name: String,
        page: u64,
        byte: u8,
        span: Option<(u64, u64)>,
    },
    Psync {
        name: String,
    },
    Detach {
        name: String,
    },
    Destroy {
        name: String,
        key: Key,
    },
}

impl Step {
    pub fn name(&self) -> &str {
        match self {
            Step::Create { name, .. }
            | Step::Attach { name, .. }
            | Step::Write { name, .. }
            | Step::Psync { name }
            | Step::Detach { name }
            | Step::Destroy { name, .. } => name,
        }
    }

    /// Byte ranges of the PMO a write step fills.
    pub fn write_ranges(page: u64, span: Option<(u64, u64)>) -> Vec<(u64, u64)> {
        let base = page * PAGE_SIZE;
        match span {
            Some((off, len)) => vec![(base + off, len)],
            None => vec![(base, LINE_SIZE), (base + PAGE_SIZE - LINE_SIZE, LINE_SIZE)],
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Create { name, pages, key } => write!(f, "create {name} {pages} {key}"),
            Step::Attach { name, mode, key } => write!(f, "attach {name} {mode} {key}"),
            Step::Write {
                name,
                page,
                byte,
                span,
            } => {
                write!(f, "write {name} {page} {byte:#04x}")?;
                if let Some((off, len)) = span {
                    write!(f, " {off} {len}")?;
                }
                Ok(())
            }
            Step::Psync { name } => write!(f, "psync {name}"),
            Step::Detach { name } => write!(f, "detach {name}"),
            Step::Destroy { name, key } => write!(f, "destroy {name} {key}"),
        }
    }
}

/// An access key, remembering how it was spelled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Key {
    pub value: u64,
    text: String,
}

impl Key {
    pub fn new(value: u64) -> Self {
        Key {
            value,
            text: format!("{value:#x}"),
        }
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let value = if let Some(hex) = s.strip_prefix("0x") {
            u64::from_str_radix(hex, 16).ok()
        } else if s.bytes().all(|b| b.is_ascii_digit()) {
            s.parse().ok()
        } else if s.len() <= 8 && s.is_ascii() {
            let mut buf = [0u8; 8];
            buf[..s.len()].copy_from_slice(s.as_bytes());
            Some(u64::from_le_bytes(buf))
        } else {
            None
        };
        value
            .map(|value| Key {
                value,
                text: s.to_owned(),
            })
            .ok_or_else(|| Error::Config(format!("bad key {s:?}")))
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Script {
    pub steps: Vec<Step>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            let step = parse_line(&words).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
            steps.extend(step);
        }
        Ok(Script { steps })
    }

    pub fn without(&self, index: usize) -> Script {
        let mut steps = self.steps.clone();
        steps.remove(index);
        Script { steps }
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        writeln!(f, "crashpoints all")
    }
}

fn num(s: &str) -> Result<u64> {
    let v = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    v.map_err(|_| Error::Config(format!("bad number {s:?}")))
}

fn parse_line(w: &[&str]) -> Result<Option<Step>> {
    let arity = |n: &[usize]| -> Result<()> {
        if n.contains(&w.len()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "wrong number of arguments to {}",
                w[0]
            )))
        }
    };
    let name = || w[1].to_owned();
    Ok(Some(match w[0] {
        "create" => {
            arity(&[4])?;
            let pages = num(w[2])?;
            if pages == 0 {
                return Err(Error::Config("create needs at least one page".into()));
            }
            Step::Create {
                name: name(),
                pages,
                key: w[3].parse()?,
            }
        }
        "attach" => {
            arity(&[4])?;
            let mode = w[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad mode {:?}", w[2])))?;
            Step::Attach {
                name: name(),
                mode,
                key: w[3].parse()?,
            }
        }
        "write" => {
            arity(&[4, 6])?;
            let byte = u8::try_from(num(w[3])?)
                .map_err(|_| Error::Config(format!("byte {:?} out of range", w[3])))?;
            let span = if w.len() == 6 {
                let (off, len) = (num(w[4])?, num(w[5])?);
                if len == 0 || off + len > PAGE_SIZE {
                    return Err(Error::Config(format!(
                        "span {off}+{len} must lie within one page"
                    )));
                }
                Some((off, len))
            } else {
                None
            };
            Step::Write {
                name: name(),
                page: num(w[2])?,
                byte,
                span,
            }
        }
        "psync" => {
            arity(&[2])?;
            Step::Psync { name: name() }
        }
        "detach" => {
            arity(&[2])?;
            Step::Detach { name: name() }
        }
        "destroy" => {
            arity(&[3])?;
            Step::Destroy {
                name: name(),
                key: w[2].parse()?,
            }
        }
        "crashpoints" => {
            if w.len() != 2 || w[1] != "all" {
                return Err(Error::Config("only `crashpoints all` is supported".into()));
            }
            return Ok(None);
        }
        other => return Err(Error::Config(format!("unknown command {other:?}"))),
    }))
}
