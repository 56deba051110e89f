//! `LWT1` layerwise trace files.
//!
//! Little-endian throughout. A 28-byte header
//!
//! ```text
//! magic "LWTR" | version u32 = 1 | num_layers u32 | vocab_size u32
//! | hidden_dim u32 (0 when absent) | num_steps u32 | flags u32 (bit0: hidden)
//! ```
//!
//! is followed, for each step, by the `num_layers x vocab_size` f32 early
//! logits and then, when bit0 is set, the `num_layers x hidden_dim` f32 hidden
//! states, both row-major.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{LayerwiseModel, LayerwiseStep, ModelDims, Session, TokenSequence};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LWTR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
const FLAG_HIDDEN: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct TraceHeader {
    pub version: u32,
    pub num_layers: u32,
    pub vocab_size: u32,
    pub hidden_dim: u32,
    pub num_steps: u32,
    pub flags: u32,
}

impl TraceHeader {
    pub fn has_hidden(&self) -> bool {
        self.flags & FLAG_HIDDEN != 0
    }

    fn step_bytes(&self) -> u64 {
        let mut per = self.num_layers as u64 * self.vocab_size as u64;
        if self.has_hidden() {
            per += self.num_layers as u64 * self.hidden_dim as u64;
        }
        per * 4
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.num_steps as u64 * self.step_bytes()
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedTrace {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::TraceFormat(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                MAGIC
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let header = Self {
            version: word(0),
            num_layers: word(1),
            vocab_size: word(2),
            hidden_dim: word(3),
            num_steps: word(4),
            flags: word(5),
        };
        if header.version != VERSION {
            return Err(Error::TraceFormat(format!(
                "unsupported version {}, expected {VERSION}",
                header.version
            )));
        }
        if header.flags & !FLAG_HIDDEN != 0 {
            return Err(Error::TraceFormat(format!("unknown flag bits {:#x}", header.flags)));
        }
        if header.num_layers == 0 || header.vocab_size == 0 {
            return Err(Error::TraceFormat("zero layers or vocabulary".into()));
        }
        if header.has_hidden() != (header.hidden_dim != 0) {
            return Err(Error::TraceFormat(
                "hidden flag disagrees with hidden_dim".into(),
            ));
        }
        Ok(header)
    }
}

/// An in-memory trace: a header plus its steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    header: TraceHeader,
    steps: Vec<LayerwiseStep>,
}

impl Trace {
    /// Builds a trace from steps that all share one shape. Hidden states are
    /// kept only when every step carries them.
    pub fn from_steps(steps: Vec<LayerwiseStep>) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::invalid("a trace needs at least one step"))?;
        let dims = first.dims();
        let hidden = steps.iter().all(|s| s.hidden().is_some());
        let mixed = !hidden && steps.iter().any(|s| s.hidden().is_some());
        if mixed {
            return Err(Error::invalid("some steps carry hidden states and some do not"));
        }
        for (i, s) in steps.iter().enumerate() {
            let d = s.dims();
            if d.num_layers != dims.num_layers
                || d.vocab_size != dims.vocab_size
                || (hidden && d.hidden_dim != dims.hidden_dim)
            {
                return Err(Error::invalid(format!("step {i} has shape {d:?}, expected {dims:?}")));
            }
        }
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
        };
        let header = TraceHeader {
            version: VERSION,
            num_layers: to_u32(dims.num_layers, "num_layers")?,
            vocab_size: to_u32(dims.vocab_size, "vocab_size")?,
            hidden_dim: if hidden { to_u32(dims.hidden_dim, "hidden_dim")? } else { 0 },
            num_steps: to_u32(steps.len(), "num_steps")?,
            flags: if hidden { FLAG_HIDDEN } else { 0 },
        };
        Ok(Self { header, steps })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_layers: self.header.num_layers as usize,
            vocab_size: self.header.vocab_size as usize,
            hidden_dim: self.header.hidden_dim as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[LayerwiseStep] {
        &self.steps
    }

    pub fn step(&self, index: usize) -> Result<&LayerwiseStep> {
        self.steps.get(index).ok_or_else(|| {
            Error::invalid(format!(
                "step index {index} out of range for trace of {} steps",
                self.steps.len()
            ))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.file_len() as usize);
        out.extend_from_slice(&MAGIC);
        for w in [
            self.header.version,
            self.header.num_layers,
            self.header.vocab_size,
            self.header.hidden_dim,
            self.header.num_steps,
            self.header.flags,
        ] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for s in &self.steps {
            for v in s.early_logits() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if self.header.has_hidden() {
                for v in s.hidden().expect("checked when built") {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = TraceHeader::parse(bytes)?;
        let expected = header.file_len();
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(Error::TruncatedTrace { expected, actual });
        }
        if actual > expected {
            return Err(Error::TraceFormat(format!(
                "{} trailing bytes after {expected}-byte payload",
                actual - expected
            )));
        }
        let n = header.num_layers as usize;
        let v = header.vocab_size as usize;
        let d = header.hidden_dim as usize;
        let read_f32s = |start: usize, count: usize| -> Vec<f32> {
            bytes[start..start + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let mut offset = HEADER_LEN;
        let mut steps = Vec::with_capacity(header.num_steps as usize);
        for i in 0..header.num_steps as usize {
            let logits = read_f32s(offset, n * v);
            offset += 4 * n * v;
            let hidden = if header.has_hidden() {
                let h = read_f32s(offset, n * d);
                offset += 4 * n * d;
                Some((d, h))
            } else {
                None
            };
            let step = LayerwiseStep::new(n, v, logits, hidden)
                .map_err(|e| Error::TraceFormat(format!("step {i}: {e}")))?;
            steps.push(step);
        }
        Ok(Self { header, steps })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Replays recorded steps as a [`LayerwiseModel`].
///
/// Every `step()` on any session opened from the same handle returns the next
/// recorded step, in call order. A deterministic decode that consumed the
/// steps while recording therefore reproduces itself on replay.
#[derive(Debug, Clone)]
pub struct TraceReplayModel {
    trace: Arc<Trace>,
    cursor: Arc<AtomicUsize>,
}

impl TraceReplayModel {
    pub fn new(trace: Trace) -> Self {
        Self {
            trace: Arc::new(trace),
            cursor: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Trace::open(path)?))
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Random access to a recorded step.
    pub fn step(&self, index: usize) -> Result<LayerwiseStep> {
        self.trace.step(index).cloned()
    }

    pub fn position(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }

    pub fn rewind(&self) {
        self.cursor.store(0, Ordering::SeqCst);
    }
}

impl LayerwiseModel for TraceReplayModel {
    fn dims(&self) -> ModelDims {
        self.trace.dims()
    }

    fn session(&self, prompt: &TokenSequence, _want_hidden: bool) -> Result<Box<dyn Session>> {
        prompt.validate(self.trace.dims().vocab_size)?;
        Ok(Box::new(ReplaySession {
            trace: Arc::clone(&self.trace),
            cursor: Arc::clone(&self.cursor),
        }))
    }
}

struct ReplaySession {
    trace: Arc<Trace>,
    cursor: Arc<AtomicUsize>,
}

impl Session for ReplaySession {
    fn step(&mut self) -> Result<LayerwiseStep> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.trace
            .step(i)
            .cloned()
            .map_err(|_| Error::Model(format!("trace exhausted after {} steps", self.trace.len())))
    }

    fn push(&mut self, token: u32) -> Result<()> {
        if token as usize >= self.trace.dims().vocab_size {
            return Err(Error::Model(format!("token id {token} out of range")));
        }
        Ok(())
    }

    fn fork(&self) -> Box<dyn Session> {
        Box::new(ReplaySession {
            trace: Arc::clone(&self.trace),
            cursor: Arc::clone(&self.cursor),
        })
    }
}
