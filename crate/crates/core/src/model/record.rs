use std::sync::{Arc, Mutex};

use super::{LayerwiseModel, LayerwiseStep, ModelDims, Session, TokenSequence};
use crate::error::Result;

type Log = Arc<Mutex<Vec<LayerwiseStep>>>;

/// Wraps a model and keeps every step it hands out, in call order.
pub struct Recorder<M> {
    inner: M,
    log: Log,
    hidden: bool,
}

impl<M: LayerwiseModel> Recorder<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            log: Arc::default(),
            hidden: false,
        }
    }

    /// Also captures hidden states, whatever the caller asks for.
    pub fn with_hidden(inner: M) -> Self {
        Self {
            hidden: true,
            ..Self::new(inner)
        }
    }

    /// Drains the recorded steps.
    pub fn take(&self) -> Vec<LayerwiseStep> {
        std::mem::take(&mut *self.log.lock().expect("recorder lock poisoned"))
    }
}

impl<M: LayerwiseModel> LayerwiseModel for Recorder<M> {
    fn dims(&self) -> ModelDims {
        self.inner.dims()
    }

    fn session(&self, prompt: &TokenSequence, want_hidden: bool) -> Result<Box<dyn Session>> {
        Ok(Box::new(RecordingSession {
            inner: self.inner.session(prompt, want_hidden || self.hidden)?,
            log: Arc::clone(&self.log),
        }))
    }
}

struct RecordingSession {
    inner: Box<dyn Session>,
    log: Log,
}

impl Session for RecordingSession {
    fn step(&mut self) -> Result<LayerwiseStep> {
        let step = self.inner.step()?;
        self.log.lock().expect("recorder lock poisoned").push(step.clone());
        Ok(step)
    }

    fn push(&mut self, token: u32) -> Result<()> {
        self.inner.push(token)
    }

    fn fork(&self) -> Box<dyn Session> {
        Box::new(RecordingSession {
            inner: self.inner.fork(),
            log: Arc::clone(&self.log),
        })
    }
}
