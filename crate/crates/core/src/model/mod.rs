//! The layerwise-model contract and its implementations.
//!
//! A layerwise model exposes, for the last position of a sequence, the
//! early-exit logits of every layer (and optionally the raw hidden states).
//! Layers are numbered from 1 to `N`; layer `N` is the final layer.

mod dump;
mod record;
mod toy;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dump::{load_weight_dump, write_weight_dump, DumpManifest, TensorEntry};
pub use record::Recorder;
pub use toy::{ToyModel, ToyModelConfig};
pub use trace::{Trace, TraceHeader, TraceReplayModel, HEADER_LEN, MAGIC, VERSION};

/// Token ids plus the number of leading pseudo-visual tokens.
///
/// The first `visual_prefix_len` ids index the visual embedding table; the
/// rest are text tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    #[serde(default)]
    pub visual_prefix_len: usize,
}

impl TokenSequence {
    pub fn text(ids: Vec<u32>) -> Self {
        Self {
            ids,
            visual_prefix_len: 0,
        }
    }

    pub fn with_visual(visual: &[u32], text: &[u32]) -> Self {
        let mut ids = visual.to_vec();
        ids.extend_from_slice(text);
        Self {
            ids,
            visual_prefix_len: visual.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Text tokens only.
    pub fn text_ids(&self) -> &[u32] {
        &self.ids[self.visual_prefix_len.min(self.ids.len())..]
    }

    /// The same sequence with its visual prefix removed.
    pub fn without_visual(&self) -> Result<TokenSequence> {
        if self.visual_prefix_len == 0 {
            return Err(Error::invalid("sequence has no visual prefix"));
        }
        Ok(TokenSequence::text(self.text_ids().to_vec()))
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if self.visual_prefix_len > self.ids.len() {
            return Err(Error::invalid(format!(
                "visual prefix length {} exceeds sequence length {}",
                self.visual_prefix_len,
                self.ids.len()
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_layers: usize,
    pub vocab_size: usize,
    /// Zero when hidden states are unavailable.
    pub hidden_dim: usize,
}

/// Per-layer readout at the last position of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseStep {
    num_layers: usize,
    vocab_size: usize,
    hidden_dim: usize,
    early_logits: Vec<f32>,
    hidden: Option<Vec<f32>>,
}

impl LayerwiseStep {
    /// Builds a step from a row-major `num_layers x vocab_size` logits matrix
    /// and an optional row-major `num_layers x hidden_dim` hidden-state matrix.
    pub fn new(
        num_layers: usize,
        vocab_size: usize,
        early_logits: Vec<f32>,
        hidden: Option<(usize, Vec<f32>)>,
    ) -> Result<Self> {
        if num_layers == 0 || vocab_size == 0 {
            return Err(Error::invalid("step needs at least one layer and one token"));
        }
        if early_logits.len() != num_layers * vocab_size {
            return Err(Error::invalid(format!(
                "early logits have {} entries, expected {num_layers}x{vocab_size}",
                early_logits.len()
            )));
        }
        if early_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite early logits"));
        }
        let (hidden_dim, hidden) = match hidden {
            Some((dim, h)) => {
                if dim == 0 || h.len() != num_layers * dim {
                    return Err(Error::invalid(format!(
                        "hidden states have {} entries, expected {num_layers}x{dim}",
                        h.len()
                    )));
                }
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("non-finite hidden states"));
                }
                (dim, Some(h))
            }
            None => (0, None),
        };
        Ok(Self {
            num_layers,
            vocab_size,
            hidden_dim,
            early_logits,
            hidden,
        })
    }

    /// Builds a step from one logits row per layer.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let vocab = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::invalid("ragged logits rows"));
        }
        Self::new(rows.len(), vocab, rows.concat(), None)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_layers: self.num_layers,
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
        }
    }

    /// Early-exit logits of a 1-based layer.
    ///
    /// Panics if `layer` is outside `1..=num_layers`.
    pub fn layer_logits(&self, layer: usize) -> &[f32] {
        assert!(
            (1..=self.num_layers).contains(&layer),
            "layer {layer} outside 1..={}",
            self.num_layers
        );
        let start = (layer - 1) * self.vocab_size;
        &self.early_logits[start..start + self.vocab_size]
    }

    pub fn final_logits(&self) -> &[f32] {
        self.layer_logits(self.num_layers)
    }

    pub fn early_logits(&self) -> &[f32] {
        &self.early_logits
    }

    pub fn hidden(&self) -> Option<&[f32]> {
        self.hidden.as_deref()
    }

    /// Hidden state of a 1-based layer, if recorded.
    pub fn layer_hidden(&self, layer: usize) -> Option<&[f32]> {
        let h = self.hidden.as_ref()?;
        if !(1..=self.num_layers).contains(&layer) {
            return None;
        }
        let start = (layer - 1) * self.hidden_dim;
        Some(&h[start..start + self.hidden_dim])
    }

    pub fn without_hidden(mut self) -> Self {
        self.hidden = None;
        self.hidden_dim = 0;
        self
    }
}

/// Incremental decoding state over one sequence.
pub trait Session: Send {
    /// Readout for the sequence as it currently stands.
    fn step(&mut self) -> Result<LayerwiseStep>;
    /// Appends a text token.
    fn push(&mut self, token: u32) -> Result<()>;
    /// Independent copy of this state (beam search).
    fn fork(&self) -> Box<dyn Session>;
}

/// A model that exposes per-layer early-exit logits at the last position.
pub trait LayerwiseModel: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// Opens a decoding session primed with `prompt`.
    fn session(&self, prompt: &TokenSequence, want_hidden: bool) -> Result<Box<dyn Session>>;

    fn forward(&self, seq: &TokenSequence, want_hidden: bool) -> Result<LayerwiseStep> {
        self.session(seq, want_hidden)?.step()
    }
}

impl LayerwiseModel for Box<dyn LayerwiseModel> {
    fn dims(&self) -> ModelDims {
        (**self).dims()
    }

    fn session(&self, prompt: &TokenSequence, want_hidden: bool) -> Result<Box<dyn Session>> {
        (**self).session(prompt, want_hidden)
    }
}
