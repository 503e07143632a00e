//! Small transformer over a scene prompt followed by the 16-token action
//! block. Prompt tokens attend causally among themselves; action tokens see
//! the whole prompt and each other. Everything is f64 with hand-written
//! backward passes.

mod checkpoint;
mod forward;
mod loss;
mod optim;
mod params;
mod prompt;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    backward_action, backward_prompt, forward_action, forward_full, forward_prompt, goal_logits, predict_logits, token_prob, ActionLogits, ActionPass, FullPass, GoalLogits,
    PromptKv, PromptPass,
};
pub use loss::{
    axis_log_softmax, dlm_loss, goal_loss, log_softmax, masked_only_dlm_loss, sap_loss, softmax, uniform_dlm_loss,
};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Grads, Params, ParamIndex, Tensor};
pub use prompt::{build_prompt, forward_mask, PromptInput, PROMPT_CHANNELS};

use serde::{Deserialize, Serialize};

use crate::codec::{Vocabulary, BLOCK_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub prompt_ffn_dim: usize,
    pub action_ffn_dim: usize,
    /// When false, action tokens go through the prompt FFN instead of their
    /// own narrow branch (benchmark baseline).
    #[serde(default = "yes")]
    pub action_expert: bool,
    pub patch_size: usize,
    pub bins_x: usize,
    pub bins_y: usize,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Two layers, 64 wide; used by tests and the acceptance runs.
    pub fn tiny(vocab: &Vocabulary) -> Self {
        Self {
            layers: 2,
            heads: 4,
            embed_dim: 64,
            prompt_ffn_dim: 128,
            action_ffn_dim: 64,
            action_expert: true,
            patch_size: 16,
            bins_x: vocab.bins_x,
            bins_y: vocab.bins_y,
        }
    }

    /// Desk-scale default.
    pub fn desk(vocab: &Vocabulary) -> Self {
        Self { layers: 4, heads: 8, embed_dim: 256, prompt_ffn_dim: 1024, action_ffn_dim: 256, ..Self::tiny(vocab) }
    }

    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.prompt_ffn_dim == 0 || self.action_ffn_dim == 0 {
            return e(format!("model dimensions must be positive: {self:?}"));
        }
        if self.embed_dim % self.heads != 0 {
            return e(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.action_ffn_dim >= self.prompt_ffn_dim {
            return e(format!("action_ffn_dim {} must be smaller than prompt_ffn_dim {}", self.action_ffn_dim, self.prompt_ffn_dim));
        }
        if self.patch_size == 0 || self.bins_x % self.patch_size != 0 || self.bins_y % self.patch_size != 0 {
            return e(format!("patch size {} must divide the {}x{} grid", self.patch_size, self.bins_y, self.bins_x));
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.bins_x != self.bins_x || vocab.bins_y != self.bins_y {
            return Err(Error::Config(format!(
                "model built for {}x{} bins, vocabulary has {}x{}",
                self.bins_x, self.bins_y, vocab.bins_x, vocab.bins_y
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patches(&self) -> usize {
        (self.bins_x / self.patch_size) * (self.bins_y / self.patch_size)
    }

    /// Patch tokens, then the instruction token, then the ego-state token.
    pub fn prompt_len(&self) -> usize {
        self.patches() + 2
    }

    pub fn feature_dim(&self) -> usize {
        PROMPT_CHANNELS * self.patch_size * self.patch_size
    }

    /// Token embedding rows: every coordinate token plus the mask token.
    pub fn token_rows(&self) -> usize {
        self.bins_x + self.bins_y + 1
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len() + BLOCK_LEN
    }

    pub fn layout(&self) -> AttentionLayout {
        AttentionLayout::new(self.prompt_len(), BLOCK_LEN)
    }
}

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub prompt_len: usize,
    pub block_len: usize,
    allow: Vec<bool>,
}

impl AttentionLayout {
    pub fn new(prompt_len: usize, block_len: usize) -> Self {
        let n = prompt_len + block_len;
        let mut allow = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                allow[q * n + k] = if q < prompt_len { k <= q } else { true };
            }
        }
        Self { prompt_len, block_len, allow }
    }

    pub fn len(&self) -> usize {
        self.prompt_len + self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.len() + key]
    }
}
