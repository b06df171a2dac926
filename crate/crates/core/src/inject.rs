//! The thinking-token transform: insert N copies of `<T>` after every
//! observed token, and derive the loss masks that exclude `<T>` targets
//! from perplexity.

use crate::corpus::TokenStream;
use crate::error::{Error, Result};

/// How many `<T>` tokens follow each observed token. `n = 0` makes the
/// transform the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThinkingTokenConfig {
    pub n: usize,
    pub thinking_id: u32,
}

impl ThinkingTokenConfig {
    pub fn new(n: usize, thinking_id: u32) -> Self {
        ThinkingTokenConfig { n, thinking_id }
    }
}

/// Per-target-position flags; `flags[i]` is false exactly when the target
/// at position i is the thinking token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    pub flags: Vec<bool>,
    pub counted: usize,
}

/// Insert `cfg.n` thinking tokens after every token of `stream`, `<eos>`
/// included. Rejects streams that already contain the thinking id so the
/// transform cannot be applied twice.
pub fn inject(stream: &TokenStream, cfg: ThinkingTokenConfig) -> Result<TokenStream> {
    if cfg.n > 0 && stream.ids.contains(&cfg.thinking_id) {
        return Err(Error::AlreadyInjected);
    }
    if cfg.n == 0 {
        return Ok(stream.clone());
    }
    let mut ids = Vec::with_capacity(stream.ids.len() * (1 + cfg.n));
    for &id in &stream.ids {
        ids.push(id);
        for _ in 0..cfg.n {
            ids.push(cfg.thinking_id);
        }
    }
    Ok(TokenStream { ids, source_name: stream.source_name.clone() })
}

/// Remove every occurrence of `thinking_id`, preserving the order of the
/// remaining tokens. Inverse of [`inject`] on streams that were free of
/// the thinking token.
pub fn strip(stream: &TokenStream, thinking_id: u32) -> TokenStream {
    TokenStream {
        ids: stream.ids.iter().copied().filter(|&id| id != thinking_id).collect(),
        source_name: stream.source_name.clone(),
    }
}

/// Flags aligned 1:1 with `targets`: true where the target is a real token,
/// false where it is the thinking token.
pub fn derive_loss_mask(targets: &[u32], thinking_id: u32) -> LossMask {
    let flags: Vec<bool> = targets.iter().map(|&t| t != thinking_id).collect();
    let counted = flags.iter().filter(|&&f| f).count();
    LossMask { flags, counted }
}
