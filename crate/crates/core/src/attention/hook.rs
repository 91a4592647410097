use candle_core::Tensor;

use super::site::AttentionSite;
use crate::error::Result;

/// Callback invoked at every attention site with the post-softmax map.
///
/// `probs` has shape `[batch, heads, queries, keys]`, where `batch` is 1 for a
/// single unconditional pass and 2 for a classifier-free-guidance pass
/// (`[unconditional, conditional]`). The returned tensor replaces the map
/// before it multiplies the values; returning `probs` unchanged leaves the
/// forward pass bit-identical.
pub trait AttentionHook {
    fn on_attention(&mut self, site: &AttentionSite, probs: Tensor) -> Result<Tensor>;
}

/// Hook that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl AttentionHook for NoHook {
    fn on_attention(&mut self, _site: &AttentionSite, probs: Tensor) -> Result<Tensor> {
        Ok(probs)
    }
}

/// Records the order in which sites are visited. Used to check the site table.
#[derive(Debug, Default, Clone)]
pub struct SiteTrace {
    pub visited: Vec<AttentionSite>,
}

impl AttentionHook for SiteTrace {
    fn on_attention(&mut self, site: &AttentionSite, probs: Tensor) -> Result<Tensor> {
        self.visited.push(*site);
        Ok(probs)
    }
}
