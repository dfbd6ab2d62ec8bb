//! Attention masks over the three-segment input layout.
//!
//! A sequence is laid out as segment ① (`k` context tokens), a block of `m`
//! latent tokens, and segment ④ (`t` tokens: a reconstruction instruction
//! followed by the recovered context). The reconstruction mask keeps the
//! whole sequence causal but forbids segment-④ rows from attending to
//! segment ①, so everything segment ④ reads about the context must flow
//! through the latent K/V rows.

use crate::error::{GrcError, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Token layout of one training/compression sequence.
///
/// `recon_start_offset` is the index *within segment ④* where the recovered
/// context begins (everything before it is the reconstruction instruction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub k: usize,
    pub m: usize,
    pub t: usize,
    pub recon_start_offset: usize,
}

impl SegmentLayout {
    pub fn new(k: usize, m: usize, t: usize, recon_start_offset: usize) -> Result<Self> {
        let layout = SegmentLayout {
            k,
            m,
            t,
            recon_start_offset,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t > 0 && self.recon_start_offset >= self.t {
            return Err(GrcError::InvalidConfig(format!(
                "recon_start_offset {} must be < t {}",
                self.recon_start_offset, self.t
            )));
        }
        Ok(())
    }

    /// Total sequence length `n = k + m + t`.
    pub fn total_len(&self) -> usize {
        self.k + self.m + self.t
    }

    /// Absolute positions of the latent block.
    pub fn latent_range(&self) -> Range<usize> {
        self.k..self.k + self.m
    }

    /// Absolute positions of segment ④.
    pub fn second_segment_range(&self) -> Range<usize> {
        self.k + self.m..self.total_len()
    }

    /// Absolute positions of the recovered context `c` inside segment ④.
    pub fn recon_range(&self) -> Range<usize> {
        self.k + self.m + self.recon_start_offset..self.total_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaskKind {
    Causal,
    /// Causal, except rows at positions `>= k + m` may not attend to
    /// columns `< k`.
    Grc { k: usize, m: usize },
}

/// An attention mask over `n` positions, exposed as an allowed-pair
/// predicate. Every mask built here is causal (`allowed(i, j) ⇒ j ≤ i`)
/// and per-row contiguous, which the attention kernels exploit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    /// May query row `i` attend to key column `j`?
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        if j > i || i >= self.n {
            return false;
        }
        match self.kind {
            MaskKind::Causal => true,
            MaskKind::Grc { k, m } => !(i >= k + m && j < k),
        }
    }

    /// The allowed columns for row `i`, which is always the contiguous
    /// range `row_start(i)..=i` for the masks built in this module.
    pub fn row_start(&self, i: usize) -> usize {
        match self.kind {
            MaskKind::Causal => 0,
            MaskKind::Grc { k, m } => {
                if i >= k + m {
                    k
                } else {
                    0
                }
            }
        }
    }

    pub fn allowed_range(&self, i: usize) -> Range<usize> {
        self.row_start(i)..i + 1
    }

    /// Dense boolean materialization. Only supported for `n ≤ 4096`.
    pub fn to_dense(&self) -> Result<Vec<Vec<bool>>> {
        if self.n > 4096 {
            return Err(GrcError::InvalidInput(format!(
                "dense mask materialization limited to n ≤ 4096, got {}",
                self.n
            )));
        }
        Ok((0..self.n)
            .map(|i| (0..self.n).map(|j| self.allowed(i, j)).collect())
            .collect())
    }
}

/// Plain causal mask: `allowed(i, j) ⇔ j ≤ i`.
pub fn build_causal_mask(n: usize) -> AttentionMask {
    AttentionMask {
        n,
        kind: MaskKind::Causal,
    }
}

/// Reconstruction mask over the segmented layout: segment ① is internally
/// causal, latent rows attend causally to ① and earlier latents, and
/// segment-④ rows attend to all latents and causally within ④ but never
/// to segment ①.
pub fn build_grc_mask(layout: &SegmentLayout) -> AttentionMask {
    AttentionMask {
        n: layout.total_len(),
        kind: MaskKind::Grc {
            k: layout.k,
            m: layout.m,
        },
    }
}
