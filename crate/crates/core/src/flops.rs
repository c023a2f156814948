//! Multiply-add accounting.
//!
//! The cache counts what it executes; the closed forms here recompute the
//! same numbers from `(k, N, d, d_ff, m)` so the two can be cross-checked.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::cache::TraceRecord;
use crate::model::ModelConfig;
use crate::proxy::IdentifierKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    pub qkv: u64,
    pub attn_scores: u64,
    pub attn_mix: u64,
    pub wo: u64,
    pub ffn: u64,
    pub identify: u64,
    /// Norms, softmax exponentials and gating.
    pub other: u64,
}

impl FlopCounts {
    /// Q/K/V, scores, mixing and output projection.
    pub fn attention(&self) -> u64 {
        self.qkv + self.attn_scores + self.attn_mix + self.wo
    }

    pub fn attention_ffn(&self) -> u64 {
        self.attention() + self.ffn
    }

    pub fn total(&self) -> u64 {
        self.attention_ffn() + self.identify + self.other
    }
}

impl Add for FlopCounts {
    type Output = FlopCounts;

    fn add(mut self, rhs: FlopCounts) -> FlopCounts {
        self += rhs;
        self
    }
}

impl AddAssign for FlopCounts {
    fn add_assign(&mut self, r: FlopCounts) {
        self.qkv += r.qkv;
        self.attn_scores += r.attn_scores;
        self.attn_mix += r.attn_mix;
        self.wo += r.wo;
        self.ffn += r.ffn;
        self.identify += r.identify;
        self.other += r.other;
    }
}

/// Attention and FFN cost of recomputing `k` of `n` rows in one layer.
pub fn layer_compute(cfg: &ModelConfig, n: usize, k: usize) -> FlopCounts {
    let (n, k, d, f, heads) = (
        n as u64,
        k as u64,
        cfg.d as u64,
        cfg.d_ff as u64,
        cfg.heads as u64,
    );
    FlopCounts {
        qkv: 3 * k * d * d,
        attn_scores: k * n * d,
        attn_mix: k * n * d,
        wo: k * d * d,
        ffn: k * (2 * d * f + f * d),
        identify: 0,
        other: k * (2 * d + heads * n + f),
    }
}

/// Multiply-adds spent projecting `n` rows into identifier space.
pub fn identifier_projection(cfg: &ModelConfig, kind: IdentifierKind, n: usize) -> u64 {
    let (n, d) = (n as u64, cfg.d as u64);
    match kind {
        IdentifierKind::ValueFull | IdentifierKind::Query | IdentifierKind::Key => n * d * d,
        IdentifierKind::Singular(r) => n * r as u64 * d,
        IdentifierKind::AttnOutput => 4 * n * d * d + 2 * n * n * d,
        IdentifierKind::AttnInput | IdentifierKind::Random(_) | IdentifierKind::Oracle => 0,
    }
}

/// Identification cost at a post-warmup step: projection plus `n·m`
/// similarity multiply-adds.
pub fn identify_cost(cfg: &ModelConfig, kind: IdentifierKind, n: usize) -> u64 {
    identifier_projection(cfg, kind, n) + (n * kind.width(cfg.d)) as u64
}

/// Closed-form counts for one trace record.
pub fn record_counts(cfg: &ModelConfig, rec: &TraceRecord) -> FlopCounts {
    let mut c = layer_compute(cfg, rec.n, rec.k);
    if let Some(kind) = rec.identifier {
        c.identify = if rec.warmup {
            identifier_projection(cfg, kind, rec.n)
        } else {
            identify_cost(cfg, kind, rec.n)
        };
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub layer: usize,
    pub counts: FlopCounts,
}

/// Per-(layer, step) multiply-add counters for a decode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub entries: Vec<LedgerEntry>,
}

impl FlopLedger {
    pub fn total(&self) -> FlopCounts {
        self.entries
            .iter()
            .fold(FlopCounts::default(), |a, e| a + e.counts)
    }

    pub fn steps(&self) -> usize {
        self.entries.iter().map(|e| e.step + 1).max().unwrap_or(0)
    }

    pub fn step_total(&self, step: usize) -> FlopCounts {
        self.entries
            .iter()
            .filter(|e| e.step == step)
            .fold(FlopCounts::default(), |a, e| a + e.counts)
    }
}

/// Rebuilds the ledger of a decode from its trace with the closed forms.
pub fn flop_count(cfg: &ModelConfig, trace: &[TraceRecord]) -> FlopLedger {
    FlopLedger {
        entries: trace
            .iter()
            .map(|r| LedgerEntry {
                step: r.step,
                layer: r.layer,
                counts: record_counts(cfg, r),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_ff: 16,
            heads: 2,
            layers: 1,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn dense_qkv_count() {
        assert_eq!(layer_compute(&cfg(), 4, 4).qkv, 768);
        assert_eq!(layer_compute(&cfg(), 4, 1).qkv, 192);
    }

    #[test]
    fn full_breakdown() {
        let c = layer_compute(&cfg(), 4, 2);
        assert_eq!(c.attn_scores, 2 * 4 * 8);
        assert_eq!(c.attn_mix, 2 * 4 * 8);
        assert_eq!(c.wo, 2 * 64);
        assert_eq!(c.ffn, 2 * (2 * 8 * 16 + 16 * 8));
    }

    #[test]
    fn singular_identify_ratio() {
        let cfg = ModelConfig {
            d: 256,
            ..ModelConfig::default()
        };
        let full = identifier_projection(&cfg, IdentifierKind::ValueFull, 64);
        let sing = identifier_projection(&cfg, IdentifierKind::Singular(8), 64);
        assert_eq!(full, 32 * sing);
        let ratio = identify_cost(&cfg, IdentifierKind::Singular(8), 64) as f64
            / identify_cost(&cfg, IdentifierKind::ValueFull, 64) as f64;
        assert!((ratio - 1.0 / 32.0).abs() < 1e-12);
    }
}
