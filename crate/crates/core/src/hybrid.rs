//! Hybrid-resolution frame layouts under a visual-token budget.
//!
//! Frames are split into groups of `L`. The first frame of each group is
//! encoded at `m` tokens and the rest at `m / c`, so a video of `N` full groups
//! costs `(1 + (L-1)/c)·N·m` tokens instead of `L·N·m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Frames per group (`L`).
    pub group_size: u64,
    /// Tokens for the high-resolution frame of each group (`m`).
    pub hi_res_tokens: u64,
    /// Resolution compression for the remaining frames (`c`).
    pub compression: u64,
}

impl HybridConfig {
    pub fn new(group_size: u64, hi_res_tokens: u64, compression: u64) -> Result<Self> {
        let cfg = Self {
            group_size,
            hi_res_tokens,
            compression,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `L = 1, c = 1`: every frame at `tokens`.
    pub fn uniform(tokens: u64) -> Self {
        Self {
            group_size: 1,
            hi_res_tokens: tokens,
            compression: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.hi_res_tokens == 0 || self.compression == 0 {
            return Err(Error::Configuration(format!(
                "group size, hi-res tokens and compression must be at least 1: {self:?}"
            )));
        }
        if !self.hi_res_tokens.is_multiple_of(self.compression) {
            return Err(Error::Configuration(format!(
                "hi-res tokens {} not divisible by compression {}",
                self.hi_res_tokens, self.compression
            )));
        }
        Ok(())
    }

    pub fn low_res_tokens(&self) -> u64 {
        self.hi_res_tokens / self.compression
    }

    /// `(1 + (L-1)/c)·N·m` in exact integer arithmetic.
    pub fn closed_form_total(&self, groups: u64) -> u64 {
        groups * (self.hi_res_tokens + (self.group_size - 1) * self.low_res_tokens())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frames: u64,
    pub groups: u64,
    pub per_frame_tokens: Vec<u64>,
    pub total_tokens: u64,
    pub avg_tokens_per_frame: f64,
}

/// Lays out `frames` frames; a trailing partial group still starts with a
/// high-resolution frame.
pub fn plan(frames: u64, config: &HybridConfig) -> Result<FramePlan> {
    config.validate()?;
    if frames == 0 {
        return Err(Error::InvalidInput("frame count must be at least 1".into()));
    }
    let groups = frames.div_ceil(config.group_size);
    let low = config.low_res_tokens();
    let per_frame_tokens: Vec<u64> = (0..frames)
        .map(|f| {
            if f % config.group_size == 0 {
                config.hi_res_tokens
            } else {
                low
            }
        })
        .collect();
    let total_tokens = per_frame_tokens.iter().sum();
    Ok(FramePlan {
        frames,
        groups,
        per_frame_tokens,
        total_tokens,
        avg_tokens_per_frame: total_tokens as f64 / frames as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub frames: u64,
    pub tokens_per_frame: u64,
}

/// Per-frame token allowance `floor(budget / frames)` for each frame count.
pub fn tradeoff_table(token_budget: u64, frame_counts: &[u64]) -> Result<Vec<TradeoffRow>> {
    if token_budget == 0 {
        return Err(Error::InvalidInput("token budget must be positive".into()));
    }
    frame_counts
        .iter()
        .map(|&frames| {
            if frames == 0 {
                return Err(Error::InvalidInput("frame count must be positive".into()));
            }
            Ok(TradeoffRow {
                frames,
                tokens_per_frame: token_budget / frames,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub uniform_frames: u64,
    pub uniform_tokens_per_frame: u64,
    pub uniform_total: u64,
    pub hybrid_frames: u64,
    pub hybrid: HybridConfig,
    pub hybrid_total: u64,
    pub hybrid_avg_tokens_per_frame: f64,
    /// `hybrid_total / uniform_total`.
    pub total_ratio: f64,
    /// High-res frame tokens relative to the uniform per-frame tokens.
    pub hi_res_advantage: f64,
}

pub fn compare_budgets(
    uniform_frames: u64,
    uniform_tokens: u64,
    hybrid_frames: u64,
    config: &HybridConfig,
) -> Result<BudgetComparison> {
    if uniform_tokens == 0 {
        return Err(Error::InvalidInput(
            "uniform tokens must be positive".into(),
        ));
    }
    let uniform = plan(uniform_frames, &HybridConfig::uniform(uniform_tokens))?;
    let hybrid = plan(hybrid_frames, config)?;
    Ok(BudgetComparison {
        uniform_frames,
        uniform_tokens_per_frame: uniform_tokens,
        uniform_total: uniform.total_tokens,
        hybrid_frames,
        hybrid: *config,
        hybrid_total: hybrid.total_tokens,
        hybrid_avg_tokens_per_frame: hybrid.avg_tokens_per_frame,
        total_ratio: hybrid.total_tokens as f64 / uniform.total_tokens as f64,
        hi_res_advantage: config.hi_res_tokens as f64 / uniform_tokens as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use proptest::prelude::*;

    fn default_cfg() -> HybridConfig {
        HybridConfig::new(4, 240, 3).unwrap()
    }

    #[test]
    fn default_layout_matches_reported_average() {
        let p = plan(1024, &default_cfg()).unwrap();
        assert_eq!(p.groups, 256);
        assert_eq!(p.total_tokens, 122_880);
        assert_eq!(p.avg_tokens_per_frame, 120.0);
        assert_eq!(&p.per_frame_tokens[..5], &[240, 80, 80, 80, 240]);
    }

    #[test]
    fn uniform_plan() {
        let p = plan(37, &HybridConfig::uniform(96)).unwrap();
        assert_eq!(p.total_tokens, 37 * 96);
        assert!(p.per_frame_tokens.iter().all(|&t| t == 96));
    }

    #[test]
    fn partial_group_keeps_hi_res_first() {
        let p = plan(1022, &default_cfg()).unwrap();
        // Independent enumeration of the per-frame costs.
        let mut want = 0u64;
        for f in 0..1022u64 {
            want += if f % 4 == 0 { 240 } else { 80 };
        }
        assert_eq!(want, 122_720);
        assert_eq!(p.total_tokens, want);
        assert_eq!(p.groups, 256);
        assert_eq!(&p.per_frame_tokens[1020..], &[240, 80]);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            HybridConfig::new(4, 240, 7),
            Err(Error::Configuration(_))
        ));
        assert!(HybridConfig::new(0, 240, 3).is_err());
        assert!(plan(0, &default_cfg()).is_err());
    }

    #[test]
    fn tradeoff_rows() {
        let rows = tradeoff_table(122_880, &[768, 1024, 128]).unwrap();
        let tpf: Vec<u64> = rows.iter().map(|r| r.tokens_per_frame).collect();
        assert_eq!(tpf, vec![160, 120, 960]);
        assert!(tradeoff_table(122_880, &[0]).is_err());
        assert!(tradeoff_table(0, &[10]).is_err());
    }

    #[test]
    fn comparisons() {
        let cmp = compare_budgets(1024, 120, 1024, &default_cfg()).unwrap();
        assert_eq!(cmp.uniform_total, 122_880);
        assert_eq!(cmp.hybrid_total, 122_880);
        assert_eq!(cmp.hi_res_advantage, 2.0);

        let cmp = compare_budgets(512, 240, 512, &default_cfg()).unwrap();
        assert_eq!(cmp.hybrid_total * 2, cmp.uniform_total);
        assert_eq!(cmp.total_ratio, 0.5);

        let cmp = compare_budgets(300, 64, 300, &HybridConfig::uniform(64)).unwrap();
        assert_eq!(cmp.hybrid_total, cmp.uniform_total);
        assert!(compare_budgets(10, 0, 10, &default_cfg()).is_err());
    }

    proptest! {
        #[test]
        fn closed_form_and_savings(l in 1u64..9, low in 1u64..50, c in 1u64..6, groups in 1u64..200) {
            let cfg = HybridConfig::new(l, low * c, c).unwrap();
            let p = plan(groups * l, &cfg).unwrap();
            prop_assert_eq!(p.total_tokens, cfg.closed_form_total(groups));
            prop_assert_eq!(p.total_tokens, p.per_frame_tokens.iter().sum::<u64>());
            let uniform = groups * l * cfg.hi_res_tokens;
            prop_assert!(p.total_tokens <= uniform);
            prop_assert_eq!(p.total_tokens == uniform, c == 1 || l == 1);
        }

        #[test]
        fn more_compression_never_costs_more(l in 1u64..9, frames in 1u64..500, c in 1u64..8) {
            let m = 840; // divisible by 1..=8
            let a = plan(frames, &HybridConfig::new(l, m, c).unwrap()).unwrap();
            let b = plan(frames, &HybridConfig::new(l, m, c + 1).unwrap()).unwrap();
            prop_assert!(b.total_tokens <= a.total_tokens);
        }
    }
}
