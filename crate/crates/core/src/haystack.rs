//! Synthetic needle-in-a-haystack retrieval over image-like items.
//!
//! Each trial draws a random unit query and one random unit key per item; the
//! needle item's key is the query itself. Items are laid out as image spans
//! with multimodal positions and the query sits right after the last item.
//! An item's score is the mean rotated query·key logit over its tokens, and a
//! trial succeeds when the needle strictly outscores every distractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dot, EmbeddingMode};
use crate::error::{Error, Result};
use crate::extension::{ContextWindow, ExtensionMethod, ExtensionPlan};
use crate::mrope::{assign_positions, DimensionLayout, ModalitySpan, Segment};
use crate::rotary::FrequencyBasis;

/// Default retrieval threshold for the effective length.
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct HaystackConfig {
    pub num_items: usize,
    pub tokens_per_item: usize,
    pub d_k: usize,
    pub needle_index: usize,
    pub trials: usize,
    pub seed: u64,
    pub embedding: EmbeddingMode,
}

impl HaystackConfig {
    pub fn new(num_items: usize, d_k: usize, embedding: EmbeddingMode) -> Self {
        Self {
            num_items,
            tokens_per_item: 64,
            d_k,
            needle_index: 0,
            trials: 200,
            seed: 0,
            embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Configuration(msg));
        if self.num_items == 0 {
            return bad("haystack needs at least one item".into());
        }
        if self.needle_index >= self.num_items {
            return bad(format!(
                "needle index {} out of range for {} items",
                self.needle_index, self.num_items
            ));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.tokens_per_item == 0 {
            return bad("tokens_per_item must be at least 1".into());
        }
        if self.d_k == 0 || !self.d_k.is_multiple_of(2) {
            return Err(Error::InvalidDimension(self.d_k));
        }
        match &self.embedding {
            EmbeddingMode::None => Ok(()),
            EmbeddingMode::Rope(basis) => basis.check_len(self.d_k),
            EmbeddingMode::MRope(basis, layout) => {
                layout.check_basis(basis)?;
                basis.check_len(self.d_k)
            }
        }
    }
}

/// Multimodal rotary embedding for `method`, extended from `window.original_length`
/// to `window.target_length`.
pub fn method_embedding(
    method: ExtensionMethod,
    d_k: usize,
    base: f64,
    window: ContextWindow,
) -> Result<EmbeddingMode> {
    let basis = FrequencyBasis::new(d_k, base)?;
    let layout = DimensionLayout::for_head_dim(d_k)?;
    let plan = ExtensionPlan::build(method, &basis, Some(&layout), window)?;
    Ok(EmbeddingMode::MRope(plan.basis(), layout))
}

/// Image grid with the squarest shape holding exactly `tokens` tokens.
pub fn item_grid(tokens: usize) -> (u64, u64) {
    let mut h = (tokens as f64).sqrt() as usize;
    while h > 1 && !tokens.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h as u64, (tokens / h) as u64)
}

/// Precomputed `(cos, sin)` per token and block, shared by every trial.
struct RotationTable {
    blocks: usize,
    /// Interleaved `[cos, sin]`, `blocks` pairs per token.
    entries: Vec<[f64; 2]>,
}

impl RotationTable {
    fn identity(tokens: usize, blocks: usize) -> Self {
        Self {
            blocks,
            entries: vec![[1.0, 0.0]; tokens * blocks],
        }
    }

    fn rotate(&self, token: usize, v: &[f64], out: &mut [f64]) {
        let row = &self.entries[token * self.blocks..(token + 1) * self.blocks];
        for (d, [cos, sin]) in row.iter().enumerate() {
            let (x, y) = (v[2 * d], v[2 * d + 1]);
            out[2 * d] = x * cos - y * sin;
            out[2 * d + 1] = x * sin + y * cos;
        }
    }
}

/// Angles for every item token plus the query (last row).
fn build_table(config: &HaystackConfig) -> Result<RotationTable> {
    let (grid_h, grid_w) = item_grid(config.tokens_per_item);
    let mut spans = vec![ModalitySpan::Image { grid_h, grid_w }; config.num_items];
    spans.push(ModalitySpan::Text { length: 1 });
    let tokens = config.num_items * config.tokens_per_item + 1;
    let blocks = config.d_k / 2;

    let table = match &config.embedding {
        EmbeddingMode::None => RotationTable::identity(tokens, blocks),
        EmbeddingMode::Rope(basis) => {
            let entries = (0..tokens as u64)
                .flat_map(|p| {
                    basis.angles().iter().map(move |theta| {
                        let (s, c) = (p as f64 * theta).sin_cos();
                        [c, s]
                    })
                })
                .collect();
            RotationTable { blocks, entries }
        }
        EmbeddingMode::MRope(basis, layout) => {
            let positions = assign_positions(&spans)?;
            let segments: Vec<Segment> = (0..blocks)
                .map(|d| layout.segment_of(d).expect("layout matches basis"))
                .collect();
            let entries = positions
                .iter()
                .flat_map(|pos| {
                    basis
                        .angles()
                        .iter()
                        .zip(&segments)
                        .map(move |(theta, seg)| {
                            let (s, c) = (pos.component(*seg) as f64 * theta).sin_cos();
                            [c, s]
                        })
                })
                .collect();
            RotationTable { blocks, entries }
        }
    };
    Ok(table)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn run_trial(config: &HaystackConfig, table: &RotationTable, trial: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(trial);

    let d_k = config.d_k;
    let query = unit_vector(&mut rng, d_k);
    let query_token = config.num_items * config.tokens_per_item;
    let mut rotated_query = vec![0.0; d_k];
    table.rotate(query_token, &query, &mut rotated_query);

    let mut scratch = vec![0.0; d_k];
    let mut needle_score = f64::NAN;
    let mut best_distractor = f64::NEG_INFINITY;
    for item in 0..config.num_items {
        let key = if item == config.needle_index {
            query.clone()
        } else {
            unit_vector(&mut rng, d_k)
        };
        let first = item * config.tokens_per_item;
        let mut total = 0.0;
        for token in first..first + config.tokens_per_item {
            table.rotate(token, &key, &mut scratch);
            total += dot(&rotated_query, &scratch);
        }
        let score = total / config.tokens_per_item as f64;
        if item == config.needle_index {
            needle_score = score;
        } else {
            best_distractor = best_distractor.max(score);
        }
    }
    needle_score > best_distractor
}

/// Fraction of trials in which the needle is retrieved.
///
/// Each trial seeds its own generator from `(seed, trial)`, so the result is
/// identical however the trials are scheduled.
pub fn run_haystack(config: &HaystackConfig) -> Result<f64> {
    config.validate()?;
    let table = build_table(config)?;
    let hits = (0..config.trials as u64)
        .into_par_iter()
        .filter(|&t| run_trial(config, &table, t))
        .count();
    Ok(hits as f64 / config.trials as f64)
}

/// Success rate as a function of the number of haystack items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaystackCurve {
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub context_items: usize,
    pub success_rate: f64,
}

impl HaystackCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self> {
        if points
            .windows(2)
            .any(|w| w[1].context_items <= w[0].context_items)
        {
            return Err(Error::InvalidInput(
                "curve item counts must strictly increase".into(),
            ));
        }
        Ok(Self { points })
    }
}

/// Evenly spaced needle depths `0, 0.1, …, 1`.
pub fn default_depths() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Success rate for each entry of `item_counts`, averaged over needle
/// placements at the given relative depths (0 = farthest from the query).
pub fn haystack_curve(
    template: &HaystackConfig,
    item_counts: &[usize],
    needle_depths: &[f64],
) -> Result<HaystackCurve> {
    if needle_depths.is_empty() {
        return Err(Error::InvalidInput(
            "at least one needle depth is required".into(),
        ));
    }
    if let Some(d) = needle_depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::InvalidInput(format!(
            "needle depth must lie in [0, 1], got {d}"
        )));
    }
    let mut counts = item_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let points = counts
        .into_iter()
        .map(|n| {
            let mut total = 0.0;
            for depth in needle_depths {
                let mut cfg = template.clone();
                cfg.num_items = n;
                cfg.needle_index = needle_index(n, *depth);
                total += run_haystack(&cfg)?;
            }
            Ok(CurvePoint {
                context_items: n,
                success_rate: total / needle_depths.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HaystackCurve::new(points)
}

/// Item index at relative depth `depth` among `num_items` items.
pub fn needle_index(num_items: usize, depth: f64) -> usize {
    (depth * num_items.saturating_sub(1) as f64).round() as usize
}

/// Largest item count whose success rate reaches `threshold`.
pub fn effective_length(curve: &HaystackCurve, threshold: f64) -> Result<Option<usize>> {
    if curve.points.is_empty() {
        return Err(Error::InvalidInput("empty haystack curve".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(curve
        .points
        .iter()
        .filter(|p| p.success_rate >= threshold)
        .map(|p| p.context_items)
        .max())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(context_items: usize, success_rate: f64) -> CurvePoint {
        CurvePoint {
            context_items,
            success_rate,
        }
    }

    fn mrope_config(num_items: usize, method: ExtensionMethod) -> HaystackConfig {
        let window = ContextWindow::new(64, 256).unwrap();
        let mut cfg = HaystackConfig::new(
            num_items,
            64,
            method_embedding(method, 64, 10_000.0, window).unwrap(),
        );
        cfg.tokens_per_item = 16;
        cfg.trials = 50;
        cfg
    }

    #[test]
    fn grids() {
        assert_eq!(item_grid(16), (4, 4));
        assert_eq!(item_grid(64), (8, 8));
        assert_eq!(item_grid(12), (3, 4));
        assert_eq!(item_grid(7), (1, 7));
        assert_eq!(item_grid(1), (1, 1));
    }

    #[test]
    fn single_item_always_succeeds() {
        let cfg = mrope_config(1, ExtensionMethod::Extrapolation);
        assert_eq!(run_haystack(&cfg).unwrap(), 1.0);
    }

    #[test]
    fn unrotated_needle_always_wins() {
        let mut cfg = HaystackConfig::new(40, 32, EmbeddingMode::None);
        cfg.tokens_per_item = 4;
        cfg.needle_index = 39;
        assert_eq!(run_haystack(&cfg).unwrap(), 1.0);
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let cfg = mrope_config(24, ExtensionMethod::Ntk);
        let a = run_haystack(&cfg).unwrap();
        let b = run_haystack(&cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let mut other = cfg.clone();
        other.seed = 99;
        // Different seeds are allowed to agree, but the run must still be valid.
        assert!((0.0..=1.0).contains(&run_haystack(&other).unwrap()));
    }

    #[test]
    fn rope_mode_runs_on_token_order() {
        let basis = FrequencyBasis::new(32, 10_000.0).unwrap();
        let mut cfg = HaystackConfig::new(8, 32, EmbeddingMode::Rope(basis));
        cfg.tokens_per_item = 4;
        cfg.trials = 20;
        let rate = run_haystack(&cfg).unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = mrope_config(4, ExtensionMethod::Pi);
        cfg.needle_index = 4;
        assert!(matches!(run_haystack(&cfg), Err(Error::Configuration(_))));
        let mut cfg = mrope_config(4, ExtensionMethod::Pi);
        cfg.trials = 0;
        assert!(run_haystack(&cfg).is_err());
        let mut cfg = mrope_config(4, ExtensionMethod::Pi);
        cfg.d_k = 32;
        assert!(run_haystack(&cfg).is_err());
        let cfg = HaystackConfig::new(0, 8, EmbeddingMode::None);
        assert!(run_haystack(&cfg).is_err());
    }

    #[test]
    fn effective_length_examples() {
        let curve =
            HaystackCurve::new(vec![point(10, 0.9), point(50, 0.65), point(100, 0.55)]).unwrap();
        assert_eq!(effective_length(&curve, 0.6).unwrap(), Some(50));
        let low = HaystackCurve::new(vec![point(10, 0.3), point(20, 0.1)]).unwrap();
        assert_eq!(effective_length(&low, 0.6).unwrap(), None);
        assert!(effective_length(&HaystackCurve { points: vec![] }, 0.6).is_err());
        assert!(effective_length(&curve, 1.0).is_err());
        assert!(HaystackCurve::new(vec![point(10, 0.3), point(10, 0.1)]).is_err());
    }

    #[test]
    fn depth_mapping() {
        assert_eq!(needle_index(1, 0.7), 0);
        assert_eq!(needle_index(64, 0.0), 0);
        assert_eq!(needle_index(64, 1.0), 63);
        assert_eq!(needle_index(11, 0.3), 3);
        let cfg = mrope_config(1, ExtensionMethod::Pi);
        assert!(haystack_curve(&cfg, &[4], &[]).is_err());
        assert!(haystack_curve(&cfg, &[4], &[1.5]).is_err());
    }

    #[test]
    fn curve_degrades_with_more_items() {
        let cfg = mrope_config(1, ExtensionMethod::Extrapolation);
        let curve = haystack_curve(&cfg, &[32, 4, 16, 8], &default_depths()).unwrap();
        let counts: Vec<_> = curve.points.iter().map(|p| p.context_items).collect();
        assert_eq!(counts, vec![4, 8, 16, 32]);
        for w in curve.points.windows(2) {
            assert!(w[1].success_rate <= w[0].success_rate + 0.05);
        }
    }
}
