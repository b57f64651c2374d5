//! Multimodal rotary embeddings (temporal / height / width).
//!
//! The `8x` rotary blocks of a `16x`-dimensional head are split 2:3:3 into
//! temporal `[0, 2x)`, height `[2x, 5x)` and width `[5x, 8x)` segments. Each
//! segment rotates by its own position component while sharing one frequency
//! basis.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotary::{rotate_pair, FrequencyBasis, RotationMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Temporal,
    Height,
    Width,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Temporal => "temporal",
            Segment::Height => "height",
            Segment::Width => "width",
        }
    }
}

/// 2:3:3 allocation of rotary blocks with granularity `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionLayout {
    granularity: usize,
}

impl DimensionLayout {
    pub fn new(granularity: usize) -> Result<Self> {
        if granularity == 0 {
            return Err(Error::Configuration(
                "layout granularity must be at least 1".into(),
            ));
        }
        Ok(Self { granularity })
    }

    /// Layout for a head of `head_dim` real dimensions; requires
    /// `head_dim % 16 == 0`.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(16) {
            return Err(Error::Configuration(format!(
                "M-RoPE needs a head dimension divisible by 16, got {head_dim}"
            )));
        }
        Self::new(head_dim / 16)
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn temporal_blocks(&self) -> Range<usize> {
        0..2 * self.granularity
    }

    pub fn height_blocks(&self) -> Range<usize> {
        2 * self.granularity..5 * self.granularity
    }

    pub fn width_blocks(&self) -> Range<usize> {
        5 * self.granularity..8 * self.granularity
    }

    pub fn total_blocks(&self) -> usize {
        8 * self.granularity
    }

    /// Segment owning block `d`, or `None` past the last block.
    pub fn segment_of(&self, d: usize) -> Option<Segment> {
        let x = self.granularity;
        match d {
            _ if d < 2 * x => Some(Segment::Temporal),
            _ if d < 5 * x => Some(Segment::Height),
            _ if d < 8 * x => Some(Segment::Width),
            _ => None,
        }
    }

    pub fn check_basis(&self, basis: &FrequencyBasis) -> Result<()> {
        if basis.num_blocks() != self.total_blocks() {
            return Err(Error::Configuration(format!(
                "layout has {} blocks but basis has {}",
                self.total_blocks(),
                basis.num_blocks()
            )));
        }
        Ok(())
    }
}

/// A token's `(temporal, height, width)` position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Position3D {
    pub t: u64,
    pub h: u64,
    pub w: u64,
}

impl Position3D {
    pub const fn new(t: u64, h: u64, w: u64) -> Self {
        Self { t, h, w }
    }

    /// The position a text token at 1D index `p` receives.
    pub const fn text(p: u64) -> Self {
        Self { t: p, h: p, w: p }
    }

    pub fn max_component(&self) -> u64 {
        self.t.max(self.h).max(self.w)
    }

    pub fn shifted(&self, delta: u64) -> Self {
        Self::new(self.t + delta, self.h + delta, self.w + delta)
    }

    pub fn component(&self, segment: Segment) -> u64 {
        match segment {
            Segment::Temporal => self.t,
            Segment::Height => self.h,
            Segment::Width => self.w,
        }
    }
}

/// A contiguous run of tokens from one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModalitySpan {
    Text {
        length: u64,
    },
    Image {
        grid_h: u64,
        grid_w: u64,
    },
    Video {
        frames: u64,
        grid_h: u64,
        grid_w: u64,
    },
}

impl ModalitySpan {
    pub fn token_count(&self) -> u64 {
        match *self {
            ModalitySpan::Text { length } => length,
            ModalitySpan::Image { grid_h, grid_w } => grid_h * grid_w,
            ModalitySpan::Video {
                frames,
                grid_h,
                grid_w,
            } => frames * grid_h * grid_w,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModalitySpan::Text { length } => length >= 1,
            ModalitySpan::Image { grid_h, grid_w } => grid_h >= 1 && grid_w >= 1,
            ModalitySpan::Video {
                frames,
                grid_h,
                grid_w,
            } => frames >= 1 && grid_h >= 1 && grid_w >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "span counts must be at least 1: {self:?}"
            )))
        }
    }
}

/// Assigns a [`Position3D`] to every token of `spans`, in order.
///
/// Text at offset `p` gets `(p, p, p), (p+1, p+1, p+1), ...`. Images keep
/// `t = p` and scan `(h, w)` row-major from `(p, p)`. Video frames advance
/// `t` by one per frame. Each span starts at one past the largest component
/// emitted so far.
pub fn assign_positions(spans: &[ModalitySpan]) -> Result<Vec<Position3D>> {
    if spans.is_empty() {
        return Err(Error::EmptyInput("no modality spans"));
    }
    for span in spans {
        span.validate()?;
    }

    let total: u64 = spans.iter().map(ModalitySpan::token_count).sum();
    let mut out = Vec::with_capacity(total as usize);
    let mut offset = 0u64;
    for span in spans {
        match *span {
            ModalitySpan::Text { length } => {
                out.extend((0..length).map(|k| Position3D::text(offset + k)));
                offset += length;
            }
            ModalitySpan::Image { grid_h, grid_w } => {
                push_grid(&mut out, offset, offset, grid_h, grid_w);
                offset += grid_h.max(grid_w);
            }
            ModalitySpan::Video {
                frames,
                grid_h,
                grid_w,
            } => {
                for f in 0..frames {
                    push_grid(&mut out, offset + f, offset, grid_h, grid_w);
                }
                offset += frames.max(grid_h).max(grid_w);
            }
        }
    }
    Ok(out)
}

fn push_grid(out: &mut Vec<Position3D>, t: u64, base: u64, grid_h: u64, grid_w: u64) {
    for r in 0..grid_h {
        for c in 0..grid_w {
            out.push(Position3D::new(t, base + r, base + c));
        }
    }
}

/// Applies the block-diagonal M-RoPE rotation at `pos` to `v`.
pub fn apply_mrope(
    basis: &FrequencyBasis,
    layout: &DimensionLayout,
    pos: Position3D,
    v: &[f64],
) -> Result<Vec<f64>> {
    layout.check_basis(basis)?;
    basis.check_len(v.len())?;
    let mut out = v.to_vec();
    for (d, theta) in basis.angles().iter().enumerate() {
        let segment = layout.segment_of(d).expect("block within layout");
        rotate_pair(&mut out, d, pos.component(segment) as f64 * theta);
    }
    Ok(out)
}

/// The dense M-RoPE matrix `R_M(θ, i_t, i_h, i_w)`.
pub fn mrope_matrix(
    basis: &FrequencyBasis,
    layout: &DimensionLayout,
    pos: Position3D,
) -> Result<RotationMatrix> {
    layout.check_basis(basis)?;
    let blocks = basis
        .angles()
        .iter()
        .enumerate()
        .map(|(d, theta)| {
            let segment = layout.segment_of(d).expect("block within layout");
            let (sin, cos) = (pos.component(segment) as f64 * theta).sin_cos();
            [cos, -sin, sin, cos]
        })
        .collect();
    Ok(RotationMatrix::from_blocks(blocks))
}

/// Attention logit `f_M(q, pos_m)ᵀ f_M(k, pos_n)`.
pub fn mrope_score(
    basis: &FrequencyBasis,
    layout: &DimensionLayout,
    pos_m: Position3D,
    pos_n: Position3D,
    q: &[f64],
    k: &[f64],
) -> Result<f64> {
    let q = apply_mrope(basis, layout, pos_m, q)?;
    let k = apply_mrope(basis, layout, pos_n, k)?;
    Ok(q.iter().zip(&k).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(t: u64, h: u64, w: u64) -> Position3D {
        Position3D::new(t, h, w)
    }

    /// Enumerates positions token by token, tracking the running maximum
    /// directly instead of per-span bookkeeping.
    fn brute_positions(spans: &[ModalitySpan]) -> Vec<Position3D> {
        let mut out: Vec<Position3D> = Vec::new();
        for span in spans {
            let base = out.iter().map(|q| q.max_component() + 1).max().unwrap_or(0);
            match *span {
                ModalitySpan::Text { length } => {
                    for k in 0..length {
                        out.push(p(base + k, base + k, base + k));
                    }
                }
                ModalitySpan::Image { grid_h, grid_w } => {
                    for idx in 0..grid_h * grid_w {
                        out.push(p(base, base + idx / grid_w, base + idx % grid_w));
                    }
                }
                ModalitySpan::Video {
                    frames,
                    grid_h,
                    grid_w,
                } => {
                    for f in 0..frames {
                        for idx in 0..grid_h * grid_w {
                            out.push(p(base + f, base + idx / grid_w, base + idx % grid_w));
                        }
                    }
                }
            }
        }
        out
    }

    fn span_strategy() -> impl Strategy<Value = ModalitySpan> {
        prop_oneof![
            (1u64..6).prop_map(|length| ModalitySpan::Text { length }),
            (1u64..5, 1u64..5).prop_map(|(grid_h, grid_w)| ModalitySpan::Image { grid_h, grid_w }),
            (1u64..4, 1u64..4, 1u64..4).prop_map(|(frames, grid_h, grid_w)| ModalitySpan::Video {
                frames,
                grid_h,
                grid_w
            }),
        ]
    }

    /// Dense block-diagonal oracle assembling `A_1 … A_8x` by segment.
    fn dense_mrope(head_dim: usize, base: f64, pos: Position3D) -> Vec<Vec<f64>> {
        let x = head_dim / 16;
        let mut m = vec![vec![0.0; head_dim]; head_dim];
        for d in 0..8 * x {
            let theta = base.powf(-2.0 * d as f64 / head_dim as f64);
            let idx = if d < 2 * x {
                pos.t
            } else if d < 5 * x {
                pos.h
            } else {
                pos.w
            };
            let a = idx as f64 * theta;
            m[2 * d][2 * d] = a.cos();
            m[2 * d][2 * d + 1] = -a.sin();
            m[2 * d + 1][2 * d] = a.sin();
            m[2 * d + 1][2 * d + 1] = a.cos();
        }
        m
    }

    fn dense_mul(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        m.iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn layout_ranges() {
        let l = DimensionLayout::for_head_dim(128).unwrap();
        assert_eq!(l.granularity(), 8);
        assert_eq!(l.temporal_blocks(), 0..16);
        assert_eq!(l.height_blocks(), 16..40);
        assert_eq!(l.width_blocks(), 40..64);
        assert_eq!(l.segment_of(15), Some(Segment::Temporal));
        assert_eq!(l.segment_of(16), Some(Segment::Height));
        assert_eq!(l.segment_of(40), Some(Segment::Width));
        assert_eq!(l.segment_of(64), None);
        assert!(DimensionLayout::for_head_dim(24).is_err());
        assert!(DimensionLayout::for_head_dim(0).is_err());
    }

    #[test]
    fn position_examples() {
        use ModalitySpan::*;
        assert_eq!(
            assign_positions(&[Text { length: 3 }]).unwrap(),
            vec![p(0, 0, 0), p(1, 1, 1), p(2, 2, 2)]
        );
        assert_eq!(
            assign_positions(&[Image {
                grid_h: 2,
                grid_w: 2
            }])
            .unwrap(),
            vec![p(0, 0, 0), p(0, 0, 1), p(0, 1, 0), p(0, 1, 1)]
        );
        assert_eq!(
            assign_positions(&[Video {
                frames: 2,
                grid_h: 1,
                grid_w: 1
            }])
            .unwrap(),
            vec![p(0, 0, 0), p(1, 0, 0)]
        );
        let spans = [
            Text { length: 2 },
            Image {
                grid_h: 1,
                grid_w: 2,
            },
        ];
        let expected = vec![p(0, 0, 0), p(1, 1, 1), p(2, 2, 2), p(2, 2, 3)];
        assert_eq!(assign_positions(&spans).unwrap(), expected);
        assert_eq!(brute_positions(&spans), expected);
    }

    #[test]
    fn position_errors() {
        assert_eq!(
            assign_positions(&[]),
            Err(Error::EmptyInput("no modality spans"))
        );
        assert!(assign_positions(&[ModalitySpan::Image {
            grid_h: 0,
            grid_w: 3
        }])
        .is_err());
    }

    #[test]
    fn mrope_zero_position_is_identity() {
        let b = FrequencyBasis::new(32, 10_000.0).unwrap();
        let l = DimensionLayout::for_head_dim(32).unwrap();
        let v: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        assert_eq!(apply_mrope(&b, &l, Position3D::default(), &v).unwrap(), v);
    }

    #[test]
    fn mrope_matches_dense_oracle() {
        let b = FrequencyBasis::new(16, 10_000.0).unwrap();
        let l = DimensionLayout::for_head_dim(16).unwrap();
        let pos = p(1, 2, 3);
        let v: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let fast = apply_mrope(&b, &l, pos, &v).unwrap();
        let oracle = dense_mrope(16, 10_000.0, pos);
        let slow = dense_mul(&oracle, &v);
        for (a, c) in fast.iter().zip(&slow) {
            assert!((a - c).abs() < 1e-12);
        }
        let m = mrope_matrix(&b, &l, pos).unwrap().to_dense();
        for (r, o) in m.iter().zip(&oracle) {
            for (a, c) in r.iter().zip(o) {
                assert!((a - c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mrope_rejects_layout_mismatch() {
        let b = FrequencyBasis::new(32, 10_000.0).unwrap();
        let l = DimensionLayout::for_head_dim(16).unwrap();
        assert!(matches!(
            apply_mrope(&b, &l, Position3D::default(), &[0.0; 32]),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn score_examples() {
        let b = FrequencyBasis::new(64, 10_000.0).unwrap();
        let l = DimensionLayout::for_head_dim(64).unwrap();
        let mut q = vec![0.0; 64];
        q[5] = 0.6;
        q[40] = 0.8;
        let pos = p(17, 3, 900);
        assert!((mrope_score(&b, &l, pos, pos, &q, &q).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pm = p(
                rng.random_range(0..500),
                rng.random_range(0..500),
                rng.random_range(0..500),
            );
            let pn = p(
                rng.random_range(0..500),
                rng.random_range(0..500),
                rng.random_range(0..500),
            );
            let got = mrope_score(&b, &l, pm, pn, &q, &k).unwrap();
            let rq = dense_mul(&dense_mrope(64, 10_000.0, pm), &q);
            let rk = dense_mul(&dense_mrope(64, 10_000.0, pn), &k);
            let want: f64 = rq.iter().zip(&rk).map(|(a, c)| a * c).sum();
            assert!((got - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn matches_brute_enumeration(spans in prop::collection::vec(span_strategy(), 1..6)) {
            prop_assert_eq!(assign_positions(&spans).unwrap(), brute_positions(&spans));
        }

        #[test]
        fn visual_positions_are_unique_and_offsets_monotone(spans in prop::collection::vec(span_strategy(), 1..6)) {
            let positions = assign_positions(&spans).unwrap();
            let mut cursor = 0usize;
            let mut max_so_far: Option<u64> = None;
            for span in &spans {
                let n = span.token_count() as usize;
                let chunk = &positions[cursor..cursor + n];
                let base = chunk.iter().map(|q| q.t.min(q.h).min(q.w)).min().unwrap();
                if let Some(m) = max_so_far {
                    prop_assert!(base > m);
                }
                if !matches!(span, ModalitySpan::Text { .. }) {
                    let uniq: HashSet<_> = chunk.iter().collect();
                    prop_assert_eq!(uniq.len(), chunk.len());
                }
                let chunk_max = chunk.iter().map(Position3D::max_component).max().unwrap();
                max_so_far = Some(max_so_far.map_or(chunk_max, |m| m.max(chunk_max)));
                cursor += n;
            }
        }

        #[test]
        fn text_equivalent_to_1d(len in 1u64..50, half in 1usize..4, seed in any::<u64>()) {
            let head_dim = 16 * half;
            let b = FrequencyBasis::new(head_dim, 10_000.0).unwrap();
            let l = DimensionLayout::for_head_dim(head_dim).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (i, pos) in assign_positions(&[ModalitySpan::Text { length: len }]).unwrap().into_iter().enumerate() {
                let v: Vec<f64> = (0..head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let m = apply_mrope(&b, &l, pos, &v).unwrap();
                let r = b.apply(i as u64, &v).unwrap();
                for (a, c) in m.iter().zip(&r) {
                    prop_assert!((a - c).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn score_is_translation_invariant(
            t in 0u64..10_000, h in 0u64..10_000, w in 0u64..10_000,
            dt in 0u64..10_000, dh in 0u64..10_000, dw in 0u64..10_000,
            shift in 0u64..100_000, seed in any::<u64>(),
        ) {
            let b = FrequencyBasis::new(32, 10_000.0).unwrap();
            let l = DimensionLayout::for_head_dim(32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pm = p(t, h, w);
            let pn = p(dt, dh, dw);
            let s0 = mrope_score(&b, &l, pm, pn, &q, &k).unwrap();
            let s1 = mrope_score(&b, &l, pm.shifted(shift), pn.shifted(shift), &q, &k).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-9);
        }
    }
}
