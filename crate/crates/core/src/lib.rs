//! Rotary position embeddings, multimodal (t, h, w) position assignment,
//! context-extension frequency schedules and the data tooling around them:
//! a synthetic needle-retrieval harness, long-context sample packing with
//! ChatML serialization, and hybrid-resolution video frame planning.

pub mod attention;
pub mod chatml;
pub mod cli;
pub mod error;
pub mod extension;
pub mod haystack;
pub mod hybrid;
pub mod mrope;
pub mod packer;
pub mod rotary;

pub use attention::{attention, AttentionInput, AttentionOutput, EmbeddingMode, Matrix, Positions};
pub use chatml::{parse_chatml, parse_pack, render_turns, serialize_chatml};
pub use error::{Error, Result};
pub use extension::{
    progressive_schedule, recommend_base, scale_factor, BaseRecommendation, BaseTable,
    ContextWindow, ExtensionMethod, ExtensionPlan, HeightRamp, RatioProfile, ScheduleStage,
};
pub use haystack::{
    default_depths, effective_length, haystack_curve, method_embedding, needle_index, run_haystack,
    HaystackConfig, HaystackCurve,
};
pub use hybrid::{compare_budgets, plan, tradeoff_table, FramePlan, HybridConfig};
pub use mrope::{assign_positions, DimensionLayout, ModalitySpan, Position3D, Segment};
pub use packer::{
    pack, sample_corpus, Category, Pack, PackManifest, RecipeConfig, Role, Sample, Selection, Turn,
};
pub use rotary::{FrequencyBasis, RotationMatrix};
