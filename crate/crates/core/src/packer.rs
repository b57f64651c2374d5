//! Long-context training data assembly: length classes, ratio-targeted
//! sampling, and first-fit-decreasing concatenation to a target length.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    TextLong,
    ImageShortInstruction,
    ImageInterleave,
    Video,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::TextLong,
        Category::ImageShortInstruction,
        Category::ImageInterleave,
        Category::Video,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::TextLong => "text_long",
            Category::ImageShortInstruction => "image_short_instruction",
            Category::ImageInterleave => "image_interleave",
            Category::Video => "video",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "system" => Some(Role::System),
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    /// Number of media placeholders preceding the text.
    #[serde(default)]
    pub attachments: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub category: Category,
    pub token_len: u64,
    pub turns: Vec<Turn>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.token_len == 0 {
            return Err(Error::InvalidInput(format!(
                "sample `{}` has zero tokens",
                self.id
            )));
        }
        if self.turns.is_empty() {
            return Err(Error::InvalidInput(format!(
                "sample `{}` has no turns",
                self.id
            )));
        }
        let dialogue = match self.turns[0].role {
            Role::System => &self.turns[1..],
            _ => &self.turns[..],
        };
        for (i, turn) in dialogue.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Role::User
            } else {
                Role::Assistant
            };
            if turn.role != expected {
                return Err(Error::InvalidInput(format!(
                    "sample `{}`: turn {} should be {} but is {}",
                    self.id,
                    i + self.turns.len() - dialogue.len(),
                    expected.as_str(),
                    turn.role.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Long,
    Short,
}

/// `Long` iff the sample is strictly longer than `threshold` tokens.
pub fn classify_length(sample: &Sample, threshold: u64) -> LengthClass {
    if sample.token_len > threshold {
        LengthClass::Long
    } else {
        LengthClass::Short
    }
}

/// Whether the long-data ratio counts tokens or samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioBasis {
    #[default]
    Tokens,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecipeConfig {
    pub category_ratios: BTreeMap<Category, f64>,
    pub long_threshold: u64,
    pub long_ratio: f64,
    pub long_ratio_basis: RatioBasis,
    pub target_length: u64,
    pub ratio_tolerance: f64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            category_ratios: BTreeMap::from([
                (Category::TextLong, 0.20),
                (Category::ImageShortInstruction, 0.25),
                (Category::ImageInterleave, 0.25),
                (Category::Video, 0.30),
            ]),
            long_threshold: 8_192,
            long_ratio: 0.60,
            long_ratio_basis: RatioBasis::Tokens,
            target_length: 131_072,
            ratio_tolerance: 0.02,
        }
    }
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Configuration(format!(
                    "{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        for (c, r) in &self.category_ratios {
            frac(c.as_str(), *r)?;
        }
        let sum: f64 = self.category_ratios.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Configuration(format!(
                "category ratios must sum to 1, got {sum}"
            )));
        }
        frac("long_ratio", self.long_ratio)?;
        frac("ratio_tolerance", self.ratio_tolerance)?;
        if self.long_threshold == 0 {
            return Err(Error::Configuration(
                "long_threshold must be positive".into(),
            ));
        }
        Ok(())
    }

    fn ratio(&self, c: Category) -> f64 {
        self.category_ratios.get(&c).copied().unwrap_or(0.0)
    }
}

/// A ratio the selection missed by more than the tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioWarning {
    pub ratio: String,
    pub target: f64,
    pub achieved: f64,
}

impl fmt::Display for RatioWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: target {:.4}, achieved {:.4}",
            self.ratio, self.target, self.achieved
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub samples: Vec<Sample>,
    pub total_tokens: u64,
    /// Token share per category.
    pub category_shares: BTreeMap<Category, f64>,
    /// Long share measured on the recipe's ratio basis.
    pub long_share: f64,
    pub warnings: Vec<RatioWarning>,
}

impl Selection {
    pub fn is_feasible(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Draws a subset of `corpus` totalling at most `token_budget` tokens whose
/// category and long/short shares follow `recipe`.
///
/// Targets that the corpus cannot satisfy are reported in
/// [`Selection::warnings`] rather than as an error.
pub fn sample_corpus(
    recipe: &RecipeConfig,
    corpus: &[Sample],
    token_budget: u64,
    seed: u64,
) -> Result<Selection> {
    recipe.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus has no samples"));
    }
    if token_budget == 0 {
        return Err(Error::InvalidInput("token budget must be positive".into()));
    }

    // Buckets indexed by (category, long?), shuffled deterministically.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: BTreeMap<(Category, bool), Vec<&Sample>> = BTreeMap::new();
    for s in corpus.iter().filter(|s| s.token_len <= token_budget) {
        let long = classify_length(s, recipe.long_threshold) == LengthClass::Long;
        buckets.entry((s.category, long)).or_default().push(s);
    }
    for bucket in buckets.values_mut() {
        bucket.sort_by(|a, b| a.id.cmp(&b.id));
        bucket.shuffle(&mut rng);
    }
    let available = |c: Category, long: bool| -> f64 {
        buckets
            .get(&(c, long))
            .map_or(0, |b| b.iter().map(|s| s.token_len).sum::<u64>()) as f64
    };

    let budget = token_budget as f64;
    let long_token_ratio = match recipe.long_ratio_basis {
        RatioBasis::Tokens => recipe.long_ratio,
        RatioBasis::Samples => count_ratio_to_token_ratio(recipe, corpus),
    };

    // Split each category target into long and short parts so the long parts
    // sum to the long target. Allocation is proportional to the category
    // target, clamped to what each bucket can supply.
    let cats = Category::ALL;
    // Categories the corpus cannot fill are capped at their supply.
    let target: Vec<f64> = cats
        .iter()
        .map(|&c| (recipe.ratio(c) * budget).min(available(c, true) + available(c, false)))
        .collect();
    let lo: Vec<f64> = cats
        .iter()
        .zip(&target)
        .map(|(&c, &t)| (t - available(c, false)).max(0.0))
        .collect();
    let hi: Vec<f64> = cats
        .iter()
        .zip(&target)
        .map(|(&c, &t)| t.min(available(c, true)))
        .collect();
    let alloc = |lambda: f64| -> Vec<f64> {
        (0..cats.len())
            .map(|i| (lambda * target[i]).clamp(lo[i], hi[i]))
            .collect()
    };
    let want_long = long_token_ratio * target.iter().sum::<f64>();
    let (mut a, mut b) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if alloc(mid).iter().sum::<f64>() < want_long {
            a = mid;
        } else {
            b = mid;
        }
    }
    let long_alloc = alloc(b);

    let mut samples = Vec::new();
    for (i, &c) in cats.iter().enumerate() {
        for (long, goal) in [(true, long_alloc[i]), (false, target[i] - long_alloc[i])] {
            let Some(bucket) = buckets.get(&(c, long)) else {
                continue;
            };
            let goal = goal.floor().max(0.0) as u64;
            let mut filled = 0u64;
            for s in bucket {
                if filled + s.token_len <= goal {
                    filled += s.token_len;
                    samples.push((*s).clone());
                }
            }
        }
    }

    let total_tokens: u64 = samples.iter().map(|s| s.token_len).sum();
    let share = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let category_shares: BTreeMap<Category, f64> = cats
        .iter()
        .map(|&c| {
            let t = samples
                .iter()
                .filter(|s| s.category == c)
                .map(|s| s.token_len)
                .sum();
            (c, share(t, total_tokens))
        })
        .collect();
    let is_long = |s: &&Sample| classify_length(s, recipe.long_threshold) == LengthClass::Long;
    let long_share = match recipe.long_ratio_basis {
        RatioBasis::Tokens => share(
            samples.iter().filter(is_long).map(|s| s.token_len).sum(),
            total_tokens,
        ),
        RatioBasis::Samples => share(
            samples.iter().filter(is_long).count() as u64,
            samples.len() as u64,
        ),
    };

    let mut warnings = Vec::new();
    for &c in &cats {
        let (want, got) = (recipe.ratio(c), category_shares[&c]);
        if (want - got).abs() > recipe.ratio_tolerance {
            warnings.push(RatioWarning {
                ratio: format!("category {}", c.as_str()),
                target: want,
                achieved: got,
            });
        }
    }
    if (recipe.long_ratio - long_share).abs() > recipe.ratio_tolerance {
        warnings.push(RatioWarning {
            ratio: "long data".into(),
            target: recipe.long_ratio,
            achieved: long_share,
        });
    }

    Ok(Selection {
        samples,
        total_tokens,
        category_shares,
        long_share,
        warnings,
    })
}

/// Token share of long data that yields a long sample-count share of
/// `recipe.long_ratio`, given the corpus's mean long and short lengths.
fn count_ratio_to_token_ratio(recipe: &RecipeConfig, corpus: &[Sample]) -> f64 {
    let mean = |long: bool| {
        let lens: Vec<u64> = corpus
            .iter()
            .filter(|s| (classify_length(s, recipe.long_threshold) == LengthClass::Long) == long)
            .map(|s| s.token_len)
            .collect();
        if lens.is_empty() {
            None
        } else {
            Some(lens.iter().sum::<u64>() as f64 / lens.len() as f64)
        }
    };
    match (mean(true), mean(false)) {
        (Some(l), Some(s)) => {
            let rho = recipe.long_ratio;
            rho * l / (rho * l + (1.0 - rho) * s)
        }
        _ => recipe.long_ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pack {
    pub sample_ids: Vec<String>,
    pub total_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackManifest {
    pub target_length: u64,
    pub packs: Vec<Pack>,
    /// Samples longer than `target_length`; never split.
    pub leftovers: Vec<String>,
    pub notes: Vec<String>,
}

/// First-fit-decreasing concatenation into packs of at most `target_length`
/// tokens. Samples are ordered by length descending, ties by id ascending.
pub fn pack(samples: &[Sample], target_length: u64) -> PackManifest {
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| b.token_len.cmp(&a.token_len).then_with(|| a.id.cmp(&b.id)));

    let mut packs: Vec<Pack> = Vec::new();
    let mut leftovers = Vec::new();
    let mut notes = Vec::new();
    for s in order {
        if s.token_len > target_length {
            notes.push(format!(
                "sample `{}` ({} tokens) exceeds target length {}",
                s.id, s.token_len, target_length
            ));
            leftovers.push(s.id.clone());
            continue;
        }
        match packs
            .iter_mut()
            .find(|p| p.total_len + s.token_len <= target_length)
        {
            Some(p) => {
                p.sample_ids.push(s.id.clone());
                p.total_len += s.token_len;
            }
            None => packs.push(Pack {
                sample_ids: vec![s.id.clone()],
                total_len: s.token_len,
            }),
        }
    }
    PackManifest {
        target_length,
        packs,
        leftovers,
        notes,
    }
}

/// Frames extracted from a clip of `duration_seconds` at `fps`; at least one.
pub fn video_frame_budget(duration_seconds: f64, fps: f64) -> Result<u64> {
    if !(duration_seconds > 0.0 && duration_seconds.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "duration must be positive, got {duration_seconds}"
        )));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "fps must be positive, got {fps}"
        )));
    }
    Ok(((duration_seconds * fps).floor() as u64).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    use proptest::prelude::*;

    fn sample(id: &str, category: Category, token_len: u64) -> Sample {
        Sample {
            id: id.into(),
            category,
            token_len,
            turns: vec![
                Turn {
                    role: Role::User,
                    content: format!("question {id}"),
                    attachments: 0,
                },
                Turn {
                    role: Role::Assistant,
                    content: "answer".into(),
                    attachments: 0,
                },
            ],
        }
    }

    fn lens(ids: &[String], samples: &[Sample]) -> Vec<u64> {
        ids.iter()
            .map(|id| samples.iter().find(|s| &s.id == id).unwrap().token_len)
            .collect()
    }

    /// Minimum number of bins by exhaustive assignment.
    fn optimal_bins(sizes: &[u64], cap: u64) -> usize {
        fn go(i: usize, sizes: &[u64], cap: u64, bins: &mut Vec<u64>, best: &mut usize) {
            if bins.len() >= *best {
                return;
            }
            if i == sizes.len() {
                *best = bins.len();
                return;
            }
            for b in 0..bins.len() {
                if bins[b] + sizes[i] <= cap {
                    bins[b] += sizes[i];
                    go(i + 1, sizes, cap, bins, best);
                    bins[b] -= sizes[i];
                }
            }
            bins.push(sizes[i]);
            go(i + 1, sizes, cap, bins, best);
            bins.pop();
        }
        let mut best = sizes.len().max(1);
        if sizes.is_empty() {
            return 0;
        }
        go(0, sizes, cap, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn length_classes() {
        let s = |n| sample("x", Category::TextLong, n);
        assert_eq!(classify_length(&s(8_192), 8_192), LengthClass::Short);
        assert_eq!(classify_length(&s(8_193), 8_192), LengthClass::Long);
        assert_eq!(classify_length(&s(100_000), 8_192), LengthClass::Long);
    }

    #[test]
    fn sample_validation() {
        let mut s = sample("a", Category::Video, 10);
        assert!(s.validate().is_ok());
        s.turns.insert(
            0,
            Turn {
                role: Role::System,
                content: "sys".into(),
                attachments: 0,
            },
        );
        assert!(s.validate().is_ok());
        s.turns.swap(1, 2);
        assert!(s.validate().is_err());
        let mut s = sample("b", Category::Video, 0);
        assert!(s.validate().is_err());
        s.token_len = 3;
        s.turns.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn pack_examples() {
        let one = [sample("a", Category::Video, 5_000)];
        let m = pack(&one, 8_000);
        assert_eq!(
            m.packs,
            vec![Pack {
                sample_ids: vec!["a".into()],
                total_len: 5_000
            }]
        );

        let four = [
            sample("a", Category::Video, 6_000),
            sample("b", Category::Video, 5_000),
            sample("c", Category::Video, 4_000),
            sample("d", Category::Video, 3_000),
        ];
        let m = pack(&four, 8_000);
        let got: Vec<Vec<u64>> = m.packs.iter().map(|p| lens(&p.sample_ids, &four)).collect();
        assert_eq!(got, vec![vec![6_000], vec![5_000, 3_000], vec![4_000]]);
        assert_eq!(optimal_bins(&[6_000, 5_000, 4_000, 3_000], 8_000), 3);

        let big = [
            sample("huge", Category::TextLong, 200_000),
            sample("s", Category::TextLong, 10),
        ];
        let m = pack(&big, 131_072);
        assert_eq!(m.leftovers, vec!["huge".to_string()]);
        assert_eq!(m.notes.len(), 1);
        assert_eq!(m.packs.len(), 1);
    }

    #[test]
    fn pack_ties_break_on_id() {
        let s = [
            sample("b", Category::Video, 4),
            sample("a", Category::Video, 4),
            sample("c", Category::Video, 4),
        ];
        let m = pack(&s, 8);
        assert_eq!(m.packs[0].sample_ids, vec!["a", "b"]);
        assert_eq!(m.packs[1].sample_ids, vec!["c"]);
    }

    #[test]
    fn frame_budget() {
        assert_eq!(video_frame_budget(300.0, 2.0).unwrap(), 600);
        assert_eq!(video_frame_budget(0.4, 2.0).unwrap(), 1);
        assert_eq!(video_frame_budget(61.7, 2.0).unwrap(), 123);
        assert!(video_frame_budget(0.0, 2.0).is_err());
        assert!(video_frame_budget(10.0, -1.0).is_err());
    }

    #[test]
    fn single_category_corpus_warns_on_every_unmet_ratio() {
        let corpus: Vec<Sample> = (0..50)
            .map(|i| sample(&format!("v{i}"), Category::Video, 1_000 + 400 * i))
            .collect();
        let sel = sample_corpus(&RecipeConfig::default(), &corpus, 100_000, 1).unwrap();
        assert!(!sel.samples.is_empty());
        assert!(sel.samples.iter().all(|s| s.category == Category::Video));
        assert_eq!(sel.category_shares[&Category::Video], 1.0);
        let names: Vec<&str> = sel.warnings.iter().map(|w| w.ratio.as_str()).collect();
        for c in Category::ALL {
            assert!(
                names.contains(&format!("category {}", c.as_str()).as_str()),
                "{names:?}"
            );
        }
    }

    #[test]
    fn tiny_budget_selects_nothing() {
        let corpus = [
            sample("a", Category::Video, 500),
            sample("b", Category::TextLong, 900),
        ];
        let sel = sample_corpus(&RecipeConfig::default(), &corpus, 100, 0).unwrap();
        assert!(sel.samples.is_empty());
        assert_eq!(sel.total_tokens, 0);
        assert!(!sel.warnings.is_empty());
    }

    #[test]
    fn recipe_validation() {
        let mut r = RecipeConfig::default();
        r.category_ratios.insert(Category::Video, 0.5);
        assert!(matches!(r.validate(), Err(Error::Configuration(_))));
        let corpus = [sample("a", Category::Video, 5)];
        assert!(sample_corpus(&r, &corpus, 10, 0).is_err());
        assert!(sample_corpus(&RecipeConfig::default(), &[], 10, 0).is_err());
        assert!(sample_corpus(&RecipeConfig::default(), &corpus, 0, 0).is_err());
    }

    #[test]
    fn recipe_json_defaults() {
        let r: RecipeConfig = serde_json::from_str(r#"{"target_length": 32768}"#).unwrap();
        assert_eq!(r.target_length, 32_768);
        assert_eq!(r.long_threshold, 8_192);
        assert_eq!(r.category_ratios[&Category::Video], 0.30);
    }

    #[test]
    fn count_basis_targets_sample_share() {
        let mut corpus = Vec::new();
        for (ci, c) in Category::ALL.iter().enumerate() {
            for i in 0..400u64 {
                let len = if i % 2 == 0 {
                    2_000 + (i * 37) % 5_000
                } else {
                    9_000 + (i * 53) % 20_000
                };
                corpus.push(sample(&format!("{ci}-{i}"), *c, len));
            }
        }
        let recipe = RecipeConfig {
            long_ratio_basis: RatioBasis::Samples,
            ratio_tolerance: 0.05,
            ..RecipeConfig::default()
        };
        let sel = sample_corpus(&recipe, &corpus, 1_000_000, 5).unwrap();
        assert!((sel.long_share - 0.6).abs() < 0.05, "{}", sel.long_share);
    }

    fn corpus_strategy() -> impl Strategy<Value = (Vec<u64>, u64)> {
        (prop::collection::vec(1u64..100, 1..9), 100u64..160)
    }

    proptest! {
        #[test]
        fn ffd_invariants((sizes, cap) in corpus_strategy()) {
            let samples: Vec<Sample> = sizes.iter().enumerate()
                .map(|(i, &n)| sample(&format!("s{i:02}"), Category::Video, n))
                .collect();
            let m = pack(&samples, cap);
            let mut seen: Vec<String> = m.leftovers.clone();
            for p in &m.packs {
                prop_assert!(p.total_len <= cap);
                prop_assert_eq!(p.total_len, lens(&p.sample_ids, &samples).iter().sum::<u64>());
                seen.extend(p.sample_ids.iter().cloned());
            }
            seen.sort();
            let mut all: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            all.sort();
            prop_assert_eq!(seen, all);
            prop_assert!(m.packs.len() as f64 <= 1.5 * optimal_bins(&sizes, cap) as f64);
            prop_assert_eq!(pack(&samples, cap), m);
        }
    }
}
