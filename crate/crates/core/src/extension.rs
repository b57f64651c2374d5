//! Context-window extension transforms over a [`FrequencyBasis`].
//!
//! Every transform maps the original angles `θ_d` to `θ'_d ≤ θ_d` for a scale
//! `s = L' / L_V ≥ 1`:
//!
//! - direct extrapolation keeps `θ' = θ`;
//! - position interpolation (PI) divides every angle by `s`;
//! - NTK-aware scaling raises the base to `b·s^(D/(D-2))`;
//! - M-RoPE++ keeps the temporal segment, interpolates the width segment like
//!   PI, and ramps the height segment between the two.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrope::{DimensionLayout, Segment};
use crate::rotary::FrequencyBasis;

/// Pre-training visual context length of the Qwen2-VL profile.
pub const QWEN2_VL_ORIGINAL_LENGTH: u64 = 16_384;
/// Pre-training context length of the Qwen-VL profile.
pub const QWEN_VL_ORIGINAL_LENGTH: u64 = 2_048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtensionMethod {
    Extrapolation,
    Pi,
    Ntk,
    #[serde(rename = "mropepp")]
    MRopePlusPlus,
}

impl ExtensionMethod {
    pub const ALL: [ExtensionMethod; 4] = [
        ExtensionMethod::Extrapolation,
        ExtensionMethod::Pi,
        ExtensionMethod::Ntk,
        ExtensionMethod::MRopePlusPlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExtensionMethod::Extrapolation => "extrapolation",
            ExtensionMethod::Pi => "pi",
            ExtensionMethod::Ntk => "ntk",
            ExtensionMethod::MRopePlusPlus => "mropepp",
        }
    }
}

impl fmt::Display for ExtensionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExtensionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "extrapolation" | "none" => Ok(ExtensionMethod::Extrapolation),
            "pi" => Ok(ExtensionMethod::Pi),
            "ntk" => Ok(ExtensionMethod::Ntk),
            "mropepp" | "mrope++" => Ok(ExtensionMethod::MRopePlusPlus),
            other => Err(Error::InvalidInput(format!(
                "unknown extension method `{other}`"
            ))),
        }
    }
}

/// Original and extended context lengths, in positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub original_length: u64,
    pub target_length: u64,
}

impl ContextWindow {
    pub fn new(original_length: u64, target_length: u64) -> Result<Self> {
        scale_factor(target_length, original_length)?;
        Ok(Self {
            original_length,
            target_length,
        })
    }

    pub fn scale(&self) -> f64 {
        self.target_length as f64 / self.original_length as f64
    }
}

/// `s = L' / L_V`.
pub fn scale_factor(target_length: u64, original_length: u64) -> Result<f64> {
    if original_length == 0 || target_length == 0 {
        return Err(Error::InvalidExtension(
            "context lengths must be positive".into(),
        ));
    }
    if target_length < original_length {
        return Err(Error::InvalidExtension(format!(
            "target length {target_length} is shorter than original length {original_length}"
        )));
    }
    Ok(target_length as f64 / original_length as f64)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::InvalidExtension(format!(
            "scale must be a finite value >= 1, got {scale}"
        )));
    }
    Ok(())
}

/// Scaled angle table produced by one extension method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionPlan {
    pub method: ExtensionMethod,
    pub head_dim: usize,
    /// Base of the input basis.
    pub base: f64,
    /// Base the scaled angles correspond to; differs from `base` only for NTK.
    pub effective_base: f64,
    pub scale: f64,
    pub original_angles: Vec<f64>,
    pub scaled_angles: Vec<f64>,
    /// Set when the plan was built from explicit context lengths.
    pub window: Option<ContextWindow>,
}

impl ExtensionPlan {
    /// Builds a plan for `method` from explicit context lengths. `layout` is
    /// required for M-RoPE++ and ignored otherwise.
    pub fn build(
        method: ExtensionMethod,
        basis: &FrequencyBasis,
        layout: Option<&DimensionLayout>,
        window: ContextWindow,
    ) -> Result<Self> {
        let s = window.scale();
        let mut plan = match method {
            ExtensionMethod::Extrapolation => extend_extrapolation(basis, s)?,
            ExtensionMethod::Pi => extend_pi(basis, s)?,
            ExtensionMethod::Ntk => extend_ntk(basis, s)?,
            ExtensionMethod::MRopePlusPlus => {
                let layout = layout.ok_or_else(|| {
                    Error::Configuration("M-RoPE++ requires a dimension layout".into())
                })?;
                extend_mropepp(basis, layout, s)?
            }
        };
        plan.window = Some(window);
        Ok(plan)
    }

    /// The scaled angles as a basis usable by the rotary and M-RoPE routines.
    pub fn basis(&self) -> FrequencyBasis {
        FrequencyBasis::from_angles(
            self.head_dim,
            self.effective_base,
            self.scaled_angles.clone(),
        )
        .expect("plan angles are validated at construction")
    }

    pub fn ratio_profile(&self, target_length: u64) -> RatioProfile {
        RatioProfile::from_angles(&self.original_angles, target_length)
    }

    fn new(
        method: ExtensionMethod,
        basis: &FrequencyBasis,
        scale: f64,
        effective_base: f64,
        scaled_angles: Vec<f64>,
    ) -> Self {
        Self {
            method,
            head_dim: basis.head_dim(),
            base: basis.base(),
            effective_base,
            scale,
            original_angles: basis.angles().to_vec(),
            scaled_angles,
            window: None,
        }
    }
}

/// Leaves every angle unchanged; positions beyond the trained range are used
/// as-is.
pub fn extend_extrapolation(basis: &FrequencyBasis, scale: f64) -> Result<ExtensionPlan> {
    check_scale(scale)?;
    Ok(ExtensionPlan::new(
        ExtensionMethod::Extrapolation,
        basis,
        scale,
        basis.base(),
        basis.angles().to_vec(),
    ))
}

/// Position interpolation: `θ'_d = θ_d / s`.
pub fn extend_pi(basis: &FrequencyBasis, scale: f64) -> Result<ExtensionPlan> {
    check_scale(scale)?;
    let scaled = basis.angles().iter().map(|t| t / scale).collect();
    Ok(ExtensionPlan::new(
        ExtensionMethod::Pi,
        basis,
        scale,
        basis.base(),
        scaled,
    ))
}

/// NTK-aware base rescaling: `b' = b·s^(D/(D-2))`, angles recomputed from `b'`.
///
/// The last block ends up interpolated by exactly `1/s` while block 0 is left
/// untouched.
pub fn extend_ntk(basis: &FrequencyBasis, scale: f64) -> Result<ExtensionPlan> {
    check_scale(scale)?;
    let head_dim = basis.head_dim();
    if head_dim <= 2 {
        return Err(Error::InvalidDimension(head_dim));
    }
    let exponent = head_dim as f64 / (head_dim - 2) as f64;
    let effective_base = basis.base() * scale.powf(exponent);
    let scaled = FrequencyBasis::new(head_dim, effective_base)?
        .angles()
        .to_vec();
    Ok(ExtensionPlan::new(
        ExtensionMethod::Ntk,
        basis,
        scale,
        effective_base,
        scaled,
    ))
}

/// Height-segment ramp used by M-RoPE++.
///
/// `γ(d) = clamp((r_d − r_5x) / (r_2x − r_5x), 0, 1)` with `r_d = L'/λ_d`.
/// `L'` cancels out of the ratio, so the ramp depends only on the angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightRamp {
    r_hi: f64,
    r_lo: f64,
    scale: f64,
}

impl HeightRamp {
    pub fn new(basis: &FrequencyBasis, layout: &DimensionLayout, scale: f64) -> Result<Self> {
        layout.check_basis(basis)?;
        check_scale(scale)?;
        let x = layout.granularity();
        let angles = basis.angles();
        // Block 5x is one past the height segment; the ramp is anchored there
        // so that it reaches zero where the width segment begins. With x ≥ 1
        // and 8x blocks this index is always valid.
        Ok(Self {
            r_hi: angles[2 * x] / TAU,
            r_lo: angles[5 * x] / TAU,
            scale,
        })
    }

    /// `γ(d)` for block `d` with angle `theta`.
    pub fn gamma(&self, theta: f64) -> f64 {
        let r = theta / TAU;
        ((r - self.r_lo) / (self.r_hi - self.r_lo)).clamp(0.0, 1.0)
    }

    /// Multiplier `1/s + (1 − 1/s)·γ` applied to `θ_d`.
    pub fn factor(&self, theta: f64) -> f64 {
        let inv = 1.0 / self.scale;
        inv + (1.0 - inv) * self.gamma(theta)
    }
}

/// M-RoPE++: extrapolate temporal blocks, interpolate width blocks, ramp the
/// height blocks between the two.
pub fn extend_mropepp(
    basis: &FrequencyBasis,
    layout: &DimensionLayout,
    scale: f64,
) -> Result<ExtensionPlan> {
    let ramp = HeightRamp::new(basis, layout, scale)?;
    let scaled = basis
        .angles()
        .iter()
        .enumerate()
        .map(
            |(d, &theta)| match layout.segment_of(d).expect("block within layout") {
                Segment::Temporal => theta,
                Segment::Height => ramp.factor(theta) * theta,
                Segment::Width => theta / scale,
            },
        )
        .collect();
    Ok(ExtensionPlan::new(
        ExtensionMethod::MRopePlusPlus,
        basis,
        scale,
        basis.base(),
        scaled,
    ))
}

/// Per-block rotational coverage `r_d = L' / λ_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioProfile {
    pub target_length: u64,
    pub ratios: Vec<f64>,
}

impl RatioProfile {
    pub fn new(basis: &FrequencyBasis, target_length: u64) -> Self {
        Self::from_angles(basis.angles(), target_length)
    }

    fn from_angles(angles: &[f64], target_length: u64) -> Self {
        let ratios = angles
            .iter()
            .map(|theta| target_length as f64 / (TAU / theta))
            .collect();
        Self {
            target_length,
            ratios,
        }
    }
}

/// Measured scores for one RoPE base after 128K extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMeasurement {
    pub base: f64,
    pub label: String,
    pub videomme_long: f64,
    pub videomme_avg: f64,
    pub mme_sum: f64,
    pub mmbench: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecommendation {
    pub context_length: u64,
    pub recommended_base: f64,
    pub provenance: String,
}

/// Recommended RoPE bases keyed by context length, plus the measurements
/// behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTable {
    pub recommendations: Vec<BaseRecommendation>,
    pub measurements: Vec<BaseMeasurement>,
}

impl BaseTable {
    /// The bundled table. At 128K the selected base (500,000) is listed
    /// before the 4.9e6 reference value so that it wins the lookup.
    pub fn bundled() -> Self {
        let rec = |context_length, recommended_base, provenance: &str| BaseRecommendation {
            context_length,
            recommended_base,
            provenance: provenance.to_string(),
        };
        let m =
            |base, label: &str, videomme_long, videomme_avg, mme_sum, mmbench| BaseMeasurement {
                base,
                label: label.to_string(),
                videomme_long,
                videomme_avg,
                mme_sum,
                mmbench,
            };
        Self {
            recommendations: vec![
                rec(
                    2_048,
                    10_000.0,
                    "default base of the 2K-context Qwen-VL profile",
                ),
                rec(
                    131_072,
                    500_000.0,
                    "selected for 128K extension; best measured VideoMME-Long (43.2)",
                ),
                rec(
                    131_072,
                    4_900_000.0,
                    "blog-recommended optimum for 128K; not the selected value",
                ),
            ],
            measurements: vec![
                m(10_000.0, "default", 39.5, 41.1, 1848.29, 60.9),
                m(500_000.0, "optimal", 43.2, 51.2, 1862.62, 61.5),
                m(1_000_000.0, "", 43.1, 51.1, 1862.20, 61.4),
            ],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Returns the first entry with the smallest `context_length ≥ query`, or the
/// largest entry when the query exceeds every row.
pub fn recommend_base(
    context_length: u64,
    table: &[BaseRecommendation],
) -> Result<&BaseRecommendation> {
    if table.is_empty() {
        return Err(Error::Configuration("empty RoPE base table".into()));
    }
    if table
        .windows(2)
        .any(|w| w[1].context_length < w[0].context_length)
    {
        return Err(Error::Configuration(
            "RoPE base table must be sorted by context length".into(),
        ));
    }
    let hit = table
        .iter()
        .find(|r| r.context_length >= context_length)
        .unwrap_or_else(|| {
            let largest = table.last().expect("non-empty").context_length;
            table
                .iter()
                .find(|r| r.context_length == largest)
                .expect("largest present")
        });
    Ok(hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub stage: usize,
    pub target_length: u64,
    /// Ratio to the previous stage's length; 1 for the first stage.
    pub scale: f64,
}

/// Progressive extension stages, e.g. 8K → 32K → 64K → 128K.
pub fn progressive_schedule(stage_lengths: &[u64]) -> Result<Vec<ScheduleStage>> {
    if stage_lengths.is_empty() {
        return Err(Error::InvalidSchedule("no stages given".into()));
    }
    if stage_lengths[0] == 0 {
        return Err(Error::InvalidSchedule(
            "stage lengths must be positive".into(),
        ));
    }
    if let Some(w) = stage_lengths.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSchedule(format!(
            "stage lengths must strictly increase ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(stage_lengths
        .iter()
        .enumerate()
        .map(|(stage, &target_length)| ScheduleStage {
            stage,
            target_length,
            scale: if stage == 0 {
                1.0
            } else {
                target_length as f64 / stage_lengths[stage - 1] as f64
            },
        })
        .collect())
}
