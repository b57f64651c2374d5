//! Python bindings for `longctx`.
//!
//! Structured inputs and outputs (samples, manifests, plans) cross the
//! boundary as plain dicts and lists via JSON.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use longctx::chatml;
use longctx::extension::{self, BaseTable, ContextWindow, ExtensionMethod, ExtensionPlan};
use longctx::haystack::{self, HaystackConfig, HaystackCurve};
use longctx::hybrid::{self, HybridConfig};
use longctx::mrope::{self, DimensionLayout, ModalitySpan, Position3D};
use longctx::packer::{self, Pack, RecipeConfig, Sample, Turn};
use longctx::rotary;
use longctx::{EmbeddingMode, Matrix, Positions};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_method(name: &str) -> PyResult<ExtensionMethod> {
    name.parse().map_err(value_err)
}

/// Rotary angles `θ_d = base^(-2d/head_dim)`.
#[pyclass(name = "FrequencyBasis", frozen, module = "longctx_py")]
struct PyFrequencyBasis {
    inner: rotary::FrequencyBasis,
}

#[pymethods]
impl PyFrequencyBasis {
    #[new]
    #[pyo3(signature = (head_dim, base = 10_000.0))]
    fn new(head_dim: usize, base: f64) -> PyResult<Self> {
        rotary::FrequencyBasis::new(head_dim, base)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    #[getter]
    fn base(&self) -> f64 {
        self.inner.base()
    }

    #[getter]
    fn angles(&self) -> Vec<f64> {
        self.inner.angles().to_vec()
    }

    fn wavelength(&self, d: usize) -> PyResult<f64> {
        self.inner.wavelength(d).map_err(value_err)
    }

    /// Rotates `v` to position `pos`.
    fn apply(&self, pos: u64, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(pos, &v).map_err(value_err)
    }

    /// Dense `head_dim × head_dim` rotation matrix.
    fn rotation_matrix(&self, pos: u64) -> Vec<Vec<f64>> {
        self.inner.rotation_matrix(pos).to_dense()
    }

    /// Rotates `v` by the multimodal position `(t, h, w)`.
    fn apply_mrope(&self, pos: (u64, u64, u64), v: Vec<f64>) -> PyResult<Vec<f64>> {
        let layout = DimensionLayout::for_head_dim(self.inner.head_dim()).map_err(value_err)?;
        mrope::apply_mrope(
            &self.inner,
            &layout,
            Position3D::new(pos.0, pos.1, pos.2),
            &v,
        )
        .map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FrequencyBasis(head_dim={}, base={})",
            self.inner.head_dim(),
            self.inner.base()
        )
    }
}

/// Scaled angles for one extension method.
#[pyclass(name = "ExtensionPlan", frozen, module = "longctx_py")]
struct PyExtensionPlan {
    inner: ExtensionPlan,
}

#[pymethods]
impl PyExtensionPlan {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.as_str()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    #[getter]
    fn effective_base(&self) -> f64 {
        self.inner.effective_base
    }

    #[getter]
    fn original_angles(&self) -> Vec<f64> {
        self.inner.original_angles.clone()
    }

    #[getter]
    fn scaled_angles(&self) -> Vec<f64> {
        self.inner.scaled_angles.clone()
    }

    /// Per-block `(segment, θ, θ′)` rows.
    fn rows(&self) -> Vec<(String, f64, f64)> {
        let layout = DimensionLayout::for_head_dim(self.inner.head_dim).ok();
        self.inner
            .original_angles
            .iter()
            .zip(&self.inner.scaled_angles)
            .enumerate()
            .map(|(d, (a, b))| {
                let seg = layout
                    .as_ref()
                    .and_then(|l| l.segment_of(d))
                    .map_or("none", |s| s.as_str());
                (seg.to_string(), *a, *b)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExtensionPlan(method={}, head_dim={}, scale={})",
            self.inner.method, self.inner.head_dim, self.inner.scale
        )
    }
}

/// Builds an extension plan from `orig_len` to `target_len`.
#[pyfunction]
#[pyo3(signature = (method, head_dim = 128, base = 10_000.0, orig_len = 16_384, target_len = 131_072))]
fn extend(
    method: &str,
    head_dim: usize,
    base: f64,
    orig_len: u64,
    target_len: u64,
) -> PyResult<PyExtensionPlan> {
    let basis = rotary::FrequencyBasis::new(head_dim, base).map_err(value_err)?;
    let layout = DimensionLayout::for_head_dim(head_dim).ok();
    let window = ContextWindow::new(orig_len, target_len).map_err(value_err)?;
    ExtensionPlan::build(parse_method(method)?, &basis, layout.as_ref(), window)
        .map(|inner| PyExtensionPlan { inner })
        .map_err(value_err)
}

fn span_from_tuple(t: &Bound<'_, PyAny>) -> PyResult<ModalitySpan> {
    let kind: String = t.get_item(0)?.extract()?;
    let dims: Vec<u64> = t.len()?.checked_sub(1).map_or(Ok(vec![]), |n| {
        (1..=n)
            .map(|i| t.get_item(i)?.extract())
            .collect::<PyResult<Vec<u64>>>()
    })?;
    match (kind.as_str(), dims.as_slice()) {
        ("text", [length]) => Ok(ModalitySpan::Text { length: *length }),
        ("image", [grid_h, grid_w]) => Ok(ModalitySpan::Image {
            grid_h: *grid_h,
            grid_w: *grid_w,
        }),
        ("video", [frames, grid_h, grid_w]) => Ok(ModalitySpan::Video {
            frames: *frames,
            grid_h: *grid_h,
            grid_w: *grid_w,
        }),
        _ => Err(PyValueError::new_err(format!(
            "span must be ('text', n), ('image', h, w) or ('video', f, h, w); got {kind} with {} dims",
            dims.len()
        ))),
    }
}

/// `(t, h, w)` for each token. `spans` is either a string such as
/// `"text:3,image:2x2"` or a list of tuples like `("image", 2, 2)`.
#[pyfunction]
fn assign_positions(spans: &Bound<'_, PyAny>) -> PyResult<Vec<(u64, u64, u64)>> {
    let spans = match spans.extract::<String>() {
        Ok(text) => longctx::cli::parse_spans(&text).map_err(value_err)?,
        Err(_) => spans
            .try_iter()?
            .map(|item| span_from_tuple(&item?))
            .collect::<PyResult<Vec<_>>>()?,
    };
    let pos = mrope::assign_positions(&spans).map_err(value_err)?;
    Ok(pos.into_iter().map(|p| (p.t, p.h, p.w)).collect())
}

/// Recommended RoPE base for a context length.
#[pyfunction]
fn recommend_base(context_length: u64) -> PyResult<f64> {
    let table = BaseTable::bundled();
    extension::recommend_base(context_length, &table.recommendations)
        .map(|r| r.recommended_base)
        .map_err(value_err)
}

/// The bundled RoPE base table as JSON text.
#[pyfunction]
fn base_table_json() -> String {
    BaseTable::bundled().to_json()
}

/// `(stage, target_length, scale)` per stage.
#[pyfunction]
fn progressive_schedule(stages: Vec<u64>) -> PyResult<Vec<(usize, u64, f64)>> {
    Ok(extension::progressive_schedule(&stages)
        .map_err(value_err)?
        .into_iter()
        .map(|s| (s.stage, s.target_length, s.scale))
        .collect())
}

fn embedding_for(
    method: &str,
    d_k: usize,
    base: f64,
    orig_len: u64,
    target_len: u64,
) -> PyResult<EmbeddingMode> {
    if method == "none" || method == "nope" {
        return Ok(EmbeddingMode::None);
    }
    let window = ContextWindow::new(orig_len, target_len).map_err(value_err)?;
    haystack::method_embedding(parse_method(method)?, d_k, base, window).map_err(value_err)
}

/// Success rate per item count, averaged over needle depths.
#[pyfunction]
#[pyo3(signature = (
    items,
    method = "mropepp",
    d_k = 64,
    base = 10_000.0,
    orig_len = 64,
    target_len = None,
    tokens_per_item = 64,
    trials = 200,
    seed = 0,
    needle_depths = None,
))]
#[allow(clippy::too_many_arguments)]
fn haystack_curve(
    py: Python<'_>,
    items: Vec<usize>,
    method: &str,
    d_k: usize,
    base: f64,
    orig_len: u64,
    target_len: Option<u64>,
    tokens_per_item: usize,
    trials: usize,
    seed: u64,
    needle_depths: Option<Vec<f64>>,
) -> PyResult<Vec<(usize, f64)>> {
    let embedding = embedding_for(
        method,
        d_k,
        base,
        orig_len,
        target_len.unwrap_or(4 * orig_len),
    )?;
    let mut cfg = HaystackConfig::new(1, d_k, embedding);
    cfg.tokens_per_item = tokens_per_item;
    cfg.trials = trials;
    cfg.seed = seed;
    let depths = needle_depths.unwrap_or_else(haystack::default_depths);
    let curve = py
        .detach(|| haystack::haystack_curve(&cfg, &items, &depths))
        .map_err(value_err)?;
    Ok(curve
        .points
        .iter()
        .map(|p| (p.context_items, p.success_rate))
        .collect())
}

/// Largest item count whose rate reaches `threshold`, or `None`.
#[pyfunction]
#[pyo3(signature = (points, threshold = haystack::DEFAULT_THRESHOLD))]
fn effective_length(points: Vec<(usize, f64)>, threshold: f64) -> PyResult<Option<usize>> {
    let curve = HaystackCurve::new(
        points
            .into_iter()
            .map(|(context_items, success_rate)| haystack::CurvePoint {
                context_items,
                success_rate,
            })
            .collect(),
    )
    .map_err(value_err)?;
    haystack::effective_length(&curve, threshold).map_err(value_err)
}

/// Single-head attention. `positions` holds ints or `(t, h, w)` tuples;
/// `mode` is `"none"`, `"rope"` or `"mrope"`. Returns `(weights, output)`.
#[pyfunction]
#[pyo3(signature = (x, w_q, w_k, w_v, positions, mode = "rope", base = 10_000.0))]
#[allow(clippy::type_complexity)]
fn attention(
    x: Vec<Vec<f64>>,
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    positions: &Bound<'_, PyAny>,
    mode: &str,
    base: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let positions = match positions.extract::<Vec<u64>>() {
        Ok(p) => Positions::Scalar(p),
        Err(_) => Positions::Multimodal(
            positions
                .extract::<Vec<(u64, u64, u64)>>()?
                .into_iter()
                .map(|(t, h, w)| Position3D::new(t, h, w))
                .collect(),
        ),
    };
    let matrix = |rows: Vec<Vec<f64>>| Matrix::from_rows(rows).map_err(value_err);
    let w_q = matrix(w_q)?;
    let d_k = w_q.cols();
    let embedding = match mode {
        "none" => EmbeddingMode::None,
        "rope" => EmbeddingMode::Rope(rotary::FrequencyBasis::new(d_k, base).map_err(value_err)?),
        "mrope" => EmbeddingMode::MRope(
            rotary::FrequencyBasis::new(d_k, base).map_err(value_err)?,
            DimensionLayout::for_head_dim(d_k).map_err(value_err)?,
        ),
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let input = longctx::AttentionInput {
        x: matrix(x)?,
        w_q,
        w_k: matrix(w_k)?,
        w_v: matrix(w_v)?,
        positions,
        embedding,
    };
    let out = longctx::attention(&input).map_err(value_err)?;
    let dense = |m: &Matrix| (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    Ok((dense(&out.weights), dense(&out.output)))
}

/// First-fit-decreasing pack manifest for a list of sample dicts.
#[pyfunction]
fn pack<'py>(
    py: Python<'py>,
    samples: &Bound<'py, PyAny>,
    target_length: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let samples: Vec<Sample> = from_py(samples)?;
    for s in &samples {
        s.validate().map_err(value_err)?;
    }
    to_py(py, &packer::pack(&samples, target_length))
}

/// Recipe-balanced selection; returns a dict with the chosen samples and
/// the achieved shares.
#[pyfunction]
#[pyo3(signature = (samples, token_budget, seed = 0, recipe = None))]
fn sample_corpus<'py>(
    py: Python<'py>,
    samples: &Bound<'py, PyAny>,
    token_budget: u64,
    seed: u64,
    recipe: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let samples: Vec<Sample> = from_py(samples)?;
    let recipe: RecipeConfig = match recipe {
        Some(r) => from_py(r)?,
        None => RecipeConfig::default(),
    };
    let sel = packer::sample_corpus(&recipe, &samples, token_budget, seed).map_err(value_err)?;
    to_py(py, &sel)
}

/// ChatML text for the samples named in `pack` (a manifest pack dict).
#[pyfunction]
fn serialize_chatml(pack: &Bound<'_, PyAny>, samples: &Bound<'_, PyAny>) -> PyResult<String> {
    let pack: Pack = from_py(pack)?;
    let samples: Vec<Sample> = from_py(samples)?;
    chatml::serialize_chatml(&pack, &samples).map_err(value_err)
}

/// Turns recovered from ChatML text, as dicts.
#[pyfunction]
fn parse_chatml<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let turns: Vec<Turn> = chatml::parse_chatml(text).map_err(value_err)?;
    to_py(py, &turns)
}

/// Hybrid-resolution frame plan as a dict.
#[pyfunction]
#[pyo3(signature = (frames, group_size = 4, hi_res_tokens = 240, compression = 3))]
fn plan_hybrid<'py>(
    py: Python<'py>,
    frames: u64,
    group_size: u64,
    hi_res_tokens: u64,
    compression: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = HybridConfig::new(group_size, hi_res_tokens, compression).map_err(value_err)?;
    to_py(py, &hybrid::plan(frames, &cfg).map_err(value_err)?)
}

/// `(frames, tokens_per_frame)` under a fixed budget.
#[pyfunction]
fn tradeoff(budget: u64, frames: Vec<u64>) -> PyResult<Vec<(u64, u64)>> {
    Ok(hybrid::tradeoff_table(budget, &frames)
        .map_err(value_err)?
        .into_iter()
        .map(|r| (r.frames, r.tokens_per_frame))
        .collect())
}

#[pymodule]
fn longctx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFrequencyBasis>()?;
    m.add_class::<PyExtensionPlan>()?;
    m.add_function(wrap_pyfunction!(extend, m)?)?;
    m.add_function(wrap_pyfunction!(assign_positions, m)?)?;
    m.add_function(wrap_pyfunction!(recommend_base, m)?)?;
    m.add_function(wrap_pyfunction!(base_table_json, m)?)?;
    m.add_function(wrap_pyfunction!(progressive_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(haystack_curve, m)?)?;
    m.add_function(wrap_pyfunction!(effective_length, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(sample_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_chatml, m)?)?;
    m.add_function(wrap_pyfunction!(parse_chatml, m)?)?;
    m.add_function(wrap_pyfunction!(plan_hybrid, m)?)?;
    m.add_function(wrap_pyfunction!(tradeoff, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
