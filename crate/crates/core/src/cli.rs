//! Command-line front end. [`dispatch`] runs one subcommand and returns the
//! process exit code: 0 on success, 2 on usage or input errors, 1 on I/O
//! failure.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::attention::EmbeddingMode;
use crate::chatml::serialize_chatml;
use crate::error::Error;
use crate::extension::{
    progressive_schedule, ContextWindow, ExtensionMethod, ExtensionPlan, RatioProfile,
};
use crate::haystack::{
    default_depths, effective_length, haystack_curve, method_embedding, HaystackConfig,
    DEFAULT_THRESHOLD,
};
use crate::hybrid::{plan, tradeoff_table, HybridConfig};
use crate::mrope::{assign_positions, DimensionLayout, ModalitySpan};
use crate::packer::{pack, sample_corpus, PackManifest, RecipeConfig, Sample, Selection};
use crate::rotary::FrequencyBasis;

#[derive(Debug, Parser)]
#[command(
    name = "longctx",
    version,
    about = "Rotary embedding, context extension and long-context data tools"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Random seed; falls back to $LONGCTX_SEED, then 0.
    #[arg(long, global = true, env = "LONGCTX_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Output format (each subcommand has its own default).
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,

    /// Write output here instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    None,
    Extrapolation,
    Pi,
    Ntk,
    Mropepp,
}

impl MethodArg {
    fn extension(self) -> Option<ExtensionMethod> {
        match self {
            MethodArg::None => None,
            MethodArg::Extrapolation => Some(ExtensionMethod::Extrapolation),
            MethodArg::Pi => Some(ExtensionMethod::Pi),
            MethodArg::Ntk => Some(ExtensionMethod::Ntk),
            MethodArg::Mropepp => Some(ExtensionMethod::MRopePlusPlus),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the rotary frequency basis (angle, wavelength, coverage ratio).
    AnalyzeBasis {
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = 10_000.0)]
        base: f64,
        /// Context length used for the coverage ratio r = L/λ.
        #[arg(long, default_value_t = 131_072)]
        target_len: u64,
    },
    /// Print the scaled angle table of a context-extension method.
    Extend {
        #[arg(long, value_enum, default_value = "mropepp")]
        method: MethodArg,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = 10_000.0)]
        base: f64,
        /// Original (pre-training) context length.
        #[arg(long, default_value_t = 16_384)]
        orig_len: u64,
        /// Extended context length.
        #[arg(long, default_value_t = 131_072)]
        target_len: u64,
    },
    /// Assign multimodal (t, h, w) positions, one JSON object per line.
    Positions {
        /// Comma-separated spans: text:N, image:HxW, video:FxHxW.
        #[arg(long)]
        spans: String,
    },
    /// Run the synthetic needle-retrieval harness over a list of item counts.
    Haystack {
        /// Comma-separated item counts.
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
        items: Vec<usize>,
        #[arg(long = "d-k", default_value_t = 64)]
        d_k: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        tokens_per_item: usize,
        #[arg(long, value_enum, default_value = "mropepp")]
        method: MethodArg,
        #[arg(long, default_value_t = 10_000.0)]
        base: f64,
        /// Original context length in positions.
        #[arg(long, default_value_t = 64)]
        orig_len: u64,
        /// Extended context length in positions (default: 4 × orig-len).
        #[arg(long)]
        target_len: Option<u64>,
        /// Comma-separated needle depths in [0, 1] to average over; 0 is
        /// farthest from the query.
        #[arg(long, value_delimiter = ',', default_values_t = default_depths())]
        needle_depth: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Pack JSON-lines samples into target-length manifests.
    Pack {
        #[command(flatten)]
        data: DataArgs,
        /// Pack length in tokens (default: recipe target length).
        #[arg(long)]
        target_len: Option<u64>,
        /// Write each pack's ChatML text to DIR/pack_NNNN.txt.
        #[arg(long)]
        chatml_dir: Option<PathBuf>,
    },
    /// Emit one pack manifest per progressive-extension stage.
    Schedule {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated, strictly increasing stage lengths.
        #[arg(long, value_delimiter = ',', default_values_t = [8_192u64, 32_768, 65_536, 131_072])]
        stages: Vec<u64>,
    },
    /// Lay out a hybrid-resolution frame plan.
    PlanHybrid {
        #[arg(long)]
        frames: u64,
        #[arg(long, default_value_t = 4)]
        group_size: u64,
        #[arg(long, default_value_t = 240)]
        hi_res_tokens: u64,
        #[arg(long, default_value_t = 3)]
        compression: u64,
    },
    /// Tokens per frame for each frame count under a fixed budget.
    Tradeoff {
        #[arg(long, default_value_t = 122_880)]
        budget: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [128u64, 256, 512, 768, 1024])]
        frames: Vec<u64>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Samples as JSON lines (`-` for stdin).
    #[arg(long, default_value = "-")]
    pub input: String,
    /// RecipeConfig JSON file; enables ratio-targeted sampling.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Token budget for sampling (default: all corpus tokens).
    #[arg(long)]
    pub budget: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(&cli) {
        Ok(text) => {
            let written = match &cli.global.output {
                Some(path) => fs::write(path, text.as_bytes())
                    .map_err(|e| io_err(&path.display().to_string(), e)),
                None => out
                    .write_all(text.as_bytes())
                    .map_err(|e| io_err("stdout", e)),
            };
            match written {
                Ok(()) => 0,
                Err(CliError::Io(msg)) | Err(CliError::Usage(msg)) => {
                    let _ = writeln!(err, "error: {msg}");
                    1
                }
            }
        }
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(CliError::Io(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let fmt = cli.global.format;
    let seed = cli.global.seed;
    match &cli.command {
        Command::AnalyzeBasis {
            head_dim,
            base,
            target_len,
        } => analyze_basis(*head_dim, *base, *target_len, fmt),
        Command::Extend {
            method,
            head_dim,
            base,
            orig_len,
            target_len,
        } => extend(*method, *head_dim, *base, *orig_len, *target_len, fmt),
        Command::Positions { spans } => positions(spans, fmt),
        Command::Haystack {
            items,
            d_k,
            trials,
            tokens_per_item,
            method,
            base,
            orig_len,
            target_len,
            needle_depth,
            threshold,
        } => {
            let window = ContextWindow::new(*orig_len, target_len.unwrap_or(4 * orig_len))?;
            let embedding = match method.extension() {
                None => EmbeddingMode::None,
                Some(m) => method_embedding(m, *d_k, *base, window)?,
            };
            let mut cfg = HaystackConfig::new(1, *d_k, embedding);
            cfg.trials = *trials;
            cfg.tokens_per_item = *tokens_per_item;
            cfg.seed = seed;
            haystack(&cfg, items, needle_depth, *threshold, fmt)
        }
        Command::Pack {
            data,
            target_len,
            chatml_dir,
        } => pack_cmd(data, *target_len, chatml_dir.as_deref(), seed, fmt),
        Command::Schedule { data, stages } => schedule(data, stages, seed),
        Command::PlanHybrid {
            frames,
            group_size,
            hi_res_tokens,
            compression,
        } => {
            let cfg = HybridConfig::new(*group_size, *hi_res_tokens, *compression)?;
            let p = plan(*frames, &cfg)?;
            match fmt.unwrap_or(OutputFormat::Json) {
                OutputFormat::Json => Ok(to_json(&p)),
                OutputFormat::Csv => {
                    let mut s = String::from("frame,tokens\n");
                    for (i, t) in p.per_frame_tokens.iter().enumerate() {
                        s.push_str(&format!("{i},{t}\n"));
                    }
                    Ok(s)
                }
            }
        }
        Command::Tradeoff { budget, frames } => {
            let rows = tradeoff_table(*budget, frames)?;
            match fmt.unwrap_or(OutputFormat::Csv) {
                OutputFormat::Json => Ok(to_json(&rows)),
                OutputFormat::Csv => {
                    let mut s = String::from("frames,tokens_per_frame\n");
                    for r in rows {
                        s.push_str(&format!("{},{}\n", r.frames, r.tokens_per_frame));
                    }
                    Ok(s)
                }
            }
        }
    }
}

fn analyze_basis(
    head_dim: usize,
    base: f64,
    target_len: u64,
    fmt: Option<OutputFormat>,
) -> Result<String, CliError> {
    let basis = FrequencyBasis::new(head_dim, base)?;
    let layout = DimensionLayout::for_head_dim(head_dim).ok();
    let ratios = RatioProfile::new(&basis, target_len);
    let rows: Vec<Value> = (0..basis.num_blocks())
        .map(|d| {
            json!({
                "d": d,
                "theta": basis.angles()[d],
                "lambda": basis.wavelength(d).expect("in range"),
                "r": ratios.ratios[d],
                "segment": segment_name(layout.as_ref(), d),
            })
        })
        .collect();
    match fmt.unwrap_or(OutputFormat::Csv) {
        OutputFormat::Json => Ok(to_json(&rows)),
        OutputFormat::Csv => Ok(csv_rows(&["d", "theta", "lambda", "r", "segment"], &rows)),
    }
}

fn extend(
    method: MethodArg,
    head_dim: usize,
    base: f64,
    orig_len: u64,
    target_len: u64,
    fmt: Option<OutputFormat>,
) -> Result<String, CliError> {
    let method = method.extension().unwrap_or(ExtensionMethod::Extrapolation);
    let basis = FrequencyBasis::new(head_dim, base)?;
    let layout = DimensionLayout::for_head_dim(head_dim).ok();
    let window = ContextWindow::new(orig_len, target_len)?;
    let plan = ExtensionPlan::build(method, &basis, layout.as_ref(), window)?;
    let ratios = RatioProfile::new(&basis, target_len);
    let rows: Vec<Value> = (0..basis.num_blocks())
        .map(|d| {
            json!({
                "d": d,
                "theta": basis.angles()[d],
                "theta_prime": plan.scaled_angles[d],
                "lambda": basis.wavelength(d).expect("in range"),
                "r": ratios.ratios[d],
                "segment": segment_name(layout.as_ref(), d),
            })
        })
        .collect();
    match fmt.unwrap_or(OutputFormat::Csv) {
        OutputFormat::Json => Ok(to_json(&json!({
            "method": plan.method,
            "head_dim": plan.head_dim,
            "base": plan.base,
            "effective_base": plan.effective_base,
            "scale": plan.scale,
            "original_length": orig_len,
            "target_length": target_len,
            "rows": rows,
        }))),
        OutputFormat::Csv => Ok(csv_rows(
            &["d", "theta", "theta_prime", "lambda", "r", "segment"],
            &rows,
        )),
    }
}

fn segment_name(layout: Option<&DimensionLayout>, d: usize) -> &'static str {
    layout
        .and_then(|l| l.segment_of(d))
        .map_or("none", |s| s.as_str())
}

/// Parses `text:N`, `image:HxW` and `video:FxHxW` spans.
pub fn parse_spans(text: &str) -> Result<Vec<ModalitySpan>, Error> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let bad = || Error::InvalidInput(format!("malformed span `{item}`"));
            let (kind, dims) = item.trim().split_once(':').ok_or_else(bad)?;
            let nums = dims
                .split('x')
                .map(|n| n.trim().parse::<u64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>, _>>()?;
            match (kind.trim().to_ascii_lowercase().as_str(), nums.as_slice()) {
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
                _ => Err(bad()),
            }
        })
        .collect()
}

fn positions(spans: &str, fmt: Option<OutputFormat>) -> Result<String, CliError> {
    let spans = parse_spans(spans)?;
    let pos = assign_positions(&spans)?;
    let mut s = String::new();
    match fmt.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => {
            for p in pos {
                s.push_str(&serde_json::to_string(&p).expect("serializes"));
                s.push('\n');
            }
        }
        OutputFormat::Csv => {
            s.push_str("t,h,w\n");
            for p in pos {
                s.push_str(&format!("{},{},{}\n", p.t, p.h, p.w));
            }
        }
    }
    Ok(s)
}

fn haystack(
    cfg: &HaystackConfig,
    items: &[usize],
    needle_depths: &[f64],
    threshold: f64,
    fmt: Option<OutputFormat>,
) -> Result<String, CliError> {
    if items.is_empty() {
        return Err(CliError::Usage("--items needs at least one count".into()));
    }
    let curve = haystack_curve(cfg, items, needle_depths)?;
    let eff = effective_length(&curve, threshold)?;
    match fmt.unwrap_or(OutputFormat::Csv) {
        OutputFormat::Json => Ok(to_json(&json!({
            "curve": curve.points,
            "threshold": threshold,
            "effective_length": eff,
        }))),
        OutputFormat::Csv => {
            let mut s = String::from("context_items,success_rate\n");
            for p in &curve.points {
                s.push_str(&format!(
                    "{},{}\n",
                    p.context_items,
                    format_num(p.success_rate)
                ));
            }
            let eff = eff.map_or("none".to_string(), |n| n.to_string());
            s.push_str(&format!(
                "# effective_length={eff} threshold={}\n",
                format_num(threshold)
            ));
            Ok(s)
        }
    }
}

fn read_samples(input: &str) -> Result<Vec<Sample>, CliError> {
    let reader: Box<dyn Read> = if input == "-" {
        Box::new(io::stdin())
    } else {
        Box::new(fs::File::open(input).map_err(|e| io_err(input, e))?)
    };
    let mut samples = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| io_err(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| CliError::Usage(format!("{input}:{}: {e}", i + 1)))?;
        sample.validate()?;
        if !ids.insert(sample.id.clone()) {
            return Err(CliError::Usage(format!(
                "duplicate sample id `{}`",
                sample.id
            )));
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CliError::Usage(format!("{input}: no samples")));
    }
    Ok(samples)
}

fn read_recipe(path: &Path) -> Result<RecipeConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    let recipe: RecipeConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    recipe.validate()?;
    Ok(recipe)
}

/// Samples to pack, the recipe if one was given, and the selection it produced.
type Loaded = (Vec<Sample>, Option<RecipeConfig>, Option<Selection>);

/// Loads samples and, when a recipe is given, draws the recipe-balanced subset.
fn load_data(data: &DataArgs, seed: u64) -> Result<Loaded, CliError> {
    let corpus = read_samples(&data.input)?;
    let recipe = data.recipe.as_deref().map(read_recipe).transpose()?;
    if recipe.is_none() && data.budget.is_none() {
        return Ok((corpus, None, None));
    }
    let effective = recipe.clone().unwrap_or_default();
    let budget = data
        .budget
        .unwrap_or_else(|| corpus.iter().map(|s| s.token_len).sum());
    let selection = sample_corpus(&effective, &corpus, budget, seed)?;
    Ok((selection.samples.clone(), recipe, Some(selection)))
}

fn selection_summary(sel: &Selection) -> Value {
    json!({
        "total_tokens": sel.total_tokens,
        "num_samples": sel.samples.len(),
        "category_shares": sel.category_shares,
        "long_share": sel.long_share,
        "warnings": sel.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
    })
}

fn pack_cmd(
    data: &DataArgs,
    target_len: Option<u64>,
    chatml_dir: Option<&Path>,
    seed: u64,
    fmt: Option<OutputFormat>,
) -> Result<String, CliError> {
    let (samples, recipe, selection) = load_data(data, seed)?;
    let target = target_len
        .or(recipe.as_ref().map(|r| r.target_length))
        .unwrap_or(RecipeConfig::default().target_length);
    if target == 0 {
        return Err(CliError::Usage("--target-len must be positive".into()));
    }
    let manifest = pack(&samples, target);
    if let Some(dir) = chatml_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(&dir.display().to_string(), e))?;
        for (i, p) in manifest.packs.iter().enumerate() {
            let text = serialize_chatml(p, &samples)?;
            let path = dir.join(format!("pack_{i:04}.txt"));
            fs::write(&path, text).map_err(|e| io_err(&path.display().to_string(), e))?;
        }
    }
    match fmt.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => {
            let mut v = serde_json::to_value(&manifest).expect("serializes");
            if let Some(sel) = &selection {
                v["selection"] = selection_summary(sel);
            }
            Ok(to_json(&v))
        }
        OutputFormat::Csv => Ok(manifest_csv(&manifest)),
    }
}

fn manifest_csv(m: &PackManifest) -> String {
    let mut s = String::from("pack,total_len,sample_ids\n");
    for (i, p) in m.packs.iter().enumerate() {
        s.push_str(&format!("{i},{},{}\n", p.total_len, p.sample_ids.join(";")));
    }
    s
}

fn schedule(data: &DataArgs, stages: &[u64], seed: u64) -> Result<String, CliError> {
    let plan = progressive_schedule(stages)?;
    let (samples, _, selection) = load_data(data, seed)?;
    let stages: Vec<Value> = plan
        .iter()
        .map(|st| {
            json!({
                "stage": st.stage,
                "target_length": st.target_length,
                "scale": st.scale,
                "manifest": pack(&samples, st.target_length),
            })
        })
        .collect();
    let mut v = json!({ "stages": stages });
    if let Some(sel) = &selection {
        v["selection"] = selection_summary(sel);
    }
    Ok(to_json(&v))
}

/// Formats like C's `%.12g`: 12 significant digits, trailing zeros removed.
pub fn format_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..12).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let fixed = format!("{:.*}", (11 - exp) as usize, x);
    trim_zeros(&fixed).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds every float in a JSON tree to 12 significant digits.
fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64");
            let r: f64 = format!("{x:.11e}").parse().expect("round trip");
            if let Some(num) = serde_json::Number::from_f64(r) {
                *n = num;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("serializes");
    round_floats(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("serializes");
    s.push('\n');
    s
}

fn csv_rows(columns: &[&str], rows: &[Value]) -> String {
    let mut s = columns.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = columns
            .iter()
            .map(|c| match &row[*c] {
                Value::Number(n) if n.is_f64() => format_num(n.as_f64().expect("f64")),
                Value::Number(n) => n.to_string(),
                Value::String(t) => t.clone(),
                other => other.to_string(),
            })
            .collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
