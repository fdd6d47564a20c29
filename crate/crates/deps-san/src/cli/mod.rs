//! Command-line surface over the library.
//!
//! Exit codes: 0 success, 1 internal failure (including a failed gradient
//! check and training divergence), 2 user-input errors. Error lines go to
//! stderr prefixed with "error:". All floating output is fixed at 6
//! decimals. Every command is deterministic given its flags; `--jobs`
//! parallelizes over sentences only and preserves output order.

pub mod config;

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::mean_row_entropy;
use crate::deptree::{parse_conllu, tree_distance_matrix, DepTree};
use crate::encoder::{
    encoder_forward, DsMode, EncoderConfig, EncoderError, EncoderParams, ForwardMode, LayerTrace,
};
use crate::scaling::{rs_sparsify, scale_matrix, wink_mask, AttentionMask, SparsingMode};
use crate::tensor::{finite_difference_check, TensorError};
use crate::toytask::{generate, init_params, train, ToyError, TrainConfig, Variant};
use config::Overrides;

pub const GRADCHECK_THRESHOLD: f64 = 1e-5;

#[derive(Debug)]
enum CliError {
    /// Bad input from the user (files, flags, config): exit 2.
    User(String),
    /// Failure inside the run (divergence, failed check, bug): exit 1.
    Internal(String),
}

type CliResult<T> = Result<T, CliError>;

fn user<E: std::fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

fn classify_encoder(e: EncoderError) -> CliError {
    match e {
        EncoderError::Tensor(inner) => CliError::Internal(inner.to_string()),
        other => CliError::User(other.to_string()),
    }
}

fn classify_toy(e: ToyError) -> CliError {
    match e {
        ToyError::Divergence { .. } => CliError::Internal(e.to_string()),
        ToyError::Tensor(inner) => CliError::Internal(inner.to_string()),
        ToyError::Encoder(inner) => classify_encoder(inner),
        other => CliError::User(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "deps-san",
    version,
    about = "Dependency-scaled self-attention: tree distances, Gaussian scale matrices, encoder runs, and the synthetic head-prediction task"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SparsingArg {
    None,
    Rs,
    Wink,
}

impl From<SparsingArg> for SparsingMode {
    fn from(v: SparsingArg) -> SparsingMode {
        match v {
            SparsingArg::None => SparsingMode::None,
            SparsingArg::Rs => SparsingMode::Rs,
            SparsingArg::Wink => SparsingMode::Wink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Deps,
    Baseline,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Deps => Variant::Deps,
            VariantArg::Baseline => Variant::Baseline,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write tree-distance matrices for CoNLL-U sentences
    Distances {
        #[arg(long)]
        conllu: PathBuf,
        /// Output file; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Worker threads over sentences
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write Gaussian dependency-scale matrices, optionally sparsified
    Scale {
        #[arg(long)]
        conllu: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, value_enum, default_value_t = SparsingArg::None)]
        sparsing: SparsingArg,
        /// Sparsing distance threshold / replacement
        #[arg(long, default_value_t = 6)]
        k: u32,
        /// RS replacement probability
        #[arg(long, default_value_t = 0.1)]
        q: f64,
        /// RS seed; sentence i draws from seed + i
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Random-init encoder forward pass; writes an attention trace
    Attend {
        #[arg(long)]
        conllu: PathBuf,
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Trace output file; stdout when absent
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Deps)]
        variant: VariantArg,
        /// Replace the Gaussian scale with all-ones (diagnostic; must
        /// reproduce the baseline exactly)
        #[arg(long)]
        ds_ones: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of the whole encoder gradient
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the synthetic head-prediction task
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Deps)]
        variant: VariantArg,
        /// Report JSON output file
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-layer mean attention entropy of a trace file
    AnalyzeEntropy {
        #[arg(long)]
        trace: PathBuf,
    },
}

/// Attention trace of one sentence: per-layer records in layer order.
#[derive(Debug, Serialize, Deserialize)]
pub struct SentenceTrace {
    /// 1-based sentence index in the input file.
    pub sentence: usize,
    pub layers: Vec<LayerTrace>,
}

/// The `attend` output and `analyze-entropy` input format.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceFile {
    pub sentences: Vec<SentenceTrace>,
}

pub fn run() -> u8 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Distances {
            conllu,
            out,
            format,
            jobs,
        } => distances_cmd(&conllu, out.as_deref(), format, jobs),
        Cmd::Scale {
            conllu,
            sigma,
            sparsing,
            k,
            q,
            seed,
            out,
            format,
            jobs,
        } => scale_cmd(&conllu, sigma, sparsing.into(), k, q, seed, out.as_deref(), format, jobs),
        Cmd::Attend {
            conllu,
            config,
            seed,
            trace,
            variant,
            ds_ones,
            jobs,
        } => attend_cmd(
            &conllu,
            config.as_deref(),
            seed,
            trace.as_deref(),
            variant.into(),
            ds_ones,
            jobs,
        ),
        Cmd::Gradcheck { config, seed } => gradcheck_cmd(config.as_deref(), seed),
        Cmd::TrainToy {
            config,
            variant,
            report,
            seed,
        } => train_toy_cmd(config.as_deref(), variant.into(), report.as_deref(), seed),
        Cmd::AnalyzeEntropy { trace } => analyze_entropy_cmd(&trace),
    }
}

fn read_file(path: &std::path::Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read {}: {}", path.display(), e)))
}

fn write_out(path: Option<&std::path::Path>, content: &str) -> CliResult<()> {
    match path {
        Some(path) => fs::write(path, content)
            .map_err(|e| CliError::User(format!("cannot write {}: {}", path.display(), e))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Apply sentence workers in parallel, preserving input order. Chunks are
/// contiguous so results are position-stable regardless of thread timing.
fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let mut results: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (ci, (item_chunk, result_chunk)) in
            items.chunks(chunk).zip(results.chunks_mut(chunk)).enumerate()
        {
            let f = &f;
            scope.spawn(move || {
                for (j, item) in item_chunk.iter().enumerate() {
                    result_chunk[j] = Some(f(ci * chunk + j, item));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled its slot"))
        .collect()
}

fn parse_trees(path: &std::path::Path) -> CliResult<Vec<DepTree>> {
    let text = read_file(path)?;
    parse_conllu(&text).map_err(user)
}

fn distances_cmd(
    conllu: &std::path::Path,
    out: Option<&std::path::Path>,
    format: Format,
    jobs: usize,
) -> CliResult<()> {
    let trees = parse_trees(conllu)?;
    let blocks = par_map(&trees, jobs, |_, tree| {
        let m = tree_distance_matrix(tree);
        match format {
            Format::Csv => m.to_csv(),
            Format::Json => m.to_json(),
        }
    });
    let content = match format {
        Format::Csv => blocks.join("\n"),
        Format::Json => format!("[{}]\n", blocks.join(",")),
    };
    write_out(out, &content)
}

fn mask_json(mask: &AttentionMask) -> String {
    let mut out = String::from("[");
    for i in 0..mask.n() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, &b) in mask.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push(if b { '1' } else { '0' });
        }
        out.push(']');
    }
    out.push(']');
    out
}

#[allow(clippy::too_many_arguments)]
fn scale_cmd(
    conllu: &std::path::Path,
    sigma: f64,
    sparsing: SparsingMode,
    k: u32,
    q: f64,
    seed: u64,
    out: Option<&std::path::Path>,
    format: Format,
    jobs: usize,
) -> CliResult<()> {
    let trees = parse_trees(conllu)?;
    let blocks = par_map(&trees, jobs, |i, tree| -> Result<String, String> {
        let dist = tree_distance_matrix(tree);
        let diluted = match sparsing {
            SparsingMode::Rs => {
                Some(rs_sparsify(&dist, k, q, seed.wrapping_add(i as u64))
                    .map_err(|e| e.to_string())?)
            }
            _ => None,
        };
        let scaled =
            scale_matrix(diluted.as_ref().unwrap_or(&dist), sigma).map_err(|e| e.to_string())?;
        let mask = (sparsing == SparsingMode::Wink).then(|| wink_mask(&dist, k));
        Ok(match format {
            Format::Csv => match mask {
                Some(mask) => format!("{}mask\n{}", scaled.to_csv(), mask.to_csv()),
                None => scaled.to_csv(),
            },
            Format::Json => format!(
                "{{\"scaled\":{},\"mask\":{}}}",
                scaled.to_json(),
                mask.map_or_else(|| "null".to_string(), |m| mask_json(&m)),
            ),
        })
    });
    let blocks: Vec<String> = blocks
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(CliError::User)?;
    let content = match format {
        Format::Csv => blocks.join("\n"),
        Format::Json => format!("[{}]\n", blocks.join(",")),
    };
    write_out(out, &content)
}

fn resolve_config(
    path: Option<&std::path::Path>,
    mut base: TrainConfig,
    seed: Option<u64>,
) -> CliResult<TrainConfig> {
    if let Some(path) = path {
        let text = read_file(path)?;
        let overrides = Overrides::parse(&text).map_err(user)?;
        overrides.apply(&mut base);
    }
    if let Some(seed) = seed {
        base.seed = seed;
    }
    Ok(base)
}

/// Round every fractional number in a JSON tree to 6 decimals; integers
/// are left alone and -0 is normalized to 0.
fn round6(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if n.is_f64() {
                let rounded = (n.as_f64().expect("checked f64") * 1e6).round() / 1e6 + 0.0;
                if let Some(num) = serde_json::Number::from_f64(rounded) {
                    *value = serde_json::Value::Number(num);
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round6),
        serde_json::Value::Object(map) => map.values_mut().for_each(round6),
        _ => {}
    }
}

fn attend_cmd(
    conllu: &std::path::Path,
    config: Option<&std::path::Path>,
    seed: Option<u64>,
    trace_out: Option<&std::path::Path>,
    variant: Variant,
    ds_ones: bool,
    jobs: usize,
) -> CliResult<()> {
    let trees = parse_trees(conllu)?;
    let base = TrainConfig {
        model: EncoderConfig::default(),
        ..TrainConfig::default()
    };
    let cfg = resolve_config(config, base, seed)?;
    let mut model = cfg.model.clone();
    if ds_ones {
        model.ds_mode = DsMode::Ones;
    }
    if variant == Variant::Baseline {
        model = model.baseline();
    }
    model.validate().map_err(classify_encoder)?;

    // ids from first-occurrence order of surface forms across the file
    let mut vocab: HashMap<&str, usize> = HashMap::new();
    for tree in &trees {
        for tok in tree.tokens() {
            let next = vocab.len();
            vocab.entry(tok.form.as_str()).or_insert(next);
        }
    }
    let vocab_size = vocab.len().max(1);

    let sentences = par_map(&trees, jobs, |i, tree| -> Result<SentenceTrace, CliError> {
        // workers rebuild identical weights from the seed; graphs are
        // thread-confined so parameters cannot be shared across workers
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = EncoderParams::init(&model, vocab_size, &mut rng).map_err(classify_encoder)?;
        let tokens: Vec<usize> = tree.tokens().iter().map(|t| vocab[t.form.as_str()]).collect();
        let (_, layers) = encoder_forward(&tokens, tree, &model, &params, ForwardMode::Inference)
            .map_err(classify_encoder)?;
        Ok(SentenceTrace {
            sentence: i + 1,
            layers,
        })
    });
    let sentences: Vec<SentenceTrace> = sentences.into_iter().collect::<Result<_, _>>()?;
    let file = TraceFile { sentences };
    let mut value = serde_json::to_value(&file)
        .map_err(|e| CliError::Internal(format!("trace serialization: {e}")))?;
    round6(&mut value);
    write_out(trace_out, &format!("{value}\n"))
}

fn gradcheck_cmd(config: Option<&std::path::Path>, seed: Option<u64>) -> CliResult<()> {
    let cfg = resolve_config(config, TrainConfig::default(), seed)?;
    cfg.validate().map_err(classify_toy)?;
    let params = init_params(&cfg).map_err(classify_toy)?;
    let sample = generate(1, &cfg)
        .pop()
        .expect("one sample requested");
    let tensors = params.tensors();
    let rel = finite_difference_check(
        || {
            let (out, _) = encoder_forward(
                &sample.tokens,
                &sample.tree,
                &cfg.model,
                &params,
                ForwardMode::Inference,
            )
            .map_err(|e| TensorError::ShapeMismatch(e.to_string()))?;
            out.matmul(&out.transpose()?)?
                .softmax_cross_entropy(&sample.labels)
        },
        &tensors,
        1e-4,
    )
    .map_err(|e| CliError::Internal(e.to_string()))?;
    println!("max relative error: {rel:.6e}");
    if rel < GRADCHECK_THRESHOLD {
        Ok(())
    } else {
        Err(CliError::Internal(format!(
            "gradient check failed: {rel:.6e} >= {GRADCHECK_THRESHOLD:e}"
        )))
    }
}

fn train_toy_cmd(
    config: Option<&std::path::Path>,
    variant: Variant,
    report_out: Option<&std::path::Path>,
    seed: Option<u64>,
) -> CliResult<()> {
    let cfg = resolve_config(config, TrainConfig::default(), seed)?;
    let report = train(&cfg, variant).map_err(classify_toy)?;
    println!("variant: {}", report.variant.as_str());
    println!("optimizer: {}", report.optimizer);
    println!("steps: {}", report.loss.len());
    println!("final accuracy: {:.6}", report.final_accuracy);
    println!("final loss: {:.6}", report.final_loss);
    for (i, e) in report.entropy_per_layer.iter().enumerate() {
        println!("entropy layer {}: {:.6}", i + 1, e);
    }
    if let Some(path) = report_out {
        let mut value = serde_json::to_value(&report)
            .map_err(|e| CliError::Internal(format!("report serialization: {e}")))?;
        round6(&mut value);
        write_out(Some(path), &format!("{value}\n"))?;
    }
    Ok(())
}

fn analyze_entropy_cmd(trace: &std::path::Path) -> CliResult<()> {
    let text = read_file(trace)?;
    let file: TraceFile = serde_json::from_str(&text)
        .map_err(|e| CliError::User(format!("bad trace file: {e}")))?;
    let mut per_layer: std::collections::BTreeMap<usize, (f64, usize)> =
        std::collections::BTreeMap::new();
    for sentence in &file.sentences {
        for layer in &sentence.layers {
            let slot = per_layer.entry(layer.layer).or_insert((0.0, 0));
            for head in &layer.attn.heads {
                slot.0 += mean_row_entropy(&head.weights);
                slot.1 += 1;
            }
        }
    }
    for (layer, (sum, count)) in per_layer {
        if count > 0 {
            println!("layer {layer}: {:.6}", sum / count as f64);
        }
    }
    Ok(())
}
