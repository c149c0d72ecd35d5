// SPDX-License-Identifier: MIT OR Apache-2.0

//! `rationale`: generate data, train, rationalize, evaluate, calibrate, bench.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use rationale::baselines::write_orderings;
use rationale::compat::{calibration_error, calibration_points, write_calibration_csv, write_calibration_summary};
use rationale::corpus::{generate, read_dataset, write_dataset, Dataset, GeneratorConfig};
use rationale::metrics::{build_report, example_metrics, read_gold, ExampleMetrics, GoldRecord};
use rationale::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, Transformer};
use rationale::pipeline::{
    bench_greedy, mean_secs, rationalize_dataset, write_bench_csv, Method, Positions, RationalizeOptions,
};
use rationale::rationalizer::{read_rationales, write_rationales, EvalMode, RationaleRecord, Status};
use rationale::training::{perplexity, train_with, TrainConfig};
use rationale::{atomic_write, Error, Result};

#[derive(Parser)]
#[command(name = "rationale", version, about = "Greedy sequential rationalization of autoregressive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Language {
    Majority,
    Keyed,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum PositionsArg {
    Last,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sparse,
    Masked,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sparse => EvalMode::Sparse,
            ModeArg::Masked => EvalMode::Masked,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData {
        #[arg(long, value_enum)]
        language: Language,
        /// JSON file with the generator's fields (without `name`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of examples, overriding the config.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the gold rationales carried by the examples.
        #[arg(long)]
        gold_out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint and a CSV log.
    Train {
        /// JSON model config; `vocab_size` and `max_positions` default to the data's.
        #[arg(long)]
        model_config: PathBuf,
        /// JSON training config.
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Log path; defaults to the checkpoint path with `.log.csv` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rationalize predictions of a checkpoint with one method.
    Rationalize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// greedy, exhaustive, grad_norm, grad_x_emb, ig, last_attn, all_attn or rollout.
        #[arg(long)]
        method: String,
        #[arg(long, value_enum, default_value = "last")]
        positions: PositionsArg,
        /// Largest rationale size before giving up; unlimited by default.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Largest subset size the exhaustive search tries.
        #[arg(long, default_value_t = 6)]
        size_cap: usize,
        /// Riemann steps for integrated gradients.
        #[arg(long, default_value_t = 100)]
        ig_steps: usize,
        /// How subsets are shown to the model.
        #[arg(long, value_enum, default_value = "sparse")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Only the first N examples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the saliency orderings (baseline methods only).
        #[arg(long)]
        orderings_out: Option<PathBuf>,
    },
    /// Score rationale files against a dataset and optional gold annotations.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        rationales: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a majority-language model's subset predictions with the oracle.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// CSV of points; the summary goes next to it with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time greedy rationalization under sparse or masked evaluation.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "sparse")]
        mode: ModeArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
    vocab_size: Option<usize>,
    max_positions: Option<usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn load_model(ckpt: &Path, ds: Option<&Dataset>) -> Result<(Transformer<f32>, Checkpoint)> {
    let c = load_checkpoint(ckpt)?;
    if let (Some(v), Some(ds)) = (&c.vocab, ds) {
        if *v != ds.vocab {
            return Err(Error::VocabMismatch("checkpoint and dataset vocabularies differ".into()));
        }
    }
    Ok((c.model()?, c))
}

fn gen_data(
    language: Language,
    config: Option<&Path>,
    n: Option<usize>,
    seed: u64,
    out: &Path,
    gold_out: Option<&Path>,
) -> Result<()> {
    let name = match language {
        Language::Majority => "majority",
        Language::Keyed => "keyed",
        Language::Concat => "concat",
    };
    let mut fields = match config {
        Some(p) => read_json::<serde_json::Value>(p)?,
        None => json!({}),
    };
    let obj = fields.as_object_mut().ok_or_else(|| Error::Config("generator config must be a JSON object".into()))?;
    let count_key = if matches!(language, Language::Concat) { "n_pairs" } else { "n_examples" };
    if let Some(n) = n {
        obj.insert(count_key.into(), json!(n));
    }
    if matches!(language, Language::Concat) {
        let pairs = obj.get("n_pairs").and_then(|v| v.as_u64()).unwrap_or(0);
        obj.entry("base").or_insert_with(|| json!({"name": "majority", "n_examples": pairs.max(2)}));
        obj.entry("base_seed").or_insert(json!(seed.wrapping_add(1)));
    }
    obj.insert("name".into(), json!(name));
    let cfg: GeneratorConfig =
        serde_json::from_value(fields).map_err(|e| Error::Config(format!("{name} generator: {e}")))?;
    let ds = generate(&cfg, seed)?;
    write_dataset(&ds, out)?;
    if let Some(g) = gold_out {
        let gold: Vec<GoldRecord> = ds
            .examples
            .iter()
            .enumerate()
            .filter_map(|(i, ex)| {
                ex.meta.gold.clone().map(|gold| GoldRecord {
                    example: i,
                    t: Some(ex.len()),
                    gold: Some(gold),
                    sure: None,
                    possible: None,
                })
            })
            .collect();
        atomic_write(g, |w| {
            for r in &gold {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
    }
    println!("{name}: {} examples, {} tokens, vocab {}", ds.len(), ds.n_tokens(), ds.vocab.len());
    Ok(())
}

fn train(
    model_config: &Path,
    train_config: &Path,
    train: &Path,
    valid: &Path,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let mc: ModelConfigFile = read_json(model_config)?;
    let tcfg: TrainConfig = read_json(train_config)?;
    let train_ds = read_dataset(train)?;
    let valid_ds = read_dataset(valid)?;
    let longest = train_ds.examples.iter().chain(&valid_ds.examples).map(|e| e.len()).max().unwrap_or(0);
    let cfg = ModelConfig {
        n_layers: mc.n_layers,
        n_heads: mc.n_heads,
        d_model: mc.d_model,
        d_ff: mc.d_ff,
        vocab_size: mc.vocab_size.unwrap_or(train_ds.vocab.len()),
        max_positions: mc.max_positions.unwrap_or(longest + 1),
    };
    let (params, tlog) = train_with(&cfg, &tcfg, &train_ds, &valid_ds, |r| {
        if let Some(p) = r.valid_ppl {
            eprintln!("step {} loss {:.4} lr {:.6} valid ppl {:.4}", r.step, r.loss, r.lr, p);
        }
    })?;
    let ckpt = Checkpoint { cfg, params, vocab: Some(train_ds.vocab.clone()) };
    save_checkpoint(&ckpt, out)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    tlog.write_csv(&log_path)?;
    let ppl = perplexity(&ckpt.model()?, &valid_ds)?;
    println!("best step {} valid ppl {ppl:.4} in {:.1}s", tlog.best_step, tlog.wall_clock_secs);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn rationalize(
    ckpt: &Path,
    data: &Path,
    method: &str,
    positions: PositionsArg,
    max_steps: Option<usize>,
    size_cap: usize,
    ig_steps: usize,
    mode: ModeArg,
    workers: usize,
    limit: Option<usize>,
    out: &Path,
    orderings_out: Option<&Path>,
) -> Result<()> {
    let method: Method = method.parse()?;
    if orderings_out.is_some() && !matches!(method, Method::Saliency(_)) {
        return Err(Error::Config(format!("--orderings-out needs a saliency method, not `{method}`")));
    }
    if ig_steps == 0 {
        return Err(Error::Config("--ig-steps must be at least 1".into()));
    }
    let ds = read_dataset(data)?;
    let (model, _) = load_model(ckpt, Some(&ds))?;
    let opts = RationalizeOptions {
        method,
        positions: match positions {
            PositionsArg::Last => Positions::Last,
            PositionsArg::All => Positions::All,
        },
        max_steps: max_steps.unwrap_or(usize::MAX),
        size_cap,
        ig_steps,
        mode: mode.into(),
        limit,
    };
    let res = rationalize_dataset(&model, &ds, &opts, workers)?;
    write_rationales(out, &res.records)?;
    if let Some(p) = orderings_out {
        write_orderings(p, &res.orderings)?;
    }
    let capped = res.records.iter().filter(|r| r.rationale.status != Status::Ok).count();
    println!(
        "{method}: {} rationales, {} skipped (full-context prediction wrong), {capped} over the size cap",
        res.records.len(),
        res.skipped
    );
    Ok(())
}

fn evaluate(rationales: &[PathBuf], data: &Path, gold_path: Option<&Path>, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let gold = gold_path.map(read_gold).transpose()?;
    let mut by_method: Vec<(String, Vec<RationaleRecord>)> = Vec::new();
    for p in rationales {
        for r in read_rationales(p)? {
            if r.example >= ds.len() || r.rationale.t > ds.examples[r.example].len() {
                return Err(Error::Input(format!(
                    "{}: rationale for example {} position {} is outside the dataset",
                    p.display(),
                    r.example,
                    r.rationale.t
                )));
            }
            let m = r.rationale.method.clone();
            match by_method.iter_mut().find(|(n, _)| *n == m) {
                Some((_, v)) => v.push(r),
                None => by_method.push((m, vec![r])),
            }
        }
    }
    let reference = by_method.iter().find(|(m, _)| m == "exhaustive").map(|(_, v)| v.clone());
    let mut rows: Vec<(String, Vec<ExampleMetrics>)> = Vec::new();
    let mut aer: BTreeMap<String, f64> = BTreeMap::new();
    for (m, recs) in &by_method {
        let (r, counts) = example_metrics(recs, &ds, gold.as_deref(), reference.as_deref())?;
        if let Some(c) = counts {
            aer.insert(m.clone(), c.rate());
        }
        rows.push((m.clone(), r));
    }
    let config = json!({
        "rationales": rationales,
        "data": data,
        "gold": gold_path,
        "ratio_reference": reference.as_ref().map(|_| "exhaustive"),
    });
    let mut report = build_report(&rows, config)?;
    for s in &mut report.methods {
        if let Some(&a) = aer.get(&s.method) {
            s.corpus.insert("aer".into(), a);
        }
    }
    write_json(out, &report)?;
    for s in &report.methods {
        let fmt = |k: &str| s.means.get(k).map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<12} n={:<5} length={} ratio={} antecedent={} distractor_free={} crossovers={}",
            s.method,
            s.n,
            fmt("length"),
            fmt("ratio"),
            fmt("antecedent"),
            fmt("distractor_free"),
            fmt("crossovers")
        );
    }
    Ok(())
}

fn calibrate(ckpt: &Path, n: usize, seed: u64, bins: usize, out: &Path) -> Result<()> {
    let (model, c) = load_model(ckpt, None)?;
    let vocab = c.vocab.ok_or_else(|| Error::VocabMismatch("checkpoint has no vocabulary".into()))?;
    let points = calibration_points(&model, &vocab, n, seed)?;
    let summary = calibration_error(&points, bins)?;
    write_calibration_csv(out, &points)?;
    write_calibration_summary(&out.with_extension("json"), &summary)?;
    println!("calibration mae {:.4} over {} subsets", summary.mae, summary.n);
    Ok(())
}

fn bench(ckpt: &Path, data: &Path, mode: ModeArg, limit: Option<usize>, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let (model, _) = load_model(ckpt, Some(&ds))?;
    let rows = bench_greedy(&model, &ds, mode.into(), limit)?;
    write_bench_csv(out, mode.into(), &rows)?;
    println!("{} examples, mean {:.4}s per rationale", rows.len(), mean_secs(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { language, config, n, seed, out, gold_out } => {
            gen_data(language, config.as_deref(), n, seed, &out, gold_out.as_deref())
        }
        Command::Train { model_config, train_config, train: t, valid, out, log } => {
            train(&model_config, &train_config, &t, &valid, &out, log.as_deref())
        }
        Command::Rationalize {
            ckpt,
            data,
            method,
            positions,
            max_steps,
            size_cap,
            ig_steps,
            mode,
            workers,
            limit,
            out,
            orderings_out,
        } => rationalize(
            &ckpt,
            &data,
            &method,
            positions,
            max_steps,
            size_cap,
            ig_steps,
            mode,
            workers,
            limit,
            &out,
            orderings_out.as_deref(),
        ),
        Command::Evaluate { rationales, data, gold, out } => evaluate(&rationales, &data, gold.as_deref(), &out),
        Command::Calibrate { ckpt, n, seed, bins, out } => calibrate(&ckpt, n, seed, bins, &out),
        Command::Bench { ckpt, data, mode, limit, out } => bench(&ckpt, &data, mode, limit, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Divergence { .. }) { 3 } else { 2 })
        }
    }
}
