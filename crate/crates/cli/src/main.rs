//! `pelab`: generate corpora, train the experimental conditions, analyze runs
//! and score translations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort during
//! training, 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use pelab_core::analysis::{self, CiMethod, PairScoreRecord};
use pelab_core::corpus::{self, CorpusSpec, FilterRules, Split};
use pelab_core::experiment::{self, Condition, CorpusSource, ExperimentConfig, Fingerprint};
use pelab_core::metrics::MetricReport;
use pelab_core::Error;
use serde_json::json;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "PELAB_OUT";

#[derive(Parser)]
#[command(name = "pelab", version, about = "Preference optimization on post-edited translations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSON Lines split files plus a fingerprint.
    Gen(GenArgs),
    /// Run one training condition end to end.
    Train(TrainArgs),
    /// Compare run directories and write the analysis bundle.
    Analyze(AnalyzeArgs),
    /// Score hypotheses against references with BLEU, chrF and TER.
    Metric(MetricArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Synthetic corpus preset.
    #[arg(long, value_parser = ["ende-like", "enru-like"])]
    preset: Option<String>,
    /// Override the number of training triples of the preset.
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

impl CorpusArgs {
    fn spec(&self, seed: u64) -> anyhow::Result<Option<CorpusSpec>> {
        let Some(name) = &self.preset else { return Ok(None) };
        let mut spec = CorpusSpec::preset(name, seed)?;
        if let Some(n) = self.train_size {
            spec.train = n;
        }
        if let Some(n) = self.dev_size {
            spec.dev = n;
        }
        if let Some(n) = self.test_size {
            spec.test = n;
        }
        Ok(Some(spec))
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to $PELAB_OUT/corpus-<preset>-<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (the schema of a run's experiment.json); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_condition)]
    condition: Option<Condition>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// A JSON Lines corpus (keys src, mt, pe, split) instead of a preset.
    #[arg(long, conflicts_with = "preset")]
    corpus_file: Option<PathBuf>,
    #[arg(long, default_value = "English")]
    src_lang: String,
    #[arg(long, default_value = "German")]
    tgt_lang: String,
    /// Run directory; defaults to $PELAB_OUT/<condition>-seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    effective_batch: Option<usize>,
    #[arg(long)]
    physical_batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// Decode at most this many dev examples per epoch for early stopping.
    #[arg(long)]
    dev_decode_limit: Option<usize>,
    /// Start the preference stage from this SFT checkpoint instead of training one.
    #[arg(long)]
    sft_checkpoint: Option<PathBuf>,
    /// Skip greedy translation of the test split.
    #[arg(long)]
    no_translate: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directories written by `pelab train`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory; defaults to $PELAB_OUT/analysis.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wilson instead of normal-approximation confidence intervals.
    #[arg(long)]
    wilson: bool,
}

#[derive(Args)]
struct MetricArgs {
    /// Hypotheses, one segment per line.
    #[arg(long)]
    hyp: PathBuf,
    /// References, one segment per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also write metrics.json and segments.tsv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Metric(a) => metric(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::NumericAbort { .. } | Error::NonFinite(_)) => 3,
        _ => 1,
    }
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let spec = a
        .corpus
        .spec(a.seed)?
        .ok_or_else(|| Error::Config("gen needs --preset".into()))?;
    let name = a.corpus.preset.as_deref().unwrap_or_default();
    let out = a.out.unwrap_or_else(|| out_root().join(format!("corpus-{name}-{}", a.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let raw = corpus::generate(&spec)?;
    let (triples, report) = corpus::filter(&raw, &FilterRules::default());
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let part = corpus::split_of(&triples, split);
        corpus::write_jsonl(&out.join(format!("{split}.jsonl")), &part)?;
        counts.insert(split.to_string(), part.len());
    }
    let fingerprint = Fingerprint::of(&corpus::split_of(&triples, Split::Train))?;
    let summary = json!({
        "spec": spec,
        "filter": report,
        "counts": counts,
        "fingerprint": fingerprint,
    });
    experiment::write_json(&out.join("fingerprint.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => experiment::read_json::<ExperimentConfig>(path)?,
        None => {
            let seed = a.seed.unwrap_or(0);
            let source = match (&a.corpus_file, a.corpus.spec(seed)?) {
                (Some(path), _) => CorpusSource::Jsonl {
                    path: path.clone(),
                    src_lang: a.src_lang.clone(),
                    tgt_lang: a.tgt_lang.clone(),
                },
                (None, Some(spec)) => CorpusSource::Synthetic(spec),
                (None, None) => CorpusSource::Synthetic(CorpusSpec::ende_like(seed)),
            };
            let condition = a.condition.ok_or_else(|| Error::Config("train needs --condition or --config".into()))?;
            ExperimentConfig::new(source, condition, seed)
        }
    };
    if let Some(c) = a.condition {
        cfg.condition = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let t = &mut cfg.train;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut t.objective.beta, a.beta);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.epsilon, a.epsilon);
    set(&mut t.warmup_ratio, a.warmup_ratio);
    set(&mut t.max_grad_norm, a.max_grad_norm);
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut t.effective_batch, a.effective_batch);
    set(&mut t.physical_batch, a.physical_batch);
    set(&mut t.patience, a.patience);
    set(&mut t.max_epochs, a.max_epochs);
    set(&mut t.max_new_tokens, a.max_new_tokens);
    if a.dev_decode_limit.is_some() {
        cfg.dev_decode_limit = a.dev_decode_limit;
    }
    if a.sft_checkpoint.is_some() {
        cfg.sft_checkpoint = a.sft_checkpoint.clone();
    }
    if a.no_translate {
        cfg.translate_test = false;
    }
    let out = a
        .out
        .unwrap_or_else(|| out_root().join(format!("{}-seed{}", cfg.condition, cfg.seed)));
    let report = experiment::run(&cfg, &out)?;
    let test = report.summary.preferences.get(&Split::Test);
    println!(
        "{} seed {}: test preference {} gap {}, test chrF {}; run dir {}",
        report.condition,
        report.seed,
        test.map_or("-".into(), |p| format!("{:.4} [{:.4}, {:.4}]", p.rate, p.ci_low, p.ci_high)),
        report.summary.gaps.get(&Split::Test).map_or("-".into(), |g| format!("{g:.4}")),
        report.test_chrf.map_or("-".into(), |c| format!("{c:.2}")),
        out.display()
    );
    Ok(())
}

struct LoadedRun {
    name: String,
    records: Vec<PairScoreRecord>,
    segments: Vec<(usize, f64)>,
}

fn load_run(dir: &Path) -> anyhow::Result<LoadedRun> {
    let scores = dir.join("scores.jsonl");
    if !scores.is_file() {
        return Err(anyhow!("run {}: missing scores.jsonl", dir.display()));
    }
    let translations = dir.join("translations.jsonl");
    if !translations.is_file() {
        return Err(anyhow!("run {}: missing translations.jsonl", dir.display()));
    }
    let records = experiment::read_records(&scores).with_context(|| format!("run {}", dir.display()))?;
    let name = records
        .first()
        .map(|r| r.model.clone())
        .ok_or_else(|| anyhow!("run {}: scores.jsonl is empty", dir.display()))?;
    let segments = experiment::read_translations(&translations)?
        .into_iter()
        .map(|t| (t.id, t.chrf))
        .collect();
    Ok(LoadedRun { name, records, segments })
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let mut loaded = a.runs.iter().map(|d| load_run(d)).collect::<anyhow::Result<Vec<_>>>()?;
    // distinct names when the same condition appears more than once
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for run in &mut loaded {
        let n = seen.entry(run.name.clone()).or_default();
        *n += 1;
        if *n > 1 {
            run.name = format!("{}#{n}", run.name);
        }
    }
    let ids = loaded[0].segments.iter().map(|s| s.0).collect::<Vec<_>>();
    for run in &loaded {
        if run.segments.iter().map(|s| s.0).ne(ids.iter().copied()) {
            return Err(Error::RecordMismatch(format!("{} translated different test segments", run.name)).into());
        }
    }
    let runs: Vec<(String, Vec<PairScoreRecord>)> = loaded.iter().map(|r| (r.name.clone(), r.records.clone())).collect();
    let segments: Vec<(String, Vec<f64>)> = loaded
        .iter()
        .map(|r| (r.name.clone(), r.segments.iter().map(|s| s.1).collect()))
        .collect();
    let method = if a.wilson { CiMethod::Wilson } else { CiMethod::Wald };
    let bundle = analysis::analyze(&runs, &segments, "test chrF", method, a.resamples, a.alpha, a.seed)?;
    let out = a.out.unwrap_or_else(|| out_root().join("analysis"));
    analysis::write_bundle(&out, &bundle, &runs)?;

    println!("model\tsplit\tgap\tpreference\tci_low\tci_high\tbaseline_preference");
    for m in &bundle.models {
        for (split, p) in &m.preferences {
            println!(
                "{}\t{split}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                m.model, m.gaps[split], p.rate, p.ci_low, p.ci_high, m.baseline_preferences[split].rate
            );
        }
    }
    println!("\nsignificantly better on {} (paired bootstrap, alpha {}):", bundle.segment_metric, a.alpha);
    for (model, better) in &bundle.better_than {
        let set = if better.is_empty() { "-".to_string() } else { better.join(", ") };
        println!("{model}\t{set}");
    }
    println!("\nwrote {}", out.display());
    Ok(())
}

fn read_segments(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn metric(a: MetricArgs) -> anyhow::Result<()> {
    let hyps = read_segments(&a.hyp)?;
    let refs = read_segments(&a.reference)?;
    let report = MetricReport::compute(&hyps, &refs)?;
    let summary = json!({
        "bleu": report.bleu,
        "chrf": report.chrf,
        "ter": report.ter,
        "segments": report.segments,
    });
    let tsv = format!("{}\n{}\n", MetricReport::TSV_HEADER, report.tsv_line());
    println!("{}", serde_json::to_string_pretty(&summary)?);
    print!("{tsv}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        experiment::write_json(&out.join("metrics.json"), &summary)?;
        let path = out.join("metrics.tsv");
        fs::write(&path, &tsv).with_context(|| format!("writing {}", path.display()))?;
        let s = &report.segment_scores;
        let mut segments = String::from("segment\tbleu\tter\tchrf\n");
        for i in 0..report.segments {
            segments += &format!("{}\t{:.2}\t{:.2}\t{:.2}\n", i + 1, s.bleu[i], s.ter[i], s.chrf[i]);
        }
        let path = out.join("segments.tsv");
        fs::write(&path, segments).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
