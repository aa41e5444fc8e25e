//! One experimental condition end to end: corpus, training stages, scoring
//! against the untrained baseline, and test translations.
//!
//! Run directory layout:
//!
//! * `experiment.json`: the resolved [`ExperimentConfig`].
//! * `vocab.json`: the token vocabulary.
//! * `sft/`, `ipo/`, `dcpo/`: one trainer run directory per stage.
//! * `scores.jsonl`: one [`PairScoreRecord`] per edited pair of every split.
//! * `translations.jsonl`: greedy test translations with segment chrF.
//! * `summary.json`: the [`RunReport`].

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, CiMethod, ModelSummary, PairScore, PairScoreRecord};
use crate::corpus::{self, ApeTriple, CorpusSpec, FilterReport, FilterRules, Split};
use crate::dataset::{self, DevExample, Languages};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{score, LmParams, ModelConfig};
use crate::objectives::{ObjectiveKind, PreferencePair};
use crate::trainer::{self, InitFrom, TrainConfig, TrainOutcome, TrainState};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// The untrained model, scored only.
    Baseline,
    Sft,
    Ipo,
    Dcpo,
    SftIpo,
    SftDcpo,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Baseline,
        Condition::Sft,
        Condition::Ipo,
        Condition::Dcpo,
        Condition::SftIpo,
        Condition::SftDcpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Sft => "sft",
            Condition::Ipo => "ipo",
            Condition::Dcpo => "dcpo",
            Condition::SftIpo => "sft-ipo",
            Condition::SftDcpo => "sft-dcpo",
        }
    }

    pub fn has_sft_stage(self) -> bool {
        matches!(self, Condition::Sft | Condition::SftIpo | Condition::SftDcpo)
    }

    /// The preference objective of the condition's last stage, if any.
    pub fn preference_kind(self) -> Option<ObjectiveKind> {
        match self {
            Condition::Ipo | Condition::SftIpo => Some(ObjectiveKind::Ipo),
            Condition::Dcpo | Condition::SftDcpo => Some(ObjectiveKind::Dcpo),
            _ => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

/// Where the triples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic(CorpusSpec),
    /// A JSON Lines file with keys src, mt, pe and split, or a directory
    /// holding `train.jsonl`, `dev.jsonl` and `test.jsonl`.
    Jsonl {
        path: PathBuf,
        src_lang: String,
        tgt_lang: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub filter: FilterRules,
    pub condition: Condition,
    /// Hyperparameters shared by every stage; each stage sets its own objective kind.
    pub train: TrainConfig,
    /// Seed of model initialization and batch order.
    pub seed: u64,
    /// Decode at most this many dev examples per epoch for early stopping.
    pub dev_decode_limit: Option<usize>,
    /// Reuse this SFT checkpoint instead of training the SFT stage.
    pub sft_checkpoint: Option<PathBuf>,
    pub translate_test: bool,
}

impl ExperimentConfig {
    pub fn new(corpus: CorpusSource, condition: Condition, seed: u64) -> Self {
        Self {
            corpus,
            filter: FilterRules::default(),
            condition,
            train: TrainConfig::desk(ObjectiveKind::Sft),
            seed,
            dev_decode_limit: None,
            sft_checkpoint: None,
            translate_test: true,
        }
    }

    pub fn stage_config(&self, kind: ObjectiveKind, init_from: InitFrom) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.objective.kind = kind;
        cfg.init_from = init_from;
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub bleu: f64,
    pub ter: f64,
    pub chrf: f64,
    pub segments: usize,
    pub unedited_fraction: f64,
}

impl Fingerprint {
    /// MT scored against the post-edits.
    pub fn of(triples: &[ApeTriple]) -> Result<Self> {
        let m = corpus::fingerprint(triples)?;
        Ok(Self {
            bleu: m.bleu,
            ter: m.ter,
            chrf: m.chrf,
            segments: m.segments,
            unedited_fraction: corpus::unedited_fraction(triples),
        })
    }
}

/// Corpus, vocabulary and token ids shared by every stage of a run.
pub struct Workspace {
    pub triples: Vec<ApeTriple>,
    pub filter_report: FilterReport,
    pub langs: Languages,
    pub vocab: Vocabulary,
    /// One pair per triple, ids are positions in `triples`.
    pub pairs: Vec<PreferencePair>,
    pub dev: Vec<DevExample>,
}

impl Workspace {
    pub fn prepare(source: &CorpusSource, rules: &FilterRules, dev_decode_limit: Option<usize>) -> Result<Self> {
        let (raw, langs) = match source {
            CorpusSource::Synthetic(spec) => (corpus::generate(spec)?, Languages::new(&spec.src_lang, &spec.tgt_lang)),
            CorpusSource::Jsonl { path, src_lang, tgt_lang } => {
                let triples = if path.is_dir() {
                    let mut all = Vec::new();
                    for split in Split::ALL {
                        all.extend(corpus::read_jsonl(&path.join(format!("{split}.jsonl")))?);
                    }
                    all
                } else {
                    corpus::read_jsonl(path)?
                };
                (triples, Languages::new(src_lang, tgt_lang))
            }
        };
        let (triples, filter_report) = corpus::filter(&raw, rules);
        Self::from_triples(triples, filter_report, langs, dev_decode_limit)
    }

    pub fn from_triples(
        triples: Vec<ApeTriple>,
        filter_report: FilterReport,
        langs: Languages,
        dev_decode_limit: Option<usize>,
    ) -> Result<Self> {
        let vocab = dataset::build_vocab(&triples, &langs);
        let pairs = dataset::to_pairs(&triples, &vocab, &langs)?;
        let dev_triples = corpus::split_of(&triples, Split::Dev);
        let limit = dev_decode_limit.unwrap_or(dev_triples.len());
        let dev = dataset::dev_examples(&dev_triples[..limit.min(dev_triples.len())], &vocab, &langs)?;
        Ok(Self {
            triples,
            filter_report,
            langs,
            vocab,
            pairs,
            dev,
        })
    }

    pub fn split_pairs(&self, split: Split) -> Vec<PreferencePair> {
        dataset::split_pairs(&self.triples, &self.pairs, split)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::tiny(self.vocab.len())
    }

    /// Average log-probabilities of post-edit and MT for every edited pair,
    /// train then dev then test.
    pub fn score_edited(&self, params: &LmParams) -> Result<Vec<PairScore>> {
        let mut out = Vec::new();
        for split in Split::ALL {
            for (t, p) in self.triples.iter().zip(&self.pairs) {
                if t.split != split || !t.edited {
                    continue;
                }
                out.push(PairScore {
                    id: p.id,
                    split,
                    pe: score(params, &p.prompt, &p.chosen)?.avg_logp,
                    mt: score(params, &p.prompt, &p.rejected)?.avg_logp,
                });
            }
        }
        Ok(out)
    }

    /// Greedy translations of the test split.
    pub fn translate_test(&self, params: &LmParams, max_new_tokens: usize) -> Result<Vec<Translation>> {
        let test: Vec<(&ApeTriple, &PreferencePair)> =
            self.triples.iter().zip(&self.pairs).filter(|(t, _)| t.split == Split::Test).collect();
        let hyps = trainer::decode_all(params, test.iter().map(|(_, p)| p.prompt.as_slice()), &self.vocab, max_new_tokens)?;
        Ok(test
            .iter()
            .zip(hyps)
            .map(|((t, p), hyp)| Translation {
                id: p.id,
                chrf: metrics::chrf_segment(&hyp, &t.pe),
                hyp,
                reference: t.pe.clone(),
            })
            .collect())
    }

    pub fn train_stage(&self, cfg: &TrainConfig, init: LmParams, run_dir: Option<&Path>) -> Result<TrainOutcome> {
        let train = self.split_pairs(Split::Train);
        trainer::train(cfg, init, &train, &self.dev, &self.vocab, run_dir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub id: usize,
    pub hyp: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub chrf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub state: TrainState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub condition: Condition,
    pub seed: u64,
    pub vocab_size: usize,
    pub num_params: usize,
    pub filter: FilterReport,
    pub fingerprint: Fingerprint,
    pub stages: Vec<StageReport>,
    pub summary: ModelSummary,
    /// Corpus chrF of the test translations against the post-edits.
    pub test_chrf: Option<f64>,
}

/// Runs one condition and writes its run directory.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.train.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("experiment.json"), cfg)?;
    let ws = Workspace::prepare(&cfg.corpus, &cfg.filter, cfg.dev_decode_limit)?;
    ws.vocab.save(&out.join("vocab.json"))?;
    let fingerprint = Fingerprint::of(&corpus::split_of(&ws.triples, Split::Train))?;

    let base = LmParams::init(ws.model_config(), cfg.seed)?;
    let mut stages = Vec::new();
    let mut current = base.clone();
    let mut init_from = InitFrom::Fresh;
    if cfg.condition.has_sft_stage() {
        match &cfg.sft_checkpoint {
            Some(path) => {
                current = LmParams::load(path)?;
                if current.config() != base.config() {
                    return Err(Error::Config(format!(
                        "{}: model shape {:?} does not match the corpus vocabulary ({:?})",
                        path.display(),
                        current.config(),
                        base.config()
                    )));
                }
                init_from = InitFrom::SftCheckpoint(path.clone());
            }
            None => {
                let dir = out.join("sft");
                let outcome = ws.train_stage(&cfg.stage_config(ObjectiveKind::Sft, InitFrom::Fresh), current, Some(&dir))?;
                stages.push(StageReport {
                    name: "sft".into(),
                    state: outcome.state,
                });
                current = outcome.best;
                init_from = InitFrom::SftCheckpoint(dir.join("checkpoints").join("best").join("model.json"));
            }
        }
    }
    if let Some(kind) = cfg.condition.preference_kind() {
        let name = kind.to_string();
        let outcome = ws.train_stage(&cfg.stage_config(kind, init_from), current, Some(&out.join(&name)))?;
        stages.push(StageReport {
            name,
            state: outcome.state,
        });
        current = outcome.best;
    }

    let model_name = cfg.condition.as_str();
    let records = analysis::join(model_name, &ws.score_edited(&current)?, &ws.score_edited(&base)?)?;
    write_records(&out.join("scores.jsonl"), &records)?;
    let summary = analysis::summarize(model_name, &records, CiMethod::Wald)?;

    let test_chrf = if cfg.translate_test && ws.triples.iter().any(|t| t.split == Split::Test) {
        let translations = ws.translate_test(&current, cfg.train.max_new_tokens)?;
        write_lines(&out.join("translations.jsonl"), &translations)?;
        let hyps: Vec<&str> = translations.iter().map(|t| t.hyp.as_str()).collect();
        let refs: Vec<&str> = translations.iter().map(|t| t.reference.as_str()).collect();
        Some(metrics::chrf(&hyps, &refs)?)
    } else {
        None
    };

    let report = RunReport {
        condition: cfg.condition,
        seed: cfg.seed,
        vocab_size: ws.vocab.len(),
        num_params: current.num_params(),
        filter: ws.filter_report,
        fingerprint,
        stages,
        summary,
        test_chrf,
    };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[PairScoreRecord]) -> Result<()> {
    write_lines(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<PairScoreRecord>> {
    read_lines(path)
}

pub fn read_translations(path: &Path) -> Result<Vec<Translation>> {
    read_lines(path)
}
