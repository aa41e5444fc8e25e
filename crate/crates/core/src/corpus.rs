//! Synthetic automatic post-editing corpora.
//!
//! A corpus is a list of (source, machine translation, post-edit) triples.
//! The "translation" is a fixed transduction of the source: every source word
//! maps to one target word, then each modifier word swaps with the word that
//! follows it. Machine translations corrupt the reference with substitutions
//! and deletions; post-edits restore the reference, except for the unedited
//! fraction where the post-edit repeats the machine translation verbatim.
//!
//! Substituted words are drawn from the same Zipfian distribution as ordinary
//! words, so frequent words are also the most common errors.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

/// One (source, mt, pe) example. `edited` is derived from `mt` and `pe`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ApeTriple {
    #[serde(rename = "src")]
    pub source: String,
    pub mt: String,
    pub pe: String,
    #[serde(skip)]
    pub edited: bool,
    pub split: Split,
}

#[derive(Deserialize)]
struct TripleLine {
    src: String,
    mt: String,
    pe: String,
    split: Split,
}

impl ApeTriple {
    pub fn new(source: impl Into<String>, mt: impl Into<String>, pe: impl Into<String>, split: Split) -> Self {
        let (source, mt, pe) = (source.into(), mt.into(), pe.into());
        let edited = !mt.split_whitespace().eq(pe.split_whitespace());
        Self {
            source,
            mt,
            pe,
            edited,
            split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub src_lang: String,
    pub tgt_lang: String,
    /// Number of distinct source words (and of target words).
    pub vocab_size: usize,
    /// Inclusive range of source sentence lengths in words.
    pub min_len: usize,
    pub max_len: usize,
    /// Exponent of the Zipfian word distribution.
    pub zipf_exponent: f64,
    /// Fraction of the vocabulary that swaps with the following word.
    pub modifier_rate: f64,
    /// Per-word probability that the machine translation corrupts a reference word.
    pub mt_noise: f64,
    /// Share of corruptions that delete rather than substitute.
    pub deletion_share: f64,
    /// Fraction of the source vocabulary the MT system systematically
    /// mistranslates, always into the same wrong target word.
    pub hard_fraction: f64,
    /// Corruption rate of hard words as a multiple of `mt_noise`, capped at 1.
    pub hard_boost: f64,
    /// Per-corruption probability that an edited post-edit leaves it in place.
    pub pe_residual: f64,
    /// Fraction of triples whose post-edit repeats the machine translation.
    pub unedited: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Extra out-of-bounds training triples per clean one (too short, too long,
    /// or too many characters), for exercising the filter.
    pub junk_rate: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// Shaped like the English-German data: 7000 training triples, 6.4% unedited.
    pub fn ende_like(seed: u64) -> Self {
        Self {
            src_lang: "English".into(),
            tgt_lang: "German".into(),
            vocab_size: 120,
            min_len: 4,
            max_len: 10,
            zipf_exponent: 1.0,
            modifier_rate: 0.15,
            mt_noise: 0.15,
            deletion_share: 0.2,
            hard_fraction: 0.2,
            hard_boost: 6.0,
            pe_residual: 0.55,
            unedited: 0.064,
            train: 7000,
            dev: 1000,
            test: 1000,
            junk_rate: 0.0,
            seed,
        }
    }

    /// Shaped like the English-Russian data: 9290 training triples after
    /// filtering, 56.7% unedited, lighter editing.
    pub fn enru_like(seed: u64) -> Self {
        Self {
            src_lang: "English".into(),
            tgt_lang: "Russian".into(),
            mt_noise: 0.08,
            unedited: 0.567,
            train: 9290,
            junk_rate: 0.02,
            ..Self::ende_like(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "ende-like" => Ok(Self::ende_like(seed)),
            "enru-like" => Ok(Self::enru_like(seed)),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (expected ende-like or enru-like)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("mt_noise", self.mt_noise),
            ("deletion_share", self.deletion_share),
            ("pe_residual", self.pe_residual),
            ("unedited", self.unedited),
            ("modifier_rate", self.modifier_rate),
            ("hard_fraction", self.hard_fraction),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.junk_rate >= 0.0 && self.junk_rate.is_finite()) {
            return Err(Error::Config(format!("junk_rate must be non-negative, got {}", self.junk_rate)));
        }
        if !(self.hard_boost >= 0.0 && self.hard_boost.is_finite()) {
            return Err(Error::Config(format!("hard_boost must be non-negative, got {}", self.hard_boost)));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config(format!("zipf_exponent must be non-negative, got {}", self.zipf_exponent)));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.src_lang.trim().is_empty() || self.tgt_lang.trim().is_empty() {
            return Err(Error::Config("language names must be non-empty".into()));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// The word lists and transduction shared by all splits of one corpus.
#[derive(Clone, Debug)]
pub struct Lexicon {
    src: Vec<String>,
    tgt: Vec<String>,
    modifier: Vec<bool>,
    /// The fixed mistranslation of each hard source word.
    confusion: Vec<Option<usize>>,
    zipf: WeightedIndex<f64>,
}

impl Lexicon {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.seed, "corpus-lexicon");
        let mut taken: HashSet<String> = HashSet::new();
        let src = words(&mut rng, spec.vocab_size, "bdfgklmnprstvz", "aeiou", &mut taken);
        let tgt = words(&mut rng, spec.vocab_size, "bcdfghjklmnprstwz", "aeiouy", &mut taken);
        let modifier = (0..spec.vocab_size).map(|_| rng.random_bool(spec.modifier_rate)).collect();
        let weights = (1..=spec.vocab_size).map(|r| (r as f64).powf(-spec.zipf_exponent));
        let zipf = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
        let n_hard = (spec.hard_fraction * spec.vocab_size as f64).round() as usize;
        let mut order: Vec<usize> = (0..spec.vocab_size).collect();
        order.shuffle(&mut rng);
        let mut confusion = vec![None; spec.vocab_size];
        for &s in &order[..n_hard] {
            let c = (s + rng.random_range(1..spec.vocab_size)) % spec.vocab_size;
            confusion[s] = Some(c);
        }
        Ok(Self {
            src,
            tgt,
            modifier,
            confusion,
            zipf,
        })
    }

    pub fn source_words(&self) -> &[String] {
        &self.src
    }

    pub fn target_words(&self) -> &[String] {
        &self.tgt
    }

    /// The reference translation of a source given as word indices: map each
    /// word, then swap every modifier with the non-modifier after it.
    pub fn transduce(&self, source: &[usize]) -> Vec<usize> {
        let mut out = source.to_vec();
        let mut i = 0;
        while i + 1 < out.len() {
            if self.modifier[out[i]] && !self.modifier[out[i + 1]] {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }

    /// Translates a whitespace-tokenized source sentence; unknown words are errors.
    pub fn translate(&self, source: &str) -> Result<String> {
        let ids = source
            .split_whitespace()
            .map(|w| {
                self.src
                    .iter()
                    .position(|s| s == w)
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.render_tgt(&self.transduce(&ids)))
    }

    fn render_src(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.src[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    fn render_tgt(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.tgt[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

fn words(rng: &mut Rng, n: usize, consonants: &str, vowels: &str, taken: &mut HashSet<String>) -> Vec<String> {
    let cs: Vec<char> = consonants.chars().collect();
    let vs: Vec<char> = vowels.chars().collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(cs[rng.random_range(0..cs.len())]);
            w.push(vs[rng.random_range(0..vs.len())]);
        }
        if rng.random_bool(0.5) {
            w.push(cs[rng.random_range(0..cs.len())]);
        }
        if w.len() >= 2 && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Edit {
    Keep,
    Sub(usize),
    Del,
}

fn apply(reference: &[usize], edits: &[Edit]) -> Vec<usize> {
    reference
        .iter()
        .zip(edits)
        .filter_map(|(&t, e)| match e {
            Edit::Keep => Some(t),
            Edit::Sub(s) => Some(*s),
            Edit::Del => None,
        })
        .collect()
}

/// Corrupts `reference` at rate `spec.mt_noise`, never shortening it below
/// `spec.min_len` words. With `force`, at least one word is corrupted.
fn corrupt(lex: &Lexicon, spec: &CorpusSpec, reference: &[usize], force: bool, rng: &mut Rng) -> Vec<Edit> {
    let mut edits = vec![Edit::Keep; reference.len()];
    let mut len = reference.len();
    let edit_at = |i: usize, rng: &mut Rng, len: &mut usize| {
        if *len > spec.min_len && rng.random_bool(spec.deletion_share) {
            *len -= 1;
            Edit::Del
        } else {
            loop {
                let s = lex.zipf.sample(rng);
                if s != reference[i] {
                    return Edit::Sub(s);
                }
            }
        }
    };
    let hard_rate = (spec.mt_noise * spec.hard_boost).min(1.0);
    let mut any = false;
    for (i, e) in edits.iter_mut().enumerate() {
        match lex.confusion[reference[i]] {
            Some(c) => {
                if rng.random_bool(hard_rate) {
                    *e = Edit::Sub(c);
                    any = true;
                }
            }
            None => {
                if rng.random_bool(spec.mt_noise) {
                    *e = edit_at(i, rng, &mut len);
                    any = true;
                }
            }
        }
    }
    if force && !any && spec.mt_noise > 0.0 {
        let i = rng.random_range(0..reference.len());
        edits[i] = edit_at(i, rng, &mut len);
    }
    edits
}

fn generate_split(lex: &Lexicon, spec: &CorpusSpec, split: Split) -> Vec<ApeTriple> {
    let n = spec.count(split);
    let mut rng = rng::stream(spec.seed, &format!("corpus-{split}"));
    // exactly round(u·n) unedited triples, at shuffled positions
    let n_unedited = (spec.unedited * n as f64).round() as usize;
    let mut unedited: Vec<bool> = (0..n).map(|i| i < n_unedited).collect();
    unedited.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for &is_unedited in &unedited {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let source: Vec<usize> = (0..len).map(|_| lex.zipf.sample(&mut rng)).collect();
        let reference = lex.transduce(&source);
        let edits = corrupt(lex, spec, &reference, !is_unedited, &mut rng);
        let mt = apply(&reference, &edits);
        let pe = if is_unedited {
            mt.clone()
        } else {
            // residual errors survive post-editing, but at least one is fixed
            let corrupted: Vec<usize> = (0..edits.len()).filter(|&i| !matches!(edits[i], Edit::Keep)).collect();
            let mut kept: Vec<Edit> = vec![Edit::Keep; edits.len()];
            let mut fixed_any = false;
            for &i in &corrupted {
                if rng.random_bool(spec.pe_residual) {
                    kept[i] = edits[i];
                } else {
                    fixed_any = true;
                }
            }
            if !fixed_any {
                if let Some(&i) = corrupted.first() {
                    kept[i] = Edit::Keep;
                }
            }
            apply(&reference, &kept)
        };
        out.push(ApeTriple::new(
            lex.render_src(&source),
            lex.render_tgt(&mt),
            lex.render_tgt(&pe),
            split,
        ));
    }

    if split == Split::Train && spec.junk_rate > 0.0 {
        let n_junk = (spec.junk_rate * n as f64).round() as usize;
        for _ in 0..n_junk {
            let junk = junk_triple(lex, &mut rng);
            let at = rng.random_range(0..=out.len());
            out.insert(at, junk);
        }
    }
    out
}

/// A triple that violates one of the default filter bounds.
fn junk_triple(lex: &Lexicon, rng: &mut Rng) -> ApeTriple {
    let pick_src = |rng: &mut Rng, n: usize| -> Vec<usize> { (0..n).map(|_| lex.zipf.sample(rng)).collect() };
    match rng.random_range(0..3) {
        0 => {
            let n = rng.random_range(1..=3);
            let s = pick_src(rng, n);
            let t = lex.render_tgt(&lex.transduce(&s));
            ApeTriple::new(lex.render_src(&s), t.clone(), t, Split::Train)
        }
        1 => {
            let n = rng.random_range(129..=160);
            let s = pick_src(rng, n);
            let t = lex.render_tgt(&lex.transduce(&s));
            ApeTriple::new(lex.render_src(&s), t.clone(), t, Split::Train)
        }
        _ => {
            // an encoded blob pasted into an otherwise normal segment
            let s = pick_src(rng, 6);
            let t = lex.render_tgt(&lex.transduce(&s));
            let blob: String = (0..rng.random_range(520..700))
                .map(|_| {
                    const B64: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
                    B64[rng.random_range(0..B64.len())] as char
                })
                .collect();
            ApeTriple::new(format!("{} {blob}", lex.render_src(&s)), format!("{t} {blob}"), format!("{t} {blob}"), Split::Train)
        }
    }
}

/// Generates train, dev and test triples, in that order.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<ApeTriple>> {
    let lex = Lexicon::new(spec)?;
    Ok(Split::ALL.iter().flat_map(|&s| generate_split(&lex, spec, s)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_chars: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_tokens: 4,
            max_tokens: 128,
            max_chars: 500,
        }
    }
}

/// Drop counts per rule. A triple violating several rules is counted under
/// the first in the order: too few tokens, too many tokens, too many chars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub too_few_tokens: usize,
    pub too_many_tokens: usize,
    pub too_many_chars: usize,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.too_few_tokens + self.too_many_tokens + self.too_many_chars
    }
}

/// Keeps triples whose source, mt and pe all have between `min_tokens` and
/// `max_tokens` whitespace tokens and at most `max_chars` characters, bounds
/// inclusive. Survivors keep their order.
pub fn filter(triples: &[ApeTriple], rules: &FilterRules) -> (Vec<ApeTriple>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(triples.len());
    for t in triples {
        let fields = [&t.source, &t.mt, &t.pe];
        let tokens = fields.map(|f| f.split_whitespace().count());
        if tokens.iter().any(|&n| n < rules.min_tokens) {
            report.too_few_tokens += 1;
        } else if tokens.iter().any(|&n| n > rules.max_tokens) {
            report.too_many_tokens += 1;
        } else if fields.iter().any(|f| f.chars().count() > rules.max_chars) {
            report.too_many_chars += 1;
        } else {
            kept.push(t.clone());
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// The translation prompt; the model continues it with the target sentence.
pub fn render_prompt(source: &str, src_lang: &str, tgt_lang: &str) -> String {
    format!("Translate {src_lang} to {tgt_lang}.\n{src_lang}: {source}\n{tgt_lang}:")
}

/// Edited triples only: an unedited post-edit cannot be preferred over its MT.
pub fn analysis_pairs(triples: &[ApeTriple]) -> Vec<ApeTriple> {
    triples.iter().filter(|t| t.edited).cloned().collect()
}

pub fn split_of(triples: &[ApeTriple], split: Split) -> Vec<ApeTriple> {
    triples.iter().filter(|t| t.split == split).cloned().collect()
}

pub fn unedited_fraction(triples: &[ApeTriple]) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    triples.iter().filter(|t| !t.edited).count() as f64 / triples.len() as f64
}

/// Token metrics of the machine translations against their post-edits.
pub fn fingerprint(triples: &[ApeTriple]) -> Result<MetricReport> {
    let mt: Vec<&str> = triples.iter().map(|t| t.mt.as_str()).collect();
    let pe: Vec<&str> = triples.iter().map(|t| t.pe.as_str()).collect();
    MetricReport::compute(&mt, &pe)
}

/// Writes one JSON object per line with keys src, mt, pe, split.
pub fn write_jsonl(path: &Path, triples: &[ApeTriple]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ApeTriple>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TripleLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(ApeTriple::new(t.src, t.mt, t.pe, t.split));
    }
    Ok(out)
}

/// Reads tab-separated `src\tmt\tpe` lines, as distributed with the WMT APE
/// tasks, assigning every triple to `split`.
pub fn read_tsv(path: &Path, split: Split) -> Result<Vec<ApeTriple>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated columns, got {}", i + 1, cols.len()),
            ));
        }
        out.push(ApeTriple::new(cols[0], cols[1], cols[2], split));
    }
    Ok(out)
}
