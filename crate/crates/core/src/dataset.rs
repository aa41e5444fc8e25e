//! Turns text triples into token-id training examples.
//!
//! A prompt is the begin token followed by the rendered translation prompt;
//! targets end with the end token. The preferred completion is the post-edit,
//! the dispreferred one the machine translation.

use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, ApeTriple, Split};
use crate::error::Result;
use crate::objectives::PreferencePair;
use crate::vocab::{Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Languages {
    pub src: String,
    pub tgt: String,
}

impl Languages {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            tgt: tgt.into(),
        }
    }
}

/// Every whitespace token of every prompt, machine translation and post-edit.
pub fn build_vocab(triples: &[ApeTriple], langs: &Languages) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for t in triples {
        let prompt = render_prompt(&t.source, &langs.src, &langs.tgt);
        for text in [prompt.as_str(), &t.mt, &t.pe] {
            words.extend(text.split_whitespace().map(str::to_string));
        }
    }
    // the template words, so that an empty corpus still yields a usable vocabulary
    let template = render_prompt("", &langs.src, &langs.tgt);
    words.extend(template.split_whitespace().map(str::to_string));
    Vocabulary::new(words)
}

pub fn encode_prompt(vocab: &Vocabulary, source: &str, langs: &Languages) -> Result<Vec<usize>> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(&render_prompt(source, &langs.src, &langs.tgt))?);
    Ok(ids)
}

pub fn encode_target(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(text)?;
    ids.push(EOS);
    Ok(ids)
}

/// One pair per triple, with `id` = position in `triples`.
pub fn to_pairs(triples: &[ApeTriple], vocab: &Vocabulary, langs: &Languages) -> Result<Vec<PreferencePair>> {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(PreferencePair::new(
                i,
                encode_prompt(vocab, &t.source, langs)?,
                encode_target(vocab, &t.pe)?,
                encode_target(vocab, &t.mt)?,
            ))
        })
        .collect()
}

/// A prompt to decode and the post-edit to compare the output against.
#[derive(Clone, Debug, PartialEq)]
pub struct DevExample {
    pub id: usize,
    pub prompt: Vec<usize>,
    pub reference: String,
}

pub fn dev_examples(triples: &[ApeTriple], vocab: &Vocabulary, langs: &Languages) -> Result<Vec<DevExample>> {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(DevExample {
                id: i,
                prompt: encode_prompt(vocab, &t.source, langs)?,
                reference: t.pe.clone(),
            })
        })
        .collect()
}

/// Pairs of the given split, keeping ids from the full list.
pub fn split_pairs(triples: &[ApeTriple], pairs: &[PreferencePair], split: Split) -> Vec<PreferencePair> {
    triples
        .iter()
        .zip(pairs)
        .filter(|(t, _)| t.split == split)
        .map(|(_, p)| p.clone())
        .collect()
}
