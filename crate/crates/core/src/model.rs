//! A tiny decoder-only transformer that conditions on a prompt and scores or
//! greedily decodes a target continuation.
//!
//! Each block is pre-norm: single-head causal self-attention followed by a
//! GELU MLP, both with residual connections. Only target tokens are scored;
//! prompt tokens are conditioned on.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Tensor};
use crate::vocab::{EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub context: usize,
}

impl ModelConfig {
    /// Two blocks, hidden size 64, context 160.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            mlp_hidden: 128,
            blocks: 2,
            context: 160,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.hidden == 0 || self.mlp_hidden == 0 || self.context < 2 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size, self.hidden, self.mlp_hidden);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context, d]),
        ];
        for b in 0..self.blocks {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("out.weight".to_string(), vec![d, v]),
            ("out.bias".to_string(), vec![v]),
        ]);
        out
    }
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const BLOCK_BASE: usize = 2;
const PER_BLOCK: usize = 12;

#[derive(Clone, Copy)]
struct BlockIdx(usize);

impl BlockIdx {
    fn ln1_g(self) -> usize {
        self.0
    }
    fn ln1_b(self) -> usize {
        self.0 + 1
    }
    fn wq(self) -> usize {
        self.0 + 2
    }
    fn wk(self) -> usize {
        self.0 + 3
    }
    fn wv(self) -> usize {
        self.0 + 4
    }
    fn wo(self) -> usize {
        self.0 + 5
    }
    fn ln2_g(self) -> usize {
        self.0 + 6
    }
    fn ln2_b(self) -> usize {
        self.0 + 7
    }
    fn w1(self) -> usize {
        self.0 + 8
    }
    fn b1(self) -> usize {
        self.0 + 9
    }
    fn w2(self) -> usize {
        self.0 + 10
    }
    fn b2(self) -> usize {
        self.0 + 11
    }
}

fn block(b: usize) -> BlockIdx {
    BlockIdx(BLOCK_BASE + b * PER_BLOCK)
}

/// Trainable parameters of the language model. A frozen clone serves as the
/// reference policy during preference optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl LmParams {
    /// Seeded initialization: N(0, 0.02) weights, residual output projections
    /// scaled by `1/sqrt(2·blocks)`, unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "lm-init");
        let residual_std = 0.02 / ((2 * config.blocks) as f64).sqrt();
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    rng::normal_tensor(&shape, residual_std, &mut r)
                } else {
                    rng::normal_tensor(&shape, 0.02, &mut r)
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names().iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hash over every parameter's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> LmVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        LmVars(vars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            params: self
                .names()
                .into_iter()
                .zip(&self.tensors)
                .map(|(n, t)| {
                    (
                        n,
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            values: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unexpected format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", file.version)));
        }
        file.config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in file.config.layout() {
            let stored = file
                .params
                .remove(&name)
                .ok_or_else(|| Error::format(path, format!("missing parameter {name}")))?;
            if stored.shape != shape {
                return Err(Error::format(
                    path,
                    format!("{name}: shape {:?}, expected {shape:?}", stored.shape),
                ));
            }
            tensors.push(Tensor::new(shape, stored.values)?);
        }
        if let Some(extra) = file.params.keys().next() {
            return Err(Error::format(path, format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config: file.config,
            tensors,
        })
    }
}

/// Checkpoint file: JSON object
/// `{"format": "pelab-lm-checkpoint", "version": 1, "config": {...},
///   "params": {name: {"shape": [...], "values": [...row-major...]}}}`.
/// Values are written with round-trip-exact float formatting.
pub const CHECKPOINT_FORMAT: &str = "pelab-lm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Graph handles for one binding of [`LmParams`].
#[derive(Clone, Debug)]
pub struct LmVars(Vec<Var>);

impl LmVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Per-token target log-probabilities with their sum and mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub token_ids: Vec<usize>,
    pub token_logps: Vec<f64>,
    pub sum_logp: f64,
    pub avg_logp: f64,
}

impl ScoredSequence {
    pub fn from_logps(token_ids: Vec<usize>, token_logps: Vec<f64>) -> Self {
        let sum_logp: f64 = token_logps.iter().sum();
        let avg_logp = sum_logp / token_logps.len().max(1) as f64;
        Self {
            token_ids,
            token_logps,
            sum_logp,
            avg_logp,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `avg_logp` or `sum_logp`.
    pub fn logp(&self, average: bool) -> f64 {
        if average {
            self.avg_logp
        } else {
            self.sum_logp
        }
    }
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(&id) => Err(Error::UnknownTokenId { id, vocab }),
        None => Ok(()),
    }
}

fn check_lengths(cfg: &ModelConfig, prompt: &[usize], target: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if target.is_empty() {
        return Err(Error::Empty("target"));
    }
    if prompt.len() + target.len() > cfg.context {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            target: target.len(),
            context: cfg.context,
        });
    }
    check_ids(prompt, cfg.vocab_size)?;
    check_ids(target, cfg.vocab_size)
}

/// Final hidden states `[T, d]` for `tokens`.
fn hidden_states(g: &mut Graph<'_>, cfg: &ModelConfig, p: &LmVars, tokens: &[usize]) -> Result<Var> {
    let p = &p.0;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.embedding(p[TOK_EMB], tokens)?;
    let pos = g.embedding(p[POS_EMB], &positions)?;
    let mut h = g.add(tok, pos)?;
    let attn_scale = 1.0 / (cfg.hidden as f64).sqrt();
    for b in 0..cfg.blocks {
        let ix = block(b);
        let a = g.layer_norm(h, p[ix.ln1_g()], p[ix.ln1_b()])?;
        let q = g.matmul(a, p[ix.wq()])?;
        let k = g.matmul(a, p[ix.wk()])?;
        let v = g.matmul(a, p[ix.wv()])?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, attn_scale);
        let weights = g.causal_softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let o = g.matmul(ctx, p[ix.wo()])?;
        h = g.add(h, o)?;

        let a = g.layer_norm(h, p[ix.ln2_g()], p[ix.ln2_b()])?;
        let f = g.matmul(a, p[ix.w1()])?;
        let f = g.add_row(f, p[ix.b1()])?;
        let f = g.gelu(f);
        let f = g.matmul(f, p[ix.w2()])?;
        let f = g.add_row(f, p[ix.b2()])?;
        h = g.add(h, f)?;
    }
    let fin = BLOCK_BASE + cfg.blocks * PER_BLOCK;
    g.layer_norm(h, p[fin], p[fin + 1])
}

/// Log-softmax over the vocabulary at each position that predicts a target
/// token, as a `[target.len(), V]` node.
pub fn target_log_probs(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    vars: &LmVars,
    prompt: &[usize],
    target: &[usize],
) -> Result<Var> {
    check_lengths(cfg, prompt, target)?;
    let inputs: Vec<usize> = prompt
        .iter()
        .chain(&target[..target.len() - 1])
        .copied()
        .collect();
    let h = hidden_states(g, cfg, vars, &inputs)?;
    let h = g.slice_rows(h, prompt.len() - 1, target.len())?;
    let fin = BLOCK_BASE + cfg.blocks * PER_BLOCK;
    let logits = g.matmul(h, vars.0[fin + 2])?;
    let logits = g.add_row(logits, vars.0[fin + 3])?;
    Ok(g.log_softmax(logits))
}

/// Per-token log-probabilities of `target` given `prompt`, as a vector node.
pub fn target_logps(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    vars: &LmVars,
    prompt: &[usize],
    target: &[usize],
) -> Result<Var> {
    let lp = target_log_probs(g, cfg, vars, prompt, target)?;
    g.pick(lp, target)
}

/// Drops padding that follows an end token, so padded and unpadded targets
/// score identically.
pub fn strip_padding(target: &[usize]) -> &[usize] {
    match target.iter().position(|&t| t == EOS) {
        Some(end) if target[end + 1..].iter().all(|&t| t == PAD) => &target[..=end],
        _ => target,
    }
}

/// Scores `target` under `params`, conditioning on (but not scoring) `prompt`.
pub fn score(params: &LmParams, prompt: &[usize], target: &[usize]) -> Result<ScoredSequence> {
    let target = strip_padding(target);
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let lp = target_logps(&mut g, params.config(), &vars, prompt, target)?;
    Ok(ScoredSequence::from_logps(target.to_vec(), g.value(lp).data().to_vec()))
}

/// Incremental forward pass with cached keys and values, used for decoding.
/// Produces the same next-token logits as the graph forward pass.
pub struct Decoder<'p> {
    params: &'p LmParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p LmParams) -> Self {
        let cfg = params.config();
        Self {
            params,
            keys: vec![Vec::with_capacity(cfg.context * cfg.hidden); cfg.blocks],
            values: vec![Vec::with_capacity(cfg.context * cfg.hidden); cfg.blocks],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the logits for the next position.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = *self.params.config();
        let t = &self.params.tensors;
        if self.len >= cfg.context {
            return Err(Error::ContextOverflow {
                prompt: self.len,
                target: 1,
                context: cfg.context,
            });
        }
        check_ids(&[token], cfg.vocab_size)?;
        let d = cfg.hidden;
        let pos = self.len;
        let mut x: Vec<f64> = t[TOK_EMB].row(token).iter().zip(t[POS_EMB].row(pos)).map(|(a, b)| a + b).collect();
        let mut a = vec![0.0; d];
        let attn_scale = 1.0 / (d as f64).sqrt();
        for b in 0..cfg.blocks {
            let ix = block(b);
            tensor::layer_norm_rows(&x, t[ix.ln1_g()].data(), t[ix.ln1_b()].data(), &mut a, None, None);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            tensor::matmul_acc(&a, t[ix.wq()].data(), &mut q, 1, d, d);
            tensor::matmul_acc(&a, t[ix.wk()].data(), &mut k, 1, d, d);
            tensor::matmul_acc(&a, t[ix.wv()].data(), &mut v, 1, d, d);
            self.keys[b].extend_from_slice(&k);
            self.values[b].extend_from_slice(&v);
            let n = pos + 1;
            let mut scores = vec![0.0; n];
            tensor::matmul_nt_acc(&q, &self.keys[b], &mut scores, 1, d, n);
            for s in &mut scores {
                *s *= attn_scale;
            }
            let mut w = vec![0.0; n];
            tensor::masked_softmax_row(&scores, n, &mut w);
            let mut ctx = vec![0.0; d];
            tensor::matmul_acc(&w, &self.values[b], &mut ctx, 1, n, d);
            let mut o = vec![0.0; d];
            tensor::matmul_acc(&ctx, t[ix.wo()].data(), &mut o, 1, d, d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            tensor::layer_norm_rows(&x, t[ix.ln2_g()].data(), t[ix.ln2_b()].data(), &mut a, None, None);
            let hdim = cfg.mlp_hidden;
            let mut f = vec![0.0; hdim];
            tensor::matmul_acc(&a, t[ix.w1()].data(), &mut f, 1, d, hdim);
            for (fi, bi) in f.iter_mut().zip(t[ix.b1()].data()) {
                *fi = tensor::gelu(*fi + bi);
            }
            let mut f2 = vec![0.0; d];
            tensor::matmul_acc(&f, t[ix.w2()].data(), &mut f2, 1, hdim, d);
            for ((xi, fi), bi) in x.iter_mut().zip(&f2).zip(t[ix.b2()].data()) {
                *xi += fi + bi;
            }
        }
        let fin = BLOCK_BASE + cfg.blocks * PER_BLOCK;
        tensor::layer_norm_rows(&x, t[fin].data(), t[fin + 1].data(), &mut a, None, None);
        let mut logits = vec![0.0; cfg.vocab_size];
        tensor::matmul_acc(&a, t[fin + 2].data(), &mut logits, 1, d, cfg.vocab_size);
        for (l, b) in logits.iter_mut().zip(t[fin + 3].data()) {
            *l += b;
        }
        self.len += 1;
        Ok(logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: emits the argmax token (lowest id on ties) until the end
/// token, `max_new_tokens`, or the context limit. The end token is not
/// included in the output.
pub fn greedy_decode(params: &LmParams, prompt: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if max_new_tokens == 0 {
        return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
    }
    let cfg = params.config();
    if prompt.len() > cfg.context {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            target: 0,
            context: cfg.context,
        });
    }
    let mut dec = Decoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.push(t)?;
    }
    let mut out = Vec::new();
    loop {
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() >= max_new_tokens || dec.len() >= cfg.context {
            break;
        }
        logits = dec.push(next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::BOS;
    use proptest::prelude::*;

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            hidden: 8,
            mlp_hidden: 12,
            blocks: 2,
            context: 16,
        }
    }

    fn zero_output(mut p: LmParams) -> LmParams {
        for name in ["out.weight", "out.bias"] {
            for v in p.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        p
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let p = zero_output(LmParams::init(small(8), 0).unwrap());
        let s = score(&p, &[BOS, 4], &[3, 5, 6]).unwrap();
        assert_eq!(s.token_logps.len(), 3);
        for lp in &s.token_logps {
            assert!((lp + 8f64.ln()).abs() < 1e-12);
        }
        assert!((s.avg_logp + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn scoring_is_deterministic() {
        let p = LmParams::init(small(10), 3).unwrap();
        let a = score(&p, &[BOS, 4, 5], &[6, 7, EOS]).unwrap();
        let b = score(&p, &[BOS, 4, 5], &[6, 7, EOS]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_overflow_and_unknown_ids() {
        let p = LmParams::init(small(10), 0).unwrap();
        let long: Vec<usize> = vec![3; 12];
        let err = score(&p, &long, &[4, 4, 4, 4, 4]).unwrap_err();
        assert!(matches!(err, Error::ContextOverflow { prompt: 12, target: 5, context: 16 }));
        assert!(matches!(score(&p, &[1], &[10]), Err(Error::UnknownTokenId { id: 10, .. })));
        assert!(matches!(score(&p, &[], &[3]), Err(Error::Empty(_))));
        assert!(matches!(score(&p, &[3], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn next_token_distributions_are_proper() {
        let p = LmParams::init(small(11), 5).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let lp = target_log_probs(&mut g, p.config(), &vars, &[BOS, 3], &[4, 5, 6, 7]).unwrap();
        let t = g.value(lp);
        for r in 0..4 {
            let total: f64 = t.row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_matches_graph_forward() {
        let p = LmParams::init(small(12), 9).unwrap();
        let prompt = [BOS, 3, 4];
        let target = [5, 6, 7, 8];
        let s = score(&p, &prompt, &target).unwrap();
        let mut dec = Decoder::new(&p);
        let mut logits = Vec::new();
        for &t in &prompt {
            logits = dec.push(t).unwrap();
        }
        for (i, &t) in target.iter().enumerate() {
            let mut lp = vec![0.0; logits.len()];
            tensor::log_softmax_row(&logits, &mut lp);
            assert!((lp[t] - s.token_logps[i]).abs() < 1e-12);
            logits = dec.push(t).unwrap();
        }
    }

    #[test]
    fn forced_end_token_gives_empty_output() {
        let mut p = LmParams::init(small(10), 1).unwrap();
        p.get_mut("out.bias").unwrap().data_mut()[EOS] = 100.0;
        assert!(greedy_decode(&p, &[BOS, 3], 64).unwrap().is_empty());
    }

    #[test]
    fn decode_budget_is_respected() {
        let mut p = LmParams::init(small(10), 1).unwrap();
        p.get_mut("out.bias").unwrap().data_mut()[7] = 100.0;
        assert_eq!(greedy_decode(&p, &[BOS, 3], 1).unwrap(), vec![7]);
        assert_eq!(greedy_decode(&p, &[BOS, 3], 5).unwrap(), vec![7; 5]);
        assert!(greedy_decode(&p, &[], 5).is_err());
        assert!(greedy_decode(&p, &[BOS], 0).is_err());
        // context limit of 16 caps the output
        assert_eq!(greedy_decode(&p, &[BOS, 3], 64).unwrap().len(), 15);
    }

    #[test]
    fn padding_after_end_is_ignored() {
        let p = LmParams::init(small(10), 8).unwrap();
        let plain = score(&p, &[BOS, 3], &[4, 5, EOS]).unwrap();
        let padded = score(&p, &[BOS, 3], &[4, 5, EOS, PAD, PAD]).unwrap();
        assert_eq!(plain, padded);
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let p = LmParams::init(small(9), 4).unwrap();
        p.save(&path).unwrap();
        let q = LmParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        LmParams::init(small(9), 4).unwrap().save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":7");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(LmParams::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn all_parameters_receive_gradients() {
        let p = LmParams::init(small(10), 2).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, true);
        let lp = target_logps(&mut g, p.config(), &vars, &[BOS, 3, 4], &[5, 6, EOS]).unwrap();
        let s = g.sum(lp);
        g.backward(s).unwrap();
        for (name, v) in p.names().iter().zip(vars.vars()) {
            assert!(g.grad(*v).is_some(), "{name} has no grad");
        }
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        // Perturb the output projection and one attention matrix through the full model.
        let base = LmParams::init(small(9), 6).unwrap();
        for name in ["out.weight", "blocks.0.attn.wq", "blocks.1.mlp.w1", "tok_emb"] {
            let x = base.get(name).unwrap().clone();
            let report = crate::gradcheck::finite_diff_check(
                |g, xv| {
                    let mut vars = Vec::new();
                    for (n, t) in base.names().iter().zip(base.tensors()) {
                        if n == name {
                            vars.push(xv);
                        } else {
                            vars.push(g.leaf(t.clone(), false));
                        }
                    }
                    let vars = LmVars(vars);
                    let lp = target_logps(g, base.config(), &vars, &[BOS, 3, 4], &[5, 6, 7, EOS])?;
                    Ok(g.sum(lp))
                },
                &x,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{name}: {report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn scoring_is_causal(seed in 0u64..1000, target in proptest::collection::vec(3usize..10, 2..8), cut in 1usize..8) {
            let p = LmParams::init(small(10), seed).unwrap();
            let cut = cut.min(target.len());
            let full = score(&p, &[BOS, 4], &target).unwrap();
            let prefix = score(&p, &[BOS, 4], &target[..cut]).unwrap();
            for i in 0..cut {
                prop_assert!((full.token_logps[i] - prefix.token_logps[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn scored_sequence_aggregates(seed in 0u64..1000, target in proptest::collection::vec(3usize..10, 1..8)) {
            let p = LmParams::init(small(10), seed).unwrap();
            let s = score(&p, &[BOS], &target).unwrap();
            let total: f64 = s.token_logps.iter().sum();
            prop_assert!((s.sum_logp - total).abs() < 1e-9);
            prop_assert!((s.avg_logp * s.len() as f64 - s.sum_logp).abs() < 1e-9);
            prop_assert!(s.token_logps.iter().all(|&v| v <= 0.0));
        }
    }
}
