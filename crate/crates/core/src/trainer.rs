//! Training loop shared by the supervised and preference objectives.
//!
//! One optimizer step consumes `effective_batch` examples, split into physical
//! batches that are each one forward/backward graph. A preference batch of k
//! pairs is laid out as 2k sequences: all preferred completions, then all
//! dispreferred ones, so pair i spans sequences i and i + k. To keep the
//! number of sequences per forward pass equal across objectives, preference
//! batches hold half as many examples and accumulate twice as many steps.
//!
//! The step gradient is the sum of per-example loss gradients divided by the
//! number of examples in the step (or not divided, with `normalize_loss`
//! off), which makes the update independent of how the step is split.
//!
//! Run directory layout (when one is given):
//!
//! * `config.json`: the resolved [`TrainConfig`].
//! * `metrics.csv`: one row per epoch with columns `epoch` (1-based),
//!   `train_loss` (mean per-example loss over the epoch), `dev_score` (dev
//!   chrF of greedy decodes against the post-edits) and `lr` (learning rate of
//!   the epoch's last step).
//! * `checkpoints/best/model.json`, `checkpoints/last/model.json`.
//! * `events.log`: plain-text progress and diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::DevExample;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, greedy_decode, LmParams, LmVars};
use crate::objectives::{self, LossBreakdown, ObjectiveConfig, ObjectiveKind, PairScores, PreferencePair, RefScore};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero.
    Cosine,
    /// Linear warmup, then linear decay to zero.
    Linear,
    /// Linear warmup, then constant.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitFrom {
    Fresh,
    SftCheckpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    /// Examples (sequences for SFT, pairs otherwise) per optimizer step.
    pub effective_batch: usize,
    /// Sequences per forward pass.
    pub physical_batch: usize,
    pub max_grad_norm: f64,
    pub patience: usize,
    pub epsilon: f64,
    pub max_new_tokens: usize,
    pub objective: ObjectiveConfig,
    pub adamw: AdamWConfig,
    pub init_from: InitFrom,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for the tiny model: learning rate 3e-4, otherwise the
    /// large-model hyperparameters.
    pub fn desk(kind: ObjectiveKind) -> Self {
        Self {
            max_epochs: 20,
            learning_rate: 3e-4,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            effective_batch: 256,
            physical_batch: 16,
            max_grad_norm: 10.0,
            patience: 3,
            epsilon: 1e-5,
            max_new_tokens: 64,
            objective: ObjectiveConfig::new(kind),
            adamw: AdamWConfig::default(),
            init_from: InitFrom::Fresh,
            seed: 0,
        }
    }

    /// The large-model hyperparameters as published, learning rate 2e-6.
    pub fn paper(kind: ObjectiveKind) -> Self {
        Self {
            learning_rate: 2e-6,
            ..Self::desk(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        self.batch_plan().map(|_| ())
    }

    pub fn batch_plan(&self) -> Result<BatchPlan> {
        let pairwise = self.objective.kind.is_pairwise();
        let seqs = self.physical_batch;
        if seqs == 0 || (pairwise && seqs % 2 != 0) {
            return Err(Error::Config(format!(
                "physical_batch {seqs} must be positive{}",
                if pairwise { " and even for pair batches" } else { "" }
            )));
        }
        let examples = if pairwise { seqs / 2 } else { seqs };
        if self.effective_batch == 0 || self.effective_batch % examples != 0 {
            return Err(Error::Config(format!(
                "effective_batch {} is not a multiple of {examples} examples per batch",
                self.effective_batch
            )));
        }
        Ok(BatchPlan {
            pairwise,
            examples_per_batch: examples,
            sequences_per_batch: seqs,
            accumulation_steps: self.effective_batch / examples,
            effective_batch: self.effective_batch,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BatchPlan {
    pub pairwise: bool,
    pub examples_per_batch: usize,
    pub sequences_per_batch: usize,
    pub accumulation_steps: usize,
    pub effective_batch: usize,
}

impl BatchPlan {
    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.effective_batch)
    }
}

/// Example indices of one optimizer step, grouped into physical batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptimizerStep {
    pub batches: Vec<Vec<usize>>,
}

impl OptimizerStep {
    pub fn examples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Shuffles `n` example indices for `epoch` and groups them into optimizer
/// steps. The final partial batch and step are kept.
pub fn make_batches(n: usize, plan: &BatchPlan, seed: u64, epoch: usize) -> Result<Vec<OptimizerStep>> {
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, rng::label("batches") ^ epoch as u64)));
    Ok(order
        .chunks(plan.effective_batch)
        .map(|step| OptimizerStep {
            batches: step.chunks(plan.examples_per_batch).map(<[usize]>::to_vec).collect(),
        })
        .collect())
}

/// The sequences of a physical batch in forward-pass order: all preferred
/// completions, then (for pair batches) all dispreferred ones.
pub fn batch_sequences<'p>(pairs: &[&'p PreferencePair], pairwise: bool) -> Vec<(&'p [usize], &'p [usize])> {
    let mut out: Vec<_> = pairs.iter().map(|p| (p.prompt.as_slice(), p.chosen.as_slice())).collect();
    if pairwise {
        out.extend(pairs.iter().map(|p| (p.prompt.as_slice(), p.rejected.as_slice())));
    }
    out
}

/// Which training pairs an objective consumes. Ties (unedited triples) stay
/// for objectives with a supervised term on the preferred sequence and are
/// dropped for the pure preference losses.
pub fn training_examples(pairs: &[PreferencePair], kind: ObjectiveKind) -> Vec<PreferencePair> {
    match kind {
        ObjectiveKind::Sft | ObjectiveKind::Dcpo => pairs.to_vec(),
        ObjectiveKind::Dpo | ObjectiveKind::Ipo | ObjectiveKind::Cpo => {
            pairs.iter().filter(|p| !p.is_tie()).cloned().collect()
        }
    }
}

/// Loss totals of one physical batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    /// Sum of per-example losses.
    pub loss_sum: f64,
    pub examples: usize,
    /// dCPO ties that contributed only their supervised term.
    pub sft_only: usize,
}

fn example_losses<'a>(
    g: &mut Graph<'a>,
    params: &'a LmParams,
    objective: &ObjectiveConfig,
    pairs: &[&PreferencePair],
    trainable: bool,
) -> Result<(Vec<Var>, usize, LmVars)> {
    let vars = params.bind(g, trainable);
    let cfg = params.config();
    let kind = objective.kind;
    let pairwise = kind.is_pairwise();
    let k = pairs.len();
    let seqs = batch_sequences(pairs, pairwise);
    let mut agg: Vec<Option<Var>> = vec![None; seqs.len()];
    for (s, (prompt, target)) in seqs.iter().enumerate() {
        // a tie's dispreferred copy only feeds the undefined preference term
        if s >= k && pairs[s - k].is_tie() {
            continue;
        }
        let lp = model::target_logps(g, cfg, &vars, prompt, target)?;
        agg[s] = Some(objectives::aggregate_logp(g, lp, objective.average_logps));
    }
    let mut losses = Vec::with_capacity(k);
    let mut sft_only = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let w = agg[i].expect("preferred sequence scored");
        let nodes = if !pairwise {
            objectives::sft_nodes(g, w)
        } else if pair.is_tie() {
            if kind != ObjectiveKind::Dcpo {
                return Err(Error::InvalidArgument(format!(
                    "pair {} has identical completions, which {kind} cannot use",
                    pair.id
                )));
            }
            sft_only += 1;
            objectives::sft_nodes(g, w)
        } else {
            let (rw, rl) = reference_logps(pair, objective)?;
            let l = agg[i + k].expect("dispreferred sequence scored");
            objectives::pair_nodes(g, objective, w, l, rw, rl)?
        };
        let v = g.value(nodes.total).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss of pair {} = {v}", pair.id)));
        }
        losses.push(nodes.total);
    }
    Ok((losses, sft_only, vars))
}

fn reference_logps(pair: &PreferencePair, objective: &ObjectiveConfig) -> Result<(f64, f64)> {
    if !objective.kind.uses_reference() {
        return Ok((0.0, 0.0));
    }
    match (pair.ref_chosen, pair.ref_rejected) {
        (Some(w), Some(l)) => Ok((w.logp(objective.average_logps), l.logp(objective.average_logps))),
        _ => Err(Error::InvalidArgument(format!(
            "pair {} lacks reference log-probabilities",
            pair.id
        ))),
    }
}

fn sum_nodes(g: &mut Graph<'_>, nodes: &[Var]) -> Result<Var> {
    let mut total = nodes[0];
    for &n in &nodes[1..] {
        total = g.add(total, n)?;
    }
    Ok(total)
}

/// Mean per-pair loss of a physical batch, computed as one concatenated
/// forward pass.
pub fn batch_loss(params: &LmParams, objective: &ObjectiveConfig, pairs: &[&PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut g = Graph::new();
    let (losses, _, _) = example_losses(&mut g, params, objective, pairs, false)?;
    let total = sum_nodes(&mut g, &losses)?;
    Ok(g.value(total).item() / pairs.len() as f64)
}

/// The loss of a single pair, from independently scored sequences.
pub fn pair_loss(params: &LmParams, objective: &ObjectiveConfig, pair: &PreferencePair) -> Result<LossBreakdown> {
    let w = model::score(params, &pair.prompt, &pair.chosen)?;
    if !objective.kind.is_pairwise() {
        return Ok(objectives::sft_loss(&w, objective));
    }
    let l = model::score(params, &pair.prompt, &pair.rejected)?;
    let (rw, rl) = reference_logps(pair, objective)?;
    let avg = objective.average_logps;
    objectives::loss(&PairScores::new(w.logp(avg), l.logp(avg), rw, rl), objective)
}

pub fn zero_grads(params: &LmParams) -> Vec<Tensor> {
    params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

/// Adds the gradient of `scale · Σ loss` over `pairs` into `grads`.
pub fn accumulate_batch(
    params: &LmParams,
    objective: &ObjectiveConfig,
    pairs: &[&PreferencePair],
    scale: f64,
    grads: &mut [Tensor],
) -> Result<BatchLoss> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut g = Graph::new();
    let (losses, sft_only, vars) = example_losses(&mut g, params, objective, pairs, true)?;
    let total = sum_nodes(&mut g, &losses)?;
    let loss_sum = g.value(total).item();
    let scaled = g.scale(total, scale);
    g.backward(scaled)?;
    for (acc, &v) in grads.iter_mut().zip(vars.vars()) {
        if let Some(gr) = g.grad(v) {
            for (a, b) in acc.data_mut().iter_mut().zip(gr) {
                *a += b;
            }
        }
    }
    Ok(BatchLoss {
        loss_sum,
        examples: pairs.len(),
        sft_only,
    })
}

/// Gradient of one optimizer step over `examples`, split into physical
/// batches of `examples_per_batch`.
pub fn step_gradients(
    params: &LmParams,
    objective: &ObjectiveConfig,
    examples: &[&PreferencePair],
    examples_per_batch: usize,
) -> Result<(Vec<Tensor>, BatchLoss)> {
    let mut grads = zero_grads(params);
    let scale = if objective.normalize_loss {
        1.0 / examples.len() as f64
    } else {
        1.0
    };
    let mut total = BatchLoss::default();
    for chunk in examples.chunks(examples_per_batch.max(1)) {
        let b = accumulate_batch(params, objective, chunk, scale, &mut grads)?;
        total.loss_sum += b.loss_sum;
        total.examples += b.examples;
        total.sft_only += b.sft_only;
    }
    Ok((grads, total))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Learning rate of the `step`-th update (1-based) out of `total`: linear
/// warmup to `peak` over `warmup` updates, then the schedule's decay.
pub fn lr_at(schedule: Schedule, peak: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step <= warmup {
        return peak * step as f64 / warmup.max(1) as f64;
    }
    let progress = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
    let progress = progress.min(1.0);
    match schedule {
        Schedule::Cosine => peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        Schedule::Linear => peak * (1.0 - progress),
        Schedule::Constant => peak,
    }
}

pub fn warmup_steps(ratio: f64, total: usize) -> usize {
    (ratio * total as f64).ceil() as usize
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &LmParams) -> Self {
        Self {
            cfg,
            m: zero_grads(params),
            v: zero_grads(params),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut LmParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.shape().len() == 2 { c.weight_decay } else { 0.0 };
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= lr * (update + decay * p[i]);
            }
        }
    }
}

/// Fills `ref_chosen` and `ref_rejected` of every pair from the frozen
/// reference. Pairs that do not fit the context are reported together.
pub fn precompute_reference_scores(reference: &LmParams, pairs: &mut [PreferencePair]) -> Result<()> {
    let mut overflow = Vec::new();
    for p in pairs.iter_mut() {
        let scored = model::score(reference, &p.prompt, &p.chosen)
            .and_then(|w| Ok((w, model::score(reference, &p.prompt, &p.rejected)?)));
        match scored {
            Ok((w, l)) => {
                p.ref_chosen = Some(RefScore::from(&w));
                p.ref_rejected = Some(RefScore::from(&l));
            }
            Err(Error::ContextOverflow { .. }) => overflow.push(p.id),
            Err(e) => return Err(e),
        }
    }
    if overflow.is_empty() {
        Ok(())
    } else {
        Err(Error::PairsOverflow {
            ids: overflow,
            context: reference.config().context,
        })
    }
}

/// Patience-based early stopping on a higher-is-better score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub epsilon: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, epsilon: f64) -> Self {
        Self {
            patience,
            epsilon,
            best: None,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// An evaluation improves iff it exceeds the best so far by more than
    /// `epsilon`; training stops after `patience` evaluations in a row without
    /// improvement.
    pub fn observe(&mut self, epoch: usize, score: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some(b) => score > b + self.epsilon,
        };
        if improved {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        Observation {
            improved,
            stop: self.since_improvement >= self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_score: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub best_dev_score: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub stopped_early: bool,
    /// Dev score of the initial parameters.
    pub initial_dev_score: f64,
    pub examples: usize,
    /// dCPO ties per epoch trained on their supervised term alone.
    pub sft_only_examples: usize,
    /// Reference fingerprint before and after training, for reference-based objectives.
    pub reference_fingerprint: Option<(u64, u64)>,
    pub history: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub best: LmParams,
    pub last: LmParams,
}

/// Greedy-decodes every dev prompt and returns corpus chrF against the
/// post-edits, with the decoded texts.
pub fn evaluate_dev(
    params: &LmParams,
    dev: &[DevExample],
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<(f64, Vec<String>)> {
    let hyps = decode_all(params, dev.iter().map(|d| d.prompt.as_slice()), vocab, max_new_tokens)?;
    let refs: Vec<&str> = dev.iter().map(|d| d.reference.as_str()).collect();
    Ok((metrics::chrf(&hyps, &refs)?, hyps))
}

pub fn decode_all<'a>(
    params: &LmParams,
    prompts: impl Iterator<Item = &'a [usize]>,
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<Vec<String>> {
    prompts
        .map(|p| {
            let ids = greedy_decode(params, p, max_new_tokens)?;
            debug_assert!(!ids.contains(&EOS));
            Ok(vocab.decode(&ids))
        })
        .collect()
}

struct RunDir {
    root: PathBuf,
    log: String,
}

impl RunDir {
    fn create(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        for d in ["checkpoints/best", "checkpoints/last"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write(&root.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;
        Ok(Self {
            root: root.to_path_buf(),
            log: String::new(),
        })
    }

    fn event(&mut self, line: impl AsRef<str>) -> Result<()> {
        self.log.push_str(line.as_ref());
        self.log.push('\n');
        write(&self.root.join("events.log"), &self.log)
    }

    fn metrics(&self, history: &[EpochRecord]) -> Result<()> {
        let mut s = String::from("epoch,train_loss,dev_score,lr\n");
        for r in history {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.dev_score, r.lr);
        }
        write(&self.root.join("metrics.csv"), &s)
    }

    fn checkpoint(&self, which: &str, params: &LmParams) -> Result<()> {
        params.save(&self.root.join("checkpoints").join(which).join("model.json"))
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains `init` on `pairs` with early stopping on dev chrF.
///
/// For reference-based objectives the reference is a frozen copy of `init`,
/// whose scores are computed once before the first step.
pub fn train(
    cfg: &TrainConfig,
    init: LmParams,
    pairs: &[PreferencePair],
    dev: &[DevExample],
    vocab: &Vocabulary,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let plan = cfg.batch_plan()?;
    let objective = cfg.objective;
    let mut run = run_dir.map(|d| RunDir::create(d, cfg)).transpose()?;
    let log = |run: &mut Option<RunDir>, line: String| -> Result<()> {
        match run {
            Some(r) => r.event(line),
            None => Ok(()),
        }
    };

    let mut examples = training_examples(pairs, objective.kind);
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let reference = objective.kind.uses_reference().then(|| init.clone());
    let ref_before = reference.as_ref().map(LmParams::fingerprint);
    if let Some(r) = &reference {
        precompute_reference_scores(r, &mut examples)?;
    }
    let ties = examples.iter().filter(|p| p.is_tie()).count();
    log(
        &mut run,
        format!(
            "objective {} examples {} ties {} batch plan {:?}",
            objective.kind,
            examples.len(),
            ties,
            plan
        ),
    )?;

    let steps_per_epoch = plan.steps_per_epoch(examples.len());
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let warmup = warmup_steps(cfg.warmup_ratio, total_steps);

    let mut params = init;
    let mut opt = AdamW::new(cfg.adamw, &params);
    let (initial_dev, _) = evaluate_dev(&params, dev, vocab, cfg.max_new_tokens)?;
    log(&mut run, format!("epoch 0 dev {initial_dev:.4}"))?;

    let mut stopper = EarlyStopping::new(cfg.patience, cfg.epsilon);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut step = 0;
    let mut batch_id = 0;
    let mut stopped_early = false;
    let mut sft_only = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut lr = 0.0;
        sft_only = 0;
        for s in make_batches(examples.len(), &plan, cfg.seed, epoch)? {
            step += 1;
            lr = lr_at(cfg.schedule, cfg.learning_rate, step, total_steps, warmup);
            let scale = if objective.normalize_loss {
                1.0 / s.examples() as f64
            } else {
                1.0
            };
            let mut grads = zero_grads(&params);
            for b in &s.batches {
                batch_id += 1;
                let batch: Vec<&PreferencePair> = b.iter().map(|&i| &examples[i]).collect();
                let r = accumulate_batch(&params, &objective, &batch, scale, &mut grads).map_err(|e| {
                    abort(step, lr, batch_id, e.to_string())
                })?;
                if !r.loss_sum.is_finite() {
                    return Err(abort(step, lr, batch_id, format!("loss {}", r.loss_sum)));
                }
                loss_sum += r.loss_sum;
                seen += r.examples;
                sft_only += r.sft_only;
            }
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                let e = abort(step, lr, batch_id, format!("gradient norm {norm}"));
                log(&mut run, format!("abort: {e}"))?;
                return Err(e);
            }
            opt.step(&mut params, &grads, lr);
        }
        let train_loss = loss_sum / seen as f64;
        let (dev_score, _) = evaluate_dev(&params, dev, vocab, cfg.max_new_tokens)?;
        let obs = stopper.observe(epoch, dev_score);
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_score,
            lr,
        });
        log(
            &mut run,
            format!(
                "epoch {epoch} step {step} train_loss {train_loss:.6} dev {dev_score:.4} lr {lr:.3e}{}",
                if obs.improved { " best" } else { "" }
            ),
        )?;
        if obs.improved {
            best = params.clone();
        }
        if let Some(r) = &run {
            r.metrics(&history)?;
            r.checkpoint("last", &params)?;
            if obs.improved {
                r.checkpoint("best", &params)?;
            }
        }
        if obs.stop {
            stopped_early = epoch < cfg.max_epochs;
            log(&mut run, format!("early stop after epoch {epoch}"))?;
            break;
        }
    }

    let ref_after = reference.as_ref().map(LmParams::fingerprint);
    let reference_fingerprint = ref_before.zip(ref_after);
    if let Some((a, b)) = reference_fingerprint {
        log(&mut run, format!("reference fingerprint {a:016x} -> {b:016x}"))?;
    }
    let state = TrainState {
        epoch: history.len(),
        step,
        best_dev_score: stopper.best.unwrap_or(f64::NAN),
        best_epoch: stopper.best_epoch,
        epochs_since_improvement: stopper.since_improvement,
        stopped_early,
        initial_dev_score: initial_dev,
        examples: examples.len(),
        sft_only_examples: sft_only,
        reference_fingerprint,
        history,
    };
    Ok(TrainOutcome {
        state,
        best,
        last: params,
    })
}

fn abort(step: usize, lr: f64, batch: usize, reason: String) -> Error {
    Error::NumericAbort { step, lr, batch, reason }
}
