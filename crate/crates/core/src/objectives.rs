//! Supervised and preference-optimization training objectives.
//!
//! Every loss is built on the autodiff graph from the policy's sequence
//! log-probabilities (graph nodes) and the frozen reference's log-probabilities
//! (plain numbers, computed once ahead of training). The partition function of
//! the KL-constrained optimal policy never appears: it cancels inside the
//! Bradley-Terry difference of implicit rewards.
//!
//! Value-level wrappers ([`sft_loss`], [`dpo_loss`], ...) evaluate the same
//! graph code on scalar inputs and return a [`LossBreakdown`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ScoredSequence;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Sft,
    Dpo,
    Ipo,
    Cpo,
    Dcpo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [Self::Sft, Self::Dpo, Self::Ipo, Self::Cpo, Self::Dcpo];

    /// Whether the loss compares a preferred and a dispreferred sequence.
    pub fn is_pairwise(self) -> bool {
        !matches!(self, Self::Sft)
    }

    /// Whether the loss normalizes by the frozen reference policy.
    pub fn uses_reference(self) -> bool {
        matches!(self, Self::Dpo | Self::Ipo | Self::Dcpo)
    }

    /// Whether the loss has a supervised term on the preferred sequence.
    pub fn has_sft_term(self) -> bool {
        matches!(self, Self::Sft | Self::Cpo | Self::Dcpo)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sft => "sft",
            Self::Dpo => "dpo",
            Self::Ipo => "ipo",
            Self::Cpo => "cpo",
            Self::Dcpo => "dcpo",
        })
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    /// Use length-averaged instead of summed sequence log-probabilities.
    pub average_logps: bool,
    /// Divide the batch loss by the number of examples.
    pub normalize_loss: bool,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            beta: 0.1,
            average_logps: true,
            normalize_loss: true,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_average(mut self, average: bool) -> Self {
        self.average_logps = average;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// The log-ratio gap IPO drives pairs towards, `1/(2β)`.
    pub fn ipo_target_margin(&self) -> f64 {
        1.0 / (2.0 * self.beta)
    }
}

/// Reference-policy log-probability of one sequence, in both aggregations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefScore {
    pub sum_logp: f64,
    pub avg_logp: f64,
}

impl RefScore {
    pub fn logp(&self, average: bool) -> f64 {
        if average {
            self.avg_logp
        } else {
            self.sum_logp
        }
    }
}

impl From<&ScoredSequence> for RefScore {
    fn from(s: &ScoredSequence) -> Self {
        Self {
            sum_logp: s.sum_logp,
            avg_logp: s.avg_logp,
        }
    }
}

/// A prompt with a preferred (`chosen`, the post-edit) and a dispreferred
/// (`rejected`, the raw machine translation) completion, as token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: usize,
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub ref_chosen: Option<RefScore>,
    pub ref_rejected: Option<RefScore>,
}

impl PreferencePair {
    pub fn new(id: usize, prompt: Vec<usize>, chosen: Vec<usize>, rejected: Vec<usize>) -> Self {
        Self {
            id,
            prompt,
            chosen,
            rejected,
            ref_chosen: None,
            ref_rejected: None,
        }
    }

    /// Pairs whose two completions are identical carry no preference.
    pub fn is_tie(&self) -> bool {
        self.chosen == self.rejected
    }

    pub fn has_reference(&self) -> bool {
        self.ref_chosen.is_some() && self.ref_rejected.is_some()
    }
}

/// Aggregated sequence log-probabilities feeding a pairwise loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    pub policy_w: f64,
    pub policy_l: f64,
    pub ref_w: f64,
    pub ref_l: f64,
}

impl PairScores {
    pub fn new(policy_w: f64, policy_l: f64, ref_w: f64, ref_l: f64) -> Self {
        Self {
            policy_w,
            policy_l,
            ref_w,
            ref_l,
        }
    }

    /// Aggregates scored sequences according to `average`.
    pub fn from_scored(
        w: &ScoredSequence,
        l: &ScoredSequence,
        ref_w: RefScore,
        ref_l: RefScore,
        average: bool,
    ) -> Self {
        Self::new(w.logp(average), l.logp(average), ref_w.logp(average), ref_l.logp(average))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sft_term: Option<f64>,
    pub po_term: Option<f64>,
    /// `logratio_w - logratio_l`; for CPO the log-ratios are plain policy log-probs.
    pub margin: f64,
}

/// Graph nodes of one example's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub sft_term: Option<Var>,
    pub po_term: Option<Var>,
    pub margin: f64,
}

/// Bradley-Terry preference probability `σ(r_w - r_l)`.
pub fn bt_probability(reward_w: f64, reward_l: f64) -> f64 {
    tensor::logistic(reward_w - reward_l)
}

/// `β · (log π(y|x) - log π_ref(y|x))`.
pub fn implicit_reward(policy_logp: f64, ref_logp: f64, beta: f64) -> f64 {
    beta * (policy_logp - ref_logp)
}

/// Reduces per-token log-probabilities to the sequence score the losses use:
/// the mean when `average` is set, the sum otherwise.
pub fn aggregate_logp(g: &mut Graph<'_>, token_logps: Var, average: bool) -> Var {
    if average {
        g.mean(token_logps)
    } else {
        g.sum(token_logps)
    }
}

/// Supervised loss on one sequence: the negated (summed or averaged) log-probability.
pub fn sft_nodes(g: &mut Graph<'_>, policy_w: Var) -> LossNodes {
    let total = g.neg(policy_w);
    LossNodes {
        total,
        sft_term: Some(total),
        po_term: None,
        margin: 0.0,
    }
}

/// The loss of one preference pair. `policy_w` and `policy_l` are scalar nodes
/// holding the policy's aggregated log-probabilities; `ref_w` and `ref_l` are
/// the matching reference values (ignored by CPO).
pub fn pair_nodes(
    g: &mut Graph<'_>,
    cfg: &ObjectiveConfig,
    policy_w: Var,
    policy_l: Var,
    ref_w: f64,
    ref_l: f64,
) -> Result<LossNodes> {
    cfg.validate()?;
    let beta = cfg.beta;
    let gap = g.sub(policy_w, policy_l)?;
    let ref_gap = ref_w - ref_l;
    let policy_gap = g.value(gap).item();
    let nodes = match cfg.kind {
        ObjectiveKind::Sft => sft_nodes(g, policy_w),
        ObjectiveKind::Dpo => {
            // -log σ(β(Δ_w - Δ_l))
            let m = g.shift(gap, -ref_gap);
            let z = g.scale(m, beta);
            let ll = g.log_logistic(z);
            let total = g.neg(ll);
            LossNodes {
                total,
                sft_term: None,
                po_term: Some(total),
                margin: policy_gap - ref_gap,
            }
        }
        ObjectiveKind::Ipo => {
            let po = ipo_term(g, gap, ref_gap, cfg.ipo_target_margin());
            LossNodes {
                total: po,
                sft_term: None,
                po_term: Some(po),
                margin: policy_gap - ref_gap,
            }
        }
        ObjectiveKind::Cpo => {
            // -log π(y_w) - log σ(β log π(y_w) - β log π(y_l))
            let sft = g.neg(policy_w);
            let z = g.scale(gap, beta);
            let ll = g.log_logistic(z);
            let po = g.neg(ll);
            let total = g.add(sft, po)?;
            LossNodes {
                total,
                sft_term: Some(sft),
                po_term: Some(po),
                margin: policy_gap,
            }
        }
        ObjectiveKind::Dcpo => {
            let sft = g.neg(policy_w);
            let po = ipo_term(g, gap, ref_gap, cfg.ipo_target_margin());
            let total = g.add(sft, po)?;
            LossNodes {
                total,
                sft_term: Some(sft),
                po_term: Some(po),
                margin: policy_gap - ref_gap,
            }
        }
    };
    let value = g.value(nodes.total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss = {value}", cfg.kind)));
    }
    Ok(nodes)
}

/// `((Δ_w - Δ_l) - 1/(2β))²`
fn ipo_term(g: &mut Graph<'_>, policy_gap: Var, ref_gap: f64, target: f64) -> Var {
    let h = g.shift(policy_gap, -ref_gap - target);
    g.square(h)
}

fn breakdown(g: &Graph<'_>, n: &LossNodes) -> LossBreakdown {
    LossBreakdown {
        total: g.value(n.total).item(),
        sft_term: n.sft_term.map(|v| g.value(v).item()),
        po_term: n.po_term.map(|v| g.value(v).item()),
        margin: n.margin,
    }
}

fn eval_pair(scores: &PairScores, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::scalar(scores.policy_w), false);
    let l = g.leaf(Tensor::scalar(scores.policy_l), false);
    let nodes = pair_nodes(&mut g, cfg, w, l, scores.ref_w, scores.ref_l)?;
    Ok(breakdown(&g, &nodes))
}

fn with_kind(cfg: &ObjectiveConfig, kind: ObjectiveKind) -> ObjectiveConfig {
    ObjectiveConfig { kind, ..*cfg }
}

/// `-log π(y_w)`, summed or averaged over tokens per `cfg.average_logps`.
pub fn sft_loss(score_w: &ScoredSequence, cfg: &ObjectiveConfig) -> LossBreakdown {
    let total = -score_w.logp(cfg.average_logps);
    LossBreakdown {
        total,
        sft_term: Some(total),
        po_term: None,
        margin: 0.0,
    }
}

pub fn dpo_loss(scores: &PairScores, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    eval_pair(scores, &with_kind(cfg, ObjectiveKind::Dpo))
}

pub fn ipo_loss(scores: &PairScores, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    eval_pair(scores, &with_kind(cfg, ObjectiveKind::Ipo))
}

pub fn cpo_loss(scores: &PairScores, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    eval_pair(scores, &with_kind(cfg, ObjectiveKind::Cpo))
}

pub fn dcpo_loss(scores: &PairScores, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    eval_pair(scores, &with_kind(cfg, ObjectiveKind::Dcpo))
}

/// Dispatches on `cfg.kind`. SFT uses only `policy_w`.
pub fn loss(scores: &PairScores, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    eval_pair(scores, cfg)
}
