//! The loss family: SFT, IFT, DPO (offline and online negatives) and ORPO.
//!
//! Every loss builds its scalar on a caller-supplied [`Graph`] so the caller
//! can run `backward` into the model's parameters, and returns a
//! [`LossReport`] with the per-token quantities.
//!
//! IFT runs in three stages. A teacher-forced pass predicts the greedy next
//! action at every target position (no gradient). Those predictions are
//! embedded and mixed into the ground-truth input embeddings,
//! `e = (1 - lambda) E(s*) + lambda E(s_theta)`. The token losses on the
//! fused inputs are then reweighted by a discounted suffix sum so each
//! position also carries the losses of every later position.

mod demo;
mod propagation;

pub use demo::{Continuation, Demo};
pub use propagation::{propagation_matrix, relation_propagation_weights, Propagation};

use rand::Rng;
use serde::Serialize;

use crate::diff::graph::{Graph, Var};
use crate::diff::tensor::{softmax, Tensor};
use crate::diff::PolicyModel;
use crate::error::{Error, Result};
use crate::mdp::{argmax, corollary_check, PreferenceEstimator, TokenSequence};

/// Default IFT mix and decay.
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_DECAY: f64 = 0.95;
pub const DPO_BETA: f64 = 0.1;
pub const ORPO_BETA: f64 = 0.25;

/// Mean log-probabilities are clamped below zero before the log-odds.
const LOG_ODDS_CEILING: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    /// Divide by the number of target tokens.
    PerToken,
    /// Divide by the total propagation coefficient mass, so a constant loss
    /// `L` per token gives total `L`.
    PerWeightSum,
    None,
}

/// How the weighted token losses reduce to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `sum_t w_t`, the double sum over suffixes.
    Sum,
    /// `sum_t w_t * L_t`. Quadratic in the losses; experimental.
    DotExperimental,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub decay: f64,
    pub propagation: Propagation,
    pub normalize: Normalize,
    pub reduction: Reduction,
    pub beta: f64,
    pub orpo_mix: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            decay: DEFAULT_DECAY,
            propagation: Propagation::Eq20SuffixSum,
            normalize: Normalize::PerToken,
            reduction: Reduction::Sum,
            beta: DPO_BETA,
            orpo_mix: 1.0,
        }
    }
}

impl LossConfig {
    /// IFT settings under which it coincides with SFT.
    pub fn sft_equivalent() -> Self {
        Self { lambda: 0.0, propagation: Propagation::Off, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            bad.push(format!("lambda={} not in [0, 1]", self.lambda));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            bad.push(format!("decay={} not in (0, 1]", self.decay));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            bad.push(format!("beta={} must be > 0", self.beta));
        }
        if !(self.orpo_mix >= 0.0) || !self.orpo_mix.is_finite() {
            bad.push(format!("orpo_mix={} must be >= 0", self.orpo_mix));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidLossConfig(bad.join(", ")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `max(dist) - dist[target]` at every scored position.
    pub corollary_gaps: Vec<f64>,
    /// Number of scored positions where the corollary check failed.
    pub corollary_failures: usize,
    /// DPO/ORPO: the argument of the sigmoid.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    /// Raw `L_t = -log p(target_t)` per scored position.
    pub token_losses: Vec<f64>,
    /// Propagated weights `w_t` (equal to `token_losses` when propagation is off).
    pub weights: Vec<f64>,
    pub total: Var,
    pub total_value: f64,
    /// One-step-ahead greedy predictions (IFT only).
    pub fused_greedy_tokens: Vec<usize>,
    pub diagnostics: Diagnostics,
    /// Whether `token_losses` are path losses the Bellman check applies to.
    raw_path_losses: bool,
}

impl LossReport {
    pub fn value(&self) -> f64 {
        self.total_value
    }

    /// One JSON-lines record for this report.
    pub fn record(&self, step: usize, config_hash: &str) -> LossRecord {
        LossRecord {
            step,
            config_hash: config_hash.to_string(),
            token_losses: self.token_losses.clone(),
            weights: self.weights.clone(),
            total: self.total_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub config_hash: String,
    pub token_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl LossRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss record serialises")
    }
}

fn check_corollary(dists: &[Vec<f64>], targets: &[(usize, usize)]) -> Result<Diagnostics> {
    let mut d = Diagnostics::default();
    for (dist, &(_, a)) in dists.iter().zip(targets) {
        let c = corollary_check(dist, a)?;
        d.corollary_gaps.push(c.gap);
        if !c.holds {
            d.corollary_failures += 1;
        }
    }
    Ok(d)
}

struct PathLoss {
    /// `N x 1` column of token losses.
    losses: Var,
    diagnostics: Diagnostics,
}

/// Token losses of `demo`'s targets when the policy body reads `embedded`.
fn path_loss(g: &mut Graph, model: &PolicyModel, demo: &Demo, embedded: Var) -> Result<PathLoss> {
    let targets = demo.targets();
    let logits = model.logits_from_embeddings(g, embedded)?;
    let dists: Vec<Vec<f64>> =
        targets.iter().map(|&(p, _)| softmax(g.value(logits).row(p))).collect();
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, targets.clone());
    let losses = g.scale(picked, -1.0);
    Ok(PathLoss { losses, diagnostics: check_corollary(&dists, &targets)? })
}

fn column(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn reduce(
    g: &mut Graph,
    path: PathLoss,
    cfg: &LossConfig,
    propagation: Propagation,
    greedy: Vec<usize>,
) -> Result<LossReport> {
    let token_losses = column(g, path.losses);
    let n = token_losses.len();
    if n == 0 {
        return Err(Error::NoTargetTokens);
    }
    let (weights, coefficient_mass) = match propagation {
        Propagation::Off => (path.losses, n as f64),
        mode => {
            let c = propagation_matrix(n, cfg.decay, mode);
            let mass = c.data().iter().sum();
            let c = g.constant(c);
            (g.matmul(c, path.losses), mass)
        }
    };
    let raw = match cfg.reduction {
        Reduction::Sum => g.sum(weights),
        Reduction::DotExperimental => {
            let wl = g.mul(weights, path.losses);
            g.sum(wl)
        }
    };
    let total = match cfg.normalize {
        Normalize::PerToken => g.scale(raw, 1.0 / n as f64),
        Normalize::PerWeightSum => g.scale(raw, 1.0 / coefficient_mass),
        Normalize::None => raw,
    };
    Ok(LossReport {
        token_losses,
        weights: column(g, weights),
        total,
        total_value: g.scalar_value(total),
        fused_greedy_tokens: greedy,
        diagnostics: path.diagnostics,
        raw_path_losses: true,
    })
}

/// Teacher-forced negative log-likelihood of the targets.
pub fn sft_loss(g: &mut Graph, model: &PolicyModel, demo: &Demo, cfg: &LossConfig) -> Result<LossReport> {
    let embedded = model.embed(g, demo.inputs())?;
    let path = path_loss(g, model, demo, embedded)?;
    reduce(g, path, cfg, Propagation::Off, Vec::new())
}

/// Greedy action at every target position given the ground-truth prefix.
/// One teacher-forced forward pass; nothing is recorded for backward.
pub fn greedy_one_step_ahead(model: &PolicyModel, demo: &Demo) -> Result<Vec<usize>> {
    let logits = model.logits(demo.inputs())?;
    Ok(demo.targets().iter().map(|&(p, _)| argmax(logits.row(p))).collect())
}

/// Fused input embeddings `(1 - lambda) E(s*) + lambda E(s_theta)`; prompt
/// positions stay pure. Gradients reach the embedding table through both
/// lookups.
pub fn fuse_states(
    g: &mut Graph,
    model: &PolicyModel,
    demo: &Demo,
    s_theta: &[usize],
    lambda: f64,
) -> Result<Var> {
    let per_position = vec![lambda; demo.target_count()];
    fuse_states_with(g, model, demo, s_theta, &per_position)
}

/// [`fuse_states`] with one mix coefficient per greedy prediction.
pub fn fuse_states_with(
    g: &mut Graph,
    model: &PolicyModel,
    demo: &Demo,
    s_theta: &[usize],
    lambdas: &[f64],
) -> Result<Var> {
    if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidMix(l));
    }
    let (alt, fused) = demo.disturbed_inputs(s_theta)?;
    let mut next = lambdas.iter();
    let row_lambdas = fused
        .iter()
        .map(|&f| if f { *next.next().unwrap_or(&0.0) } else { 0.0 })
        .collect();
    let truth = model.embed(g, demo.inputs())?;
    let disturbed = model.embed(g, &alt)?;
    Ok(g.mix(truth, disturbed, row_lambdas))
}

/// Per-prediction mix coefficients `lambda + U(-amplitude, amplitude)`,
/// clamped to `[0, 1]`.
pub fn jittered_lambdas(lambda: f64, amplitude: f64, count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let j = if amplitude > 0.0 { rng.gen_range(-amplitude..=amplitude) } else { 0.0 };
            (lambda + j).clamp(0.0, 1.0)
        })
        .collect()
}

/// Intuitive fine-tuning loss.
pub fn ift_loss(g: &mut Graph, model: &PolicyModel, demo: &Demo, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    let greedy = greedy_one_step_ahead(model, demo)?;
    ift_loss_with_greedy(g, model, demo, cfg, greedy)
}

/// [`ift_loss`] with the one-step-ahead predictions supplied by the caller.
pub fn ift_loss_with_greedy(
    g: &mut Graph,
    model: &PolicyModel,
    demo: &Demo,
    cfg: &LossConfig,
    greedy: Vec<usize>,
) -> Result<LossReport> {
    let lambdas = vec![cfg.lambda; demo.target_count()];
    ift_loss_with_lambdas(g, model, demo, cfg, greedy, &lambdas)
}

pub fn ift_loss_with_lambdas(
    g: &mut Graph,
    model: &PolicyModel,
    demo: &Demo,
    cfg: &LossConfig,
    greedy: Vec<usize>,
    lambdas: &[f64],
) -> Result<LossReport> {
    let embedded = fuse_states_with(g, model, demo, &greedy, lambdas)?;
    let path = path_loss(g, model, demo, embedded)?;
    reduce(g, path, cfg, cfg.propagation, greedy)
}

/// Sum of target log-probabilities, kept on the graph.
fn sequence_logprob(g: &mut Graph, model: &PolicyModel, demo: &Demo) -> Result<(Var, PathLoss)> {
    let embedded = model.embed(g, demo.inputs())?;
    let path = path_loss(g, model, demo, embedded)?;
    let s = g.sum(path.losses);
    Ok((g.scale(s, -1.0), path))
}

fn sequence_logprob_value(model: &PolicyModel, demo: &Demo) -> Result<f64> {
    let mut g = Graph::new();
    let (lp, _) = sequence_logprob(&mut g, model, demo)?;
    Ok(g.scalar_value(lp))
}

/// Direct preference optimisation:
/// `-log sigmoid(beta * [(lp(pos) - lp_ref(pos)) - (lp(neg) - lp_ref(neg))])`.
pub fn dpo_loss(
    g: &mut Graph,
    model: &PolicyModel,
    reference: Option<&PolicyModel>,
    positive: &Demo,
    negative: &Demo,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let reference = reference.ok_or(Error::ReferenceRequired)?;
    if positive.origin() != negative.origin() {
        return Err(Error::PairPromptMismatch);
    }
    let ref_gap = sequence_logprob_value(reference, positive)?
        - sequence_logprob_value(reference, negative)?;
    let (lp_pos, path) = sequence_logprob(g, model, positive)?;
    let (lp_neg, _) = sequence_logprob(g, model, negative)?;
    let gap = g.sub(lp_pos, lp_neg);
    let offset = g.constant(Tensor::scalar(-ref_gap));
    let centred = g.add(gap, offset);
    let margin = g.scale(centred, cfg.beta);
    contrastive_report(g, margin, None, path)
}

/// `ln(p / (1 - p))` of the length-normalised sequence probability.
fn log_odds(g: &mut Graph, model: &PolicyModel, demo: &Demo) -> Result<(Var, PathLoss)> {
    let (lp, path) = sequence_logprob(g, model, demo)?;
    let mean = g.scale(lp, 1.0 / demo.target_count() as f64);
    let mean = g.clamp_max(mean, LOG_ODDS_CEILING);
    let complement = g.log1m_exp(mean);
    Ok((g.sub(mean, complement), path))
}

/// Reference-free odds-ratio preference optimisation:
/// `sft(pos) + orpo_mix * -log sigmoid(beta * (log_odds(pos) - log_odds(neg)))`.
pub fn orpo_loss(
    g: &mut Graph,
    model: &PolicyModel,
    positive: &Demo,
    negative: &Demo,
    cfg: &LossConfig,
) -> Result<LossReport> {
    if positive.origin() != negative.origin() {
        return Err(Error::PairPromptMismatch);
    }
    let sft = sft_loss(g, model, positive, cfg)?;
    let (lo_pos, path) = log_odds(g, model, positive)?;
    let (lo_neg, _) = log_odds(g, model, negative)?;
    let gap = g.sub(lo_pos, lo_neg);
    let margin = g.scale(gap, cfg.beta);
    contrastive_report(g, margin, Some((sft.total, cfg.orpo_mix)), path)
}

fn contrastive_report(
    g: &mut Graph,
    margin: Var,
    sft: Option<(Var, f64)>,
    path: PathLoss,
) -> Result<LossReport> {
    let neg = g.scale(margin, -1.0);
    let contrast = g.softplus(neg);
    let total = match sft {
        Some((sft_total, mix)) => {
            let weighted = g.scale(contrast, mix);
            g.add(sft_total, weighted)
        }
        None => contrast,
    };
    let token_losses = column(g, path.losses);
    let mut diagnostics = path.diagnostics;
    diagnostics.margin = Some(g.scalar_value(margin));
    Ok(LossReport {
        weights: token_losses.clone(),
        token_losses,
        total,
        total_value: g.scalar_value(total),
        fused_greedy_tokens: Vec::new(),
        diagnostics,
        raw_path_losses: false,
    })
}

/// `V_n = exp(-sum_{i >= n} L_i)` for `n = 0..N`, plus the terminal `V = 1`.
pub fn bellman_values(report: &LossReport) -> Result<Vec<f64>> {
    if !report.raw_path_losses {
        return Err(Error::RawLossesRequired);
    }
    let n = report.token_losses.len();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + report.token_losses[i];
    }
    Ok(suffix.iter().map(|s| (-s).exp()).collect())
}

/// `|V_n - p_n V_{n+1}|` with `p_n = exp(-L_n)` at every scored position.
pub fn bellman_residual(report: &LossReport) -> Result<Vec<f64>> {
    let v = bellman_values(report)?;
    Ok(report
        .token_losses
        .iter()
        .enumerate()
        .map(|(i, l)| (v[i] - (-l).exp() * v[i + 1]).abs())
        .collect())
}

/// Adapter exposing a token model to preference-trace construction.
pub struct SequenceEstimator<'a> {
    pub model: &'a PolicyModel,
    pub lambda: f64,
    pub eos: Option<usize>,
}

impl PreferenceEstimator for SequenceEstimator<'_> {
    fn action_count(&self) -> usize {
        self.model.action_count()
    }

    fn eos(&self) -> Option<usize> {
        self.eos
    }

    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.next_distribution(prefix)
    }

    fn fused_distributions(&self, ground_truth: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let demo = Demo::from_tokens(ground_truth)?;
        fused_distributions(self.model, &demo, self.lambda)
    }
}

/// Distributions at each target position when the inputs are fused.
pub fn fused_distributions(model: &PolicyModel, demo: &Demo, lambda: f64) -> Result<Vec<Vec<f64>>> {
    let greedy = greedy_one_step_ahead(model, demo)?;
    let mut g = Graph::new();
    let e = fuse_states(&mut g, model, demo, &greedy, lambda)?;
    let logits = model.logits_from_embeddings(&mut g, e)?;
    let l = g.value(logits);
    Ok(demo.targets().iter().map(|&(p, _)| softmax(l.row(p))).collect())
}
