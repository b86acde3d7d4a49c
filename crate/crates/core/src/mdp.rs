//! Sequence generation viewed as a token-level Markov decision process.
//!
//! A state is an ordered token prefix (or a grid cell for Frozen Lake), an
//! action is the next token, and a policy is a row-stochastic transition
//! table `T(a | s)`. The state-to-state form `T(s' | s)` is never
//! materialised: `s' = [s, a]` is a bijection, so sequence probabilities are
//! computed as products over [`TransitionTable`] rows instead.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Row sums may drift from one by at most this much.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// The finite action set (vocabulary) of the MDP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    size: usize,
    labels: Option<Vec<String>>,
}

impl ActionSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidActionSpace(format!("size {size} < 2")));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut space = Self::new(labels.len())?;
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidActionSpace(format!("duplicate label {l:?}")));
            }
        }
        space.labels = Some(labels);
        Ok(space)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self, action: usize) -> Option<&str> {
        self.labels.as_ref().and_then(|l| l.get(action)).map(String::as_str)
    }

    pub fn contains(&self, action: usize) -> bool {
        action < self.size
    }
}

/// An ordered token sequence whose first `prompt_len` tokens form the
/// initial state; the rest is the target answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::InvalidSequence(format!(
                "prompt_len {prompt_len} exceeds length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    /// A pure initial state: every token is prompt.
    pub fn prompt_only(tokens: Vec<usize>) -> Self {
        let prompt_len = tokens.len();
        Self { tokens, prompt_len }
    }

    pub fn validate(&self, space: &ActionSpace) -> Result<()> {
        match self.tokens.iter().find(|&&t| !space.contains(t)) {
            Some(&token) => Err(Error::UnknownToken { token, size: space.size() }),
            None => Ok(()),
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn target(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn is_initial_state(&self) -> bool {
        self.prompt_len == self.tokens.len()
    }

    /// True when `self` starts with every token of `origin`.
    pub fn extends(&self, origin: &TokenSequence) -> bool {
        self.tokens.starts_with(&origin.tokens)
    }
}

/// Identifier of a row in a [`TransitionTable`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateId {
    /// A gridworld cell, row-major.
    Cell(usize),
    /// A token prefix.
    Prefix(Vec<usize>),
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateId::Cell(c) => write!(f, "cell:{c}"),
            StateId::Prefix(p) => {
                f.write_str("seq:")?;
                for (i, t) in p.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{t}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for StateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownState(s.to_string());
        if let Some(rest) = s.strip_prefix("cell:") {
            return rest.parse().map(StateId::Cell).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("seq:") {
            if rest.is_empty() {
                return Ok(StateId::Prefix(Vec::new()));
            }
            return rest
                .split(',')
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(StateId::Prefix)
                .map_err(|_| bad());
        }
        Err(bad())
    }
}

/// Checks that `dist` is a probability vector.
pub fn validate_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(p) = dist.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidDistribution(format!("entry {p} outside [0, 1]")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-stochastic state-action transition table `T(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    action_count: usize,
    rows: BTreeMap<StateId, Vec<f64>>,
}

impl TransitionTable {
    pub fn new(action_count: usize) -> Self {
        Self { action_count, rows: BTreeMap::new() }
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    /// Adds a row. Fails on a duplicate state, a wrong row width, or a row
    /// that is not a distribution.
    pub fn insert(&mut self, state: StateId, row: Vec<f64>) -> Result<()> {
        if row.len() != self.action_count {
            return Err(Error::InvalidDistribution(format!(
                "row for {state} has {} entries, expected {}",
                row.len(),
                self.action_count
            )));
        }
        validate_distribution(&row)?;
        if self.rows.contains_key(&state) {
            return Err(Error::InvalidDistribution(format!("duplicate state {state}")));
        }
        self.rows.insert(state, row);
        Ok(())
    }

    pub fn row(&self, state: &StateId) -> Result<&[f64]> {
        self.rows
            .get(state)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownState(state.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateId, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Line-oriented dump: `state_id<TAB>p_0 p_1 ...`, 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (state, row) in &self.rows {
            out.push_str(&state.to_string());
            out.push('\t');
            let cells: Vec<String> = row.iter().map(|&p| format_sig9(p)).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut table: Option<TransitionTable> = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (state, probs) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidDistribution(format!("line {}: missing tab", lineno + 1))
            })?;
            let row = probs
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidDistribution(format!("line {}: {e}", lineno + 1)))?;
            let t = table.get_or_insert_with(|| TransitionTable::new(row.len()));
            t.insert(state.parse()?, row)?;
        }
        table.ok_or_else(|| Error::InvalidDistribution("empty table".into()))
    }
}

/// Formats like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `prod_i T(a_i | s_i)` over the target positions of `seq`, where
/// `s_i = seq[..i]`. An empty target has probability 1.
pub fn sequence_transition_prob(table: &TransitionTable, seq: &TokenSequence) -> Result<f64> {
    let tokens = seq.tokens();
    let mut prob = 1.0;
    for i in seq.prompt_len()..tokens.len() {
        let row = table.row(&StateId::Prefix(tokens[..i].to_vec()))?;
        let p = row.get(tokens[i]).ok_or(Error::UnknownToken {
            token: tokens[i],
            size: row.len(),
        })?;
        prob *= p;
    }
    Ok(prob)
}

/// Result of asserting that the target action never beats the policy's own
/// greedy choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorollaryOutcome {
    pub holds: bool,
    /// `max(dist) - dist[target]`, always `>= 0`.
    pub gap: f64,
}

pub fn corollary_check(dist: &[f64], target_action: usize) -> Result<CorollaryOutcome> {
    validate_distribution(dist)?;
    let p = *dist.get(target_action).ok_or(Error::UnknownToken {
        token: target_action,
        size: dist.len(),
    })?;
    let max = dist[argmax(dist)];
    Ok(CorollaryOutcome { holds: p <= max, gap: max - p })
}

/// How a [`PreferenceTrace`] chose the prior states it conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// The policy's own greedy rollout.
    Truly,
    /// Ground-truth prefixes (teacher forcing).
    SftPrior,
    /// Ground-truth prefixes whose embeddings are mixed with the policy's
    /// one-step-ahead predictions.
    IftFused,
    /// Prefixes of a stored rejected sequence.
    OfflineNegative,
}

/// A policy that can be queried for next-action distributions.
pub trait PreferenceEstimator {
    fn action_count(&self) -> usize;

    /// End-of-sequence action, if rollouts should stop on one.
    fn eos(&self) -> Option<usize> {
        None
    }

    /// State identifier for a token prefix.
    fn state_id(&self, prefix: &[usize]) -> StateId {
        StateId::Prefix(prefix.to_vec())
    }

    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Distributions at each target position of `ground_truth` when the
    /// inputs are the fused embeddings.
    fn fused_distributions(&self, ground_truth: &TokenSequence) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub state: StateId,
    pub distribution: Vec<f64>,
    pub action: usize,
}

/// Record of the distributions a policy produced along some path from an
/// initial state. Diagnostic only.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTrace {
    pub origin: TokenSequence,
    pub steps: Vec<TraceStep>,
    pub kind: EstimatorKind,
}

impl PreferenceTrace {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// The origin followed by every traced action, as a target sequence.
    pub fn to_sequence(&self) -> TokenSequence {
        let mut tokens = self.origin.tokens().to_vec();
        tokens.extend(self.actions());
        TokenSequence { tokens, prompt_len: self.origin.len() }
    }
}

/// Builds a preference trace from `origin`.
///
/// `truncation` bounds the number of generated steps for [`EstimatorKind::Truly`]
/// and the origin length for every kind. The other kinds walk `ground_truth`
/// (the rejected sequence for [`EstimatorKind::OfflineNegative`]).
pub fn build_preference_trace(
    policy: &dyn PreferenceEstimator,
    origin: &TokenSequence,
    ground_truth: Option<&TokenSequence>,
    kind: EstimatorKind,
    truncation: usize,
) -> Result<PreferenceTrace> {
    if origin.len() > truncation {
        return Err(Error::PromptTooLong { prompt: origin.len(), limit: truncation });
    }
    let mut steps = Vec::new();
    match kind {
        EstimatorKind::Truly => {
            let mut prefix = origin.tokens().to_vec();
            for _ in 0..truncation {
                let distribution = policy.next_distribution(&prefix)?;
                let action = argmax(&distribution);
                steps.push(TraceStep { state: policy.state_id(&prefix), distribution, action });
                prefix.push(action);
                if Some(action) == policy.eos() {
                    break;
                }
            }
        }
        EstimatorKind::SftPrior | EstimatorKind::OfflineNegative | EstimatorKind::IftFused => {
            let gt = ground_truth.ok_or(Error::GroundTruthMismatch)?;
            if !gt.extends(origin) || gt.prompt_len() != origin.len() {
                return Err(Error::GroundTruthMismatch);
            }
            let tokens = gt.tokens();
            let fused = if kind == EstimatorKind::IftFused {
                Some(policy.fused_distributions(gt)?)
            } else {
                None
            };
            for (j, i) in (gt.prompt_len()..gt.len()).enumerate() {
                let distribution = match &fused {
                    Some(f) => f[j].clone(),
                    None => policy.next_distribution(&tokens[..i])?,
                };
                steps.push(TraceStep {
                    state: policy.state_id(&tokens[..i]),
                    distribution,
                    action: tokens[i],
                });
            }
        }
    }
    Ok(PreferenceTrace { origin: origin.clone(), steps, kind })
}
