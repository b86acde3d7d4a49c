use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mdp::TokenSequence;

/// How an action emitted after input position `q - 1` becomes the input at `q`.
#[derive(Debug, Clone, PartialEq)]
pub enum Continuation {
    /// Token sequences: the emitted token is the next input.
    NextToken,
    /// Environment dynamics: `next[state][action]`.
    Dynamics(Arc<Vec<Vec<usize>>>),
}

impl Continuation {
    pub fn apply(&self, previous_input: usize, action: usize) -> usize {
        match self {
            Continuation::NextToken => action,
            Continuation::Dynamics(next) => next[previous_input][action],
        }
    }
}

/// A teacher-forced demonstration: the inputs the policy reads and the
/// action expected after each input. Input positions without a target are
/// prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    origin: Vec<usize>,
    inputs: Vec<usize>,
    targets: Vec<Option<usize>>,
    continuation: Continuation,
}

impl Demo {
    /// Next-token view of a sequence: input `p` predicts token `p + 1`, and
    /// only target tokens are scored.
    pub fn from_tokens(seq: &TokenSequence) -> Result<Self> {
        if seq.target_len() == 0 {
            return Err(Error::NoTargetTokens);
        }
        if seq.prompt_len() == 0 {
            return Err(Error::InvalidSequence("sequence has an empty prompt".into()));
        }
        let tokens = seq.tokens();
        let inputs = tokens[..tokens.len() - 1].to_vec();
        let targets = (0..inputs.len())
            .map(|p| (p + 1 >= seq.prompt_len()).then(|| tokens[p + 1]))
            .collect();
        Ok(Self {
            origin: seq.prompt().to_vec(),
            inputs,
            targets,
            continuation: Continuation::NextToken,
        })
    }

    /// State-action view of an environment trajectory; every step is scored.
    pub fn from_trajectory(
        states: &[usize],
        actions: &[usize],
        dynamics: Arc<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::NoTargetTokens);
        }
        if states.len() != actions.len() {
            return Err(Error::InvalidSequence(format!(
                "{} states for {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(Self {
            origin: vec![states[0]],
            inputs: states.to_vec(),
            targets: actions.iter().copied().map(Some).collect(),
            continuation: Continuation::Dynamics(dynamics),
        })
    }

    /// The initial state shared by both sides of a preference pair.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn continuation(&self) -> &Continuation {
        &self.continuation
    }

    /// `(input position, expected action)` for every scored position.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(p, t)| t.map(|a| (p, a)))
            .collect()
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Inputs the policy would have read had it followed `greedy` (one
    /// action per target) for one step from each ground-truth prefix, and a
    /// flag per position telling whether the position is disturbed.
    pub fn disturbed_inputs(&self, greedy: &[usize]) -> Result<(Vec<usize>, Vec<bool>)> {
        if greedy.len() != self.target_count() {
            return Err(Error::InvalidSequence(format!(
                "{} greedy actions for {} targets",
                greedy.len(),
                self.target_count()
            )));
        }
        let mut alt = self.inputs.clone();
        let mut fused = vec![false; self.inputs.len()];
        let mut j = 0;
        for q in 1..self.inputs.len() {
            if self.targets[q - 1].is_some() {
                alt[q] = self.continuation.apply(self.inputs[q - 1], greedy[j]);
                fused[q] = true;
                j += 1;
            }
        }
        Ok((alt, fused))
    }
}
