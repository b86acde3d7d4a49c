use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::TokenSequence;

pub const EOS: usize = 0;
pub const SEP: usize = 1;
/// Value `v` is token `v + VALUE_OFFSET`.
pub const VALUE_OFFSET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    /// `x_{i+1} = (a x_i + 1) mod m`; the prompt carries `a` and `x_0`.
    ModularChain,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::ModularChain => "modular_chain",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "modular_chain" => Ok(Task::ModularChain),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusSpec {
    pub task: Task,
    /// Total vocabulary including EOS and SEP.
    pub vocab_size: usize,
    /// Number of values per example (target length before EOS).
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn values(&self) -> usize {
        self.vocab_size.saturating_sub(VALUE_OFFSET)
    }

    /// Longest prompt + target, in tokens.
    pub fn max_sequence_len(&self) -> usize {
        match self.task {
            Task::Copy | Task::Reverse => 2 * self.max_len + 2,
            Task::ModularChain => self.max_len + 4,
        }
    }

    fn distinct_prompts(&self) -> f64 {
        let v = self.values() as f64;
        match self.task {
            Task::Copy | Task::Reverse => (self.min_len..=self.max_len).map(|l| v.powi(l as i32)).sum(),
            Task::ModularChain => (v - 1.0) * v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::SpecInfeasible(m));
        if self.values() < 2 {
            return infeasible(format!("vocab_size {} leaves fewer than 2 values", self.vocab_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return infeasible(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.task == Task::ModularChain && self.min_len != self.max_len {
            // the prompt would not determine where EOS goes
            return infeasible("modular_chain needs min_len == max_len".into());
        }
        if self.train_size == 0 {
            return infeasible("train_size is 0".into());
        }
        let need = (self.train_size + self.eval_size) as f64;
        if self.distinct_prompts() < need {
            return infeasible(format!(
                "{} distinct prompts cannot fill {} disjoint examples",
                self.distinct_prompts(),
                need
            ));
        }
        Ok(())
    }
}

/// `x_0, f(x_0), ...` for `len + 1` terms.
pub fn modular_chain(start: usize, multiplier: usize, modulus: usize, len: usize) -> Vec<usize> {
    let mut out = vec![start];
    for _ in 0..len {
        let x = *out.last().expect("non-empty");
        out.push((multiplier * x + 1) % modulus);
    }
    out
}

fn tokens(values: &[usize]) -> Vec<usize> {
    values.iter().map(|v| v + VALUE_OFFSET).collect()
}

/// Prompt and target token lists for one example.
pub fn make_example(task: Task, values: &[usize], modulus: usize) -> (Vec<usize>, Vec<usize>) {
    match task {
        Task::Copy | Task::Reverse => {
            let mut prompt = tokens(values);
            prompt.push(SEP);
            let mut target = tokens(values);
            if task == Task::Reverse {
                target.reverse();
            }
            target.push(EOS);
            (prompt, target)
        }
        Task::ModularChain => {
            // values = [multiplier, start, len]
            let (a, x0, len) = (values[0], values[1], values[2]);
            // x_0 ends the prompt so every target is predicted from its
            // predecessor in the same way
            let prompt = vec![a + VALUE_OFFSET, SEP, x0 + VALUE_OFFSET];
            let mut target = tokens(&modular_chain(x0, a, modulus, len)[1..]);
            target.push(EOS);
            (prompt, target)
        }
    }
}

fn join(prompt: Vec<usize>, target: Vec<usize>) -> Result<TokenSequence> {
    if target.is_empty() {
        return Err(Error::NoTargetTokens);
    }
    let p = prompt.len();
    let mut all = prompt;
    all.extend(target);
    TokenSequence::new(all, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TokenSequence>,
    pub eval: Vec<TokenSequence>,
}

/// Deterministic per seed; eval prompts never occur in train.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.values();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let want = spec.train_size + spec.eval_size;
    let mut attempts = 0usize;
    while out.len() < want {
        attempts += 1;
        if attempts > 1000 * want + 10_000 {
            return Err(Error::SpecInfeasible("could not draw enough distinct prompts".into()));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let values: Vec<usize> = match spec.task {
            Task::Copy | Task::Reverse => (0..len).map(|_| rng.gen_range(0..m)).collect(),
            Task::ModularChain => vec![rng.gen_range(1..m), rng.gen_range(0..m), len],
        };
        let (prompt, target) = make_example(spec.task, &values, m);
        if seen.insert(prompt.clone()) {
            out.push(join(prompt, target)?);
        }
    }
    out.shuffle(&mut rng);
    let eval = out.split_off(spec.train_size);
    Ok(Dataset { train: out, eval })
}

/// One `prompt<TAB>target` line per example, tokens space-separated.
pub fn to_tsv(seqs: &[TokenSequence]) -> String {
    let join = |t: &[usize]| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    seqs.iter().map(|s| format!("{}\t{}\n", join(s.prompt()), join(s.target()))).collect()
}

pub fn from_tsv(text: &str) -> Result<Vec<TokenSequence>> {
    let parse = |field: &str, line: usize| -> Result<Vec<usize>> {
        field
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::InvalidSequence(format!("line {line}: bad token {t:?}"))))
            .collect()
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (p, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidSequence(format!("line {}: missing tab", i + 1)))?;
            join(parse(p, i + 1)?, parse(t, i + 1)?)
        })
        .collect()
}
