use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use rayon::prelude::*;

use super::corpus::{generate_corpus, CorpusSpec, Dataset, EOS};
use crate::diff::{Graph, PolicyModel, RmsProp, RmsPropConfig};
use crate::error::{Error, Result};
use crate::losses::{bellman_residual, ift_loss, sft_loss, Demo, LossConfig, LossRecord, LossReport};
use crate::mdp::{argmax, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMethod {
    Sft,
    Ift,
}

impl ToyMethod {
    pub const ALL: [ToyMethod; 2] = [ToyMethod::Sft, ToyMethod::Ift];

    pub fn name(self) -> &'static str {
        match self {
            ToyMethod::Sft => "sft",
            ToyMethod::Ift => "ift",
        }
    }
}

impl fmt::Display for ToyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyConfig {
    pub corpus: CorpusSpec,
    pub dim: usize,
    pub mlp_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: usize,
}

impl Default for ToyConfig {
    /// The modular-chain setting used for the SFT vs IFT comparison.
    fn default() -> Self {
        Self {
            corpus: CorpusSpec {
                task: super::corpus::Task::ModularChain,
                vocab_size: 22,
                min_len: 8,
                max_len: 8,
                train_size: 300,
                eval_size: 50,
                seed: 1,
            },
            dim: 32,
            mlp_hidden: 64,
            epochs: 60,
            batch_size: 16,
            lr: 1e-2,
            loss: LossConfig::default(),
            eval_every: 10,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let mut bad = Vec::new();
        if self.dim == 0 || self.mlp_hidden == 0 {
            bad.push("dim and mlp_hidden must be positive".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            bad.push("eval_every must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bad.push(format!("lr={} must be > 0", self.lr));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Hex SHA-256 of the serialised config; stamped on every loss record.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// Argmax rollout from `prompt` until EOS, `max_new` generated tokens, or the
/// model's context is full.
pub fn greedy_decode(model: &PolicyModel, prompt: &[usize], max_new: usize) -> Result<TokenSequence> {
    let limit = decode_budget(model, prompt.len(), max_new);
    let mut tokens = prompt.to_vec();
    for _ in 0..limit {
        let next = argmax(&model.next_distribution(&tokens)?);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    TokenSequence::new(tokens, prompt.len())
}

/// Number of steps [`greedy_decode`] may take; also the truncation to give a
/// truly trace that should agree with it.
pub fn decode_budget(model: &PolicyModel, prompt_len: usize, max_new: usize) -> usize {
    match model.max_len() {
        Some(m) => max_new.min(m.saturating_sub(prompt_len)),
        None => max_new,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Teacher-forced per-token cross-entropy, averaged over examples.
    pub mean_eval_loss: f64,
    /// Fraction of examples whose greedy decode reproduces the target exactly.
    pub exact_match: f64,
    /// Free-running accuracy at each target position.
    pub per_position_accuracy: Vec<f64>,
}

pub fn evaluate(model: &PolicyModel, examples: &[TokenSequence]) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = LossConfig::default();
    let longest = examples.iter().map(|e| e.target_len()).max().unwrap_or(0);
    let mut hits = vec![0usize; longest];
    let mut counts = vec![0usize; longest];
    let (mut loss, mut exact) = (0.0, 0usize);
    for ex in examples {
        let mut g = Graph::new();
        loss += sft_loss(&mut g, model, &Demo::from_tokens(ex)?, &cfg)?.total_value;
        let decoded = greedy_decode(model, ex.prompt(), ex.target_len())?;
        if decoded.target() == ex.target() {
            exact += 1;
        }
        for (i, &want) in ex.target().iter().enumerate() {
            counts[i] += 1;
            if decoded.target().get(i) == Some(&want) {
                hits[i] += 1;
            }
        }
    }
    let n = examples.len() as f64;
    Ok(EvalResult {
        mean_eval_loss: loss / n,
        exact_match: exact as f64 / n,
        per_position_accuracy: hits.iter().zip(&counts).map(|(&h, &c)| h as f64 / c as f64).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub step: usize,
    pub mean_train_loss: f64,
    pub eval: EvalResult,
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub method: ToyMethod,
    pub seed: u64,
    pub model: PolicyModel,
    pub history: Vec<Snapshot>,
    /// One record per example per optimiser step.
    pub records: Vec<LossRecord>,
    pub max_bellman_residual: f64,
    pub corollary_checked: usize,
    pub corollary_failures: usize,
    pub max_corollary_gap: f64,
}

impl ToyRun {
    pub fn final_eval(&self) -> &EvalResult {
        &self.history.last().expect("at least one snapshot").eval
    }
}

/// Minibatch RMSprop on `dataset.train`. The model seed is `seed`; batches are
/// reshuffled each epoch from a stream also seeded by `seed`.
pub fn train_toy_lm(dataset: &Dataset, method: ToyMethod, cfg: &ToyConfig, seed: u64) -> Result<ToyRun> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let max_len = dataset.train.iter().chain(&dataset.eval).map(|s| s.len()).max().unwrap_or(0);
    let mut model = PolicyModel::tiny_decoder(cfg.corpus.vocab_size, cfg.dim, cfg.mlp_hidden, max_len, seed)?;
    let demos = dataset.train.iter().map(Demo::from_tokens).collect::<Result<Vec<_>>>()?;
    let mut opt = RmsProp::new(RmsPropConfig { lr: cfg.lr, ..RmsPropConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ba7c);
    let hash = cfg.digest();
    let mut order: Vec<usize> = (0..demos.len()).collect();

    let mut run = ToyRun {
        method,
        seed,
        model: model.clone(),
        history: Vec::new(),
        records: Vec::new(),
        max_bellman_residual: 0.0,
        corollary_checked: 0,
        corollary_failures: 0,
        max_corollary_gap: 0.0,
    };
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut total = None;
            for &i in batch {
                let report: LossReport = match method {
                    ToyMethod::Sft => sft_loss(&mut g, &model, &demos[i], &cfg.loss)?,
                    ToyMethod::Ift => ift_loss(&mut g, &model, &demos[i], &cfg.loss)?,
                };
                if !report.total_value.is_finite() {
                    return Err(Error::Divergence { step });
                }
                let r = bellman_residual(&report)?;
                run.max_bellman_residual = r.iter().copied().fold(run.max_bellman_residual, f64::max);
                let d = &report.diagnostics;
                run.corollary_checked += d.corollary_gaps.len();
                run.corollary_failures += d.corollary_failures;
                run.max_corollary_gap = d.corollary_gaps.iter().copied().fold(run.max_corollary_gap, f64::max);
                epoch_loss += report.total_value;
                run.records.push(report.record(step, &hash));
                total = Some(match total {
                    None => report.total,
                    Some(t) => g.add(t, report.total),
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
            g.backward(loss, &mut model.params)?;
            opt.step(&mut model.params);
            step += 1;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            run.history.push(Snapshot {
                epoch,
                step,
                mean_train_loss: epoch_loss / demos.len() as f64,
                eval: evaluate(&model, &dataset.eval)?,
            });
        }
    }
    if run.history.is_empty() {
        run.history.push(Snapshot { epoch: 0, step, mean_train_loss: f64::NAN, eval: evaluate(&model, &dataset.eval)? });
    }
    run.model = model;
    Ok(run)
}

/// Every `(method, seed)` pair in parallel, method-then-seed order. Each seed
/// draws its own corpus, shared by both methods.
pub fn run_toy_experiment(cfg: &ToyConfig, methods: &[ToyMethod], seeds: &[u64]) -> Result<Vec<ToyRun>> {
    let jobs: Vec<(ToyMethod, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter()
        .map(|&(m, s)| {
            let cfg = ToyConfig { corpus: CorpusSpec { seed: s, ..cfg.corpus }, ..*cfg };
            train_toy_lm(&generate_corpus(&cfg.corpus)?, m, &cfg, s)
        })
        .collect()
}

pub const TOY_CSV_HEADER: &str = "method,seed,exact_match,mean_eval_loss,steps";

pub fn toy_runs_to_csv(runs: &[ToyRun]) -> String {
    let mut out = String::from(TOY_CSV_HEADER);
    out.push('\n');
    for r in runs {
        let e = r.final_eval();
        let steps = r.history.last().map_or(0, |h| h.step);
        out.push_str(&format!("{},{},{},{},{}\n", r.method, r.seed, e.exact_match, e.mean_eval_loss, steps));
    }
    out
}

/// Largest per-seed shortfall of IFT below SFT that still counts as a pass.
pub const TOY_SLACK: f64 = 0.02;

/// Paired-seed comparison of IFT against SFT exact match.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyVerdict {
    /// `(seed, sft, ift)` exact match.
    pub pairs: Vec<(u64, f64, f64)>,
    pub mean_difference: f64,
    pub per_seed_ok: bool,
}

impl ToyVerdict {
    pub fn from_runs(runs: &[ToyRun]) -> Self {
        let pick = |m: ToyMethod, s: u64| {
            runs.iter().find(|r| r.method == m && r.seed == s).map(|r| r.final_eval().exact_match)
        };
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let pairs: Vec<(u64, f64, f64)> = seeds
            .into_iter()
            .filter_map(|s| Some((s, pick(ToyMethod::Sft, s)?, pick(ToyMethod::Ift, s)?)))
            .collect();
        let mean_difference = if pairs.is_empty() {
            f64::NAN
        } else {
            pairs.iter().map(|p| p.2 - p.1).sum::<f64>() / pairs.len() as f64
        };
        let per_seed_ok = !pairs.is_empty() && pairs.iter().all(|p| p.2 >= p.1 - TOY_SLACK);
        Self { pairs, mean_difference, per_seed_ok }
    }

    pub fn passed(&self) -> bool {
        self.per_seed_ok && self.mean_difference >= 0.0
    }

    pub fn line(&self) -> String {
        let pairs: Vec<String> = self.pairs.iter().map(|(s, a, b)| format!("{s}:{a:.3}/{b:.3}")).collect();
        format!(
            "toy-lm verdict {}: sft/ift exact match {} mean(ift-sft)={:.4}",
            if self.passed() { "PASS" } else { "FAIL" },
            pairs.join(" "),
            self.mean_difference
        )
    }
}


#[cfg(test)]
mod verdict_tests {
    use super::*;

    fn fake(method: ToyMethod, seed: u64, em: f64) -> ToyRun {
        ToyRun {
            method,
            seed,
            model: PolicyModel::tiny_decoder(4, 2, 2, 4, 0).unwrap(),
            history: vec![Snapshot {
                epoch: 1,
                step: 3,
                mean_train_loss: 0.0,
                eval: EvalResult { mean_eval_loss: 0.5, exact_match: em, per_position_accuracy: vec![] },
            }],
            records: vec![],
            max_bellman_residual: 0.0,
            corollary_checked: 0,
            corollary_failures: 0,
            max_corollary_gap: 0.0,
        }
    }

    #[test]
    fn verdict_rules() {
        let ok = [fake(ToyMethod::Sft, 1, 0.5), fake(ToyMethod::Ift, 1, 0.49), fake(ToyMethod::Sft, 2, 0.5), fake(ToyMethod::Ift, 2, 0.52)];
        let v = ToyVerdict::from_runs(&ok);
        assert!(v.passed(), "{v:?}");
        assert!(v.line().starts_with("toy-lm verdict PASS"));
        let behind = [fake(ToyMethod::Sft, 1, 0.5), fake(ToyMethod::Ift, 1, 0.47), fake(ToyMethod::Sft, 2, 0.5), fake(ToyMethod::Ift, 2, 0.6)];
        assert!(!ToyVerdict::from_runs(&behind).passed());
        let lower_mean = [fake(ToyMethod::Sft, 1, 0.5), fake(ToyMethod::Ift, 1, 0.49)];
        assert!(!ToyVerdict::from_runs(&lower_mean).passed());
        assert!(!ToyVerdict::from_runs(&[]).passed());
        assert_eq!(
            toy_runs_to_csv(&ok[..1]),
            format!("{TOY_CSV_HEADER}\nsft,1,0.5,0.5,3\n")
        );
    }
}
