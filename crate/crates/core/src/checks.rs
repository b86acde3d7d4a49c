//! Self-check suites shared by the tests and the command line: finite
//! differences for every loss, and the identities the losses must satisfy.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{analytic_gradients, finite_difference_check, GradCheckReport, Graph, PolicyModel, DEFAULT_STEP};
use crate::error::Result;
use crate::losses::{
    bellman_residual, dpo_loss, greedy_one_step_ahead, ift_loss, ift_loss_with_greedy, orpo_loss,
    relation_propagation_weights, sft_loss, Demo, LossConfig, LossReport, Propagation, ORPO_BETA,
};
use crate::mdp::TokenSequence;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_LOSSES: [&str; 5] = ["sft", "ift_eq20", "ift_alg1", "dpo", "orpo"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub loss: &'static str,
    pub fixture: usize,
    pub model: &'static str,
    pub params: usize,
    pub worst: f64,
    pub passed: bool,
}

/// A policy, a reference, and a preferred/rejected pair sharing a prompt.
struct Fixture {
    model: PolicyModel,
    reference: PolicyModel,
    pos: Demo,
    neg: Demo,
}

fn token_fixture(rng: &mut ChaCha8Rng, seed: u64) -> Result<Fixture> {
    let vocab = rng.gen_range(4..=6);
    let dim = rng.gen_range(4..=6);
    let hidden = rng.gen_range(4..=8);
    let model = PolicyModel::tiny_decoder(vocab, dim, hidden, 8, seed)?;
    let reference = PolicyModel::tiny_decoder(vocab, dim, hidden, 8, seed ^ 0xfeed)?;
    let prompt: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(1..vocab)).collect();
    let mut seq = |first: Option<usize>| -> Result<Demo> {
        let mut t = prompt.clone();
        let n = rng.gen_range(2..=4);
        for i in 0..n {
            t.push(match (i, first) {
                (0, Some(f)) => f,
                _ => rng.gen_range(1..vocab),
            });
        }
        t.push(0);
        Demo::from_tokens(&TokenSequence::new(t, prompt.len())?)
    };
    let pos = seq(None)?;
    let first = pos.targets()[0].1;
    let neg = seq(Some(1 + first % (vocab - 1)))?;
    Ok(Fixture { model, reference, pos, neg })
}

fn grid_fixture(rng: &mut ChaCha8Rng, seed: u64) -> Result<Fixture> {
    let (cells, actions) = (6, 4);
    let model = PolicyModel::grid_mlp(cells, 5, actions, seed)?;
    let reference = PolicyModel::grid_mlp(cells, 5, actions, seed ^ 0xfeed)?;
    let next: Vec<Vec<usize>> = (0..cells).map(|_| (0..actions).map(|_| rng.gen_range(0..cells)).collect()).collect();
    let next = Arc::new(next);
    let mut walk = || -> Result<Demo> {
        let mut states = vec![0];
        let acts: Vec<usize> = (0..rng.gen_range(2..=5)).map(|_| rng.gen_range(0..actions)).collect();
        for &a in &acts[..acts.len() - 1] {
            states.push(next[*states.last().expect("non-empty")][a]);
        }
        Demo::from_trajectory(&states, &acts, next.clone())
    };
    let pos = walk()?;
    let mut neg = walk()?;
    while neg == pos {
        neg = walk()?;
    }
    Ok(Fixture { model, reference, pos, neg })
}

/// Every loss on `fixtures` random fixtures, alternating small decoders and
/// grid policies. Argmax choices are computed once and held fixed.
pub fn gradient_suite(fixtures: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for i in 0..fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let fseed = rng.gen();
        let (fx, kind) = if i % 2 == 0 {
            (token_fixture(&mut rng, fseed)?, "tiny_decoder")
        } else {
            (grid_fixture(&mut rng, fseed)?, "grid_mlp")
        };
        let greedy = greedy_one_step_ahead(&fx.model, &fx.pos)?;
        let cfg = LossConfig::default();
        let alg1 = LossConfig { propagation: Propagation::Alg1Scaled, ..cfg };
        let orpo = LossConfig { beta: ORPO_BETA, ..cfg };
        for loss in GRADIENT_LOSSES {
            let build = |g: &mut Graph, m: &PolicyModel| -> Result<LossReport> {
                match loss {
                    "sft" => sft_loss(g, m, &fx.pos, &cfg),
                    "ift_eq20" => ift_loss_with_greedy(g, m, &fx.pos, &cfg, greedy.clone()),
                    "ift_alg1" => ift_loss_with_greedy(g, m, &fx.pos, &alg1, greedy.clone()),
                    "dpo" => dpo_loss(g, m, Some(&fx.reference), &fx.pos, &fx.neg, &cfg),
                    _ => orpo_loss(g, m, &fx.pos, &fx.neg, &orpo),
                }
            };
            let with = |p: &crate::diff::ParamStore| {
                let mut m = fx.model.clone();
                m.params = p.clone();
                m
            };
            let report: GradCheckReport = finite_difference_check(
                &fx.model.params,
                |p| {
                    let mut g = Graph::new();
                    Ok(build(&mut g, &with(p))?.total_value)
                },
                |p| analytic_gradients(p, |g, p| Ok(build(g, &with(p))?.total)),
                DEFAULT_STEP,
                GRADIENT_TOLERANCE,
            )?;
            out.push(GradCase {
                loss,
                fixture: i,
                model: kind,
                params: fx.model.num_params(),
                worst: report.worst(),
                passed: report.passed(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest violation seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// `|ift(lambda = 0, propagation off) - sft|` summed over a random batch, for
/// `cases` random (model, batch) pairs.
pub fn degeneracy_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    let off = LossConfig::sft_equivalent();
    for c in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
        let fseed = rng.gen();
        let batch = rng.gen_range(1..=4);
        let mut gap = 0.0;
        for b in 0..batch {
            let fx = if (c + b) % 2 == 0 {
                token_fixture(&mut rng, fseed)?
            } else {
                grid_fixture(&mut rng, fseed)?
            };
            let mut g = Graph::new();
            let ift = ift_loss(&mut g, &fx.model, &fx.pos, &off)?.total_value;
            let sft = sft_loss(&mut g, &fx.model, &fx.pos, &off)?.total_value;
            gap += ift - sft;
        }
        worst = worst.max(gap.abs());
    }
    Ok(SuiteResult { name: "sft_degeneracy", cases, worst, tolerance: 1e-9 })
}

/// Unit losses with `alpha = 1`: the weights sum to `N (N + 1) / 2` exactly.
pub fn counting_suite(max_n: usize) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for n in 1..=max_n {
        let w = relation_propagation_weights(&vec![1.0; n], 1.0, Propagation::Eq20SuffixSum)?;
        let want = (n * (n + 1) / 2) as f64;
        worst = worst.max((w.iter().sum::<f64>() - want).abs());
    }
    Ok(SuiteResult { name: "propagation_counting", cases: max_n, worst, tolerance: 0.0 })
}

/// `w_t = L_t + alpha w_{t+1}` on random positive losses.
pub fn recursion_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=16);
        let alpha = rng.gen_range(0.05..=1.0);
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let w = relation_propagation_weights(&l, alpha, Propagation::Eq20SuffixSum)?;
        for t in 0..n {
            let tail = if t + 1 < n { alpha * w[t + 1] } else { 0.0 };
            worst = worst.max((w[t] - l[t] - tail).abs() / w[t].max(1.0));
        }
    }
    Ok(SuiteResult { name: "propagation_recursion", cases, worst, tolerance: 1e-12 })
}

/// Bellman residuals of SFT and IFT reports on random fixtures.
pub fn bellman_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
        let fseed = rng.gen();
        let fx = if c % 2 == 0 { token_fixture(&mut rng, fseed)? } else { grid_fixture(&mut rng, fseed)? };
        let mut g = Graph::new();
        for report in [
            sft_loss(&mut g, &fx.model, &fx.pos, &LossConfig::default())?,
            ift_loss(&mut g, &fx.model, &fx.pos, &LossConfig::default())?,
        ] {
            worst = bellman_residual(&report)?.into_iter().fold(worst, f64::max);
        }
    }
    Ok(SuiteResult { name: "bellman_identity", cases, worst, tolerance: 1e-9 })
}

/// Degeneracy, propagation weights and the Bellman identity.
pub fn property_suites(cases: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        degeneracy_suite(cases, seed)?,
        counting_suite(16)?,
        recursion_suite(cases, seed)?,
        bellman_suite(cases, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let cases = gradient_suite(4, 11).unwrap();
        assert_eq!(cases.len(), 4 * GRADIENT_LOSSES.len());
        assert!(cases.iter().all(|c| c.params <= 2000));
        for c in &cases {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn property_suites_pass() {
        for s in property_suites(30, 5).unwrap() {
            assert!(s.passed(), "{s:?}");
        }
    }

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(gradient_suite(2, 3).unwrap(), gradient_suite(2, 3).unwrap());
    }
}
