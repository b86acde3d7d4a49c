//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative errors below this denominator are measured against it instead,
/// so near-zero gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per parameter name.
    pub max_rel_error: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub checked_scalars: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.values().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` gradients against central differences of `loss_fn`
/// at every scalar of every parameter in `params`.
///
/// `analytic` must return gradients for the unperturbed parameters; it is
/// called once.
pub fn finite_difference_check(
    params: &ParamStore,
    loss_fn: impl Fn(&ParamStore) -> Result<f64>,
    analytic: impl Fn(&ParamStore) -> Result<BTreeMap<String, Tensor>>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let grads = analytic(params)?;
    let mut probe = params.clone();
    let mut max_rel_error = BTreeMap::new();
    let mut checked = 0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let n = params.get(&name)?.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let up = loss_fn(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let down = loss_fn(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[i], numeric));
            checked += 1;
        }
        max_rel_error.insert(name, worst);
    }
    Ok(GradCheckReport { max_rel_error, tolerance, checked_scalars: checked })
}

/// Runs `build` on a fresh graph and returns the parameter gradients of the
/// scalar it produces.
pub fn analytic_gradients(
    params: &ParamStore,
    build: impl Fn(&mut super::Graph, &ParamStore) -> Result<super::Var>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut store = params.clone();
    store.zero_grads();
    let mut g = super::Graph::new();
    let loss = build(&mut g, &store)?;
    g.backward(loss, &mut store)?;
    store.names().map(|n| Ok((n.to_string(), store.grad(n)?.clone()))).collect()
}

/// Convenience wrapper: the loss value and the gradient both come from `build`.
pub fn check_graph_loss(
    params: &ParamStore,
    build: impl Fn(&mut super::Graph, &ParamStore) -> Result<super::Var>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let value = |p: &ParamStore| {
        let mut g = super::Graph::new();
        let v = build(&mut g, p)?;
        Ok(g.scalar_value(v))
    };
    finite_difference_check(params, value, |p| analytic_gradients(p, &build), DEFAULT_STEP, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Graph, Var};
    use rand::Rng;

    fn small_store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        let mut rng = s.rng();
        s.insert_uniform("w1", 3, 4, 0.8, &mut rng).unwrap();
        s.insert_uniform("b1", 1, 4, 0.8, &mut rng).unwrap();
        s.insert_uniform("w2", 4, 2, 0.8, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.insert("x", Tensor::from_vec(2, 3, x).unwrap()).unwrap();
        s
    }

    fn mlp_loss(g: &mut Graph, p: &ParamStore, broken: bool) -> Result<Var> {
        let x = g.param(p, "x")?;
        let w1 = g.param(p, "w1")?;
        let b1 = g.param(p, "b1")?;
        let w2 = g.param(p, "w2")?;
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = if broken { g.broken_tanh(h) } else { g.tanh(h) };
        let o = g.matmul(h, w2);
        let l = g.log_softmax(o);
        let picked = g.pick(l, vec![(0, 1), (1, 0)]);
        let s = g.sum(picked);
        Ok(g.scale(s, -1.0))
    }

    #[test]
    fn passes_on_correct_rules() {
        for seed in 0..3 {
            let r = check_graph_loss(&small_store(seed), |g, p| mlp_loss(g, p, false), 1e-4).unwrap();
            assert!(r.passed(), "seed {seed}: {:?}", r.max_rel_error);
            assert_eq!(r.checked_scalars, 12 + 4 + 8 + 6);
        }
    }

    #[test]
    fn zero_loss_passes() {
        let r = check_graph_loss(
            &small_store(1),
            |g, p| {
                let l = mlp_loss(g, p, false)?;
                Ok(g.scale(l, 0.0))
            },
            1e-4,
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.worst(), 0.0);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let p = small_store(2);
        let value = |p: &ParamStore| {
            let mut g = Graph::new();
            let v = mlp_loss(&mut g, p, false)?;
            Ok(g.scalar_value(v))
        };
        let r = finite_difference_check(
            &p,
            value,
            |p| analytic_gradients(p, |g, p| mlp_loss(g, p, true)),
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let p = small_store(0);
        let r = finite_difference_check(
            &p,
            |_| Ok(f64::NAN),
            |p| analytic_gradients(p, |g, p| mlp_loss(g, p, false)),
            DEFAULT_STEP,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFiniteLoss)));
    }

    #[test]
    fn every_op_passes() {
        // Exercises the ops the MLP above does not.
        let mut s = ParamStore::new(9);
        let mut rng = s.rng();
        s.insert_uniform("q", 3, 2, 1.0, &mut rng).unwrap();
        s.insert_uniform("k", 3, 2, 1.0, &mut rng).unwrap();
        s.insert_uniform("e", 4, 2, 1.0, &mut rng).unwrap();
        s.insert_uniform("c", 3, 1, 0.5, &mut rng).unwrap();
        let build = |g: &mut Graph, p: &ParamStore| -> Result<Var> {
            let q = g.param(p, "q")?;
            let k = g.param(p, "k")?;
            let e = g.param(p, "e")?;
            let c = g.param(p, "c")?;
            let a = g.gather(e, &[1, 3, 1])?;
            let b = g.gather(e, &[0, 2, 2])?;
            let m = g.mix(a, b, vec![0.0, 0.2, 0.7]);
            let qm = g.add(q, m);
            let scores = g.matmul_t(qm, k);
            let attn = g.causal_softmax(scores);
            let v = g.matmul(attn, k);
            let d = g.sub(v, q);
            let prod = g.mul(d, v);
            let s1 = g.sum(prod);
            let sp = g.softplus(c);
            let neg = g.scale(c, -1.0);
            let shifted = g.sub(neg, sp);
            let lm = g.log1m_exp(shifted);
            let s2 = g.sum(lm);
            let t = g.add(s1, s2);
            Ok(g.mean(t))
        };
        let r = check_graph_loss(&s, build, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.max_rel_error);
    }
}
