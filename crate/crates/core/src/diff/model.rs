//! Policy networks: an embedding table `E` followed by a body that maps
//! embedded inputs to per-position logits.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{softmax, Tensor};
use crate::error::{Error, Result};

pub const EMBEDDING: &str = "embedding";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    MlpGridPolicy,
    TinyDecoderLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Two-layer fully connected policy over one-hot cells. The first layer
    /// is the embedding table, so `E[cell]` is the hidden pre-activation.
    GridMlp { cells: usize, hidden: usize, actions: usize },
    /// Single-block causal decoder: token + position embeddings, one
    /// single-head attention layer and a tanh MLP, both residual.
    TinyDecoder { vocab: usize, dim: usize, mlp_hidden: usize, max_len: usize },
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::GridMlp { .. } => ModelKind::MlpGridPolicy,
            Architecture::TinyDecoder { .. } => ModelKind::TinyDecoderLm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    arch: Architecture,
    pub params: ParamStore,
}

impl PolicyModel {
    pub fn grid_mlp(cells: usize, hidden: usize, actions: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let mut rng = params.rng();
        let hb = 1.0 / (hidden as f64).sqrt();
        params.insert_uniform(EMBEDDING, cells, hidden, hb, &mut rng)?;
        params.insert_uniform("hidden.b", 1, hidden, hb, &mut rng)?;
        params.insert_uniform("head.w", hidden, actions, hb, &mut rng)?;
        params.insert_uniform("head.b", 1, actions, hb, &mut rng)?;
        Ok(Self { arch: Architecture::GridMlp { cells, hidden, actions }, params })
    }

    pub fn tiny_decoder(
        vocab: usize,
        dim: usize,
        mlp_hidden: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let mut rng = params.rng();
        let db = 1.0 / (dim as f64).sqrt();
        let hb = 1.0 / (mlp_hidden as f64).sqrt();
        params.insert_uniform(EMBEDDING, vocab, dim, db, &mut rng)?;
        params.insert_uniform("position", max_len, dim, db, &mut rng)?;
        for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            params.insert_uniform(name, dim, dim, db, &mut rng)?;
        }
        params.insert_uniform("mlp.w1", dim, mlp_hidden, db, &mut rng)?;
        params.insert_uniform("mlp.b1", 1, mlp_hidden, db, &mut rng)?;
        params.insert_uniform("mlp.w2", mlp_hidden, dim, hb, &mut rng)?;
        params.insert_uniform("mlp.b2", 1, dim, hb, &mut rng)?;
        params.insert_uniform("head.w", dim, vocab, db, &mut rng)?;
        params.insert_uniform("head.b", 1, vocab, db, &mut rng)?;
        Ok(Self { arch: Architecture::TinyDecoder { vocab, dim, mlp_hidden, max_len }, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn action_count(&self) -> usize {
        match self.arch {
            Architecture::GridMlp { actions, .. } => actions,
            Architecture::TinyDecoder { vocab, .. } => vocab,
        }
    }

    /// Number of rows of the embedding table.
    pub fn input_count(&self) -> usize {
        match self.arch {
            Architecture::GridMlp { cells, .. } => cells,
            Architecture::TinyDecoder { vocab, .. } => vocab,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self.arch {
            Architecture::GridMlp { hidden, .. } => hidden,
            Architecture::TinyDecoder { dim, .. } => dim,
        }
    }

    pub fn max_len(&self) -> Option<usize> {
        match self.arch {
            Architecture::GridMlp { .. } => None,
            Architecture::TinyDecoder { max_len, .. } => Some(max_len),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Zeroes the output layer so every distribution is uniform.
    pub fn zero_head(&mut self) {
        for name in ["head.w", "head.b"] {
            let t = self.params.get_mut(name).expect("head parameters");
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `E(indices)`, one row per input.
    pub fn embed(&self, g: &mut Graph, indices: &[usize]) -> Result<Var> {
        let table = g.param(&self.params, EMBEDDING)?;
        g.gather(table, indices)
    }

    /// Logits for every row of `embedded`, which must have the embedding width.
    /// Row `t` of the result only depends on rows `0..=t` of the input.
    pub fn logits_from_embeddings(&self, g: &mut Graph, embedded: Var) -> Result<Var> {
        let (rows, cols) = g.value(embedded).shape();
        if cols != self.embedding_dim() {
            return Err(Error::EmbeddingDimMismatch { expected: self.embedding_dim(), got: cols });
        }
        let p = &self.params;
        match self.arch {
            Architecture::GridMlp { .. } => {
                let b = g.param(p, "hidden.b")?;
                let pre = g.add_row(embedded, b);
                let h = g.tanh(pre);
                let w = g.param(p, "head.w")?;
                let hb = g.param(p, "head.b")?;
                let o = g.matmul(h, w);
                Ok(g.add_row(o, hb))
            }
            Architecture::TinyDecoder { dim, max_len, .. } => {
                if rows > max_len {
                    return Err(Error::InvalidSequence(format!(
                        "{rows} positions exceed the model's maximum {max_len}"
                    )));
                }
                let pos_table = g.param(p, "position")?;
                let positions: Vec<usize> = (0..rows).collect();
                let pos = g.gather(pos_table, &positions)?;
                let x = g.add(embedded, pos);

                let wq = g.param(p, "attn.q")?;
                let wk = g.param(p, "attn.k")?;
                let wv = g.param(p, "attn.v")?;
                let wo = g.param(p, "attn.o")?;
                let q = g.matmul(x, wq);
                let k = g.matmul(x, wk);
                let v = g.matmul(x, wv);
                let scores = g.matmul_t(q, k);
                let scores = g.scale(scores, 1.0 / (dim as f64).sqrt());
                let attn = g.causal_softmax(scores);
                let mixed = g.matmul(attn, v);
                let out = g.matmul(mixed, wo);
                let h = g.add(x, out);

                let w1 = g.param(p, "mlp.w1")?;
                let b1 = g.param(p, "mlp.b1")?;
                let w2 = g.param(p, "mlp.w2")?;
                let b2 = g.param(p, "mlp.b2")?;
                let m = g.matmul(h, w1);
                let m = g.add_row(m, b1);
                let m = g.tanh(m);
                let m = g.matmul(m, w2);
                let m = g.add_row(m, b2);
                let h = g.add(h, m);

                let wh = g.param(p, "head.w")?;
                let bh = g.param(p, "head.b")?;
                let o = g.matmul(h, wh);
                Ok(g.add_row(o, bh))
            }
        }
    }

    /// Logits for each input position; row `t` scores what follows input `t`.
    pub fn forward_logits(&self, g: &mut Graph, inputs: &[usize]) -> Result<Var> {
        let e = self.embed(g, inputs)?;
        self.logits_from_embeddings(g, e)
    }

    /// Graph-free [`PolicyModel::forward_logits`].
    pub fn logits(&self, inputs: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.forward_logits(&mut g, inputs)?;
        Ok(g.value(v).clone())
    }

    /// Graph-free [`PolicyModel::logits_from_embeddings`].
    pub fn logits_for_embeddings(&self, embedded: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = g.constant(embedded.clone());
        let v = self.logits_from_embeddings(&mut g, e)?;
        Ok(g.value(v).clone())
    }

    /// Per-position action distributions.
    pub fn distributions(&self, inputs: &[usize]) -> Result<Vec<Vec<f64>>> {
        let l = self.logits(inputs)?;
        Ok((0..l.rows()).map(|r| softmax(l.row(r))).collect())
    }

    /// Distribution over what follows the last input.
    pub fn next_distribution(&self, inputs: &[usize]) -> Result<Vec<f64>> {
        let window = match self.arch {
            // The grid policy is Markov in the current cell.
            Architecture::GridMlp { .. } => &inputs[inputs.len().saturating_sub(1)..],
            Architecture::TinyDecoder { .. } => inputs,
        };
        if window.is_empty() {
            return Err(Error::InvalidSequence("empty input".into()));
        }
        let l = self.logits(window)?;
        Ok(softmax(l.row(l.rows() - 1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::check_graph_loss;

    fn decoder(seed: u64) -> PolicyModel {
        PolicyModel::tiny_decoder(6, 8, 12, 10, seed).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let mut m = decoder(1);
        m.zero_head();
        for row in m.distributions(&[1, 2, 3]).unwrap() {
            assert!(row.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        }
        let mut grid = PolicyModel::grid_mlp(5, 4, 4, 0).unwrap();
        grid.zero_head();
        assert_eq!(grid.next_distribution(&[3]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let a = PolicyModel::grid_mlp(20, 16, 4, 7).unwrap();
        let b = PolicyModel::grid_mlp(20, 16, 4, 7).unwrap();
        let la = a.logits(&[3]).unwrap();
        let lb = b.logits(&[3]).unwrap();
        assert!(la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        for row in decoder(3).distributions(&[0, 5, 2, 2, 1]).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_token_is_rejected() {
        assert!(matches!(decoder(0).logits(&[1, 6]), Err(Error::UnknownToken { token: 6, size: 6 })));
    }

    #[test]
    fn forward_from_embeddings_matches_lookup() {
        let m = decoder(4);
        let tokens = [1, 4, 2, 0];
        let direct = m.logits(&tokens).unwrap();
        let mut g = Graph::new();
        let e = m.embed(&mut g, &tokens).unwrap();
        let e_val = g.value(e).clone();
        let via = m.logits_for_embeddings(&e_val).unwrap();
        assert!(direct.data().iter().zip(via.data()).all(|(a, b)| (a - b).abs() <= 1e-9));

        // 0.8 E + 0.2 E == E
        let mut g = Graph::new();
        let a = m.embed(&mut g, &tokens).unwrap();
        let b = m.embed(&mut g, &tokens).unwrap();
        let mixed = g.mix(a, b, vec![0.2; 4]);
        let mixed = g.value(mixed).clone();
        let via = m.logits_for_embeddings(&mixed).unwrap();
        assert!(direct.data().iter().zip(via.data()).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn zero_embeddings_match_a_zero_embedding_token() {
        let mut m = decoder(5);
        m.params.get_mut(EMBEDDING).unwrap().row_mut(3).iter_mut().for_each(|x| *x = 0.0);
        let via_token = m.logits(&[3, 3]).unwrap();
        let via_zero = m.logits_for_embeddings(&Tensor::zeros(2, 8)).unwrap();
        assert_eq!(via_token, via_zero);
    }

    #[test]
    fn embedding_dimension_is_checked() {
        let r = decoder(0).logits_for_embeddings(&Tensor::zeros(2, 7));
        assert!(matches!(r, Err(Error::EmbeddingDimMismatch { expected: 8, got: 7 })));
    }

    #[test]
    fn decoder_is_causal() {
        let m = decoder(6);
        let base = [1, 2, 3, 4, 5];
        let l0 = m.logits(&base).unwrap();
        for t in 0..base.len() {
            let mut perturbed = base;
            perturbed[t] = 0;
            let l1 = m.logits(&perturbed).unwrap();
            for r in 0..t {
                let same = l0.row(r).iter().zip(l1.row(r)).all(|(a, b)| (a - b).abs() <= 1e-12);
                assert!(same, "row {r} changed when token {t} was perturbed");
            }
            assert_ne!(l0.row(t), l1.row(t));
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let m = decoder(8);
        assert!(m.num_params() < 2000);
        let report = check_graph_loss(
            &m.params,
            |g, p| {
                let model = PolicyModel { arch: m.arch, params: p.clone() };
                let logits = model.forward_logits(g, &[1, 3, 5, 2])?;
                let lp = g.log_softmax(logits);
                let picked = g.pick(lp, vec![(0, 3), (1, 5), (2, 2), (3, 0)]);
                let s = g.sum(picked);
                Ok(g.scale(s, -0.25))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.max_rel_error);
    }
}
