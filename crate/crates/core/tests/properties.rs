use alignlab::diff::{Graph, PolicyModel};
use alignlab::frozen_lake::{parse_grid, value_iteration, RewardSpec};
use alignlab::losses::{ift_loss, relation_propagation_weights, sft_loss, Demo, LossConfig, Propagation};
use alignlab::mdp::{corollary_check, StateId, TokenSequence, TransitionTable};
use alignlab::reporting::load_config;
use alignlab::toy_lm::{from_tsv, generate_corpus, to_tsv, CorpusSpec, Task};
use proptest::prelude::*;

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 2..7).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn grid_text() -> impl Strategy<Value = String> {
    (1usize..5, 2usize..6).prop_flat_map(|(r, c)| {
        let n = r * c;
        (Just(c), prop::collection::vec(prop::bool::weighted(0.25), n), 0..n, 0..n).prop_map(
            move |(c, holes, s, g)| {
                let cells: Vec<char> = (0..holes.len())
                    .map(|i| match i {
                        _ if i == s => 'S',
                        _ if i == g => 'G',
                        _ if holes[i] => 'H',
                        _ => 'F',
                    })
                    .collect();
                cells.chunks(c).map(|row| row.iter().collect::<String>()).collect::<Vec<_>>().join("\n")
            },
        )
    })
}

fn sequence(vocab: usize) -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..3, 1usize..5).prop_flat_map(move |(p, t)| {
        (prop::collection::vec(1..vocab, p + t), Just(p))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn table_text_round_trips(rows in prop::collection::vec(distribution(), 1..6)) {
        let width = rows[0].len();
        let mut t = TransitionTable::new(width);
        for (i, r) in rows.iter().filter(|r| r.len() == width).enumerate() {
            t.insert(StateId::Cell(i), r.clone()).unwrap();
        }
        let back = TransitionTable::from_text(&t.to_text()).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for ((a, ra), (b, rb)) in t.iter().zip(back.iter()) {
            prop_assert_eq!(a, b);
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn argmax_dominates_every_entry(dist in distribution(), pick in 0usize..7) {
        let target = pick % dist.len();
        let out = corollary_check(&dist, target).unwrap();
        prop_assert!(out.holds);
        prop_assert!(out.gap >= 0.0 && out.gap.is_finite());
    }

    #[test]
    fn decoder_rows_are_distributions(seed in any::<u64>(), (tokens, _) in sequence(6)) {
        let m = PolicyModel::tiny_decoder(6, 4, 6, 8, seed).unwrap();
        let p = m.next_distribution(&tokens).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(p, m.next_distribution(&tokens).unwrap());
    }

    #[test]
    fn token_losses_and_weights_are_nonnegative(
        seed in any::<u64>(),
        (tokens, prompt) in sequence(6),
        lambda in 0.0f64..=1.0,
        alpha in 0.05f64..=1.0,
        alg1 in any::<bool>(),
    ) {
        let m = PolicyModel::tiny_decoder(6, 4, 6, 8, seed).unwrap();
        let d = Demo::from_tokens(&TokenSequence::new(tokens, prompt).unwrap()).unwrap();
        let propagation = if alg1 { Propagation::Alg1Scaled } else { Propagation::Eq20SuffixSum };
        let cfg = LossConfig { lambda, decay: alpha, propagation, ..LossConfig::default() };
        let r = ift_loss(&mut Graph::new(), &m, &d, &cfg).unwrap();
        prop_assert!(r.token_losses.iter().all(|&l| l >= 0.0));
        prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
        prop_assert!(r.total_value.is_finite());
    }

    #[test]
    fn unpropagated_total_is_the_mean(seed in any::<u64>(), (tokens, prompt) in sequence(6)) {
        let m = PolicyModel::tiny_decoder(6, 4, 6, 8, seed).unwrap();
        let d = Demo::from_tokens(&TokenSequence::new(tokens, prompt).unwrap()).unwrap();
        let r = sft_loss(&mut Graph::new(), &m, &d, &LossConfig::sft_equivalent()).unwrap();
        let mean = r.token_losses.iter().sum::<f64>() / r.token_losses.len() as f64;
        prop_assert!((r.total_value - mean).abs() <= 1e-12);
    }

    #[test]
    fn single_token_weight_is_the_loss(l in 0.0f64..10.0, alpha in 0.05f64..=1.0) {
        for mode in [Propagation::Eq20SuffixSum, Propagation::Alg1Scaled] {
            prop_assert_eq!(relation_propagation_weights(&[l], alpha, mode).unwrap(), vec![l]);
        }
    }

    #[test]
    fn maps_round_trip_and_values_follow_path_length(text in grid_text()) {
        let Ok(g) = parse_grid(&text) else { return Ok(()) };
        let ascii = g.to_ascii();
        prop_assert_eq!(ascii.trim_end(), text.as_str());
        let o = value_iteration(&g, 0.9, RewardSpec::default()).unwrap();
        prop_assert!(o.fixed_point_residual(&g) < 1e-9);
        let steps = g.shortest_path().unwrap().len() - 1;
        prop_assert!((o.values[g.start()] - 0.9f64.powi(steps as i32 - 1)).abs() < 1e-9);
        for s in g.reachable_nonterminal() {
            let row = o.row(s).unwrap();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corpora_hold_out_prompts_and_round_trip(seed in 0u64..1000, reverse in any::<bool>()) {
        let task = if reverse { Task::Reverse } else { Task::ModularChain };
        // chains have one fixed length
        let max_len = if reverse { 5 } else { 3 };
        let spec = CorpusSpec { task, vocab_size: 12, min_len: 3, max_len, train_size: 30, eval_size: 10, seed };
        let data = generate_corpus(&spec).unwrap();
        prop_assert_eq!((data.train.len(), data.eval.len()), (30, 10));
        for e in &data.eval {
            prop_assert!(data.train.iter().all(|t| t.prompt() != e.prompt()));
        }
        for s in data.train.iter().chain(&data.eval) {
            prop_assert!(s.len() <= spec.max_sequence_len());
            prop_assert!(s.target_len() > 0);
        }
        prop_assert_eq!(from_tsv(&to_tsv(&data.train)).unwrap(), data.train);
    }

    #[test]
    fn config_echo_reloads_to_the_same_hash(
        lambda in 0.0f64..=1.0,
        alpha in 0.05f64..=1.0,
        seed in 0u64..100,
    ) {
        let c = load_config(
            "",
            &[format!("lambda={lambda}"), format!("alpha={alpha}"), format!("seed={seed}")],
            None,
        ).unwrap();
        prop_assert_eq!(c.loss.lambda, lambda);
        prop_assert_eq!(c.loss.decay, alpha);
        let again = load_config(&c.echo(), &[], None).unwrap();
        prop_assert_eq!(again.hash(), c.hash());
    }
}
