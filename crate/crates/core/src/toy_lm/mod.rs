//! Synthetic sequence tasks and a tiny decoder trained with SFT or IFT,
//! scored by greedy-decode exact match.

mod corpus;
mod train;

pub use corpus::{
    from_tsv, generate_corpus, make_example, modular_chain, to_tsv, CorpusSpec, Dataset, Task, EOS, SEP, VALUE_OFFSET,
};
pub use train::{
    decode_budget, evaluate, greedy_decode, run_toy_experiment, toy_runs_to_csv, train_toy_lm, EvalResult, Snapshot,
    ToyConfig, ToyMethod, ToyRun, ToyVerdict, TOY_CSV_HEADER, TOY_SLACK,
};
