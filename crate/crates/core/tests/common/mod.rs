#![allow(dead_code)]

use jointgram::synth::{default_grammars, generate_corpus, Corpus, SynthConfig};
use jointgram::train::{GrammarSizes, TrainConfig};

/// A model small enough to train in well under a second per epoch.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.z_dim = 2;
    cfg.rnn_hidden = 6;
    cfg.align_dim = 6;
    cfg.word_dim = 6;
    let sizes = GrammarSizes {
        nonterminals: 3,
        preterminals: 4,
        symbol_dim: 8,
        hidden: 8,
        terminal_layers: 1,
    };
    cfg.lang = sizes.clone();
    cfg.vis = sizes;
    cfg.retrieval_trials = 200;
    cfg
}

pub fn small_corpus(n_train: usize, n_test: usize, seed: u64) -> Corpus {
    generate_corpus(&default_grammars(), &SynthConfig::default(), n_train, n_test, seed, &[]).unwrap()
}
