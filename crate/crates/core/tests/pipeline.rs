use proptest::prelude::*;
use reef_core::model::{run_stream, run_stream_tape, BoundParams, RunOptions};
use reef_core::autodiff::Tape;
use reef_core::train::{gen_corpus, train_two_stage};
use reef_core::{ModelParams, PipelineMode, RunConfig, SeededRng, Strategy};

fn small() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.adapter.dim = 16;
    cfg.adapter.tokens = 16;
    cfg.adapter.queries = 4;
    cfg.adapter.bank_capacity = 3;
    cfg.adapter.k_spat = 16;
    cfg.adapter.n_samples = 32;
    cfg.train.initial_epochs = 1;
    cfg.train.main_epochs = 1;
    cfg.data.streams = 10;
    cfg.data.frames = 9;
    cfg
}

#[test]
fn rtc_with_full_similarity_and_no_filter_matches_mbc() {
    let mut cfg = small();
    cfg.adapter.alpha = 1.0;
    let corpus = gen_corpus(&cfg).unwrap();
    let params = ModelParams::init(&cfg.adapter, 1).unwrap();
    for (i, s) in corpus.streams.iter().enumerate() {
        let noise = SeededRng::new(2, i as u64);
        let mut rtc = cfg.adapter.clone();
        rtc.strategy = Strategy::Rtc;
        let mut mbc = cfg.adapter.clone();
        mbc.strategy = Strategy::Mbc;
        let a = run_stream(&s.frames, &params, &rtc, PipelineMode::EVAL, noise).unwrap();
        let b = run_stream(&s.frames, &params, &mbc, PipelineMode::EVAL, noise).unwrap();
        assert_eq!(a, b, "stream {i}");
    }
}

#[test]
fn streams_are_deterministic_per_noise_seed() {
    let mut cfg = small();
    cfg.adapter.k_spat = 4;
    let corpus = gen_corpus(&cfg).unwrap();
    let params = ModelParams::init(&cfg.adapter, 1).unwrap();
    let frames = &corpus.streams[0].frames;
    let run = |seed| run_stream(frames, &params, &cfg.adapter, PipelineMode::EVAL, SeededRng::new(seed, 0)).unwrap();
    assert_eq!(run(4), run(4));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = small();
    cfg.adapter.k_spat = 4;
    cfg.train.lr = 0.0;
    let corpus = gen_corpus(&cfg).unwrap();
    let out = train_two_stage(&cfg, &corpus).unwrap();
    assert_eq!(out.params, ModelParams::init(&cfg.adapter, cfg.seed).unwrap());
    assert_eq!(out.log.len(), 2);
}

#[test]
fn training_is_reproducible_and_moves_scorers() {
    let mut cfg = small();
    cfg.adapter.k_spat = 4;
    let corpus = gen_corpus(&cfg).unwrap();
    let a = train_two_stage(&cfg, &corpus).unwrap();
    let b = train_two_stage(&cfg, &corpus).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    let init = ModelParams::init(&cfg.adapter, cfg.seed).unwrap();
    for name in ["temporal.w1", "spatial.w1"] {
        assert_ne!(a.params.get(name).unwrap(), init.get(name).unwrap(), "{name}");
    }
    assert!(a.log.iter().all(|e| e.scorer_grad_norm > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn banks_stay_within_capacity(frames in 1usize..14, cap in 1usize..5, seed in 0u64..50, strat in 0usize..5) {
        let mut cfg = small();
        cfg.adapter.k_spat = 4;
        cfg.adapter.bank_capacity = cap;
        cfg.adapter.strategy = Strategy::ALL[strat];
        cfg.data.frames = frames;
        cfg.data.signal_fraction = 1.0;
        cfg.seed = seed;
        let corpus = gen_corpus(&cfg).unwrap();
        let params = ModelParams::init(&cfg.adapter, seed).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, |_| false);
        let mut opts = RunOptions::new(PipelineMode::EVAL, SeededRng::new(seed, 1));
        opts.track_provenance = true;
        let run = run_stream_tape(&mut tape, &bound, &params, &corpus.streams[0].frames, &cfg.adapter, &opts).unwrap();
        let bank = run.state.visual_bank();
        prop_assert!(bank.len() <= cap);
        prop_assert!(bank.timestamps().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(run.state.query_banks().iter().all(|q| q.len() <= cap));
        let kept: f64 = run.state.retention(frames).iter().sum();
        prop_assert!(kept <= bank.len() as f64 + 1e-6);
    }
}
