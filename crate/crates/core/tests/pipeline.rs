use card_core::corruption::{mask_count, soft_tail_mask, tail_window};
use card_core::inference::{decode_arm, eval_ppl, generate};
use card_core::rng::{stream, Purpose};
use card_core::trainer::{self, load_state};
use card_core::{
    Checkpoint, DecodeConfig, LabConfig, Model, Objective, ScoreConvention, TrainState, WeightConfig, WeightVector,
};
use proptest::prelude::*;

fn tiny(objective: Objective) -> LabConfig {
    let mut cfg = LabConfig::default();
    for (k, v) in [
        ("data.tokens", "8000"),
        ("data.seq_len", "32"),
        ("model.d_model", "16"),
        ("model.n_heads", "2"),
        ("model.d_ff", "32"),
        ("model.n_layers", "1"),
        ("model.max_len", "64"),
        ("train.steps", "30"),
        ("train.batch_size", "4"),
        ("train.warmup_steps", "3"),
        ("train.peak_lr", "3e-3"),
        ("train.eval_every", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.objective.objective = objective;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn train_checkpoint_reload_and_decode() {
    let cfg = tiny(Objective::Card);
    let (vocab, corpus) = cfg.data.load().unwrap();
    let model = Model::init(cfg.model_config().unwrap(), cfg.train.seed).unwrap();
    let before = eval_ppl(&model, &corpus.validation, &vocab).unwrap();
    let (state, summary, metrics) = trainer::train(
        &cfg.train,
        &cfg.objective,
        &vocab,
        &corpus.train,
        Some(&corpus.validation),
        TrainState::new(model, false),
        None,
    )
    .unwrap();
    assert_eq!(summary.steps, 30);
    assert!(!metrics.is_empty());
    let after = eval_ppl(&state.model, &corpus.validation, &vocab).unwrap();
    assert!(after < before, "perplexity {before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ck");
    state.to_checkpoint(&cfg.to_text()).save(&path).unwrap();
    let blob = Checkpoint::load(&path).unwrap().config;
    let reloaded_cfg = LabConfig::from_text(&blob).unwrap();
    assert_eq!(reloaded_cfg, cfg);
    let reloaded = load_state(&path, &reloaded_cfg.model_config().unwrap()).unwrap();
    assert_eq!(reloaded.step, 30);

    let prompt = corpus.validation.get(0).ids()[..8].to_vec();
    let dcfg = DecodeConfig { block_size: 4, max_new_tokens: 12, ..DecodeConfig::default() };
    let a = generate(&state.model, &vocab, &prompt, &dcfg).unwrap();
    let b = generate(&reloaded.model, &vocab, &prompt, &dcfg).unwrap();
    assert_eq!(a.generated, b.generated);
    assert_eq!(a.generated.len(), 12);
    let k1 = DecodeConfig { block_size: 1, ..dcfg };
    assert_eq!(
        generate(&state.model, &vocab, &prompt, &k1).unwrap().generated,
        decode_arm(&state.model, &vocab, &prompt, 12).unwrap().generated
    );
}

#[test]
fn every_objective_trains_without_skipped_steps() {
    for objective in Objective::ALL {
        let mut cfg = tiny(objective);
        cfg.train.steps = 4;
        let (vocab, corpus) = cfg.data.load().unwrap();
        let model = Model::init(cfg.model_config().unwrap(), 1).unwrap();
        let (_, summary, _) = trainer::train(
            &cfg.train,
            &cfg.objective,
            &vocab,
            &corpus.train,
            None,
            TrainState::new(model, false),
            None,
        )
        .unwrap();
        assert_eq!(summary.skipped_steps, 0, "{}", objective.name());
        assert!(summary.final_train_loss.is_some_and(f64::is_finite));
    }
}

#[test]
fn same_seed_same_run() {
    let run = || {
        let cfg = tiny(Objective::Card);
        let (vocab, corpus) = cfg.data.load().unwrap();
        let model = Model::init(cfg.model_config().unwrap(), cfg.train.seed).unwrap();
        let (state, _, metrics) = trainer::train(
            &cfg.train,
            &cfg.objective,
            &vocab,
            &corpus.train,
            None,
            TrainState::new(model, false),
            None,
        )
        .unwrap();
        (state.model.params().sum_squares(), format!("{metrics:?}"))
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_tail_masks_exactly_n_inside_the_window(len in 1usize..96, t in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = mask_count(len, t);
        let w = tail_window(len, n, 2.0);
        let mut rng = stream(seed, Purpose::Corruption, 0, 0);
        let p = soft_tail_mask(len, t, 2.0, &mut rng);
        prop_assert_eq!(p.count(), n);
        prop_assert!(p.masked()[..len - w].iter().all(|&m| !m));
    }

    #[test]
    fn weights_lie_in_the_unit_interval_over_beta(bits in proptest::collection::vec(any::<bool>(), 1..48), base in 0.1f64..4.0) {
        let cfg = WeightConfig { base, convention: ScoreConvention::Prefix, ..WeightConfig::default() };
        let v = WeightVector::compute(&bits, &cfg).unwrap();
        prop_assert!(v.weights.iter().all(|&w| w > 0.0 && w <= 1.0 / base + 1e-15));
        prop_assert!(v.scores.iter().zip(&v.weights).all(|(s, w)| (w * (base + s) - 1.0).abs() < 1e-12));
    }
}
