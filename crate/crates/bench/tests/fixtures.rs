use card_bench::{config, corpus, model};
use card_core::{AttnMode, Objective};

#[test]
fn fixtures_build_for_every_objective() {
    for objective in Objective::ALL {
        let cfg = config(objective);
        let (vocab, data) = corpus(&cfg);
        assert!(data.train.len() > 32);
        let m = model(&cfg);
        assert_eq!(m.config().vocab_size, vocab.size);
        let causal = matches!(objective, Objective::Arm | Objective::Card);
        assert_eq!(m.config().attn_mode == AttnMode::Causal, causal, "{}", objective.name());
    }
}
