//! Entity conditioning steers a trained generator: greedy decoding with
//! the entity set {e} names e more often than decoding with no entities.

use medgen::corpus::{
    build_tokenizer, generate_synthetic_corpus, linearize_context, split_corpus, EntitySet,
    SynthConfig,
};
use medgen::decode::greedy;
use medgen::generator::{
    train_generator, EntitySource, FusionConfig, FusionInput, GenTrainConfig, StageConfig,
};
use medgen::pipeline::Generator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trials; each pairs a held-out context with a random entity.
const TRIALS: u64 = 120;
/// One-sided significance level of the sign test on discordant trials.
const ALPHA: f64 = 0.01;

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn upper_tail(n: u64, k: u64) -> f64 {
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += term;
        }
        term *= (n - i) as f64 / (i + 1) as f64;
    }
    tail
}

#[test]
fn predicted_entities_appear_in_greedy_output() {
    let synth = SynthConfig {
        dialogues: 200,
        ..SynthConfig::default()
    };
    let (corpus, vocab) = generate_synthetic_corpus(&synth).unwrap();
    let tok = build_tokenizer(&corpus, &vocab).unwrap();
    let (train, test) = split_corpus(&corpus, 0.2, 3);
    let cfg = GenTrainConfig {
        stages: vec![StageConfig {
            epochs: 5,
            folds: 1,
            filter_min_entities: None,
        }],
        ..GenTrainConfig::default()
    };
    let fusion = FusionConfig::default();
    let t = train_generator(&train, &vocab, &tok, EntitySource::Gold, &fusion, &cfg, 3).unwrap();
    let generator = Generator {
        model: t.model,
        checkpoints: t.checkpoints,
    };

    let targets: Vec<(usize, usize)> = test
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.target_turns().map(move |t| (i, t)))
        .collect();
    // Trials where exactly one of the two decodes names the entity.
    let (mut only_with, mut only_without) = (0u64, 0u64);
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, turn) = targets[rng.random_range(0..targets.len())];
        let e = vocab.name(rng.random_range(0..vocab.len())).to_string();
        let ctx = linearize_context(&test[i], turn, 1, false, &tok).unwrap();
        let hit = |set: EntitySet| {
            let input = FusionInput::new(&ctx, &set, &tok);
            let scorer = generator.scorer(&input).unwrap();
            let h = greedy(&scorer, fusion.max_len.min(64)).unwrap();
            tok.decode(h.content(Some(medgen::corpus::EOS)))
                .contains(e.as_str())
        };
        match (hit([e.clone()].into()), hit(EntitySet::new())) {
            (true, false) => only_with += 1,
            (false, true) => only_without += 1,
            _ => {}
        }
    }
    let p = upper_tail(only_with + only_without, only_with);
    eprintln!("{only_with} trials name e only when conditioned, {only_without} only when not; p = {p:.2e}");
    assert!(only_with > only_without && p < ALPHA, "p = {p:.3e}");
}
