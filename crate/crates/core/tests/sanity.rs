use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpatch_core::dataset::{sanity_dataset, SANITY_TOKEN};
use vpatch_core::features::{FeatureConfig, TokenList, DEFAULT_SEQ_LEN};
use vpatch_core::fuzzer::{Token, TokenOrigin};
use vpatch_core::neuralnet::{train, ArchitectureConfig, TrainConfig};

fn tokens() -> TokenList {
    let raw: [&[u8]; 5] = [b"<a", b"</", SANITY_TOKEN, b"EV", b"IL"];
    TokenList::new(raw.iter().map(|t| Token::new(t.to_vec(), TokenOrigin::UserDictionary).unwrap()).collect())
}

#[test]
fn sanity_set_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let train_set = sanity_dataset(2000, &mut rng);
    let held_out = sanity_dataset(1000, &mut rng);
    let feats = FeatureConfig::new(DEFAULT_SEQ_LEN, tokens());
    let cfg = TrainConfig { rng_seed: 42, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train(&ArchitectureConfig::desk(), &train_set, &feats, &cfg).unwrap();
    eprintln!("trained in {:?}, losses {:?}", t0.elapsed(), out.epoch_losses);
    let correct = held_out
        .iter()
        .filter(|s| {
            let p = out.model.predict(&s.bytes, &feats.tokens).unwrap();
            (p >= 0.5) == s.label.is_positive()
        })
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    eprintln!("held-out accuracy {acc}");
    assert!(acc >= 0.99, "{acc}");
}
