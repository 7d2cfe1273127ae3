use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpatch_core::dataset::{build_split, BinaryLabel, CorpusStore};
use vpatch_core::fuzzer::{derive_tokens, run_campaign, Campaign, CampaignConfig, Token, TokenOrigin};
use vpatch_core::target::{generator, Label, TargetSpec, Version};

fn seeds(n: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generator::minimark_document(&mut rng, 6)).collect()
}

fn user_dictionary() -> Vec<Token> {
    generator::MINIMARK_DICTIONARY
        .iter()
        .map(|t| Token::new(t.to_vec(), TokenOrigin::UserDictionary).unwrap())
        .collect()
}

fn campaign(execs: u64, n_seeds: usize) -> (CampaignConfig, Campaign) {
    let mut cfg = CampaignConfig::new(TargetSpec::minimark(Version::V1), seeds(n_seeds, 42));
    cfg.rng_seed = 42;
    cfg.max_executions = execs;
    cfg.user_dictionary = user_dictionary();
    let c = run_campaign(&cfg).unwrap();
    (cfg, c)
}

fn check_bookkeeping(store: &CorpusStore) {
    let mut first: HashMap<u64, u64> = HashMap::new();
    let mut unique_per_sig: HashMap<u64, usize> = HashMap::new();
    let mut seen = HashSet::new();
    let mut last_distinct = 0;
    for c in store.cases() {
        first.entry(c.coverage_sig).or_insert(c.seq);
        if c.unique {
            *unique_per_sig.entry(c.coverage_sig).or_default() += 1;
            assert_eq!(first[&c.coverage_sig], c.seq, "unique case is not the first with its signature");
        }
        seen.insert(c.coverage_sig);
        assert!(seen.len() >= last_distinct);
        last_distinct = seen.len();
    }
    assert_eq!(unique_per_sig.len(), first.len());
    assert!(unique_per_sig.values().all(|&n| n == 1));
}

#[test]
fn seeded_campaign_has_every_label_and_few_unique_paths() {
    let (cfg, c) = campaign(50_000, 3);
    let counts = c.store.label_counts();
    assert!(counts.iter().all(|&n| n > 0), "label counts {counts:?}");
    assert_eq!(c.store.len() as u64, c.log.executions);
    assert!(c.log.unique * 10 < c.log.executions, "{} unique of {}", c.log.unique, c.log.executions);
    check_bookkeeping(&c.store);

    // Discovered tokens come from the inputs that found new paths.
    let by_seq: HashMap<u64, &[u8]> = c.store.cases().iter().map(|t| (t.seq, t.bytes.as_slice())).collect();
    let tokens = derive_tokens(&c.log.events, &cfg.user_dictionary);
    let user: HashSet<&[u8]> = cfg.user_dictionary.iter().map(Token::bytes).collect();
    let discovered: Vec<&Token> = tokens.iter().filter(|t| !user.contains(t.bytes())).collect();
    assert!(discovered.len() >= 10, "{} discovered tokens", discovered.len());
    for t in discovered {
        let found = c.log.events.iter().filter(|e| e.successful).any(|e| {
            by_seq[&e.seq]
                .windows(t.bytes().len())
                .any(|w| w == t.bytes())
        });
        assert!(found, "token {:?} is not part of any successful child", t.bytes());
    }
}

#[test]
fn campaigns_are_reproducible() {
    let (_, a) = campaign(5_000, 3);
    let (_, b) = campaign(5_000, 3);
    assert_eq!(a.store.cases(), b.store.cases());
    assert_eq!(a.log.events, b.log.events);
}

#[test]
fn unique_only_saving() {
    let mut cfg = CampaignConfig::new(TargetSpec::minimark(Version::V1), seeds(3, 1));
    cfg.max_executions = 3_000;
    cfg.save_non_unique = false;
    let c = run_campaign(&cfg).unwrap();
    assert!(!c.store.is_empty());
    assert!(c.store.cases().iter().all(|t| t.unique));
    assert_eq!(c.store.len() as u64, c.log.unique);
}

#[test]
fn split_of_a_seeded_campaign() {
    let (_, c) = campaign(20_000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let split = build_split(&c.store, 0.99, &mut rng).unwrap();
    for side in [&split.train, &split.eval] {
        let pos = side.iter().filter(|s| s.label == BinaryLabel::MaliciousOrError).count();
        assert_eq!(pos * 2, side.len());
    }
    assert!(split.train.iter().all(|s| s.seq <= split.barrier_seq));
    assert!(split.eval.iter().all(|s| s.seq > split.barrier_seq));
    let unique: Vec<u64> = c.store.cases().iter().filter(|t| t.unique).map(|t| t.seq).collect();
    let before = unique.iter().filter(|&&s| s <= split.barrier_seq).count();
    assert!(before as f64 >= 0.99 * unique.len() as f64);
    assert!(((before - 1) as f64) < 0.99 * unique.len() as f64);
}

#[test]
fn minibin_campaign_finds_crashes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seeds: Vec<Vec<u8>> = (0..4).map(|_| generator::minibin_document(&mut rng)).collect();
    let mut cfg = CampaignConfig::new(TargetSpec::minibin(Version::V1), seeds);
    cfg.max_executions = 20_000;
    let c = run_campaign(&cfg).unwrap();
    assert!(c.store.cases().iter().any(|t| t.label == Label::Crash));
    assert!(c.store.cases().iter().any(|t| t.label == Label::Benign));
    check_bookkeeping(&c.store);
}
