//! Mini-batch training, the trained model and prediction.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::ArchitectureConfig;
use super::layers::{softmax, softmax_xent};
use super::network::Network;
use super::optim::{Adam, AdamConfig};
use super::NetError;
use crate::dataset::{BinaryLabel, Sample};
use crate::features::{extract, FeatureConfig, FeatureVector, TokenList};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub rng_seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            rng_seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.epochs == 0 {
            return Err(NetError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A trained (or freshly initialized) classifier plus the metadata needed to
/// deploy it safely.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network<f32>,
    pub token_set_version: u64,
    pub epochs: u32,
    pub rng_seed: u64,
}

impl Model {
    pub fn init(arch: &ArchitectureConfig, seq_len: usize, tokens: &TokenList, rng_seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Ok(Self {
            net: Network::init(arch, seq_len, tokens.len(), &mut rng)?,
            token_set_version: tokens.version(),
            epochs: 0,
            rng_seed,
        })
    }

    pub fn preset(&self) -> &str {
        &self.net.arch().name
    }

    pub fn seq_len(&self) -> usize {
        self.net.seq_len()
    }

    pub fn check_tokens(&self, tokens: &TokenList) -> Result<(), NetError> {
        if tokens.version() != self.token_set_version || tokens.len() != self.net.token_count() {
            return Err(NetError::TokenSetMismatch {
                expected: self.token_set_version,
                actual: tokens.version(),
            });
        }
        Ok(())
    }

    /// Probability of the MaliciousOrError class.
    pub fn predict(&self, bytes: &[u8], tokens: &TokenList) -> Result<f32, NetError> {
        self.check_tokens(tokens)?;
        let fv = extract(bytes, &FeatureConfig::new(self.seq_len(), tokens.clone()));
        self.predict_features(&fv)
    }

    pub fn predict_features(&self, fv: &FeatureVector) -> Result<f32, NetError> {
        if fv.counts.token_set_version != self.token_set_version {
            return Err(NetError::TokenSetMismatch {
                expected: self.token_set_version,
                actual: fv.counts.token_set_version,
            });
        }
        let logits = self.net.logits(&fv.bytes.values, &fv.normalized_counts())?;
        Ok(softmax(&logits)[1])
    }
}

/// A model bound to the token list it was trained with. Immutable and
/// shareable across threads.
#[derive(Debug, Clone)]
pub struct Detector {
    model: Model,
    features: FeatureConfig,
}

impl Detector {
    pub fn new(model: Model, tokens: TokenList) -> Result<Self, NetError> {
        model.check_tokens(&tokens)?;
        let features = FeatureConfig::new(model.seq_len(), tokens);
        Ok(Self { model, features })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn tokens(&self) -> &TokenList {
        &self.features.tokens
    }

    pub fn predict(&self, bytes: &[u8]) -> f32 {
        let fv = extract(bytes, &self.features);
        self.model
            .predict_features(&fv)
            .expect("detector inputs always match the model")
    }

    pub fn predict_many(&self, inputs: &[Vec<u8>]) -> Vec<f32> {
        par::map(inputs, |b| self.predict(b))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

struct Prepared {
    bytes: Vec<f32>,
    counts: Vec<f32>,
    class: usize,
}

fn class_of(label: BinaryLabel) -> usize {
    usize::from(label.is_positive())
}

/// Trains a fresh network on `samples`.
///
/// Per-sample gradients of a batch may be computed on several threads, but
/// they are summed in sample order, so the result does not depend on the
/// thread count.
pub fn train(
    arch: &ArchitectureConfig,
    samples: &[Sample],
    features: &FeatureConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, NetError> {
    config.validate()?;
    let positives = samples.iter().filter(|s| s.label.is_positive()).count();
    if positives == 0 || positives == samples.len() {
        return Err(NetError::InvalidConfig("training needs both classes".into()));
    }
    let mut model = Model::init(arch, features.seq_len, &features.tokens, config.rng_seed)?;
    info!(
        "training preset {} ({} parameters) on {} samples for {} epochs",
        arch.name,
        model.net.param_count(),
        samples.len(),
        config.epochs
    );
    let data: Vec<Prepared> = par::map(samples, |s| {
        let fv = extract(&s.bytes, features);
        Prepared {
            counts: fv.normalized_counts(),
            bytes: fv.bytes.values,
            class: class_of(s.label),
        }
    });
    // Separate stream from the one that initialized the weights.
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5348_5546_464c_4521);
    let mut opt = Adam::new(config.optimizer, model.net.param_count());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0f64;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let net = &model.net;
            let per_sample = par::map(batch, |&i| {
                let d = &data[i];
                let (logits, trace) = net.forward(&d.bytes, &d.counts).expect("prepared features match");
                let sx = softmax_xent(&logits, d.class);
                let mut g = vec![0.0f32; net.param_count()];
                net.backward(&trace, &sx.grad_logits, &mut g);
                (sx.loss, g)
            });
            let scale = 1.0 / batch.len() as f32;
            let mut grads = vec![0.0f32; model.net.param_count()];
            let mut batch_loss = 0.0f64;
            for (loss, g) in per_sample {
                batch_loss += f64::from(loss);
                for (acc, v) in grads.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            if !batch_loss.is_finite() {
                return Err(NetError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            for g in &mut grads {
                *g *= scale;
            }
            opt.step(&mut model.net.params, &grads);
            total += batch_loss;
        }
        let mean = total / data.len() as f64;
        debug!("epoch {} mean loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }
    model.epochs = config.epochs as u32;
    Ok(TrainOutcome { model, epoch_losses })
}
