use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_grad, contrastive_loss, triplet_grad, triplet_loss};
use super::{Gradients, SiameseError, SiameseNet};
use crate::cohort::{AnchorSpec, TrainingPair, TrainingTriplet};
use crate::features::NormalizationCaps;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    Triplet,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(format!("unknown loss `{other}` (expected contrastive or triplet)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Hidden layer widths; input is 21 and output is 1.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 0.5,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 42,
            init_scale: super::DEFAULT_INIT_SCALE,
            hidden: super::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SiameseError> {
        let bad = |m: &str| Err(SiameseError::BadConfig(m.to_string()));
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return bad("margin must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![crate::features::NUM_FEATURES];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }
}

/// A batch of training samples for one loss.
#[derive(Debug, Clone, Copy)]
pub enum TrainingBatch<'a> {
    Contrastive(&'a [TrainingPair]),
    Triplet(&'a [TrainingTriplet]),
}

impl TrainingBatch<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainingBatch::Contrastive(p) => p.len(),
            TrainingBatch::Triplet(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean loss over the batch and its gradient. Samples are accumulated in
/// slice order.
pub fn batch_loss_and_gradient(net: &SiameseNet, batch: TrainingBatch<'_>, margin: f64) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    match batch {
        TrainingBatch::Contrastive(pairs) => {
            for p in pairs {
                let ci = net.forward_cached(&p.first.values);
                let cj = net.forward_cached(&p.second.values);
                let (si, sj) = (ci.output(), cj.output());
                total += contrastive_loss(si, sj, p.label, margin);
                let (gi, gj) = contrastive_grad(si, sj, p.label, margin);
                net.backward(&ci, gi, &mut grads);
                net.backward(&cj, gj, &mut grads);
            }
        }
        TrainingBatch::Triplet(triplets) => {
            for t in triplets {
                let ca = net.forward_cached(&t.anchor.values);
                let cp = net.forward_cached(&t.positive.values);
                let cn = net.forward_cached(&t.negative.values);
                let (sa, sp, sn) = (ca.output(), cp.output(), cn.output());
                total += triplet_loss(sa, sp, sn, margin);
                let (ga, gp, gn) = triplet_grad(sa, sp, sn, margin);
                net.backward(&ca, ga, &mut grads);
                net.backward(&cp, gp, &mut grads);
                net.backward(&cn, gn, &mut grads);
            }
        }
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    (total / n, grads)
}

pub(crate) fn batch_loss(net: &SiameseNet, batch: TrainingBatch<'_>, margin: f64) -> f64 {
    let total: f64 = match batch {
        TrainingBatch::Contrastive(pairs) => pairs
            .iter()
            .map(|p| contrastive_loss(net.forward(&p.first), net.forward(&p.second), p.label, margin))
            .sum(),
        TrainingBatch::Triplet(triplets) => triplets
            .iter()
            .map(|t| triplet_loss(net.forward(&t.anchor), net.forward(&t.positive), net.forward(&t.negative), margin))
            .sum(),
    };
    total / batch.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub net: SiameseNet,
    /// Mean per-sample loss of each epoch, accumulated over its mini-batches.
    pub loss_history: Vec<f64>,
}

fn train(
    mut net: SiameseNet,
    batch: TrainingBatch<'_>,
    config: &TrainConfig,
) -> Result<TrainingOutcome, SiameseError> {
    config.validate()?;
    net.check()?;
    if batch.is_empty() {
        return Err(SiameseError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut velocity = vec![0.0; net.num_params()];
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (loss, grads) = match batch {
                TrainingBatch::Contrastive(pairs) => {
                    let mb: Vec<TrainingPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                    batch_loss_and_gradient(&net, TrainingBatch::Contrastive(&mb), config.margin)
                }
                TrainingBatch::Triplet(triplets) => {
                    let mb: Vec<TrainingTriplet> = chunk.iter().map(|&i| triplets[i].clone()).collect();
                    batch_loss_and_gradient(&net, TrainingBatch::Triplet(&mb), config.margin)
                }
            };
            epoch_total += loss * chunk.len() as f64;
            for ((v, g), k) in velocity.iter_mut().zip(grads.flatten()).zip(0..) {
                *v = config.momentum * *v - config.learning_rate * g;
                *net.param_mut(k) += *v;
            }
        }
        history.push(epoch_total / batch.len() as f64);
    }
    Ok(TrainingOutcome {
        net,
        loss_history: history,
    })
}

/// Mini-batch SGD with momentum on the mean contrastive loss.
pub fn train_contrastive(
    net: SiameseNet,
    pairs: &[TrainingPair],
    config: &TrainConfig,
) -> Result<TrainingOutcome, SiameseError> {
    train(net, TrainingBatch::Contrastive(pairs), config)
}

/// Mini-batch SGD with momentum on the mean triplet loss.
pub fn train_triplet(
    net: SiameseNet,
    triplets: &[TrainingTriplet],
    config: &TrainConfig,
) -> Result<TrainingOutcome, SiameseError> {
    train(net, TrainingBatch::Triplet(triplets), config)
}

pub const SIAMESE_FORMAT_VERSION: u32 = 1;

/// Serialized network with everything needed to reproduce and apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseModel {
    pub format_version: u32,
    pub loss: LossKind,
    pub output_activation: String,
    pub net: SiameseNet,
    pub train_config: TrainConfig,
    pub caps: NormalizationCaps,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorSpec>,
    pub loss_history: Vec<f64>,
}

impl SiameseModel {
    pub fn new(
        loss: LossKind,
        outcome: TrainingOutcome,
        train_config: TrainConfig,
        caps: NormalizationCaps,
        anchor: Option<AnchorSpec>,
    ) -> SiameseModel {
        SiameseModel {
            format_version: SIAMESE_FORMAT_VERSION,
            loss,
            output_activation: "logistic".into(),
            net: outcome.net,
            train_config,
            caps,
            anchor,
            loss_history: outcome.loss_history,
        }
    }

    pub fn check(&self) -> Result<(), SiameseError> {
        if self.format_version != SIAMESE_FORMAT_VERSION {
            return Err(SiameseError::Version(self.format_version));
        }
        self.net.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate, make_pairs, make_triplets, SyntheticSpec};
    use crate::features::FeatureVector;

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_similar_pairs_give_zero_loss_and_gradient() {
        let x = FeatureVector::filled("x", 0.4).unwrap();
        let pairs = vec![
            TrainingPair {
                first: x.clone(),
                second: x.clone(),
                label: 1,
            };
            4
        ];
        let net = SiameseNet::init_default(1);
        let (loss, grads) = batch_loss_and_gradient(&net, TrainingBatch::Contrastive(&pairs), 0.5);
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
        let out = train_contrastive(net.clone(), &pairs, &quick_config()).unwrap();
        assert!(out.loss_history.iter().all(|&l| l == 0.0));
        assert_eq!(out.net, net);
    }

    #[test]
    fn degenerate_triplets_cost_margin_squared() {
        let x = FeatureVector::filled("x", 0.6).unwrap();
        let triplets = vec![
            TrainingTriplet {
                anchor: x.clone(),
                positive: x.clone(),
                negative: x.clone(),
            };
            3
        ];
        let net = SiameseNet::init_default(2);
        let m = 0.2;
        let (loss, _) = batch_loss_and_gradient(&net, TrainingBatch::Triplet(&triplets), m);
        assert!((loss - m * m).abs() < 1e-15);
    }

    #[test]
    fn training_is_reproducible() {
        let cohort = generate(&SyntheticSpec {
            n_pos: 6,
            n_neg: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let pairs = make_pairs(&cohort).unwrap();
        let cfg = quick_config();
        let a = train_contrastive(SiameseNet::init_default(cfg.seed), &pairs, &cfg).unwrap();
        let b = train_contrastive(SiameseNet::init_default(cfg.seed), &pairs, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.net.param_bytes(), b.net.param_bytes());
        assert!(a.net.effective_weights_nonnegative());

        let anchor = AnchorSpec::from_positives(&cohort).unwrap();
        let triplets = make_triplets(&cohort, &anchor).unwrap();
        let a = train_triplet(SiameseNet::init_default(1), &triplets, &cfg).unwrap();
        let b = train_triplet(SiameseNet::init_default(1), &triplets, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.loss_history.len(), cfg.epochs);
    }

    #[test]
    fn empty_and_bad_inputs() {
        let net = SiameseNet::init_default(0);
        assert_eq!(
            train_contrastive(net.clone(), &[], &quick_config()).unwrap_err(),
            SiameseError::EmptyBatch
        );
        let cfg = TrainConfig {
            margin: 0.0,
            ..TrainConfig::default()
        };
        let x = FeatureVector::filled("x", 0.5).unwrap();
        let pairs = vec![TrainingPair {
            first: x.clone(),
            second: x,
            label: 0,
        }];
        assert!(matches!(
            train_contrastive(net, &pairs, &cfg),
            Err(SiameseError::BadConfig(_))
        ));
    }

    #[test]
    fn batch_loss_matches_gradient_pass() {
        let cohort = generate(&SyntheticSpec {
            n_pos: 4,
            n_neg: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let pairs = make_pairs(&cohort).unwrap();
        let net = SiameseNet::init_default(4);
        let (l1, _) = batch_loss_and_gradient(&net, TrainingBatch::Contrastive(&pairs), 0.5);
        let l2 = batch_loss(&net, TrainingBatch::Contrastive(&pairs), 0.5);
        assert_eq!(l1, l2);
    }
}
