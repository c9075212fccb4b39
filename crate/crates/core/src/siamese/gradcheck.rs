use super::loss::{contrastive_kink_distance, triplet_kink_distance};
use super::train::{batch_loss, batch_loss_and_gradient, TrainingBatch};
use super::{Gradients, SiameseNet};
use crate::cohort::{TrainingPair, TrainingTriplet};

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-7;

// Keep only samples whose scores sit at least `10 * epsilon` from a kink.
fn smooth_samples(net: &SiameseNet, batch: TrainingBatch<'_>, margin: f64, epsilon: f64) -> Smooth {
    let limit = 10.0 * epsilon;
    match batch {
        TrainingBatch::Contrastive(pairs) => Smooth::Pairs(
            pairs
                .iter()
                .filter(|p| {
                    contrastive_kink_distance(net.forward(&p.first), net.forward(&p.second), p.label, margin) >= limit
                })
                .cloned()
                .collect(),
        ),
        TrainingBatch::Triplet(triplets) => Smooth::Triplets(
            triplets
                .iter()
                .filter(|t| {
                    triplet_kink_distance(
                        net.forward(&t.anchor),
                        net.forward(&t.positive),
                        net.forward(&t.negative),
                        margin,
                    ) >= limit
                })
                .cloned()
                .collect(),
        ),
    }
}

enum Smooth {
    Pairs(Vec<TrainingPair>),
    Triplets(Vec<TrainingTriplet>),
}

impl Smooth {
    fn batch(&self) -> TrainingBatch<'_> {
        match self {
            Smooth::Pairs(p) => TrainingBatch::Contrastive(p),
            Smooth::Triplets(t) => TrainingBatch::Triplet(t),
        }
    }
}

/// Largest relative error between `analytic` and central finite
/// differences of the mean batch loss, over every parameter. Relative error
/// is `|a - n| / max(|a|, |n|, GRADIENT_FLOOR)`; both zero counts as zero.
/// Samples near a non-smooth point must be filtered out by the caller
/// (see [`gradient_check`]).
pub fn compare_gradients(
    net: &SiameseNet,
    batch: TrainingBatch<'_>,
    margin: f64,
    epsilon: f64,
    analytic: &Gradients,
) -> f64 {
    let analytic = analytic.flatten();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(k);
        *probe.param_mut(k) = orig + epsilon;
        let up = batch_loss(&probe, batch, margin);
        *probe.param_mut(k) = orig - epsilon;
        let down = batch_loss(&probe, batch, margin);
        *probe.param_mut(k) = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        if a == 0.0 && numeric == 0.0 {
            continue;
        }
        let denom = a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Compare backpropagated gradients with central differences.
///
/// `epsilon` must lie in `[1e-6, 1e-4]`. Samples within `10 * epsilon` of a
/// hinge or absolute-value kink are skipped; an empty remainder yields 0.
pub fn gradient_check(net: &SiameseNet, batch: TrainingBatch<'_>, margin: f64, epsilon: f64) -> f64 {
    assert!((1e-6..=1e-4).contains(&epsilon), "epsilon must lie in [1e-6, 1e-4]");
    let smooth = smooth_samples(net, batch, margin, epsilon);
    let batch = smooth.batch();
    if batch.is_empty() {
        return 0.0;
    }
    let (_, grads) = batch_loss_and_gradient(net, batch, margin);
    compare_gradients(net, batch, margin, epsilon, &grads)
}
