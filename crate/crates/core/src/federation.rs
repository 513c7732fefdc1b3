//! Device pool, memory-aware client selection, local SGD and data-size
//! weighted aggregation.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::blocks::{BlockError, SubModel};
use crate::data::Dataset;
use crate::memory::{self, DeviceBudget};
use crate::nn::{
    self, apply_sgd, backward, cross_entropy_loss, forward, CachePolicy, NnError, SgdConfig,
};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("no device can train step {step} of the {stage} stage, not even the head")]
    NoParticipants { stage: &'static str, step: usize },
    #[error("aggregation needs at least one update")]
    EmptyUpdates,
    #[error("update layouts differ ({expected} vs {got} scalars)")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("participating clients hold no data")]
    ZeroData,
    #[error("device pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Block(#[from] BlockError),
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone)]
pub struct Device {
    pub id: usize,
    pub budget: DeviceBudget,
    pub data: Dataset,
}

#[derive(Debug, Clone)]
pub struct DevicePool {
    devices: Vec<Device>,
}

impl DevicePool {
    /// Builds one device per shard. Shards must form a set partition of the
    /// training set with no empty member.
    pub fn new(train: &Dataset, shards: &[Vec<usize>], budgets: &[DeviceBudget]) -> Result<Self> {
        if shards.len() != budgets.len() {
            return Err(FederationError::Pool(format!(
                "{} shards but {} budgets",
                shards.len(),
                budgets.len()
            )));
        }
        let mut seen = vec![false; train.len()];
        for s in shards {
            if s.is_empty() {
                return Err(FederationError::Pool("empty shard".into()));
            }
            for &i in s {
                if i >= train.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(FederationError::Pool(format!("sample {i} out of range or duplicated")));
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(FederationError::Pool("shards do not cover the training set".into()));
        }
        let devices = shards
            .iter()
            .zip(budgets)
            .enumerate()
            .map(|(id, (s, &budget))| Device {
                id,
                budget,
                data: train.subset(s),
            })
            .collect();
        Ok(Self { devices })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, id: usize) -> &Device {
        &self.devices[id]
    }

    pub fn budgets(&self) -> Vec<DeviceBudget> {
        self.devices.iter().map(|d| d.budget).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.devices.iter().map(|d| d.data.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Devices training the full sub-model.
    pub selected: Vec<usize>,
    /// Devices that only afford the head and train it alone.
    pub fallback: Vec<usize>,
    pub eligible: usize,
    /// Devices able to contribute at all (full sub-model or head only).
    pub capable: usize,
}

impl Selection {
    pub fn participants(&self) -> usize {
        self.selected.len() + self.fallback.len()
    }
}

fn sample_ids<R: Rng + ?Sized>(ids: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(ids.len());
    let mut out: Vec<usize> = index::sample(rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
    out.sort_unstable();
    out
}

/// `selected`: uniform sample of `min(target, |eligible|)` from `eligible`;
/// `fallback`: uniform sample from `head_capable \ eligible` filling the
/// remaining `target − |selected|` places.
pub fn select_from<R: Rng + ?Sized>(
    eligible: &[usize],
    head_capable: &[usize],
    target: usize,
    rng: &mut R,
) -> Selection {
    let selected = sample_ids(eligible, target, rng);
    let rest: Vec<usize> = head_capable
        .iter()
        .copied()
        .filter(|id| eligible.binary_search(id).is_err())
        .collect();
    let fallback = sample_ids(&rest, target - selected.len(), rng);
    Selection {
        selected,
        fallback,
        eligible: eligible.len(),
        capable: eligible.len() + rest.len(),
    }
}

pub fn select_clients<R: Rng + ?Sized>(
    pool: &DevicePool,
    sub: &SubModel,
    batch: usize,
    cache_frozen: bool,
    target: usize,
    rng: &mut R,
) -> Result<Selection> {
    let budgets = pool.budgets();
    let eligible = memory::eligible(&budgets, &memory::estimate(sub, batch, cache_frozen));
    let head = memory::eligible(&budgets, &memory::estimate_head_only(sub, batch, cache_frozen));
    let sel = select_from(&eligible, &head, target, rng);
    if sel.participants() == 0 {
        return Err(FederationError::NoParticipants {
            stage: sub.stage.as_str(),
            step: sub.step,
        });
    }
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Parameters of the layers selected by the training mask, concatenated.
    pub slice: Vec<f64>,
    pub samples: usize,
    /// Mean training loss over the last local epoch.
    pub loss: f64,
    pub flops: u64,
}

/// `cfg.local_epochs` epochs of shuffled minibatch SGD on cross-entropy,
/// updating only the layers selected by `mask`.
pub fn local_train<R: Rng + ?Sized>(
    data: &Dataset,
    sub: &SubModel,
    mask: &[bool],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<LocalUpdate> {
    let mut layers = sub.layers.clone();
    let n = data.len();
    let batch = cfg.batch_size.max(1);
    let shapes: Vec<_> = layers.iter().map(|l| l.shape()).collect();
    let per_sample = nn::train_flops_per_sample(&shapes, mask);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss = 0.0;
    let mut flops = 0u64;
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let x = data.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (out, cache) = forward(&layers, &x, CachePolicy::StoreTrainable(mask))?;
            let (l, dl) = cross_entropy_loss(&out, &y)?;
            let grad = backward(&layers, &cache, &dl, mask)?;
            apply_sgd(&mut layers, &grad, mask, cfg.learning_rate)?;
            epoch_loss += l * chunk.len() as f64;
            flops += per_sample * chunk.len() as u64;
        }
        loss = epoch_loss / n.max(1) as f64;
    }
    if cfg.local_epochs == 0 && n > 0 {
        let (out, _) = forward(&layers, &data.features, CachePolicy::StoreNone)?;
        loss = cross_entropy_loss(&out, &data.labels)?.0;
    }
    let trained = SubModel {
        layers,
        ..sub.clone()
    };
    Ok(LocalUpdate {
        slice: trained.slice(mask),
        samples: n,
        loss,
        flops,
    })
}

/// `|D_n| / Σ_{m∈S} |D_m|` for each participating client.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(FederationError::ZeroData);
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Data-size weighted mean of client slices.
///
/// Computed as `x₁ + Σ wₙ (xₙ − x₁)` so that identical inputs aggregate to
/// exactly themselves.
pub fn aggregate(updates: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let Some(&(base, _)) = updates.first() else {
        return Err(FederationError::EmptyUpdates);
    };
    if let Some((s, _)) = updates.iter().find(|(s, _)| s.len() != base.len()) {
        return Err(FederationError::LayoutMismatch {
            expected: base.len(),
            got: s.len(),
        });
    }
    let sizes: Vec<usize> = updates.iter().map(|u| u.1).collect();
    let weights = aggregation_weights(&sizes)?;
    let mut out = base.to_vec();
    for i in 0..base.len() {
        let dev: f64 = updates
            .iter()
            .zip(&weights)
            .map(|((s, _), w)| w * (s[i] - base[i]))
            .sum();
        out[i] += dev;
    }
    Ok(out)
}

/// SplitMix64 finalizer over two words; used to derive independent,
/// order-free seeds for per-round, per-client randomness.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::full_submodel;
    use crate::data::gen_gaussian_mixture;
    use crate::nn::{Activation, DenseLayer, ParamVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn select_all_eligible_takes_target() {
        let ids: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = select_from(&ids, &ids, 20, &mut rng);
        assert_eq!(sel.selected.len(), 20);
        assert!(sel.fallback.is_empty());
        assert_eq!(sel.capable, 100);
    }

    #[test]
    fn few_eligible_are_topped_up_with_head_trainers() {
        let eligible: Vec<usize> = (0..8).collect();
        let head: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = select_from(&eligible, &head, 20, &mut rng);
        assert_eq!(sel.selected, eligible);
        assert_eq!(sel.fallback.len(), 12);
        assert!(sel.fallback.iter().all(|id| *id >= 8));
    }

    #[test]
    fn selection_is_seeded() {
        let ids: Vec<usize> = (0..50).collect();
        let a = select_from(&ids[..5], &ids, 20, &mut ChaCha8Rng::seed_from_u64(7));
        let b = select_from(&ids[..5], &ids, 20, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_examples() {
        let a = [1.5, -2.0];
        assert_eq!(aggregate(&[(&a, 7)]).unwrap(), a.to_vec());
        assert_eq!(aggregate(&[(&[0.0], 1), (&[4.0], 3)]).unwrap(), vec![3.0]);
        let same = [0.1, 0.7, 1e-9];
        assert_eq!(aggregate(&[(&same, 1), (&same, 5), (&same, 3)]).unwrap(), same.to_vec());
        assert!(matches!(aggregate(&[]), Err(FederationError::EmptyUpdates)));
        assert!(matches!(
            aggregate(&[(&[1.0], 1), (&[1.0, 2.0], 1)]),
            Err(FederationError::LayoutMismatch { .. })
        ));
        assert!(matches!(aggregate(&[(&[1.0], 0)]), Err(FederationError::ZeroData)));
    }

    fn tiny_sub(seed: u64) -> SubModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        full_submodel(vec![
            DenseLayer::random(3, 5, Activation::Relu, &mut rng),
            DenseLayer::random(5, 2, Activation::Softmax, &mut rng),
        ])
    }

    #[test]
    fn zero_epochs_or_zero_lr_leave_slice_unchanged() {
        let data = gen_gaussian_mixture(2, 3, 10, 1.0, 0).unwrap();
        let sub = tiny_sub(1);
        let mask = sub.trainable.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SgdConfig { learning_rate: 0.1, batch_size: 4, local_epochs: 0 };
        assert_eq!(local_train(&data, &sub, &mask, &cfg, &mut rng).unwrap().slice, sub.trainable_slice());
        let cfg = SgdConfig { learning_rate: 0.0, batch_size: 4, local_epochs: 3 };
        assert_eq!(local_train(&data, &sub, &mask, &cfg, &mut rng).unwrap().slice, sub.trainable_slice());
    }

    #[test]
    fn full_batch_single_epoch_is_one_sgd_step() {
        let data = gen_gaussian_mixture(2, 3, 6, 1.0, 4).unwrap();
        let sub = tiny_sub(2);
        let cfg = SgdConfig { learning_rate: 0.05, batch_size: data.len(), local_epochs: 1 };
        let upd = local_train(&data, &sub, &sub.trainable, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

        // oracle: one explicit sgd_step on the full-batch gradient (row order
        // does not change a mean gradient beyond rounding)
        let (out, cache) = forward(&sub.layers, &data.features, CachePolicy::StoreAll).unwrap();
        let (_, dl) = cross_entropy_loss(&out, &data.labels).unwrap();
        let g = backward(&sub.layers, &cache, &dl, &sub.trainable).unwrap();
        let p = nn::sgd_step(&ParamVector::pack(&sub.layers), &g, &cfg).unwrap();
        for (a, b) in upd.slice.iter().zip(&p.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_only_mask_changes_only_the_head() {
        let data = gen_gaussian_mixture(2, 3, 10, 1.0, 0).unwrap();
        let sub = tiny_sub(3);
        let mask = sub.head_only_mask();
        let cfg = SgdConfig { learning_rate: 0.1, batch_size: 4, local_epochs: 2 };
        let upd = local_train(&data, &sub, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(upd.slice.len(), sub.head_param_count());
        assert_ne!(upd.slice, sub.slice(&mask));
    }

    #[test]
    fn pool_rejects_non_partitions() {
        let data = gen_gaussian_mixture(2, 2, 3, 1.0, 0).unwrap();
        let b = DeviceBudget { capacity_bytes: 1 };
        assert!(DevicePool::new(&data, &[vec![0, 1, 2], vec![3, 4, 5]], &[b, b]).is_ok());
        assert!(DevicePool::new(&data, &[vec![0, 1, 2], vec![2, 4, 5]], &[b, b]).is_err());
        assert!(DevicePool::new(&data, &[vec![0, 1, 2], vec![4, 5]], &[b, b]).is_err());
        assert!(DevicePool::new(&data, &[vec![0, 1, 2, 3, 4, 5], vec![]], &[b, b]).is_err());
    }

    #[test]
    fn no_capable_device_is_an_error() {
        let data = gen_gaussian_mixture(2, 3, 3, 1.0, 0).unwrap();
        let poor = DeviceBudget { capacity_bytes: 10 };
        let pool = DevicePool::new(&data, &[vec![0, 1, 2], vec![3, 4, 5]], &[poor, poor]).unwrap();
        let err = select_clients(&pool, &tiny_sub(0), 4, false, 20, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(FederationError::NoParticipants { .. })));
    }
}
