//! Analytic peak-memory model for training a (sub-)model on one device.
//!
//! Counts scalars, reports bytes at 4 bytes per scalar:
//! - parameters of every layer held on the device,
//! - one gradient per trainable parameter (plain SGD keeps no other state),
//! - `batch × (fan_in + fan_out)` stored activations per trainable layer,
//! - a transient buffer for the streamed forward pass through frozen layers,
//!   sized by the widest single frozen layer.

use serde::{Deserialize, Serialize};

use crate::blocks::{LayerRole, ModelLayout, SubModel};
use crate::nn::LayerShape;

pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub param_scalars: u64,
    pub grad_scalars: u64,
    pub stored_activation_scalars: u64,
    pub transient_activation_scalars: u64,
}

impl MemoryEstimate {
    pub fn total_scalars(&self) -> u64 {
        self.param_scalars
            + self.grad_scalars
            + self.stored_activation_scalars
            + self.transient_activation_scalars
    }

    pub fn bytes(&self) -> u64 {
        BYTES_PER_SCALAR * self.total_scalars()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceBudget {
    pub capacity_bytes: u64,
}

impl DeviceBudget {
    pub fn affords(&self, est: &MemoryEstimate) -> bool {
        self.capacity_bytes >= est.bytes()
    }
}

/// One layer as the memory model sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFootprint {
    pub shape: LayerShape,
    pub trainable: bool,
    /// Part of a frozen, already-trained prefix whose outputs may be cached.
    pub cacheable: bool,
}

pub fn estimate_layers(layers: &[LayerFootprint], batch: usize, cache_frozen: bool) -> MemoryEstimate {
    let batch = batch as u64;
    let mut est = MemoryEstimate::default();
    for l in layers {
        let params = l.shape.param_count() as u64;
        let acts = batch * (l.shape.fan_in + l.shape.fan_out) as u64;
        if l.trainable {
            est.param_scalars += params;
            est.grad_scalars += params;
            est.stored_activation_scalars += acts;
        } else if !(cache_frozen && l.cacheable) {
            est.param_scalars += params;
            est.transient_activation_scalars = est.transient_activation_scalars.max(acts);
        }
    }
    est
}

fn footprints(sub: &SubModel, mask: &[bool]) -> Vec<LayerFootprint> {
    sub.layers
        .iter()
        .zip(&sub.roles)
        .zip(mask)
        .map(|((l, r), &t)| LayerFootprint {
            shape: l.shape(),
            trainable: t,
            cacheable: !t && matches!(r, LayerRole::Prefix { .. }),
        })
        .collect()
}

/// Peak memory of training `sub` with its own trainable mask.
pub fn estimate(sub: &SubModel, batch: usize, cache_frozen: bool) -> MemoryEstimate {
    estimate_layers(&footprints(sub, &sub.trainable), batch, cache_frozen)
}

/// Peak memory of training only the classifier head of `sub`.
pub fn estimate_head_only(sub: &SubModel, batch: usize, cache_frozen: bool) -> MemoryEstimate {
    estimate_layers(&footprints(sub, &sub.head_only_mask()), batch, cache_frozen)
}

/// End-to-end training of the whole architecture.
pub fn estimate_full(layout: &ModelLayout, batch: usize) -> MemoryEstimate {
    let mut shapes: Vec<LayerShape> = (0..layout.hidden.len())
        .map(|i| {
            let (a, b) = layout.hidden_shape(i);
            LayerShape { fan_in: a, fan_out: b }
        })
        .collect();
    shapes.push(LayerShape {
        fan_in: layout.head_fan_in(),
        fan_out: layout.classes,
    });
    let layers: Vec<LayerFootprint> = shapes
        .into_iter()
        .map(|shape| LayerFootprint {
            shape,
            trainable: true,
            cacheable: false,
        })
        .collect();
    estimate_layers(&layers, batch, false)
}

/// Ids (indices) of the devices whose capacity covers `est`, ascending.
pub fn eligible(budgets: &[DeviceBudget], est: &MemoryEstimate) -> Vec<usize> {
    budgets
        .iter()
        .enumerate()
        .filter(|(_, b)| b.affords(est))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::GlobalModel;
    use crate::nn::{Activation, DenseLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fp(fan_in: usize, fan_out: usize, trainable: bool, cacheable: bool) -> LayerFootprint {
        LayerFootprint {
            shape: LayerShape { fan_in, fan_out },
            trainable,
            cacheable,
        }
    }

    #[test]
    fn single_trainable_layer_by_hand() {
        let e = estimate_layers(&[fp(4, 3, true, false)], 2, false);
        assert_eq!(
            e,
            MemoryEstimate {
                param_scalars: 15,
                grad_scalars: 15,
                stored_activation_scalars: 14,
                transient_activation_scalars: 0
            }
        );
        assert_eq!(e.total_scalars(), 44);
        assert_eq!(e.bytes(), 176);
    }

    #[test]
    fn frozen_layer_has_no_grads_or_stored_activations() {
        let e = estimate_layers(&[fp(4, 3, false, false)], 2, false);
        assert_eq!(e.grad_scalars, 0);
        assert_eq!(e.stored_activation_scalars, 0);
        assert_eq!(e.transient_activation_scalars, 14);
    }

    #[test]
    fn caching_drops_at_least_the_prefix_params() {
        // prefix 30→30 (930 params) dominates a 30→2 trainable head (62 params)
        let layers = [fp(30, 30, false, true), fp(30, 2, true, false)];
        let plain = estimate_layers(&layers, 8, false);
        let cached = estimate_layers(&layers, 8, true);
        assert!(plain.total_scalars() - cached.total_scalars() >= 930);
    }

    #[test]
    fn eligibility_straddle() {
        let est = estimate_layers(&[fp(4, 3, true, false)], 2, false); // 176 bytes
        let budgets: Vec<DeviceBudget> = [100, 175, 176, 177, 1000]
            .iter()
            .map(|&c| DeviceBudget { capacity_bytes: c })
            .collect();
        let oracle: Vec<usize> = budgets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.capacity_bytes >= 176)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(eligible(&budgets, &est), oracle);
        assert_eq!(eligible(&budgets, &est), vec![2, 3, 4]);
        let rich = vec![DeviceBudget { capacity_bytes: 1 << 20 }; 3];
        assert_eq!(eligible(&rich, &est), vec![0, 1, 2]);
        let poor = vec![DeviceBudget { capacity_bytes: 1 }; 3];
        assert!(eligible(&poor, &est).is_empty());
    }

    fn grown_model(hidden: &[usize], t: usize) -> GlobalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = ModelLayout {
            input_dim: 10,
            hidden: hidden.to_vec(),
            classes: 4,
        };
        let mut m = GlobalModel::new(layout, t, &mut rng).unwrap();
        for b in 2..=t {
            let (i, o) = m.plan().widths(b);
            m.set_basic_layer(b, DenseLayer::random(i, o, Activation::Identity, &mut rng)).unwrap();
        }
        m
    }

    #[test]
    fn freezing_and_caching_never_increase_estimate() {
        let mut m = grown_model(&[16, 16, 12, 12, 8, 8], 3);
        for t in 1..=3 {
            m.begin_growing_step(t).unwrap();
            let sub = m.assemble_growing(t).unwrap();
            let base = estimate(&sub, 16, false);
            let cached = estimate(&sub, 16, true);
            assert!(cached.bytes() <= base.bytes());
            // freeze one more trainable layer at the front of the trainable part
            let mut more = sub.clone();
            let first = more.trainable.iter().position(|&x| x).unwrap();
            more.trainable[first] = false;
            assert!(estimate(&more, 16, false).bytes() <= base.bytes());
            assert!(estimate_head_only(&sub, 16, false).bytes() <= base.bytes());
            m.end_growing_step(t);
        }
    }

    #[test]
    fn growing_steps_cost_less_than_end_to_end() {
        let mut m = grown_model(&[16, 16, 12, 12, 8, 8], 3);
        let full = estimate_full(m.layout(), 16);
        assert_eq!(
            full,
            estimate(&crate::blocks::full_submodel(m.final_layers()), 16, false)
        );
        for t in 1..=3 {
            m.begin_growing_step(t).unwrap();
            let sub = m.assemble_growing(t).unwrap();
            assert!(estimate(&sub, 16, false).bytes() < full.bytes(), "step {t}");
            m.end_growing_step(t);
        }
    }
}
