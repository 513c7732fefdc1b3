//! Block partitioning of a layered model and assembly of the per-step
//! sub-models used by progressive shrinking and growing.
//!
//! Steps and blocks are numbered `1..=T`, front to back.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::nn::{Activation, DenseLayer, NnError, ParamVector};

#[derive(Debug, Error, PartialEq)]
pub enum BlockError {
    #[error("cannot split {layers} hidden layers into {blocks} blocks")]
    TooManyBlocks { layers: usize, blocks: usize },
    #[error("at least 2 blocks are required, got {0}")]
    TooFewBlocks(usize),
    #[error("step {step} is outside 1..={blocks}")]
    StepOutOfRange { step: usize, blocks: usize },
    #[error("shrinking stops at block 2, cannot run step {0}")]
    ShrinkingStepTooEarly(usize),
    #[error("block {0} is not well trained yet")]
    WrongStepOrder(usize),
    #[error("no output module available for step {0}")]
    MissingBasicLayers(usize),
    #[error("initialization snapshot for block {0} already stored")]
    SnapshotExists(usize),
    #[error("layer widths do not match block {0}")]
    WidthMismatch(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, BlockError>;

/// Dimensions of a plain MLP classifier: `input → hidden… → classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelLayout {
    pub fn hidden_shape(&self, i: usize) -> (usize, usize) {
        let fan_in = if i == 0 { self.input_dim } else { self.hidden[i - 1] };
        (fan_in, self.hidden[i])
    }

    pub fn head_fan_in(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    /// Fresh randomly initialized layer stack (hidden layers + head).
    pub fn init_layers<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DenseLayer> {
        let mut layers: Vec<DenseLayer> = (0..self.hidden.len())
            .map(|i| {
                let (a, b) = self.hidden_shape(i);
                DenseLayer::random(a, b, Activation::Relu, rng)
            })
            .collect();
        layers.push(DenseLayer::random(self.head_fan_in(), self.classes, Activation::Softmax, rng));
        layers
    }

    pub fn param_count(&self) -> usize {
        let hidden: usize = (0..self.hidden.len())
            .map(|i| {
                let (a, b) = self.hidden_shape(i);
                a * b + b
            })
            .sum();
        hidden + self.head_fan_in() * self.classes + self.classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    ranges: Vec<Range<usize>>,
    widths: Vec<(usize, usize)>,
}

impl BlockPlan {
    pub fn blocks(&self) -> usize {
        self.ranges.len()
    }

    /// Hidden-layer indices of block `t`.
    pub fn range(&self, t: usize) -> Range<usize> {
        self.ranges[t - 1].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// `(input width, output width)` of block `t`.
    pub fn widths(&self, t: usize) -> (usize, usize) {
        self.widths[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.blocks() {
            return Err(BlockError::StepOutOfRange {
                step: t,
                blocks: self.blocks(),
            });
        }
        Ok(())
    }
}

/// Near-even split of the hidden layers into `blocks` contiguous groups;
/// the first `layers % blocks` groups get one extra layer.
pub fn partition(layout: &ModelLayout, blocks: usize) -> Result<BlockPlan> {
    let n = layout.hidden.len();
    if blocks < 2 {
        return Err(BlockError::TooFewBlocks(blocks));
    }
    if blocks > n {
        return Err(BlockError::TooManyBlocks { layers: n, blocks });
    }
    let (base, extra) = (n / blocks, n % blocks);
    let mut ranges = Vec::with_capacity(blocks);
    let mut start = 0;
    for b in 0..blocks {
        let len = base + usize::from(b < extra);
        ranges.push(start..start + len);
        start += len;
    }
    let widths = ranges
        .iter()
        .map(|r| (layout.hidden_shape(r.start).0, layout.hidden[r.end - 1]))
        .collect();
    Ok(BlockPlan { ranges, widths })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    Untrained,
    Active,
    /// Trained during shrinking, not yet revisited by growing.
    Frozen,
    WellTrained,
}

impl BlockState {
    pub fn code(self) -> u8 {
        match self {
            BlockState::Untrained => 0,
            BlockState::Active => 1,
            BlockState::Frozen => 2,
            BlockState::WellTrained => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => BlockState::Untrained,
            1 => BlockState::Active,
            2 => BlockState::Frozen,
            3 => BlockState::WellTrained,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shrinking,
    Growing,
    Baseline,
    Distill,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Shrinking => "shrinking",
            Stage::Growing => "growing",
            Stage::Baseline => "baseline",
            Stage::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Prefix { block: usize },
    Active { block: usize },
    Basic { block: usize },
    /// Untrained linear stand-in for all later blocks (no-shrinking ablation).
    Adapter,
    Head,
}

/// A stage/step-specific trainable view of the global model.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    pub stage: Stage,
    pub step: usize,
    pub layers: Vec<DenseLayer>,
    pub roles: Vec<LayerRole>,
    pub trainable: Vec<bool>,
}

impl SubModel {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.masked_param_count(&self.trainable)
    }

    pub fn masked_param_count(&self, mask: &[bool]) -> usize {
        self.layers
            .iter()
            .zip(mask)
            .filter(|(_, &t)| t)
            .map(|(l, _)| l.param_count())
            .sum()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::fan_out)
    }

    /// Mask with only the classifier head trainable.
    pub fn head_only_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.layers.len()];
        if let Some(last) = m.last_mut() {
            *last = true;
        }
        m
    }

    pub fn head_param_count(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::param_count)
    }

    /// Concatenated parameters of the layers selected by `mask`.
    pub fn slice(&self, mask: &[bool]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.masked_param_count(mask));
        for (l, _) in self.layers.iter().zip(mask).filter(|(_, &t)| t) {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_slice(&mut self, mask: &[bool], values: &[f64]) -> Result<()> {
        if values.len() != self.masked_param_count(mask) {
            return Err(NnError::LayoutMismatch.into());
        }
        let mut off = 0;
        for (l, _) in self.layers.iter_mut().zip(mask).filter(|(_, &t)| t) {
            let n = l.param_count();
            l.read_params(&values[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    pub fn trainable_slice(&self) -> Vec<f64> {
        self.slice(&self.trainable)
    }

    pub fn set_trainable_slice(&mut self, values: &[f64]) -> Result<()> {
        let mask = self.trainable.clone();
        self.set_slice(&mask, values)
    }

    /// Parameters of the block being trained (the freeze-control target).
    pub fn active_block_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (l, r) in self.layers.iter().zip(&self.roles) {
            if matches!(r, LayerRole::Active { .. }) {
                l.write_params(&mut out);
            }
        }
        out
    }

    pub fn prefix_len(&self) -> usize {
        self.roles
            .iter()
            .take_while(|r| matches!(r, LayerRole::Prefix { .. }))
            .count()
    }
}

/// The global model: hidden blocks, shared head, per-block training state and
/// the artifacts harvested by shrinking.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    layout: ModelLayout,
    plan: BlockPlan,
    hidden: Vec<DenseLayer>,
    head: DenseLayer,
    states: Vec<BlockState>,
    init_snapshots: Vec<Option<Vec<DenseLayer>>>,
    basic_layers: Vec<Option<DenseLayer>>,
    adapter: Option<DenseLayer>,
}

impl GlobalModel {
    pub fn new<R: Rng + ?Sized>(layout: ModelLayout, blocks: usize, rng: &mut R) -> Result<Self> {
        let plan = partition(&layout, blocks)?;
        let mut layers = layout.init_layers(rng);
        let head = layers.pop().expect("head layer");
        Ok(Self {
            layout,
            plan,
            hidden: layers,
            head,
            states: vec![BlockState::Untrained; blocks],
            init_snapshots: vec![None; blocks],
            basic_layers: vec![None; blocks],
            adapter: None,
        })
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn plan(&self) -> &BlockPlan {
        &self.plan
    }

    pub fn blocks(&self) -> usize {
        self.plan.blocks()
    }

    pub fn hidden(&self) -> &[DenseLayer] {
        &self.hidden
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn state(&self, t: usize) -> BlockState {
        self.states[t - 1]
    }

    pub fn states(&self) -> &[BlockState] {
        &self.states
    }

    pub fn block_layers(&self, t: usize) -> &[DenseLayer] {
        &self.hidden[self.plan.range(t)]
    }

    pub fn basic_layer(&self, t: usize) -> Option<&DenseLayer> {
        self.basic_layers[t - 1].as_ref()
    }

    pub fn init_snapshot(&self, t: usize) -> Option<&[DenseLayer]> {
        self.init_snapshots[t - 1].as_deref()
    }

    pub fn basic_layer_count(&self) -> usize {
        self.basic_layers.iter().flatten().count()
    }

    pub fn snapshot_count(&self) -> usize {
        self.init_snapshots.iter().flatten().count()
    }

    /// Hidden layers followed by the head: the original architecture.
    pub fn final_layers(&self) -> Vec<DenseLayer> {
        let mut v = self.hidden.clone();
        v.push(self.head.clone());
        v
    }

    /// Every parameter the global model holds, in a fixed order: hidden
    /// layers, head, basic layers, adapter, snapshots.
    pub fn all_params(&self) -> Vec<f64> {
        let mut out = ParamVector::pack(&self.final_layers()).data;
        for l in self.basic_layers.iter().flatten() {
            l.write_params(&mut out);
        }
        if let Some(a) = &self.adapter {
            a.write_params(&mut out);
        }
        for snap in self.init_snapshots.iter().flatten() {
            for l in snap {
                l.write_params(&mut out);
            }
        }
        out
    }

    pub fn set_block_layers(&mut self, t: usize, layers: &[DenseLayer]) -> Result<()> {
        self.plan.check_step(t)?;
        let range = self.plan.range(t);
        if layers.len() != range.len()
            || layers
                .iter()
                .zip(&self.hidden[range.clone()])
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(BlockError::WidthMismatch(t));
        }
        self.hidden[range].clone_from_slice(layers);
        Ok(())
    }

    /// Stores `θ_t^ini`. A snapshot is write-once.
    pub fn snapshot_init(&mut self, t: usize, layers: &[DenseLayer]) -> Result<()> {
        self.plan.check_step(t)?;
        if self.init_snapshots[t - 1].is_some() {
            return Err(BlockError::SnapshotExists(t));
        }
        let range = self.plan.range(t);
        if layers.len() != range.len()
            || layers
                .iter()
                .zip(&self.hidden[range])
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(BlockError::WidthMismatch(t));
        }
        self.init_snapshots[t - 1] = Some(layers.to_vec());
        Ok(())
    }

    pub fn set_basic_layer(&mut self, t: usize, layer: DenseLayer) -> Result<()> {
        self.plan.check_step(t)?;
        if (layer.fan_in(), layer.fan_out()) != self.plan.widths(t) {
            return Err(BlockError::WidthMismatch(t));
        }
        self.basic_layers[t - 1] = Some(layer);
        Ok(())
    }

    /// Installs (or clears) the linear output adapter used when growing
    /// without basic layers.
    pub fn set_adapter(&mut self, adapter: Option<DenseLayer>) {
        self.adapter = adapter;
    }

    pub fn begin_shrinking_step(&mut self, t: usize) -> Result<()> {
        self.plan.check_step(t)?;
        if t < 2 {
            return Err(BlockError::ShrinkingStepTooEarly(t));
        }
        self.states[t - 1] = BlockState::Active;
        Ok(())
    }

    pub fn end_shrinking_step(&mut self, t: usize) {
        self.states[t - 1] = BlockState::Frozen;
    }

    /// Marks block `t` active and loads `θ_t^ini` into it when one exists.
    pub fn begin_growing_step(&mut self, t: usize) -> Result<()> {
        self.plan.check_step(t)?;
        if let Some(b) = (1..t).find(|&b| self.state(b) != BlockState::WellTrained) {
            return Err(BlockError::WrongStepOrder(b));
        }
        if let Some(snap) = self.init_snapshots[t - 1].clone() {
            self.set_block_layers(t, &snap)?;
        }
        self.states[t - 1] = BlockState::Active;
        Ok(())
    }

    pub fn end_growing_step(&mut self, t: usize) {
        self.states[t - 1] = BlockState::WellTrained;
    }

    fn push_block(&self, t: usize, active: bool, sub: &mut SubModel) {
        for l in self.block_layers(t) {
            sub.layers.push(l.clone());
            sub.roles.push(if active {
                LayerRole::Active { block: t }
            } else {
                LayerRole::Prefix { block: t }
            });
            sub.trainable.push(active);
        }
    }

    fn push_output_module(&self, t: usize, sub: &mut SubModel) -> Result<()> {
        let blocks = self.blocks();
        if t < blocks {
            let basics: Option<Vec<&DenseLayer>> =
                (t + 1..=blocks).map(|b| self.basic_layer(b)).collect();
            match (basics, &self.adapter) {
                (Some(basics), _) => {
                    for (b, l) in (t + 1..=blocks).zip(basics) {
                        sub.layers.push(l.clone());
                        sub.roles.push(LayerRole::Basic { block: b });
                        sub.trainable.push(true);
                    }
                }
                (None, Some(adapter)) if adapter.fan_in() == self.plan.widths(t).1 => {
                    sub.layers.push(adapter.clone());
                    sub.roles.push(LayerRole::Adapter);
                    sub.trainable.push(true);
                }
                _ => return Err(BlockError::MissingBasicLayers(t)),
            }
        }
        sub.layers.push(self.head.clone());
        sub.roles.push(LayerRole::Head);
        sub.trainable.push(true);
        Ok(())
    }

    fn empty_sub(stage: Stage, step: usize) -> SubModel {
        SubModel {
            stage,
            step,
            layers: Vec::new(),
            roles: Vec::new(),
            trainable: Vec::new(),
        }
    }

    /// `[θ*_1,F … θ*_{t−1},F, θ_t, θ_{t+1,b} … θ_{T,b}, θ_L]`
    pub fn assemble_growing(&self, t: usize) -> Result<SubModel> {
        self.plan.check_step(t)?;
        if let Some(b) = (1..t).find(|&b| self.state(b) != BlockState::WellTrained) {
            return Err(BlockError::WrongStepOrder(b));
        }
        let mut sub = Self::empty_sub(Stage::Growing, t);
        for b in 1..t {
            self.push_block(b, false, &mut sub);
        }
        self.push_block(t, true, &mut sub);
        self.push_output_module(t, &mut sub)?;
        Ok(sub)
    }

    /// `[θ_1,F … θ_{t−1},F, θ_t, θ_{t+1,b} … θ_{T,b}, θ_L]` with the prefix
    /// still at its random initialization.
    pub fn assemble_shrinking(&self, t: usize) -> Result<SubModel> {
        self.plan.check_step(t)?;
        if t < 2 {
            return Err(BlockError::ShrinkingStepTooEarly(t));
        }
        let mut sub = Self::empty_sub(Stage::Shrinking, t);
        for b in 1..t {
            self.push_block(b, false, &mut sub);
        }
        self.push_block(t, true, &mut sub);
        if t < self.blocks() && (t + 1..=self.blocks()).any(|b| self.basic_layer(b).is_none()) {
            return Err(BlockError::MissingBasicLayers(t));
        }
        self.push_output_module(t, &mut sub)?;
        Ok(sub)
    }

    /// Copies the trainable layers of `sub` back into the global model.
    /// Prefix layers are never written.
    pub fn write_back(&mut self, sub: &SubModel) -> Result<()> {
        let mut active: Vec<DenseLayer> = Vec::new();
        let mut active_block = None;
        for ((layer, role), &trainable) in sub.layers.iter().zip(&sub.roles).zip(&sub.trainable) {
            if !trainable {
                continue;
            }
            match *role {
                LayerRole::Active { block } => {
                    active_block = Some(block);
                    active.push(layer.clone());
                }
                LayerRole::Basic { block } => self.set_basic_layer(block, layer.clone())?,
                LayerRole::Adapter => self.adapter = Some(layer.clone()),
                LayerRole::Head => {
                    if layer.shape() != self.head.shape() {
                        return Err(BlockError::WidthMismatch(0));
                    }
                    self.head = layer.clone();
                }
                LayerRole::Prefix { .. } => {}
            }
        }
        if let Some(b) = active_block {
            self.set_block_layers(b, &active)?;
        }
        Ok(())
    }
}

/// The full layer stack as a single all-trainable sub-model.
pub fn full_submodel(layers: Vec<DenseLayer>) -> SubModel {
    let n = layers.len();
    let mut roles = vec![LayerRole::Active { block: 1 }; n];
    if let Some(r) = roles.last_mut() {
        *r = LayerRole::Head;
    }
    SubModel {
        stage: Stage::Baseline,
        step: 1,
        layers,
        roles,
        trainable: vec![true; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{backward, cross_entropy_loss, forward, CachePolicy, Tensor2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(hidden: &[usize]) -> ModelLayout {
        ModelLayout {
            input_dim: 5,
            hidden: hidden.to_vec(),
            classes: 3,
        }
    }

    /// Exhaustive oracle: among all compositions of `n` into `t` positive
    /// parts with max−min ≤ 1, pick the lexicographically largest.
    fn enumerate_split(n: usize, t: usize) -> Vec<usize> {
        fn rec(n: usize, t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if t == 0 {
                if n == 0 {
                    out.push(cur.clone());
                }
                return;
            }
            for k in 1..=n {
                cur.push(k);
                rec(n - k, t - 1, cur, out);
                cur.pop();
            }
        }
        let mut all = Vec::new();
        rec(n, t, &mut Vec::new(), &mut all);
        all.retain(|c| c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        all.into_iter().max().unwrap()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition(&layout(&[4; 8]), 4).unwrap().sizes(), vec![2, 2, 2, 2]);
        assert_eq!(partition(&layout(&[4; 9]), 4).unwrap().sizes(), vec![3, 2, 2, 2]);
        assert_eq!(enumerate_split(9, 4), vec![3, 2, 2, 2]);
        assert_eq!(partition(&layout(&[4; 4]), 4).unwrap().sizes(), vec![1, 1, 1, 1]);
        for n in 2..10 {
            for t in 2..=n {
                assert_eq!(partition(&layout(&vec![4; n]), t).unwrap().sizes(), enumerate_split(n, t));
            }
        }
    }

    #[test]
    fn partition_rejects_bad_block_counts() {
        assert_eq!(
            partition(&layout(&[4; 3]), 4).unwrap_err(),
            BlockError::TooManyBlocks { layers: 3, blocks: 4 }
        );
        assert_eq!(partition(&layout(&[4; 3]), 1).unwrap_err(), BlockError::TooFewBlocks(1));
    }

    #[test]
    fn partition_widths_chain() {
        let plan = partition(&layout(&[8, 7, 6, 5, 4]), 3).unwrap();
        assert_eq!(plan.widths(1), (5, 7));
        assert_eq!(plan.widths(2), (7, 5));
        assert_eq!(plan.widths(3), (5, 4));
    }

    fn model_with_basics(hidden: &[usize], t: usize, seed: u64) -> GlobalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = GlobalModel::new(layout(hidden), t, &mut rng).unwrap();
        for b in 2..=t {
            let (i, o) = m.plan().widths(b);
            m.set_basic_layer(b, DenseLayer::random(i, o, Activation::Identity, &mut rng)).unwrap();
        }
        m
    }

    #[test]
    fn growing_step_one_structure() {
        let m = model_with_basics(&[6, 6, 4], 3, 1);
        let sub = m.assemble_growing(1).unwrap();
        assert_eq!(
            sub.roles,
            vec![
                LayerRole::Active { block: 1 },
                LayerRole::Basic { block: 2 },
                LayerRole::Basic { block: 3 },
                LayerRole::Head
            ]
        );
        assert!(sub.trainable.iter().all(|&t| t));
        assert_eq!(sub.prefix_len(), 0);
    }

    #[test]
    fn growing_last_step_has_no_basic_layers() {
        let mut m = model_with_basics(&[6, 6, 4], 3, 2);
        for t in 1..3 {
            m.begin_growing_step(t).unwrap();
            m.end_growing_step(t);
        }
        let sub = m.assemble_growing(3).unwrap();
        assert!(!sub.roles.iter().any(|r| matches!(r, LayerRole::Basic { .. })));
        assert_eq!(sub.trainable, vec![false, false, true, true]);
        assert_eq!(sub.layers, m.final_layers());
    }

    #[test]
    fn growing_prefix_gets_zero_gradient() {
        let mut m = model_with_basics(&[6, 6, 4], 3, 3);
        m.begin_growing_step(1).unwrap();
        m.end_growing_step(1);
        let sub = m.assemble_growing(2).unwrap();
        let x = Tensor2::from_vec(2, 5, vec![0.3, -0.1, 0.9, 0.4, -0.7, 0.2, 0.5, -0.3, 0.8, 0.1]).unwrap();
        let (y, cache) = forward(&sub.layers, &x, CachePolicy::StoreTrainable(&sub.trainable)).unwrap();
        let (_, dl) = cross_entropy_loss(&y, &[0, 2]).unwrap();
        let g = backward(&sub.layers, &cache, &dl, &sub.trainable).unwrap();
        assert!(g.layer(0).iter().all(|&v| v == 0.0));
        assert!(g.layer(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn growing_requires_previous_blocks() {
        let m = model_with_basics(&[6, 6, 4], 3, 4);
        assert_eq!(m.assemble_growing(2).unwrap_err(), BlockError::WrongStepOrder(1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bare = GlobalModel::new(layout(&[6, 6, 4]), 3, &mut rng).unwrap();
        assert_eq!(bare.assemble_growing(1).unwrap_err(), BlockError::MissingBasicLayers(1));
    }

    #[test]
    fn shrinking_structure() {
        let m = model_with_basics(&[6, 6, 4], 3, 5);
        let last = m.assemble_shrinking(3).unwrap();
        assert_eq!(last.layers, m.final_layers());
        assert_eq!(last.trainable, vec![false, false, true, true]);

        let two = m.assemble_shrinking(2).unwrap();
        assert_eq!(
            two.roles,
            vec![
                LayerRole::Prefix { block: 1 },
                LayerRole::Active { block: 2 },
                LayerRole::Basic { block: 3 },
                LayerRole::Head
            ]
        );
        assert_eq!(two.trainable, vec![false, true, true, true]);
        assert_eq!(m.assemble_shrinking(1).unwrap_err(), BlockError::ShrinkingStepTooEarly(1));
    }

    #[test]
    fn submodels_always_end_in_class_count_and_train_less_than_full() {
        let m = model_with_basics(&[6, 6, 5, 4, 4], 3, 6);
        let full = m.layout().param_count();
        for t in 2..=3 {
            let s = m.assemble_shrinking(t).unwrap();
            assert_eq!(s.output_dim(), 3);
            assert!(s.trainable_param_count() < full);
        }
        let mut m = m;
        for t in 1..=3 {
            m.begin_growing_step(t).unwrap();
            let s = m.assemble_growing(t).unwrap();
            assert_eq!(s.output_dim(), 3);
            assert!(s.trainable_param_count() < full, "step {t}");
            m.end_growing_step(t);
        }
    }

    #[test]
    fn snapshot_round_trip_and_guard() {
        let mut m = model_with_basics(&[6, 6, 4], 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let snap = vec![DenseLayer::random(6, 6, Activation::Relu, &mut rng)];
        m.snapshot_init(2, &snap).unwrap();
        assert_eq!(m.snapshot_init(2, &snap).unwrap_err(), BlockError::SnapshotExists(2));
        m.begin_growing_step(1).unwrap();
        m.end_growing_step(1);
        m.begin_growing_step(2).unwrap();
        let sub = m.assemble_growing(2).unwrap();
        assert_eq!(sub.layers[1], snap[0]);
    }

    #[test]
    fn growing_without_snapshot_keeps_random_init() {
        let mut m = model_with_basics(&[6, 6, 4], 3, 8);
        let before = m.block_layers(1).to_vec();
        m.begin_growing_step(1).unwrap();
        assert_eq!(m.block_layers(1), &before[..]);
    }

    #[test]
    fn write_back_leaves_prefix_untouched() {
        let mut m = model_with_basics(&[6, 6, 4], 3, 9);
        let before = m.block_layers(1).to_vec();
        let mut sub = m.assemble_shrinking(2).unwrap();
        let n = sub.trainable_param_count();
        sub.set_trainable_slice(&vec![0.5; n]).unwrap();
        sub.layers[0].bias[0] = 123.0; // prefix, must not propagate
        m.write_back(&sub).unwrap();
        assert_eq!(m.block_layers(1), &before[..]);
        assert!(m.block_layers(2)[0].bias.iter().all(|&v| v == 0.5));
        assert!(m.head().bias.iter().all(|&v| v == 0.5));
        assert!(m.basic_layer(3).unwrap().bias.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn adapter_stands_in_for_missing_basic_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = GlobalModel::new(layout(&[6, 6, 4]), 3, &mut rng).unwrap();
        m.set_adapter(Some(DenseLayer::random(6, 4, Activation::Identity, &mut rng)));
        let sub = m.assemble_growing(1).unwrap();
        assert_eq!(sub.roles, vec![LayerRole::Active { block: 1 }, LayerRole::Adapter, LayerRole::Head]);
    }
}
