//! Dense network engine: exact forward/backward passes, per-layer freeze
//! masks, flat parameter vectors and plain SGD.
//!
//! Everything here is a pure function over value types. A network is just an
//! ordered slice of [`DenseLayer`]s; trainability is a parallel `&[bool]`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing cached activation for layer {layer}")]
    MissingCache { layer: usize },
    #[error("parameter layout mismatch")]
    LayoutMismatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("softmax activation is only permitted on the final layer (layer {0})")]
    SoftmaxNotFinal(usize),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NnError::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("tensor data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the given rows, in order, into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(NnError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    fn t_matmul(&self, other: &Tensor2) -> Tensor2 {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    fn matmul_t(&self, other: &Tensor2) -> Tensor2 {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] =
                    arow.iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Raw logits in the forward pass; the softmax itself is fused into
    /// [`cross_entropy_loss`]. Only valid on the last layer of a stack.
    Softmax,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Softmax => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn from_parts(weights: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(NnError::Shape("layer dimensions must be at least 1".into()));
        }
        if bias.len() != weights.cols() {
            return Err(NnError::Shape(format!(
                "bias of length {} for fan_out {}",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// He initialization for ReLU layers, Xavier-style otherwise; zero bias.
    pub fn random<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(fan_in >= 1 && fan_out >= 1, "layer dimensions must be at least 1");
        let var = match activation {
            Activation::Relu => 2.0 / fan_in as f64,
            _ => 1.0 / fan_in as f64,
        };
        let normal = Normal::new(0.0, var.sqrt()).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor2 {
                rows: fan_in,
                cols: fan_out,
                data,
            },
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            fan_in: self.fan_in(),
            fan_out: self.fan_out(),
        }
    }

    fn apply(&self, input: &Tensor2) -> Result<Tensor2> {
        let mut out = input.matmul(&self.weights)?;
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
                if self.activation == Activation::Relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights.data);
        out.extend_from_slice(&self.bias);
    }

    /// Overwrites this layer's parameters from `src`, which must hold exactly
    /// `param_count()` values.
    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(NnError::LayoutMismatch);
        }
        let nw = self.weights.data.len();
        self.weights.data.copy_from_slice(&src[..nw]);
        self.bias.copy_from_slice(&src[nw..]);
        Ok(())
    }
}

pub fn check_stack(layers: &[DenseLayer]) -> Result<()> {
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].fan_out() != pair[1].fan_in() {
            return Err(NnError::Shape(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].fan_out(),
                i + 1,
                pair[1].fan_in()
            )));
        }
    }
    if let Some(i) = layers
        .iter()
        .take(layers.len().saturating_sub(1))
        .position(|l| l.activation == Activation::Softmax)
    {
        return Err(NnError::SoftmaxNotFinal(i));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Maps each layer to its offset range inside a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn new(shapes: Vec<LayerShape>) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &shapes {
            acc += s.param_count();
            offsets.push(acc);
        }
        Self { shapes, offsets }
    }

    pub fn of(layers: &[DenseLayer]) -> Self {
        Self::new(layers.iter().map(DenseLayer::shape).collect())
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_count(&self) -> usize {
        self.shapes.len()
    }

    pub fn range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }
}

/// Flat parameter (or gradient) array with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn pack(layers: &[DenseLayer]) -> Self {
        let layout = ParamLayout::of(layers);
        let mut data = Vec::with_capacity(layout.len());
        for l in layers {
            l.write_params(&mut data);
        }
        Self { data, layout }
    }

    pub fn unpack_into(&self, layers: &mut [DenseLayer]) -> Result<()> {
        if ParamLayout::of(layers) != self.layout {
            return Err(NnError::LayoutMismatch);
        }
        for (i, l) in layers.iter_mut().enumerate() {
            l.read_params(&self.data[self.layout.range(i)])?;
        }
        Ok(())
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.data[self.layout.range(i)]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.range(i);
        &mut self.data[r]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            local_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CachePolicy<'a> {
    /// Keep only what backward needs for the given trainable mask.
    StoreTrainable(&'a [bool]),
    StoreAll,
    StoreNone,
}

#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub input: Option<Tensor2>,
    pub output: Option<Tensor2>,
}

#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    pub layers: Vec<LayerCache>,
}

impl ActivationCache {
    /// Number of scalars currently held.
    pub fn stored_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|c| {
                c.input.as_ref().map_or(0, |t| t.data.len())
                    + c.output.as_ref().map_or(0, |t| t.data.len())
            })
            .sum()
    }
}

pub fn forward(
    layers: &[DenseLayer],
    input: &Tensor2,
    policy: CachePolicy<'_>,
) -> Result<(Tensor2, ActivationCache)> {
    check_stack(layers)?;
    if let Some(first) = layers.first() {
        if input.cols() != first.fan_in() {
            return Err(NnError::Shape(format!(
                "input has {} columns, first layer expects {}",
                input.cols(),
                first.fan_in()
            )));
        }
    }
    if let CachePolicy::StoreTrainable(mask) = policy {
        if mask.len() != layers.len() {
            return Err(NnError::Shape("trainable mask length".into()));
        }
    }
    // Layers at or after the first trainable one take part in backprop.
    let first_trainable = match policy {
        CachePolicy::StoreTrainable(mask) => mask.iter().position(|&t| t),
        _ => None,
    };

    let mut cache = ActivationCache {
        layers: vec![LayerCache::default(); layers.len()],
    };
    let mut current = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let out = layer.apply(&current)?;
        let (keep_in, keep_out) = match policy {
            CachePolicy::StoreAll => (true, true),
            CachePolicy::StoreNone => (false, false),
            CachePolicy::StoreTrainable(mask) => match first_trainable {
                Some(f) if i >= f => (
                    mask[i],
                    layer.activation == Activation::Relu,
                ),
                _ => (false, false),
            },
        };
        if keep_in {
            cache.layers[i].input = Some(current);
        }
        if keep_out {
            cache.layers[i].output = Some(out.clone());
        }
        current = out;
    }
    Ok((current, cache))
}

/// Backpropagates `loss_grad` (gradient w.r.t. the last layer's output, i.e.
/// the logits for a fused-softmax head) and returns a full-layout gradient
/// whose frozen-layer entries are exactly zero.
pub fn backward(
    layers: &[DenseLayer],
    cache: &ActivationCache,
    loss_grad: &Tensor2,
    trainable: &[bool],
) -> Result<ParamVector> {
    if trainable.len() != layers.len() || cache.layers.len() != layers.len() {
        return Err(NnError::Shape("mask/cache length does not match layers".into()));
    }
    let mut grad = ParamVector::zeros(ParamLayout::of(layers));
    let Some(first) = trainable.iter().position(|&t| t) else {
        return Ok(grad);
    };
    let Some(last) = layers.last() else {
        return Ok(grad);
    };
    if loss_grad.cols() != last.fan_out() {
        return Err(NnError::Shape("loss gradient width".into()));
    }

    let mut upstream = loss_grad.clone();
    for i in (first..layers.len()).rev() {
        let layer = &layers[i];
        let c = &cache.layers[i];
        let mut delta = upstream;
        if layer.activation == Activation::Relu {
            let out = c.output.as_ref().ok_or(NnError::MissingCache { layer: i })?;
            if out.rows() != delta.rows() {
                return Err(NnError::Shape("cached batch size".into()));
            }
            for (d, o) in delta.data.iter_mut().zip(&out.data) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        if trainable[i] {
            let input = c.input.as_ref().ok_or(NnError::MissingCache { layer: i })?;
            if input.rows() != delta.rows() {
                return Err(NnError::Shape("cached batch size".into()));
            }
            let dw = input.t_matmul(&delta);
            let g = grad.layer_mut(i);
            let nw = dw.data.len();
            g[..nw].copy_from_slice(&dw.data);
            for r in 0..delta.rows() {
                for (gb, d) in g[nw..].iter_mut().zip(delta.row(r)) {
                    *gb += d;
                }
            }
        }
        upstream = if i > first {
            delta.matmul_t(&layer.weights)
        } else {
            Tensor2::zeros(0, 0)
        };
    }
    Ok(grad)
}

pub fn sgd_step(params: &ParamVector, grad: &ParamVector, cfg: &SgdConfig) -> Result<ParamVector> {
    if params.layout != grad.layout {
        return Err(NnError::LayoutMismatch);
    }
    let data = params
        .data
        .iter()
        .zip(&grad.data)
        .map(|(p, g)| p - cfg.learning_rate * g)
        .collect();
    Ok(ParamVector {
        data,
        layout: params.layout.clone(),
    })
}

/// In-place SGD update of the trainable layers of a stack.
pub fn apply_sgd(layers: &mut [DenseLayer], grad: &ParamVector, trainable: &[bool], lr: f64) -> Result<()> {
    if grad.layout != ParamLayout::of(layers) {
        return Err(NnError::LayoutMismatch);
    }
    for (i, layer) in layers.iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let g = grad.layer(i);
        let nw = layer.weights.data.len();
        for (p, d) in layer.weights.data.iter_mut().zip(&g[..nw]) {
            *p -= lr * d;
        }
        for (p, d) in layer.bias.iter_mut().zip(&g[nw..]) {
            *p -= lr * d;
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_loss(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(NnError::Shape("label count differs from batch size".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::LabelOutOfRange { label, classes: c });
    }
    let mut grad = Tensor2::zeros(n, c);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let (arg, m) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        // Σ_{j≠argmax} exp(z_j − m), so that log-sum-exp = m + ln_1p(rest).
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        let lse = m + rest.ln_1p();
        total += lse - row[y];
        let g = &mut grad.data[r * c..(r + 1) * c];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gj = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean over samples of the squared Euclidean distance between rows.
pub fn squared_error_loss(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(NnError::Shape("prediction/target shapes differ".into()));
    }
    let n = pred.rows().max(1) as f64;
    let mut grad = Tensor2::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        total += d * d;
        *g = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
        .0
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(layers: &[DenseLayer], features: &Tensor2, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (out, _) = forward(layers, features, CachePolicy::StoreNone)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(out.row(r)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Multiply-add FLOPs (2 per MAC) for one sample through the stack, with
/// backward work for the part of the stack that gradients flow through.
pub fn train_flops_per_sample(shapes: &[LayerShape], trainable: &[bool]) -> u64 {
    let fwd: u64 = shapes.iter().map(|s| 2 * (s.fan_in * s.fan_out) as u64).sum();
    let Some(first) = trainable.iter().position(|&t| t) else {
        return fwd;
    };
    let mut bwd = 0u64;
    for i in first..shapes.len() {
        let mac = (shapes[i].fan_in * shapes[i].fan_out) as u64;
        if trainable[i] {
            bwd += 2 * mac;
        }
        if i > first {
            bwd += 2 * mac;
        }
    }
    fwd + bwd
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: &[&[f64]], b: &[f64], a: Activation) -> DenseLayer {
        DenseLayer::from_parts(Tensor2::from_rows(w).unwrap(), b.to_vec(), a).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let l = layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity);
        let x = Tensor2::from_rows(&[&[1.0, 2.0]]).unwrap();
        let (y, _) = forward(&[l], &x, CachePolicy::StoreNone).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clips_negative_preactivation() {
        let l = layer(&[&[1.0], &[-1.0]], &[0.0], Activation::Relu);
        let x = Tensor2::from_rows(&[&[1.0, 2.0]]).unwrap();
        let (y, _) = forward(&[l], &x, CachePolicy::StoreNone).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn chained_identity_layers_equal_composed_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DenseLayer::random(3, 3, Activation::Identity, &mut rng);
        let b = DenseLayer::random(3, 3, Activation::Identity, &mut rng);
        let x = Tensor2::from_vec(3, 3, (0..9).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let (y, _) = forward(&[a.clone(), b.clone()], &x, CachePolicy::StoreNone).unwrap();
        let expect = x.matmul(&a.weights).unwrap().matmul(&b.weights).unwrap();
        for (u, v) in y.data().iter().zip(expect.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let l = layer(&[&[1.0], &[1.0]], &[0.0], Activation::Identity);
        let x = Tensor2::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            forward(std::slice::from_ref(&l), &x, CachePolicy::StoreNone),
            Err(NnError::Shape(_))
        ));
        let head = layer(&[&[1.0]], &[0.0], Activation::Softmax);
        let x = Tensor2::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(
            forward(&[layer(&[&[1.0], &[1.0]], &[0.0], Activation::Softmax), head], &x, CachePolicy::StoreNone)
                .unwrap_err(),
            NnError::SoftmaxNotFinal(0)
        );
    }

    #[test]
    fn scalar_network_gradient() {
        // y = w·x, w = 2, x = 3, L = ½y² → dL/dw = y·x = 18
        let l = layer(&[&[2.0]], &[0.0], Activation::Identity);
        let x = Tensor2::from_rows(&[&[3.0]]).unwrap();
        let mask = [true];
        let (y, cache) = forward(std::slice::from_ref(&l), &x, CachePolicy::StoreTrainable(&mask)).unwrap();
        let g = backward(&[l], &cache, &y, &mask).unwrap();
        assert_eq!(g.data[0], 18.0);
    }

    #[test]
    fn all_frozen_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![
            DenseLayer::random(3, 4, Activation::Relu, &mut rng),
            DenseLayer::random(4, 2, Activation::Softmax, &mut rng),
        ];
        let mask = [false, false];
        let x = Tensor2::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let (y, cache) = forward(&layers, &x, CachePolicy::StoreTrainable(&mask)).unwrap();
        assert_eq!(cache.stored_scalars(), 0);
        let (_, dl) = cross_entropy_loss(&y, &[0, 1]).unwrap();
        let g = backward(&layers, &cache, &dl, &mask).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_prefix_activations_are_not_stored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = vec![
            DenseLayer::random(3, 4, Activation::Relu, &mut rng),
            DenseLayer::random(4, 2, Activation::Softmax, &mut rng),
        ];
        let mask = [false, true];
        let x = Tensor2::zeros(5, 3);
        let (_, cache) = forward(&layers, &x, CachePolicy::StoreTrainable(&mask)).unwrap();
        assert!(cache.layers[0].input.is_none() && cache.layers[0].output.is_none());
        assert!(cache.layers[1].input.is_some());
    }

    #[test]
    fn missing_cache_is_an_error() {
        let l = layer(&[&[2.0]], &[0.0], Activation::Identity);
        let x = Tensor2::from_rows(&[&[3.0]]).unwrap();
        let (y, cache) = forward(std::slice::from_ref(&l), &x, CachePolicy::StoreNone).unwrap();
        assert_eq!(
            backward(&[l], &cache, &y, &[true]).unwrap_err(),
            NnError::MissingCache { layer: 0 }
        );
    }

    #[test]
    fn sgd_step_definition() {
        let layout = ParamLayout::new(vec![LayerShape { fan_in: 1, fan_out: 1 }]);
        let p = ParamVector { data: vec![1.0, 1.0], layout: layout.clone() };
        let g = ParamVector { data: vec![10.0, 0.0], layout: layout.clone() };
        let cfg = SgdConfig { learning_rate: 0.01, ..SgdConfig::default() };
        assert_eq!(sgd_step(&p, &g, &cfg).unwrap().data, vec![0.9, 1.0]);
        assert_eq!(sgd_step(&p, &ParamVector::zeros(layout), &cfg).unwrap(), p);
        let other = ParamVector::zeros(ParamLayout::new(vec![LayerShape { fan_in: 2, fan_out: 1 }]));
        assert_eq!(sgd_step(&p, &other, &cfg).unwrap_err(), NnError::LayoutMismatch);
    }

    #[test]
    fn sgd_converges_on_shifted_quadratic() {
        // f(w) = (w − 3)², w ← w − 0.1·2(w − 3): error contracts by 0.8 per step.
        let layout = ParamLayout::new(vec![LayerShape { fan_in: 1, fan_out: 1 }]);
        let mut p = ParamVector { data: vec![0.0, 0.0], layout: layout.clone() };
        let cfg = SgdConfig { learning_rate: 0.1, ..SgdConfig::default() };
        let mut steps = 0;
        while (p.data[0] - 3.0).abs() >= 1e-6 {
            let g = ParamVector { data: vec![2.0 * (p.data[0] - 3.0), 0.0], layout: layout.clone() };
            p = sgd_step(&p, &g, &cfg).unwrap();
            steps += 1;
        }
        // closed form: 3·0.8^k < 1e-6 ⇔ k > ln(3e6)/ln(1.25) ≈ 66.8
        assert_eq!(steps, 67);
        assert!(steps <= 200);
    }

    #[test]
    fn cross_entropy_limits() {
        let logits = Tensor2::zeros(3, 5);
        let (l, _) = cross_entropy_loss(&logits, &[0, 3, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);

        let logits = Tensor2::from_rows(&[&[50.0, 0.0, 0.0]]).unwrap();
        let (l, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(l < 1e-20);

        assert_eq!(
            cross_entropy_loss(&logits, &[3]).unwrap_err(),
            NnError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let logits = Tensor2::from_vec(2, 4, data).unwrap();
        let labels = [1, 3];
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let h = 1e-5;
        for k in 0..8 {
            let mut plus = logits.clone();
            plus.data_mut()[k] += h;
            let mut minus = logits.clone();
            minus.data_mut()[k] -= h;
            let fd = (cross_entropy_loss(&plus, &labels).unwrap().0
                - cross_entropy_loss(&minus, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad.data()[k]).abs() < 1e-6, "coord {k}: {fd} vs {}", grad.data()[k]);
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers = vec![
            DenseLayer::random(3, 2, Activation::Relu, &mut rng),
            DenseLayer::random(2, 4, Activation::Softmax, &mut rng),
        ];
        let packed = ParamVector::pack(&layers);
        assert_eq!(packed.data.len(), 8 + 12);
        let mut other = vec![
            DenseLayer::random(3, 2, Activation::Relu, &mut rng),
            DenseLayer::random(2, 4, Activation::Softmax, &mut rng),
        ];
        packed.unpack_into(&mut other).unwrap();
        assert_eq!(other, layers);
        assert_eq!(ParamVector::pack(&other), packed);
    }

    #[test]
    fn flops_count_forward_and_backward() {
        let shapes = [LayerShape { fan_in: 4, fan_out: 3 }, LayerShape { fan_in: 3, fan_out: 2 }];
        assert_eq!(train_flops_per_sample(&shapes, &[false, false]), 2 * (12 + 6));
        // second layer trainable only: dW only, no input gradient needed
        assert_eq!(train_flops_per_sample(&shapes, &[false, true]), 36 + 12);
        assert_eq!(train_flops_per_sample(&shapes, &[true, true]), 36 + 24 + 12 + 12);
    }
}
