//! Federated feature-regression distillation of a trained block into a
//! single linear basic layer.
//!
//! The student sees the same input as the block (the frozen prefix's output
//! on client data) and regresses the block's output under a mean squared
//! distance. Each round, participating clients compute the full-shard
//! gradient of that loss at the current student; the server combines them
//! with data-size weights and takes one SGD step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{self, select_from, FederationError};
use crate::memory::{self, DeviceBudget, LayerFootprint, MemoryEstimate};
use crate::nn::{
    backward, forward, squared_error_loss, Activation, CachePolicy, DenseLayer, NnError, ParamVector,
    Tensor2,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("student {student:?} does not match teacher block widths {teacher:?}")]
    WidthMismatch {
        student: (usize, usize),
        teacher: (usize, usize),
    },
    #[error("teacher block is empty")]
    EmptyTeacher,
    #[error("client shard is empty")]
    EmptyShard,
    #[error("no client can afford distillation, even at batch size 1")]
    NoEligibleClients,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// A round whose loss exceeds the best seen by this factor counts as a
/// divergent step.
const DIVERGENCE_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub rounds: usize,
    /// Step size as a fraction of the stable limit; values below 1 are
    /// stable for the full-data gradient.
    pub learning_rate: f64,
    /// Samples per forward pass when accumulating a client gradient.
    pub batch_size: usize,
    /// Early stop when the loss improved by less than this over `patience`
    /// rounds.
    pub min_improvement: f64,
    pub patience: usize,
    pub clients_per_round: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rounds: 300,
            learning_rate: 0.5,
            batch_size: 32,
            min_improvement: 1e-6,
            patience: 10,
            clients_per_round: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillTask {
    pub prefix: Vec<DenseLayer>,
    pub teacher: Vec<DenseLayer>,
    pub student: DenseLayer,
}

impl DistillTask {
    pub fn new(prefix: Vec<DenseLayer>, teacher: Vec<DenseLayer>, student: DenseLayer) -> Result<Self> {
        let (first, last) = match (teacher.first(), teacher.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(DistillError::EmptyTeacher),
        };
        let widths = (first.fan_in(), last.fan_out());
        if (student.fan_in(), student.fan_out()) != widths {
            return Err(DistillError::WidthMismatch {
                student: (student.fan_in(), student.fan_out()),
                teacher: widths,
            });
        }
        Ok(Self {
            prefix,
            teacher,
            student,
        })
    }

    /// Fresh identity-activation student for a teacher with the given widths.
    pub fn random_student<R: Rng + ?Sized>(widths: (usize, usize), rng: &mut R) -> DenseLayer {
        DenseLayer::random(widths.0, widths.1, Activation::Identity, rng)
    }

    /// `(student input, teacher output)` for the given raw features.
    pub fn targets(&self, features: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let (h, _) = forward(&self.prefix, features, CachePolicy::StoreNone)?;
        let (t, _) = forward(&self.teacher, &h, CachePolicy::StoreNone)?;
        Ok((h, t))
    }

    pub fn memory_estimate(&self, batch: usize, cache_frozen: bool) -> MemoryEstimate {
        let frozen = |l: &DenseLayer, cacheable: bool| LayerFootprint {
            shape: l.shape(),
            trainable: false,
            cacheable,
        };
        let mut fps: Vec<LayerFootprint> = self.prefix.iter().map(|l| frozen(l, true)).collect();
        fps.extend(self.teacher.iter().map(|l| frozen(l, false)));
        fps.push(LayerFootprint {
            shape: self.student.shape(),
            trainable: true,
            cacheable: false,
        });
        let mut est = memory::estimate_layers(&fps, batch, cache_frozen);
        // teacher output kept as the regression target
        est.stored_activation_scalars += (batch * self.student.fan_out()) as u64;
        est
    }

    pub fn student_flops_per_sample(&self) -> u64 {
        let fwd: u64 = self
            .prefix
            .iter()
            .chain(&self.teacher)
            .map(|l| 2 * (l.fan_in() * l.fan_out()) as u64)
            .sum();
        fwd + 4 * (self.student.fan_in() * self.student.fan_out()) as u64
    }
}

/// Gradient of the mean squared distance between `student(h)` and `target`
/// over all rows, accumulated in chunks of `batch` rows.
pub fn student_gradient(student: &DenseLayer, h: &Tensor2, target: &Tensor2, batch: usize) -> Result<(ParamVector, f64)> {
    let n = h.rows();
    if n == 0 {
        return Err(DistillError::EmptyShard);
    }
    let layers = std::slice::from_ref(student);
    let mask = [true];
    let mut grad = ParamVector::zeros(crate::nn::ParamLayout::of(layers));
    let mut loss = 0.0;
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let frac = chunk.len() as f64 / n as f64;
        let (x, y) = if chunk.len() == n {
            (h.clone(), target.clone())
        } else {
            (h.select_rows(chunk), target.select_rows(chunk))
        };
        let (out, cache) = forward(layers, &x, CachePolicy::StoreTrainable(&mask))?;
        let (l, dl) = squared_error_loss(&out, &y)?;
        let g = backward(layers, &cache, &dl, &mask)?;
        for (a, b) in grad.data.iter_mut().zip(&g.data) {
            *a += frac * b;
        }
        loss += frac * l;
    }
    Ok((grad, loss))
}

/// Mean over rows of `‖h‖² + 1`. The loss curvature is at most twice this,
/// so rates below 1 divided by it are stable.
pub fn input_energy(h: &Tensor2) -> f64 {
    let n = h.rows().max(1) as f64;
    h.data().iter().map(|v| v * v).sum::<f64>() / n + 1.0
}

/// One client's contribution: gradient of the distillation loss on its
/// shard at the current student, and the loss itself.
pub fn distill_round(task: &DistillTask, shard: &Tensor2, batch: usize) -> Result<(ParamVector, f64)> {
    if shard.rows() == 0 {
        return Err(DistillError::EmptyShard);
    }
    let (h, t) = task.targets(shard)?;
    student_gradient(&task.student, &h, &t, batch)
}

#[derive(Debug, Clone, Copy)]
pub struct DistillClient<'a> {
    pub id: usize,
    pub features: &'a Tensor2,
    pub budget: DeviceBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillRound {
    pub loss: f64,
    pub selected: usize,
    pub eligible: usize,
    pub peak_bytes: u64,
    pub uploaded: u64,
    pub downloaded: u64,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: DenseLayer,
    pub batch_size: usize,
    pub rounds: Vec<DistillRound>,
}

pub fn run_distillation<R: Rng + ?Sized>(
    task: &DistillTask,
    clients: &[DistillClient<'_>],
    cfg: &DistillConfig,
    cache_frozen: bool,
    rng: &mut R,
) -> Result<DistillOutcome> {
    let budgets: Vec<DeviceBudget> = clients.iter().map(|c| c.budget).collect();
    let mut batch = cfg.batch_size.max(1);
    let mut est = task.memory_estimate(batch, cache_frozen);
    let mut eligible = memory::eligible(&budgets, &est);
    if eligible.is_empty() && batch > 1 {
        log::warn!("no client affords distillation at batch {batch}, retrying with batch 1");
        batch = 1;
        est = task.memory_estimate(batch, cache_frozen);
        eligible = memory::eligible(&budgets, &est);
    }
    if eligible.is_empty() {
        return Err(DistillError::NoEligibleClients);
    }

    // Prefix and teacher are frozen: their outputs are fixed for the whole run.
    let mut cached: Vec<Option<(Tensor2, Tensor2, f64)>> = vec![None; clients.len()];
    let mut student = task.student.clone();
    let student_params = student.param_count() as u64;
    let sub_params = (task.prefix.iter().chain(&task.teacher).map(DenseLayer::param_count).sum::<usize>()
        + student.param_count()) as u64;
    let mut lr = cfg.learning_rate;
    let mut best: Option<(DenseLayer, f64)> = None;
    // best loss so far after each accepted round; client sampling makes the
    // raw per-round loss too noisy for the stopping rule
    let mut best_trace: Vec<f64> = Vec::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let sel = select_from(&eligible, &[], cfg.clients_per_round.max(1), rng);
        let mut grads = Vec::with_capacity(sel.selected.len());
        let mut flops = 0u64;
        for &i in &sel.selected {
            let c = &clients[i];
            if cached[i].is_none() {
                let (h, t) = task.targets(c.features)?;
                let energy = input_energy(&h);
                cached[i] = Some((h, t, energy));
            }
            let (h, t, energy) = cached[i].as_ref().expect("cached above");
            let (g, l) = student_gradient(&student, h, t, batch)?;
            flops += task.student_flops_per_sample() * h.rows() as u64;
            grads.push((g, l, h.rows(), *energy));
        }
        let updates: Vec<(&[f64], usize)> = grads.iter().map(|(g, _, n, _)| (g.data.as_slice(), *n)).collect();
        let agg = federation::aggregate(&updates)?;
        let sizes: Vec<usize> = grads.iter().map(|g| g.2).collect();
        let weights = federation::aggregation_weights(&sizes)?;
        let loss: f64 = grads.iter().zip(&weights).map(|((_, l, _, _), w)| w * l).sum();
        let energy: f64 = grads.iter().zip(&weights).map(|((_, _, _, e), w)| w * e).sum();

        let k = sel.selected.len() as u64;
        rounds.push(DistillRound {
            loss,
            selected: sel.selected.len(),
            eligible: eligible.len(),
            peak_bytes: est.bytes(),
            uploaded: k * student_params,
            downloaded: k * sub_params,
            flops,
        });

        match &best {
            // the step overshot: return to the best student and halve the rate
            Some((b, bl)) if !(loss <= DIVERGENCE_FACTOR * bl) => {
                log::debug!("distillation loss jumped to {loss:.3e} from {bl:.3e}, halving the rate");
                student = b.clone();
                lr *= 0.5;
                continue;
            }
            Some((_, bl)) if loss >= *bl => {}
            _ => best = Some((student.clone(), loss)),
        }
        best_trace.push(best.as_ref().map_or(loss, |b| b.1));
        let r = best_trace.len();
        if r > cfg.patience && best_trace[r - 1 - cfg.patience] - best_trace[r - 1] < cfg.min_improvement {
            break;
        }
        let mut params = Vec::with_capacity(student.param_count());
        student.write_params(&mut params);
        let step = lr / energy;
        for (p, g) in params.iter_mut().zip(&agg) {
            *p -= step * g;
        }
        student.read_params(&params)?;
    }
    Ok(DistillOutcome {
        // the last step taken was never evaluated; keep the best evaluated student
        student: best.map_or(student, |(b, _)| b),
        batch_size: batch,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin(w: &[&[f64]], b: &[f64], a: Activation) -> DenseLayer {
        DenseLayer::from_parts(Tensor2::from_rows(w).unwrap(), b.to_vec(), a).unwrap()
    }

    #[test]
    fn perfect_student_has_zero_loss_and_gradient() {
        let id = lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity);
        let task = DistillTask::new(vec![], vec![id.clone()], id).unwrap();
        let x = Tensor2::from_rows(&[&[0.3, -1.0], &[2.0, 0.5]]).unwrap();
        let (g, l) = distill_round(&task, &x, 32).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let t = lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Relu);
        let s = lin(&[&[1.0], &[0.0]], &[0.0], Activation::Identity);
        assert!(matches!(DistillTask::new(vec![], vec![t], s), Err(DistillError::WidthMismatch { .. })));
    }

    #[test]
    fn relu_teacher_two_point_optimum() {
        // h ∈ {−1, 1}, teacher ReLU(h). Bias-free least squares: slope ½, MSE ¼.
        let teacher = lin(&[&[1.0]], &[0.0], Activation::Relu);
        let h = Tensor2::from_rows(&[&[-1.0], &[1.0]]).unwrap();
        let at = |w: f64, b: f64| {
            let task = DistillTask::new(vec![], vec![teacher.clone()], lin(&[&[w]], &[b], Activation::Identity)).unwrap();
            distill_round(&task, &h, 32).unwrap()
        };
        let (g, l) = at(0.5, 0.0);
        assert!((l - 0.25).abs() < 1e-15);
        assert_eq!(g.data[0], 0.0);
        // with the intercept free the fit is exact: s(h) = ½h + ½
        let (g, l) = at(0.5, 0.5);
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prefix = vec![DenseLayer::random(3, 4, Activation::Relu, &mut rng)];
        let teacher = vec![
            DenseLayer::random(4, 5, Activation::Relu, &mut rng),
            DenseLayer::random(5, 2, Activation::Relu, &mut rng),
        ];
        let student = DistillTask::random_student((4, 2), &mut rng);
        let task = DistillTask::new(prefix, teacher, student.clone()).unwrap();
        let x = Tensor2::from_vec(6, 3, (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let (g, _) = distill_round(&task, &x, 4).unwrap();
        let h = 1e-6;
        let mut p = Vec::new();
        student.write_params(&mut p);
        for k in 0..p.len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                q[k] += delta;
                let mut s = student.clone();
                s.read_params(&q).unwrap();
                let t = DistillTask { student: s, ..task.clone() };
                distill_round(&t, &x, 4).unwrap().1
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g.data[k]).abs() < 1e-6, "coord {k}: {fd} vs {}", g.data[k]);
        }
    }

    #[test]
    fn distillation_leaves_teacher_and_prefix_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prefix = vec![DenseLayer::random(3, 4, Activation::Relu, &mut rng)];
        let teacher = vec![DenseLayer::random(4, 4, Activation::Relu, &mut rng)];
        let task = DistillTask::new(prefix.clone(), teacher.clone(), DistillTask::random_student((4, 4), &mut rng)).unwrap();
        let x = Tensor2::from_vec(5, 3, (0..15).map(|i| i as f64 / 10.0).collect()).unwrap();
        let clients = [DistillClient { id: 0, features: &x, budget: DeviceBudget { capacity_bytes: u64::MAX } }];
        let out = run_distillation(&task, &clients, &DistillConfig::default(), false, &mut rng).unwrap();
        assert_eq!(task.prefix, prefix);
        assert_eq!(task.teacher, teacher);
        assert_ne!(out.student, task.student);
    }

    #[test]
    fn unaffordable_distillation_retries_then_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let task = DistillTask::new(
            vec![],
            vec![DenseLayer::random(4, 4, Activation::Relu, &mut rng)],
            DistillTask::random_student((4, 4), &mut rng),
        )
        .unwrap();
        let x = Tensor2::zeros(3, 4);
        let at_one = task.memory_estimate(1, false).bytes();
        let clients = [DistillClient { id: 0, features: &x, budget: DeviceBudget { capacity_bytes: at_one } }];
        let out = run_distillation(&task, &clients, &DistillConfig::default(), false, &mut rng).unwrap();
        assert_eq!(out.batch_size, 1);
        let clients = [DistillClient { id: 0, features: &x, budget: DeviceBudget { capacity_bytes: at_one - 1 } }];
        assert!(matches!(
            run_distillation(&task, &clients, &DistillConfig::default(), false, &mut rng),
            Err(DistillError::NoEligibleClients)
        ));
    }
}
