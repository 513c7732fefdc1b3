//! Run orchestration: progressive shrinking then growing, and the three
//! end-to-end baselines.
//!
//! All randomness flows from one run seed. Every round gets its own
//! selection stream and every (round, client) pair its own local-training
//! stream, so results do not depend on the worker thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::blocks::{full_submodel, BlockError, GlobalModel, LayerRole, ModelLayout, Stage, SubModel};
use crate::data::Dataset;
use crate::distill::{self, DistillClient, DistillConfig, DistillError, DistillTask};
use crate::federation::{derive_seed, local_train, select_from, DevicePool, FederationError, LocalUpdate, Selection};
use crate::freeze::{FreezeController, FreezeDecision, FreezeError, FreezePolicy};
use crate::memory::{self, MemoryEstimate};
use crate::metrics::{Mode, RoundRecord, SCHEMA_VERSION};
use crate::nn::{self, Activation, DenseLayer, NnError, SgdConfig};

const INIT_STREAM: u64 = 0x1;
const ROUND_STREAM: u64 = 0x2;
const DISTILL_STREAM: u64 = 0x3;
const ADAPTER_STREAM: u64 = 0x4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Freeze(#[from] FreezeError),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("training diverged in round {round} ({stage} step {step}): non-finite parameters")]
    Diverged { stage: &'static str, step: usize, round: usize },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub blocks: usize,
    pub sgd: SgdConfig,
    pub freeze: FreezePolicy,
    pub distill: DistillConfig,
    pub clients_per_round: usize,
    pub cache_frozen: bool,
    /// Rounds after which an unfrozen step is frozen anyway.
    pub round_cap: usize,
    /// Rounds of end-to-end training for the baselines.
    pub baseline_rounds: usize,
    /// Run the shrinking stage before growing.
    pub shrinking: bool,
    /// Keep training the basic layers of the output module while growing;
    /// otherwise they stay as distilled.
    pub train_basic_layers: bool,
    pub seed: u64,
    /// Worker threads for local training; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            blocks: 4,
            sgd: SgdConfig::default(),
            freeze: FreezePolicy::default(),
            distill: DistillConfig::default(),
            clients_per_round: 20,
            cache_frozen: false,
            round_cap: 300,
            baseline_rounds: 200,
            shrinking: true,
            train_basic_layers: false,
            seed: 0,
            threads: 0,
        }
    }
}

/// State handed to a round observer after each progressive training round.
pub struct RoundEvent<'a> {
    pub stage: Stage,
    pub step: usize,
    pub step_round: usize,
    pub before: &'a GlobalModel,
    pub after: &'a GlobalModel,
    pub sub: &'a SubModel,
}

pub type Observer<'o> = dyn FnMut(&RoundEvent<'_>) + 'o;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub records: Vec<RoundRecord>,
    /// Trained original-architecture layers; empty when the run is NA.
    pub final_layers: Vec<DenseLayer>,
    pub model: Option<GlobalModel>,
    pub final_accuracy: Option<f64>,
    pub na: bool,
}

impl RunOutcome {
    fn not_available(mode: Mode) -> Self {
        Self {
            mode,
            records: Vec::new(),
            final_layers: Vec::new(),
            model: None,
            final_accuracy: None,
            na: true,
        }
    }
}

struct RoundOutput {
    sub: SubModel,
    selection: Selection,
    loss: f64,
    uploaded: u64,
    downloaded: u64,
    flops: u64,
}

/// Fixed per-step eligibility: who trains the full sub-model and who can at
/// least train the head.
struct Eligibility {
    full: Vec<usize>,
    head: Vec<usize>,
    full_est: MemoryEstimate,
    head_est: MemoryEstimate,
    participation: f64,
}

pub struct Simulation<'a> {
    pool: &'a DevicePool,
    test: &'a Dataset,
    settings: TrainSettings,
    threads: Option<rayon::ThreadPool>,
    records: Vec<RoundRecord>,
    round: usize,
    mode: Mode,
}

impl<'a> Simulation<'a> {
    pub fn new(pool: &'a DevicePool, test: &'a Dataset, settings: TrainSettings) -> Result<Self> {
        let threads = match settings.threads {
            0 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| PipelineError::Threads(e.to_string()))?,
            ),
        };
        Ok(Self {
            pool,
            test,
            settings,
            threads,
            records: Vec::new(),
            round: 0,
            mode: Mode::Profl,
        })
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn run(&mut self, mode: Mode, layout: &ModelLayout) -> Result<RunOutcome> {
        match mode {
            Mode::Profl => self.run_profl(layout, None),
            Mode::Oracle | Mode::Allsmall | Mode::Exclusive => self.run_baseline(mode, layout),
        }
    }

    fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.settings.seed, INIT_STREAM))
    }

    fn round_seed(&self, round: usize) -> u64 {
        derive_seed(derive_seed(self.settings.seed, ROUND_STREAM), round as u64)
    }

    fn n_devices(&self) -> f64 {
        self.pool.len() as f64
    }

    /// One federated round on `sub`: select, train locally in parallel,
    /// aggregate. Selected devices return the whole trainable slice, fallback
    /// devices only the head; the head is averaged over both populations.
    fn federated_round(&self, sub: &SubModel, elig: &Eligibility, round: usize) -> Result<RoundOutput> {
        let seed = self.round_seed(round);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let selection = select_from(&elig.full, &elig.head, self.settings.clients_per_round, &mut rng);
        if selection.participants() == 0 {
            return Err(FederationError::NoParticipants {
                stage: sub.stage.as_str(),
                step: sub.step,
            }
            .into());
        }
        let head_mask = sub.head_only_mask();
        let jobs: Vec<(usize, &[bool])> = selection
            .selected
            .iter()
            .map(|&id| (id, sub.trainable.as_slice()))
            .chain(selection.fallback.iter().map(|&id| (id, head_mask.as_slice())))
            .collect();
        let sgd = self.settings.sgd;
        let train = || -> Vec<std::result::Result<LocalUpdate, FederationError>> {
            jobs.par_iter()
                .map(|&(id, mask)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id as u64 + 1));
                    local_train(&self.pool.device(id).data, sub, mask, &sgd, &mut rng)
                })
                .collect()
        };
        let updates = match &self.threads {
            Some(p) => p.install(train),
            None => train(),
        }
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;

        let (full_ups, head_ups) = updates.split_at(selection.selected.len());
        let trainable = sub.trainable_param_count();
        let head_len = sub.head_param_count();
        let body_len = trainable - head_len;
        let current = sub.trainable_slice();
        let mut merged = if full_ups.is_empty() {
            current[..body_len].to_vec()
        } else {
            let parts: Vec<(&[f64], usize)> = full_ups.iter().map(|u| (&u.slice[..body_len], u.samples)).collect();
            crate::federation::aggregate(&parts)?
        };
        let heads: Vec<(&[f64], usize)> = full_ups
            .iter()
            .map(|u| (&u.slice[body_len..], u.samples))
            .chain(head_ups.iter().map(|u| (u.slice.as_slice(), u.samples)))
            .collect();
        merged.extend(crate::federation::aggregate(&heads)?);
        if merged.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Diverged {
                stage: sub.stage.as_str(),
                step: sub.step,
                round,
            });
        }
        let mut next = sub.clone();
        next.set_trainable_slice(&merged)?;

        let samples: usize = updates.iter().map(|u| u.samples).sum();
        let loss = updates.iter().map(|u| u.loss * u.samples as f64).sum::<f64>() / samples.max(1) as f64;
        let sub_params = sub.param_count() as u64;
        Ok(RoundOutput {
            sub: next,
            loss,
            uploaded: updates.iter().map(|u| u.slice.len() as u64).sum(),
            downloaded: updates.len() as u64 * sub_params,
            flops: updates.iter().map(|u| u.flops).sum(),
            selection,
        })
    }

    fn eligibility(&self, sub: &SubModel) -> Eligibility {
        let budgets = self.pool.budgets();
        let batch = self.settings.sgd.batch_size;
        let full_est = memory::estimate(sub, batch, self.settings.cache_frozen);
        let head_est = memory::estimate_head_only(sub, batch, self.settings.cache_frozen);
        let full = memory::eligible(&budgets, &full_est);
        let head = memory::eligible(&budgets, &head_est);
        let capable = head.len().max(full.len());
        Eligibility {
            participation: capable as f64 / self.n_devices(),
            full,
            head,
            full_est,
            head_est,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        step_round: usize,
        stage: Stage,
        step: usize,
        out: &RoundOutput,
        elig: &Eligibility,
        accuracy: Option<f64>,
        em: Option<f64>,
        freeze: bool,
        cap_hit: bool,
    ) {
        let peak = if out.selection.selected.is_empty() {
            elig.head_est.bytes()
        } else {
            elig.full_est.bytes()
        };
        self.records.push(RoundRecord {
            schema: SCHEMA_VERSION,
            round: self.round,
            step_round,
            stage,
            step,
            mode: self.mode,
            train_loss: out.loss,
            test_accuracy: accuracy,
            em,
            freeze,
            cap_hit,
            peak_memory_bytes: peak,
            participation: elig.participation,
            selected: out.selection.selected.len(),
            fallback: out.selection.fallback.len(),
            uploaded: out.uploaded,
            downloaded: out.downloaded,
            flops: out.flops,
        });
    }

    fn test_accuracy(&self, layers: &[DenseLayer]) -> Result<f64> {
        Ok(nn::accuracy(layers, &self.test.features, &self.test.labels)?)
    }

    fn assemble(&self, model: &GlobalModel, stage: Stage, t: usize) -> Result<SubModel> {
        Ok(match stage {
            Stage::Shrinking => model.assemble_shrinking(t)?,
            _ => growing_submodel(model, t, self.settings.train_basic_layers)?,
        })
    }

    /// Rounds of one progressive step until the freeze rule (or the round
    /// cap) fires.
    fn train_step(
        &mut self,
        model: &mut GlobalModel,
        stage: Stage,
        t: usize,
        observer: &mut Option<&mut Observer<'_>>,
    ) -> Result<()> {
        let first = self.assemble(model, stage, t)?;
        let elig = self.eligibility(&first);
        let mut ctl = FreezeController::new(self.settings.freeze);
        ctl.start(&first.active_block_params())?;
        let cap = self.settings.round_cap.max(1);
        for step_round in 1.. {
            self.round += 1;
            let sub = self.assemble(model, stage, t)?;
            let before = observer.as_ref().map(|_| model.clone());
            let out = self.federated_round(&sub, &elig, self.round)?;
            model.write_back(&out.sub)?;
            let obs = ctl.observe(step_round, &out.sub.active_block_params())?;
            let froze = obs.decision == FreezeDecision::Freeze;
            let cap_hit = !froze && step_round >= cap;
            if cap_hit {
                log::warn!("{} step {t}: no freeze after {cap} rounds, freezing at the cap", stage.as_str());
            }
            let acc = self.test_accuracy(&out.sub.layers)?;
            self.record(step_round, stage, t, &out, &elig, Some(acc), obs.em, froze || cap_hit, cap_hit);
            if let (Some(f), Some(before)) = (observer.as_mut(), before.as_ref()) {
                f(&RoundEvent {
                    stage,
                    step: t,
                    step_round,
                    before,
                    after: model,
                    sub: &out.sub,
                });
            }
            if froze || cap_hit {
                log::info!(
                    "{} step {t} frozen after {step_round} rounds, accuracy {acc:.4}",
                    stage.as_str()
                );
                break;
            }
        }
        Ok(())
    }

    fn distill_block(&mut self, model: &mut GlobalModel, t: usize) -> Result<()> {
        let layers = model.hidden();
        let prefix = layers[..model.plan().range(t).start].to_vec();
        let teacher = model.block_layers(t).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.settings.seed, DISTILL_STREAM), t as u64));
        let student = DistillTask::random_student(model.plan().widths(t), &mut rng);
        let task = DistillTask::new(prefix, teacher, student)?;
        let clients: Vec<DistillClient<'_>> = self
            .pool
            .devices()
            .iter()
            .map(|d| DistillClient {
                id: d.id,
                features: &d.data.features,
                budget: d.budget,
            })
            .collect();
        let outcome = distill::run_distillation(&task, &clients, &self.settings.distill, self.settings.cache_frozen, &mut rng)?;
        for (i, r) in outcome.rounds.iter().enumerate() {
            self.round += 1;
            self.records.push(RoundRecord {
                schema: SCHEMA_VERSION,
                round: self.round,
                step_round: i + 1,
                stage: Stage::Distill,
                step: t,
                mode: self.mode,
                train_loss: r.loss,
                test_accuracy: None,
                em: None,
                freeze: false,
                cap_hit: false,
                peak_memory_bytes: r.peak_bytes,
                participation: r.eligible as f64 / self.n_devices(),
                selected: r.selected,
                fallback: 0,
                uploaded: r.uploaded,
                downloaded: r.downloaded,
                flops: r.flops,
            });
        }
        log::info!(
            "block {t} distilled in {} rounds, loss {:.3e}",
            outcome.rounds.len(),
            outcome.rounds.last().map_or(f64::NAN, |r| r.loss)
        );
        model.set_basic_layer(t, outcome.student)?;
        Ok(())
    }

    /// Shrinking (back to front, harvesting init snapshots and basic layers)
    /// followed by growing (front to back). `observer` sees every training
    /// round of both stages.
    pub fn run_profl(&mut self, layout: &ModelLayout, mut observer: Option<&mut Observer<'_>>) -> Result<RunOutcome> {
        self.mode = Mode::Profl;
        let mut rng = self.init_rng();
        let mut model = GlobalModel::new(layout.clone(), self.settings.blocks, &mut rng)?;
        if self.settings.shrinking {
            self.run_shrinking(&mut model, &mut observer)?;
        }
        self.run_growing(&mut model, &mut observer)?;
        let final_layers = model.final_layers();
        let acc = self.test_accuracy(&final_layers)?;
        Ok(RunOutcome {
            mode: Mode::Profl,
            records: std::mem::take(&mut self.records),
            final_layers,
            model: Some(model),
            final_accuracy: Some(acc),
            na: false,
        })
    }

    pub fn run_shrinking(&mut self, model: &mut GlobalModel, observer: &mut Option<&mut Observer<'_>>) -> Result<()> {
        for t in (2..=model.blocks()).rev() {
            model.begin_shrinking_step(t)?;
            self.train_step(model, Stage::Shrinking, t, observer)?;
            model.end_shrinking_step(t);
            let trained = model.block_layers(t).to_vec();
            model.snapshot_init(t, &trained)?;
            self.distill_block(model, t)?;
        }
        Ok(())
    }

    pub fn run_growing(&mut self, model: &mut GlobalModel, observer: &mut Option<&mut Observer<'_>>) -> Result<()> {
        let blocks = model.blocks();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.settings.seed, ADAPTER_STREAM));
        for t in 1..=blocks {
            let have_basics = (t + 1..=blocks).all(|b| model.basic_layer(b).is_some());
            if t < blocks && !have_basics {
                // no output module from shrinking: a linear map into the head
                let width = model.plan().widths(t).1;
                let head_in = model.layout().head_fan_in();
                model.set_adapter(Some(DenseLayer::random(width, head_in, Activation::Identity, &mut rng)));
            }
            model.begin_growing_step(t)?;
            self.train_step(model, Stage::Growing, t, observer)?;
            model.end_growing_step(t);
        }
        model.set_adapter(None);
        Ok(())
    }

    fn run_baseline(&mut self, mode: Mode, layout: &ModelLayout) -> Result<RunOutcome> {
        self.mode = mode;
        let budgets = self.pool.budgets();
        let batch = self.settings.sgd.batch_size;
        let all: Vec<usize> = (0..self.pool.len()).collect();
        let (layout, full) = match mode {
            Mode::Oracle => (layout.clone(), all),
            Mode::Exclusive => {
                let est = memory::estimate_full(layout, batch);
                let ids = memory::eligible(&budgets, &est);
                if ids.is_empty() {
                    log::warn!("exclusive: no device affords end-to-end training ({} B)", est.bytes());
                    return Ok(RunOutcome::not_available(mode));
                }
                (layout.clone(), ids)
            }
            Mode::Allsmall => {
                let min = budgets.iter().map(|b| b.capacity_bytes).min().unwrap_or(0);
                let Some(small) = shrink_to_budget(layout, batch, min) else {
                    log::warn!("allsmall: no width scaling fits the smallest budget ({min} B)");
                    return Ok(RunOutcome::not_available(mode));
                };
                let ids = memory::eligible(&budgets, &memory::estimate_full(&small, batch));
                (small, ids)
            }
            Mode::Profl => unreachable!("handled by run_profl"),
        };
        let mut rng = self.init_rng();
        let mut sub = full_submodel(layout.init_layers(&mut rng));
        let est = memory::estimate(&sub, batch, false);
        let elig = Eligibility {
            participation: if mode == Mode::Oracle {
                1.0
            } else {
                full.len() as f64 / self.n_devices()
            },
            full,
            head: Vec::new(),
            full_est: est,
            head_est: est,
        };
        for r in 1..=self.settings.baseline_rounds {
            self.round += 1;
            let out = self.federated_round(&sub, &elig, self.round)?;
            let acc = self.test_accuracy(&out.sub.layers)?;
            self.record(r, Stage::Baseline, 1, &out, &elig, Some(acc), None, false, false);
            sub = out.sub;
        }
        let acc = self.test_accuracy(&sub.layers)?;
        Ok(RunOutcome {
            mode,
            records: std::mem::take(&mut self.records),
            final_layers: sub.layers,
            model: None,
            final_accuracy: Some(acc),
            na: false,
        })
    }
}

/// Hidden widths scaled by `scale`, rounded, at least 1.
pub fn scale_layout(layout: &ModelLayout, scale: f64) -> ModelLayout {
    ModelLayout {
        hidden: layout
            .hidden
            .iter()
            .map(|&w| ((w as f64 * scale).round() as usize).max(1))
            .collect(),
        ..layout.clone()
    }
}

/// Widest uniform width scaling (resolution 1/1000) whose end-to-end
/// estimate fits in `capacity_bytes`.
pub fn shrink_to_budget(layout: &ModelLayout, batch: usize, capacity_bytes: u64) -> Option<ModelLayout> {
    let fits = |i: u32| memory::estimate_full(&scale_layout(layout, f64::from(i) / 1000.0), batch).bytes() <= capacity_bytes;
    if !fits(1) {
        return None;
    }
    let (mut lo, mut hi) = (1u32, 1000u32);
    if fits(hi) {
        return Some(layout.clone());
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(scale_layout(layout, f64::from(lo) / 1000.0))
}

/// Memory needed by each progressive step, without training anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEstimate {
    pub stage: Stage,
    pub step: usize,
    pub full: MemoryEstimate,
    pub head_only: MemoryEstimate,
}

/// Growing sub-model for step `t`, with the basic layers frozen unless
/// `train_basic` is set.
pub fn growing_submodel(model: &GlobalModel, t: usize, train_basic: bool) -> std::result::Result<SubModel, BlockError> {
    let mut sub = model.assemble_growing(t)?;
    if !train_basic {
        for (r, tr) in sub.roles.iter().zip(sub.trainable.iter_mut()) {
            if matches!(r, LayerRole::Basic { .. }) {
                *tr = false;
            }
        }
    }
    Ok(sub)
}

/// Estimates for every shrinking step (if enabled) and every growing step
/// under `settings`. Without shrinking the growing output module is a single
/// linear adapter.
pub fn step_estimates(layout: &ModelLayout, settings: &TrainSettings) -> std::result::Result<Vec<StepEstimate>, BlockError> {
    let (blocks, batch, cache_frozen) = (settings.blocks, settings.sgd.batch_size, settings.cache_frozen);
    let shrinking = settings.shrinking;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = GlobalModel::new(layout.clone(), blocks, &mut rng)?;
    let mut out = Vec::new();
    let push = |sub: &SubModel| StepEstimate {
        stage: sub.stage,
        step: sub.step,
        full: memory::estimate(sub, batch, cache_frozen),
        head_only: memory::estimate_head_only(sub, batch, cache_frozen),
    };
    if shrinking {
        for t in (2..=blocks).rev() {
            model.begin_shrinking_step(t)?;
            out.push(push(&model.assemble_shrinking(t)?));
            model.end_shrinking_step(t);
            let (i, o) = model.plan().widths(t);
            model.set_basic_layer(t, DenseLayer::random(i, o, Activation::Identity, &mut rng))?;
        }
    }
    for t in 1..=blocks {
        if !shrinking && t < blocks {
            let w = model.plan().widths(t).1;
            model.set_adapter(Some(DenseLayer::random(w, layout.head_fan_in(), Activation::Identity, &mut rng)));
        }
        model.begin_growing_step(t)?;
        out.push(push(&growing_submodel(&model, t, settings.train_basic_layers)?));
        model.end_growing_step(t);
    }
    Ok(out)
}
