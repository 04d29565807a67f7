//! The event loop shared by every policy.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::executor::{duration_us, iteration_latency, profile, ExecutorParams, Work};
use super::metrics::{mean, percentile, MetricsReport, PredictorStats, RequestRecord, RunMeta, SwapStats};
use super::PolicyKind;
use crate::config::{CostModelMode, RunConfig};
use crate::costmodel::{calibrate, Calibration, CostCoefficients};
use crate::error::{Error, Result};
use crate::kvmanager::{
    ewt_all, kv_bytes, plan_swaps, quantized_kv_bytes, Direction, MemoryState, ModelConfig, Residency,
    SwapCandidate,
};
use crate::predictor::{EmbeddingVector, LengthPredictor, PredictionSource};
use crate::rng::{self, stream};
use crate::scheduler::{Admission, BatchSelection, Job, PriorityQueueSet};
use crate::workload::{ms_to_us, sample_corpus, us_to_ms, Micros, Request, RequestId, Trace};

/// Per-seed state computed before a run: cost coefficients and, for the
/// policies that need one, a trained length predictor.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub coefficients: CostCoefficients<f64>,
    pub calibration: Option<Calibration<f64>>,
    pub predictor: Option<LengthPredictor<f64>>,
}

/// Calibrates the cost model (or takes the fixed coefficients) and, when
/// `with_predictor` is set, trains the predictor on a warm-up corpus drawn
/// from the workload preset.
pub fn prepare(config: &RunConfig, seed: u64, with_predictor: bool) -> Result<Prepared> {
    config.validate()?;
    let (coefficients, calibration) = match config.costmodel.mode {
        CostModelMode::Fixed => (config.costmodel.fixed()?, None),
        CostModelMode::Calibrate => {
            let samples = profile(&config.executor, &config.costmodel.grid, config.costmodel.reps, seed)?;
            let cal = calibrate(&samples)?;
            (cal.coefficients, Some(cal))
        }
    };
    let predictor = if with_predictor {
        let dist = config.length_distribution()?;
        let corpus = sample_corpus(
            config.warmup.corpus_size,
            &dist,
            rng::derive_seed(seed, stream::PREDICTOR_WARMUP),
        )?;
        let mut pc = config.predictor.clone();
        pc.fallback.seed = rng::derive_seed(seed, stream::FALLBACK_INIT);
        Some(LengthPredictor::train(pc, &corpus, true)?)
    } else {
        None
    };
    Ok(Prepared {
        coefficients,
        calibration,
        predictor,
    })
}

/// Prepares and runs `config.policy` on `trace` with `config.seed`.
pub fn run(trace: &Trace, config: &RunConfig) -> Result<MetricsReport> {
    let prepared = prepare(config, config.seed, config.policy.uses_predictor())?;
    run_prepared(trace, config, &prepared, None)
}

/// Runs with precomputed state, optionally writing a JSON-lines event log.
pub fn run_prepared<'a>(
    trace: &'a Trace,
    config: &'a RunConfig,
    prepared: &Prepared,
    log: Option<&'a mut dyn Write>,
) -> Result<MetricsReport> {
    config.validate()?;
    let mut engine = Engine::new(trace, config, prepared, log)?;
    engine.run()?;
    engine.report()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Transfer(RequestId),
    IterationDone,
    Arrival(usize),
    AgingTick,
}

impl EventKind {
    fn rank(self) -> u8 {
        match self {
            EventKind::Transfer(_) => 0,
            EventKind::IterationDone => 1,
            EventKind::Arrival(_) => 2,
            EventKind::AgingTick => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Micros,
    rank: u8,
    seq: u64,
    kind: EventKind,
}

/// FCFS bookkeeping: admitted jobs in admission order plus a waiting line.
#[derive(Debug, Default)]
struct FcfsState {
    jobs: BTreeMap<RequestId, Job>,
    waiting: VecDeque<RequestId>,
    running: Vec<RequestId>,
}

#[derive(Debug)]
enum Store {
    Queues(PriorityQueueSet<f64>),
    Fcfs(FcfsState),
}

impl Store {
    fn job(&self, id: RequestId) -> &Job {
        match self {
            Store::Queues(q) => q.get(id),
            Store::Fcfs(f) => f.jobs.get(&id),
        }
        .expect("live job")
    }

    fn job_mut(&mut self, id: RequestId) -> &mut Job {
        match self {
            Store::Queues(q) => q.get_mut(id),
            Store::Fcfs(f) => f.jobs.get_mut(&id),
        }
        .expect("live job")
    }

    fn len(&self) -> usize {
        match self {
            Store::Queues(q) => q.len(),
            Store::Fcfs(f) => f.jobs.len(),
        }
    }

    fn ids(&self) -> Vec<RequestId> {
        match self {
            Store::Queues(q) => q.ranked_ids(),
            Store::Fcfs(f) => f.jobs.keys().copied().collect(),
        }
    }

    fn jobs(&self) -> Box<dyn Iterator<Item = &Job> + '_> {
        match self {
            Store::Queues(q) => Box::new(q.jobs()),
            Store::Fcfs(f) => Box::new(f.jobs.values()),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    iterations: u64,
    executed_tokens: u64,
    recomputed_tokens: u64,
    demotions: u64,
    swaps: SwapStats,
    predictions: u64,
    pred_error_sum: f64,
    retrieved: u64,
    pred_latency_sum: f64,
}

struct Engine<'a> {
    policy: PolicyKind,
    trace: &'a Trace,
    cfg: &'a RunConfig,
    model: ModelConfig,
    exec: ExecutorParams,
    rng: ChaCha8Rng,
    predictor: Option<LengthPredictor<f64>>,
    embeddings: BTreeMap<RequestId, EmbeddingVector<f64>>,
    predictions: BTreeMap<RequestId, u32>,
    store: Store,
    memory: MemoryState,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: Micros,
    batch: Option<Vec<RequestId>>,
    next_arrival: usize,
    aging_pending: bool,
    arrived: u64,
    completed: u64,
    last_progress: Micros,
    truncated: bool,
    /// CPU memory is full, so jobs without a cache may not start.
    hold_new: bool,
    max_len: u32,
    counters: Counters,
    records: Vec<RequestRecord>,
    log: Option<&'a mut dyn Write>,
}

impl<'a> Engine<'a> {
    fn new(
        trace: &'a Trace,
        cfg: &'a RunConfig,
        prepared: &Prepared,
        log: Option<&'a mut dyn Write>,
    ) -> Result<Self> {
        let policy = cfg.policy;
        let model = cfg.model_config()?;
        let memory = MemoryState::new(
            cfg.memory.kv_capacity_bytes(&model)?,
            cfg.memory.cpu_capacity_bytes(),
            cfg.memory.bandwidth_bytes_per_ms(),
        )?;
        let store = if policy.is_fcfs() {
            Store::Fcfs(FcfsState::default())
        } else {
            Store::Queues(PriorityQueueSet::new(cfg.scheduler, prepared.coefficients)?)
        };
        let predictor = if policy.uses_predictor() {
            Some(prepared.predictor.clone().ok_or_else(|| {
                Error::Config(format!("policy {policy} needs a trained predictor"))
            })?)
        } else {
            None
        };
        Ok(Engine {
            policy,
            trace,
            cfg,
            model,
            exec: cfg.executor,
            rng: rng::component_rng(cfg.seed, stream::EXECUTOR_NOISE),
            predictor,
            embeddings: BTreeMap::new(),
            predictions: BTreeMap::new(),
            store,
            memory,
            events: BinaryHeap::new(),
            seq: 0,
            now: 0,
            batch: None,
            next_arrival: 0,
            aging_pending: false,
            arrived: 0,
            completed: 0,
            last_progress: 0,
            truncated: false,
            hold_new: false,
            max_len: cfg.length_distribution()?.max_len,
            counters: Counters::default(),
            records: Vec::new(),
            log,
        })
    }

    fn push(&mut self, time: Micros, kind: EventKind) -> Result<()> {
        if time < self.now {
            return Err(self.invariant(format!("event {kind:?} scheduled in the past at {time}")));
        }
        self.seq += 1;
        self.events.push(Reverse(Event {
            time,
            rank: kind.rank(),
            seq: self.seq,
            kind,
        }));
        Ok(())
    }

    fn invariant(&self, message: String) -> Error {
        Error::Invariant {
            time_us: self.now,
            message,
        }
    }

    fn emit(&mut self, value: impl FnOnce() -> serde_json::Value) -> Result<()> {
        if let Some(out) = self.log.as_mut() {
            serde_json::to_writer(&mut **out, &value())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn kv(&self, tokens: u32) -> u64 {
        kv_bytes(&self.model, tokens as u64, self.model.bytes_per_value)
    }

    /// Cache tokens a job holds after its next iteration.
    fn tokens_after(job: &Job) -> u32 {
        job.request.input_len + job.generated + job.prefilled as u32
    }

    /// Cache tokens a job holds now.
    fn tokens_now(job: &Job) -> u32 {
        if job.prefilled {
            job.request.input_len + job.generated
        } else {
            0
        }
    }

    /// GPU bytes a job occupies while running its next iteration.
    fn bytes_for_next(&self, job: &Job) -> u64 {
        let tokens = Self::tokens_after(job);
        match self.policy {
            PolicyKind::FcfsVllm => {
                let b = self.cfg.memory.block_tokens;
                self.kv(tokens.div_ceil(b) * b)
            }
            PolicyKind::FcfsOrca => {
                let reserved = job.request.input_len + self.max_len.max(job.request.output_len);
                self.kv(reserved.max(tokens))
            }
            _ => self.kv(tokens),
        }
    }

    fn run(&mut self) -> Result<()> {
        if !self.trace.requests.is_empty() {
            self.push(self.trace.requests[0].arrival_us, EventKind::Arrival(0))?;
        }
        let budget_us = ms_to_us(self.cfg.sim.max_sim_time_s * 1000.0);
        let window_us = ms_to_us(self.cfg.sim.watchdog_window_s * 1000.0);
        while let Some(Reverse(ev)) = self.events.pop() {
            if ev.time > budget_us {
                self.truncated = true;
                return Ok(());
            }
            self.now = ev.time;
            self.handle(ev.kind)?;
            while let Some(Reverse(next)) = self.events.peek().copied() {
                if next.time != self.now {
                    break;
                }
                self.events.pop();
                self.handle(next.kind)?;
            }
            if self.batch.is_none() {
                self.try_start()?;
            }
            self.check()?;
            let idle_wait = self.next_arrival >= self.trace.requests.len() && !self.memory.has_in_flight();
            if self.store.len() > 0 && idle_wait && self.now - self.last_progress > window_us {
                return Err(Error::Livelock {
                    window_ms: us_to_ms(window_us),
                    blocked: self.store.ids(),
                });
            }
        }
        if self.store.len() > 0 {
            return Err(Error::Deadlock {
                blocked: self.store.ids(),
            });
        }
        Ok(())
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::Arrival(i) => self.on_arrival(i),
            EventKind::IterationDone => self.on_iteration_done(),
            EventKind::Transfer(id) => self.on_transfer(id),
            EventKind::AgingTick => self.on_aging_tick(),
        }
    }

    fn on_arrival(&mut self, index: usize) -> Result<()> {
        let trace = self.trace;
        let r = &trace.requests[index];
        if index + 1 < trace.requests.len() {
            self.push(trace.requests[index + 1].arrival_us, EventKind::Arrival(index + 1))?;
        }
        self.next_arrival = index + 1;
        self.arrived += 1;
        if self.store.len() == 0 {
            self.last_progress = self.now;
        }
        let predicted = match self.predictor.as_ref() {
            Some(p) => {
                let (v, pred) = p.predict_request(r)?;
                let c = &mut self.counters;
                c.predictions += 1;
                c.pred_error_sum +=
                    (pred.length as f64 - r.output_len as f64).abs() / r.output_len.max(1) as f64;
                c.retrieved += (pred.source == PredictionSource::Retrieved) as u64;
                c.pred_latency_sum += p.modeled_latency_ms(pred.ops);
                if self.cfg.warmup.online_update {
                    self.embeddings.insert(r.id, v);
                }
                self.predictions.insert(r.id, pred.length);
                pred.length
            }
            None => r.output_len,
        };
        let request = Request {
            prompt_tokens: None,
            ..r.clone()
        };
        let job = Job::new(request, predicted, self.max_len.max(r.output_len));
        let now = self.now;
        match &mut self.store {
            Store::Queues(q) => q.admit(job, now)?,
            Store::Fcfs(f) => {
                if f.jobs.insert(r.id, job).is_some() {
                    return Err(Error::DuplicateId(r.id));
                }
                f.waiting.push_back(r.id);
            }
        }
        self.emit(|| json!({"t_us": now, "event": "arrival", "id": r.id, "predicted": predicted}))?;
        if !self.aging_pending {
            if let (Store::Queues(_), Some(k)) = (&self.store, self.cfg.scheduler.aging()) {
                self.aging_pending = true;
                self.push(now + ms_to_us(k / 4.0).max(1), EventKind::AgingTick)?;
            }
        }
        Ok(())
    }

    fn on_aging_tick(&mut self) -> Result<()> {
        let now = self.now;
        let Store::Queues(q) = &mut self.store else {
            return Ok(());
        };
        let promoted = q.apply_aging(now);
        let live = q.len();
        if !promoted.is_empty() {
            self.emit(|| json!({"t_us": now, "event": "aging", "promoted": promoted}))?;
        }
        match self.cfg.scheduler.aging() {
            Some(k) if live > 0 => self.push(now + ms_to_us(k / 4.0).max(1), EventKind::AgingTick)?,
            _ => self.aging_pending = false,
        }
        Ok(())
    }

    fn on_transfer(&mut self, id: RequestId) -> Result<()> {
        let dir = self.memory.complete(id)?;
        let now = self.now;
        self.emit(|| json!({"t_us": now, "event": "transfer_done", "id": id, "direction": dir}))
    }

    fn on_iteration_done(&mut self) -> Result<()> {
        let batch = self.batch.take().ok_or_else(|| self.invariant("no batch running".into()))?;
        let now = self.now;
        for id in batch {
            let (overrun, finished) = {
                let c = &mut self.counters;
                let job = self.store.job_mut(id);
                if job.prefilled {
                    job.generated += 1;
                    job.first_token_us.get_or_insert(now);
                    c.executed_tokens += 1;
                } else {
                    let tokens = (job.request.input_len + job.generated) as u64;
                    c.executed_tokens += tokens;
                    if job.generated > 0 {
                        c.recomputed_tokens += tokens;
                    }
                    job.prefilled = true;
                }
                (job.generated > job.request.output_len, job.is_finished())
            };
            if overrun {
                return Err(self.invariant(format!("job {id} generated past its length")));
            }
            if finished {
                self.finish(id)?;
            } else if let Store::Queues(q) = &mut self.store {
                q.requeue(id, now)?;
            }
        }
        Ok(())
    }

    fn finish(&mut self, id: RequestId) -> Result<()> {
        let job = match &mut self.store {
            Store::Queues(q) => q.remove(id),
            Store::Fcfs(f) => {
                f.running.retain(|r| *r != id);
                f.jobs.remove(&id)
            }
        }
        .expect("finished job is live");
        self.memory.release(id);
        self.completed += 1;
        self.last_progress = self.now;
        self.counters.demotions += job.demotions as u64;
        if let (Some(p), Some(v)) = (self.predictor.as_mut(), self.embeddings.remove(&id)) {
            p.update(v, job.request.output_len)?;
        }
        let r = &job.request;
        let e2e_us = self.now - r.arrival_us;
        let e2e_ms = us_to_ms(e2e_us);
        self.records.push(RequestRecord {
            id,
            input_len: r.input_len,
            output_len: r.output_len,
            arrival_ms: us_to_ms(r.arrival_us),
            first_token_ms: us_to_ms(job.first_token_us.unwrap_or(self.now)),
            completion_ms: us_to_ms(self.now),
            generated: job.generated,
            e2e_ms,
            normalized_ms_per_token: e2e_ms / job.generated.max(1) as f64,
            predicted_len: self.predictions.remove(&id),
            demotions: job.demotions,
        });
        let now = self.now;
        self.emit(|| json!({"t_us": now, "event": "complete", "id": id, "e2e_us": e2e_us}))
    }

    fn try_start(&mut self) -> Result<()> {
        if self.store.len() == 0 {
            return Ok(());
        }
        let batch = if self.policy.is_fcfs() {
            self.select_fcfs()?
        } else {
            loop {
                let sel = self.select_queued();
                self.allocate(&sel.batch)?;
                let mut dropped = false;
                if self.policy.plans_swaps() {
                    let slots = self.cfg.scheduler.max_batch.saturating_sub(sel.batch.len());
                    let wanted: BTreeSet<RequestId> = sel.blocked_memory.iter().take(slots).copied().collect();
                    dropped = self.plan_and_apply(&sel.batch, &wanted)?;
                }
                if !sel.batch.is_empty() || self.memory.has_in_flight() {
                    break sel.batch;
                }
                if dropped {
                    continue;
                }
                if !self.emergency_evict()? {
                    let capacity = self.memory.gpu_capacity();
                    let hopeless: Vec<RequestId> = self
                        .store
                        .jobs()
                        .filter(|j| self.bytes_for_next(j) > capacity)
                        .map(|j| j.id())
                        .collect();
                    if !hopeless.is_empty() {
                        return Err(Error::Deadlock { blocked: hopeless });
                    }
                    break sel.batch;
                }
            }
        };
        if batch.is_empty() {
            return Ok(());
        }
        self.launch(batch)
    }

    /// Plans swaps for jobs holding a cache, plus fresh jobs the selector
    /// wanted but could not fit, while `batch` runs. Returns whether any
    /// cache was dropped in place of an offload.
    fn plan_and_apply(&mut self, batch: &[RequestId], blocked: &BTreeSet<RequestId>) -> Result<bool> {
        let reserved: u64 = batch
            .iter()
            .map(|id| self.bytes_for_next(self.store.job(*id)))
            .sum();
        let Store::Queues(q) = &mut self.store else {
            return Ok(false);
        };
        let now = self.now;
        let ewts = ewt_all(q, now);
        let recompute = self.policy == PolicyKind::Recompute;
        let bits = self.cfg.memory.quant_bits;
        let mut candidates = Vec::with_capacity(ewts.len());
        for (rank, (id, e)) in ewts.into_iter().enumerate() {
            q.get_mut(id).expect("ranked").ewt_ms = e;
            let residency = self.memory.residency(id);
            let wanted = match residency {
                Residency::Gpu | Residency::Cpu => !batch.contains(&id),
                Residency::None => blocked.contains(&id),
                _ => false,
            };
            if !wanted {
                continue;
            }
            let job = q.get(id).expect("ranked");
            candidates.push(SwapCandidate {
                id,
                level: job.level,
                ewt_ms: e,
                rank,
                residency,
                gpu_bytes: kv_bytes(&self.model, Self::tokens_after(job) as u64, self.model.bytes_per_value),
                cpu_bytes: if recompute {
                    0
                } else {
                    quantized_kv_bytes(&self.model, Self::tokens_now(job) as u64, bits)
                },
            });
        }
        let plan = plan_swaps(&candidates, &self.memory, reserved, now);
        self.hold_new = plan.cpu_exhausted;
        let mut dropped = false;
        for cmd in plan.commands {
            if recompute {
                debug_assert_eq!(cmd.direction, Direction::Offload);
                self.drop_cache(cmd.job)?;
                dropped = true;
                continue;
            }
            let gpu_after = match cmd.direction {
                Direction::Offload => {
                    self.counters.swaps.offloads += 1;
                    self.counters.swaps.offload_bytes += cmd.bytes;
                    0
                }
                Direction::Upload => {
                    self.counters.swaps.uploads += 1;
                    self.counters.swaps.upload_bytes += cmd.bytes;
                    self.kv(Self::tokens_now(self.store.job(cmd.job)))
                }
            };
            self.memory.begin(cmd, gpu_after)?;
            self.push(cmd.completion_us, EventKind::Transfer(cmd.job))?;
            self.emit(|| json!({
                "t_us": now, "event": "transfer_start", "id": cmd.job,
                "direction": cmd.direction, "bytes": cmd.bytes, "completion_us": cmd.completion_us
            }))?;
        }
        Ok(dropped)
    }

    /// Deletes a GPU cache; the job will rebuild it with a prefill.
    fn drop_cache(&mut self, id: RequestId) -> Result<()> {
        self.memory.drop_gpu(id)?;
        self.counters.swaps.kv_drops += 1;
        match &mut self.store {
            Store::Queues(q) => {
                q.get_mut(id).expect("live").prefilled = false;
                q.refresh(id);
            }
            Store::Fcfs(f) => f.jobs.get_mut(&id).expect("live").prefilled = false,
        }
        let now = self.now;
        self.emit(|| json!({"t_us": now, "event": "kv_drop", "id": id}))
    }

    fn select_queued(&mut self) -> BatchSelection {
        let Store::Queues(q) = &self.store else {
            return BatchSelection::default();
        };
        let free = self.memory.gpu_free();
        let mut reserved = 0u64;
        let hold_new = self.hold_new;
        q.select_batch(self.cfg.scheduler.max_batch, |job| {
            let res = self.memory.residency(job.id());
            match res {
                Residency::Gpu | Residency::None => {
                    if res == Residency::None && hold_new && !job.started {
                        return Admission::BlockedMemory;
                    }
                    let need = self.bytes_for_next(job).saturating_sub(self.memory.gpu_bytes(job.id()));
                    if reserved + need <= free {
                        reserved += need;
                        Admission::Run
                    } else {
                        Admission::BlockedMemory
                    }
                }
                _ => Admission::BlockedSwap,
            }
        })
    }

    /// Nothing can run and nothing is moving: drop the cache of the
    /// lowest-ranked GPU-resident job. Returns false if there is none.
    fn emergency_evict(&mut self) -> Result<bool> {
        let victim = self
            .store
            .ids()
            .into_iter()
            .rev()
            .find(|id| self.memory.residency(*id) == Residency::Gpu);
        match victim {
            Some(id) => {
                self.counters.swaps.emergency_evictions += 1;
                self.drop_cache(id)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn select_fcfs(&mut self) -> Result<Vec<RequestId>> {
        let cap = self.cfg.memory.fcfs_max_batch;
        let Store::Fcfs(f) = &self.store else {
            return Ok(Vec::new());
        };
        let mut running = f.running.clone();
        let mut waiting = f.waiting.clone();
        let growth = |engine: &Self, ids: &[RequestId]| -> u64 {
            ids.iter()
                .map(|id| {
                    let job = engine.store.job(*id);
                    engine.bytes_for_next(job).saturating_sub(engine.memory.gpu_bytes(*id))
                })
                .sum()
        };
        // The paged baseline preempts its newest jobs when the batch
        // outgrows memory; they rejoin the head of the line.
        let mut preempted = Vec::new();
        let mut need = growth(self, &running);
        while need > self.memory.gpu_free() && !running.is_empty() {
            let victim = running.pop().expect("non-empty");
            if self.memory.residency(victim) == Residency::Gpu {
                self.drop_cache(victim)?;
            }
            self.counters.swaps.fcfs_preemptions += 1;
            preempted.push(victim);
            need = growth(self, &running);
        }
        for id in preempted.iter() {
            waiting.push_front(*id);
        }
        if preempted.is_empty() {
            let mut budget = self.memory.gpu_free() - need;
            while running.len() < cap {
                let Some(&id) = waiting.front() else { break };
                let bytes = self.bytes_for_next(self.store.job(id));
                if bytes > budget {
                    break;
                }
                budget -= bytes;
                waiting.pop_front();
                running.push(id);
            }
        }
        if running.is_empty() {
            if let Some(&id) = waiting.front() {
                if self.bytes_for_next(self.store.job(id)) > self.memory.gpu_capacity() {
                    return Err(Error::Deadlock { blocked: waiting.into() });
                }
            }
        }
        if let Store::Fcfs(f) = &mut self.store {
            f.running = running.clone();
            f.waiting = waiting;
        }
        Ok(running)
    }

    /// Sizes each batch member's GPU cache for its next iteration.
    fn allocate(&mut self, batch: &[RequestId]) -> Result<()> {
        for &id in batch {
            let bytes = self.bytes_for_next(self.store.job(id));
            self.memory
                .set_gpu_bytes(id, bytes)
                .map_err(|e| self.invariant(e.to_string()))?;
        }
        Ok(())
    }

    fn launch(&mut self, batch: Vec<RequestId>) -> Result<()> {
        self.allocate(&batch)?;
        let mut work = Vec::with_capacity(batch.len());
        for &id in &batch {
            let job = self.store.job_mut(id);
            job.started = true;
            work.push(if job.prefilled {
                Work::Decode {
                    input_len: job.request.input_len,
                    generated: job.generated,
                }
            } else {
                Work::Prefill {
                    tokens: job.request.input_len + job.generated,
                }
            });
        }
        let ms = iteration_latency(&work, &self.exec, &mut self.rng);
        let dur = duration_us(ms);
        self.counters.iterations += 1;
        let now = self.now;
        self.emit(|| json!({"t_us": now, "event": "iteration", "batch": &batch, "duration_us": dur}))?;
        self.batch = Some(batch);
        self.push(now + dur, EventKind::IterationDone)
    }

    fn check(&self) -> Result<()> {
        self.memory.check().map_err(|m| self.invariant(m))?;
        let live = self.store.len() as u64;
        let started = self.store.jobs().filter(|j| j.started).count() as u64;
        let deferred = live - started;
        if self.arrived != self.completed + started + deferred {
            return Err(self.invariant(format!(
                "conservation: arrived {} != completed {} + live {started} + deferred {deferred}",
                self.arrived, self.completed
            )));
        }
        match &self.store {
            Store::Queues(q) => q.check().map_err(|m| self.invariant(m))?,
            Store::Fcfs(f) => {
                if f.running.len() + f.waiting.len() != f.jobs.len() {
                    return Err(self.invariant("FCFS running + waiting != jobs".into()));
                }
            }
        }
        Ok(())
    }

    fn report(&self) -> Result<MetricsReport> {
        let recs = &self.records;
        let e2e: Vec<f64> = recs.iter().map(|r| r.e2e_ms).collect();
        let first_arrival = self.trace.requests.first().map_or(0, |r| r.arrival_us);
        let last_done = recs.iter().map(|r| ms_to_us(r.completion_ms)).max().unwrap_or(first_arrival);
        let makespan_s = us_to_ms(last_done.saturating_sub(first_arrival)) / 1000.0;
        let per_s = |x: f64| if makespan_s > 0.0 { x / makespan_s } else { 0.0 };
        let tokens: u64 = recs.iter().map(|r| r.generated as u64).sum();
        let c = &self.counters;
        let predictor = self.predictor.as_ref().map(|_| {
            let n = c.predictions.max(1) as f64;
            PredictorStats {
                predictions: c.predictions,
                pred_error: c.pred_error_sum / n,
                retrieved_fraction: c.retrieved as f64 / n,
                mean_latency_ms: c.pred_latency_sum / n,
            }
        });
        Ok(MetricsReport {
            meta: RunMeta {
                policy: self.policy.name().into(),
                seed: self.cfg.seed,
                rate: self.trace.meta.rate,
                trace_family: self.trace.meta.distribution.clone(),
                config_digest: self.cfg.digest()?,
                env_digest: self.cfg.env_digest()?,
            },
            arrived: self.arrived,
            completed: self.completed,
            truncated: self.truncated,
            normalized_latency_ms_per_token: mean(recs.iter().map(|r| r.normalized_ms_per_token)),
            baseline_normalized_latency_ms_per_token: mean(recs.iter().map(|r| {
                self.exec.unloaded_latency_ms(r.input_len, r.output_len) / r.output_len.max(1) as f64
            })),
            mean_e2e_ms: mean(e2e.iter().copied()),
            p95_e2e_ms: percentile(&e2e, 95.0),
            mean_ttft_ms: mean(recs.iter().map(|r| r.first_token_ms - r.arrival_ms)),
            throughput_rps: per_s(recs.len() as f64),
            throughput_tps: per_s(tokens as f64),
            makespan_s,
            iterations: c.iterations,
            executed_tokens: c.executed_tokens,
            recomputed_tokens: c.recomputed_tokens,
            demotions: c.demotions,
            gpu_capacity_bytes: self.memory.gpu_capacity(),
            gpu_high_water_bytes: self.memory.gpu_high_water(),
            swaps: c.swaps.clone(),
            predictor,
            requests: recs.clone(),
        })
    }
}
