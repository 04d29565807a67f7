//! Multi-level priority queues over estimated remaining time, with virtual
//! aging, misprediction demotion and iteration-level batch selection.
//!
//! Levels are geometric bands of remaining time: level 0 covers `[0, B)`,
//! level `i >= 1` covers `[B * 2^(i-1), B * 2^i)`, and the last level is
//! unbounded. Within a level, jobs holding an aging promotion come first in
//! promotion order; the rest follow by remaining time, then enqueue sequence.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::costmodel::{remaining_time, CostCoefficients, JobProgress};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::workload::{us_to_ms, Micros, Request, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub levels: usize,
    pub band_base_ms: f64,
    /// Aging threshold K; infinite disables aging.
    pub aging_ms: f64,
    pub max_batch: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            levels: 4,
            band_base_ms: 1000.0,
            aging_ms: 5000.0,
            max_batch: 1024,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.max_batch == 0 {
            return Err(Error::InvalidParameter("levels and max_batch must be >= 1".into()));
        }
        if !(self.band_base_ms > 0.0 && self.band_base_ms.is_finite()) {
            return Err(Error::InvalidParameter("band_base_ms must be finite and > 0".into()));
        }
        if !(self.aging_ms > 0.0) {
            return Err(Error::InvalidParameter("aging_ms must be > 0 (inf disables)".into()));
        }
        Ok(())
    }

    pub fn aging(&self) -> Option<f64> {
        self.aging_ms.is_finite().then_some(self.aging_ms)
    }
}

/// Band index of a remaining time.
pub fn assign_priority(remaining_ms: f64, band_base_ms: f64, levels: usize) -> usize {
    let top = levels.saturating_sub(1);
    if remaining_ms < band_base_ms || top == 0 {
        return 0;
    }
    let mut level = 1;
    let mut upper = band_base_ms * 2.0;
    while level < top && remaining_ms >= upper {
        level += 1;
        upper *= 2.0;
    }
    level
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub request: Request,
    pub predicted_len: u32,
    /// Prediction at admission, before any doubling.
    pub initial_prediction: u32,
    pub max_len: u32,
    pub generated: u32,
    /// KV cache exists (on some tier), so the next iteration is a decode.
    pub prefilled: bool,
    pub level: usize,
    pub enqueue_seq: u64,
    pub enqueue_time_us: Micros,
    pub last_promotion_us: Micros,
    /// Promotion order once aging has promoted the job. Aged jobs lead their
    /// level and keep it on requeue until completion or demotion.
    pub aged: Option<u64>,
    /// Remaining time cached at the last (re)enqueue.
    pub remaining_ms: f64,
    pub ewt_ms: f64,
    pub started: bool,
    pub first_token_us: Option<Micros>,
    pub demotions: u32,
}

impl Job {
    pub fn new(request: Request, predicted_len: u32, max_len: u32) -> Self {
        let predicted_len = predicted_len.clamp(1, max_len.max(1));
        Job {
            request,
            predicted_len,
            initial_prediction: predicted_len,
            max_len,
            generated: 0,
            prefilled: false,
            level: 0,
            enqueue_seq: 0,
            enqueue_time_us: 0,
            last_promotion_us: 0,
            aged: None,
            remaining_ms: 0.0,
            ewt_ms: 0.0,
            started: false,
            first_token_us: None,
            demotions: 0,
        }
    }

    pub fn id(&self) -> RequestId {
        self.request.id
    }

    pub fn progress(&self) -> JobProgress {
        JobProgress {
            input_len: self.request.input_len,
            predicted_len: self.predicted_len,
            generated: self.generated,
            prefilled: self.prefilled,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.generated >= self.request.output_len
    }

    /// Generated up to the prediction without reaching the true end.
    pub fn prediction_exceeded(&self) -> bool {
        !self.is_finished() && self.generated >= self.predicted_len
    }
}

/// Doubles the prediction (clamped to `max_len`) and moves one level down.
/// The prediction also grows past `generated` so the job keeps a positive
/// remaining estimate when `max_len` is too small.
pub fn on_prediction_exceeded(job: &mut Job, levels: usize) {
    let doubled = job.predicted_len.saturating_mul(2).min(job.max_len);
    job.predicted_len = doubled.max(job.generated + 1).max(job.predicted_len);
    job.level = (job.level + 1).min(levels.saturating_sub(1));
    job.demotions += 1;
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key {
    aged: u64,
    remaining_ms: f64,
    seq: u64,
    id: RequestId,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, o: &Self) -> Ordering {
        self.aged
            .cmp(&o.aged)
            .then(self.remaining_ms.total_cmp(&o.remaining_ms))
            .then(self.seq.cmp(&o.seq))
            .then(self.id.cmp(&o.id))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Run,
    /// KV lives on CPU or is moving.
    BlockedSwap,
    /// Not enough GPU memory for the job's next step.
    BlockedMemory,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchSelection {
    pub batch: Vec<RequestId>,
    pub blocked_swap: Vec<RequestId>,
    pub blocked_memory: Vec<RequestId>,
}

/// The `h` queues. Owns every live job.
#[derive(Debug, Clone)]
pub struct PriorityQueueSet<T: Scalar> {
    config: SchedulerConfig,
    coeffs: CostCoefficients<T>,
    jobs: BTreeMap<RequestId, Job>,
    queues: Vec<BTreeSet<Key>>,
    keys: BTreeMap<RequestId, (usize, Key)>,
    next_seq: u64,
    next_age: u64,
}

impl<T: Scalar> PriorityQueueSet<T> {
    pub fn new(config: SchedulerConfig, coeffs: CostCoefficients<T>) -> Result<Self> {
        config.validate()?;
        coeffs.validate()?;
        Ok(PriorityQueueSet {
            queues: vec![BTreeSet::new(); config.levels],
            config,
            coeffs,
            jobs: BTreeMap::new(),
            keys: BTreeMap::new(),
            next_seq: 0,
            next_age: 0,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn coefficients(&self) -> &CostCoefficients<T> {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn get(&self, id: RequestId) -> Option<&Job> {
        self.jobs.get(&id)
    }

    pub fn get_mut(&mut self, id: RequestId) -> Option<&mut Job> {
        self.jobs.get_mut(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn remaining_ms(&self, job: &Job) -> f64 {
        remaining_time(&job.progress(), &self.coeffs).as_f64()
    }

    pub fn band(&self, remaining_ms: f64) -> usize {
        assign_priority(remaining_ms, self.config.band_base_ms, self.config.levels)
    }

    fn insert_key(&mut self, id: RequestId, level: usize) {
        let job = &self.jobs[&id];
        let key = Key {
            aged: job.aged.unwrap_or(u64::MAX),
            remaining_ms: job.remaining_ms,
            seq: job.enqueue_seq,
            id,
        };
        self.queues[level].insert(key);
        self.keys.insert(id, (level, key));
    }

    fn remove_key(&mut self, id: RequestId) {
        if let Some((level, key)) = self.keys.remove(&id) {
            self.queues[level].remove(&key);
        }
    }

    /// Enqueues a newly arrived job in the band of its estimate.
    pub fn admit(&mut self, mut job: Job, now: Micros) -> Result<()> {
        let id = job.id();
        if self.jobs.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        job.enqueue_seq = self.next_seq;
        self.next_seq += 1;
        job.enqueue_time_us = now;
        job.last_promotion_us = now;
        job.remaining_ms = self.remaining_ms(&job);
        job.level = self.band(job.remaining_ms);
        let level = job.level;
        self.jobs.insert(id, job);
        self.insert_key(id, level);
        Ok(())
    }

    /// Re-enqueues a job after it took part in an iteration: its band is
    /// recomputed and its aging clock restarts. A pending demotion is applied
    /// first, clears any aging promotion, and the job never lands above its
    /// demoted level. An aged job never falls below its current level.
    pub fn requeue(&mut self, id: RequestId, now: Micros) -> Result<()> {
        let levels = self.config.levels;
        let mut job = self.jobs.remove(&id).ok_or(Error::Empty("job not queued"))?;
        let mut floor = 0;
        if job.prediction_exceeded() {
            on_prediction_exceeded(&mut job, levels);
            floor = job.level;
            job.aged = None;
        }
        job.remaining_ms = self.remaining_ms(&job);
        let band = self.band(job.remaining_ms);
        job.level = match job.aged {
            Some(_) => band.min(job.level),
            None => band.max(floor),
        };
        job.last_promotion_us = now;
        self.jobs.insert(id, job);
        self.remove_key(id);
        let level = self.jobs[&id].level;
        self.insert_key(id, level);
        Ok(())
    }

    /// Updates the cached remaining time in place without moving levels,
    /// e.g. after the job's cache was dropped.
    pub fn refresh(&mut self, id: RequestId) {
        if let Some(job) = self.jobs.get(&id) {
            let remaining = self.remaining_ms(job);
            let level = job.level;
            self.remove_key(id);
            self.jobs.get_mut(&id).unwrap().remaining_ms = remaining;
            self.insert_key(id, level);
        }
    }

    pub fn remove(&mut self, id: RequestId) -> Option<Job> {
        self.remove_key(id);
        self.jobs.remove(&id)
    }

    /// Promotes by one level every job above level 0 that has waited at
    /// least K since its last promotion, and marks it aged. Returns the
    /// promoted ids.
    pub fn apply_aging(&mut self, now: Micros) -> Vec<RequestId> {
        let Some(k) = self.config.aging() else {
            return Vec::new();
        };
        let due: Vec<RequestId> = self
            .jobs
            .values()
            .filter(|j| j.level > 0 && us_to_ms(now.saturating_sub(j.last_promotion_us)) >= k)
            .map(|j| j.id())
            .collect();
        for &id in &due {
            self.remove_key(id);
            let job = self.jobs.get_mut(&id).unwrap();
            job.level -= 1;
            job.last_promotion_us = now;
            if job.aged.is_none() {
                job.aged = Some(self.next_age);
                self.next_age += 1;
            }
            let level = job.level;
            self.insert_key(id, level);
        }
        due
    }


    /// Jobs in scheduling order: level, aging promotion, remaining time,
    /// then FIFO.
    pub fn ranked(&self) -> Vec<&Job> {
        self.queues
            .iter()
            .flat_map(|q| q.iter().map(|k| &self.jobs[&k.id]))
            .collect()
    }

    pub fn ranked_ids(&self) -> Vec<RequestId> {
        self.queues.iter().flat_map(|q| q.iter().map(|k| k.id)).collect()
    }

    /// Scans in rank order and takes up to `max_batch` jobs that `admit`
    /// lets run. Blocked jobs are skipped and reported.
    pub fn select_batch<F>(&self, max_batch: usize, mut admit: F) -> BatchSelection
    where
        F: FnMut(&Job) -> Admission,
    {
        let mut sel = BatchSelection::default();
        for q in &self.queues {
            for key in q {
                if sel.batch.len() >= max_batch {
                    return sel;
                }
                match admit(&self.jobs[&key.id]) {
                    Admission::Run => sel.batch.push(key.id),
                    Admission::BlockedSwap => sel.blocked_swap.push(key.id),
                    Admission::BlockedMemory => sel.blocked_memory.push(key.id),
                }
            }
        }
        sel
    }

    /// Every job sits in exactly one queue at its recorded level.
    pub fn check(&self) -> std::result::Result<(), String> {
        let queued: usize = self.queues.iter().map(|q| q.len()).sum();
        if queued != self.jobs.len() || self.keys.len() != self.jobs.len() {
            return Err(format!(
                "{} jobs but {queued} queue entries / {} keys",
                self.jobs.len(),
                self.keys.len()
            ));
        }
        for (id, job) in &self.jobs {
            match self.keys.get(id) {
                Some((level, _)) if *level == job.level && job.level < self.config.levels => {}
                _ => return Err(format!("job {id} misplaced (level {})", job.level)),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(id: u64, s: u32, n: u32) -> Request {
        Request {
            id,
            arrival_us: 0,
            input_len: s,
            output_len: n,
            prompt_tokens: None,
        }
    }

    fn coeffs() -> CostCoefficients<f64> {
        CostCoefficients::new(0.1, 0.0, 10.0).unwrap()
    }

    fn cfg() -> SchedulerConfig {
        SchedulerConfig {
            levels: 4,
            band_base_ms: 1000.0,
            aging_ms: 1000.0,
            max_batch: 8,
        }
    }

    #[test]
    fn band_arithmetic() {
        assert_eq!(assign_priority(0.0, 1000.0, 4), 0);
        assert_eq!(assign_priority(999.9, 1000.0, 4), 0);
        assert_eq!(assign_priority(1000.0, 1000.0, 4), 1);
        assert_eq!(assign_priority(1500.0, 1000.0, 4), 1);
        assert_eq!(assign_priority(2000.0, 1000.0, 4), 2);
        assert_eq!(assign_priority(3999.0, 1000.0, 4), 2);
        assert_eq!(assign_priority(1e12, 1000.0, 4), 3);
        assert_eq!(assign_priority(1e12, 1000.0, 1), 0);
    }

    #[test]
    fn equal_remaining_is_fifo() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        q.admit(Job::new(req(7, 10, 5), 5, 2048), 0).unwrap();
        q.admit(Job::new(req(3, 10, 5), 5, 2048), 0).unwrap();
        assert_eq!(q.ranked_ids(), vec![7, 3]);
    }

    #[test]
    fn demotion_doubles_and_steps_down() {
        let mut j = Job::new(req(1, 10, 180), 100, 2048);
        j.level = 2;
        j.generated = 100;
        assert!(j.prediction_exceeded());
        on_prediction_exceeded(&mut j, 4);
        assert_eq!((j.predicted_len, j.level), (200, 3));
        j.generated = 200;
        on_prediction_exceeded(&mut j, 4);
        assert_eq!((j.predicted_len, j.level), (400, 3));
    }

    #[test]
    fn demotion_clamps_to_max_len() {
        let mut j = Job::new(req(1, 10, 3000), 1500, 2048);
        j.generated = 1500;
        on_prediction_exceeded(&mut j, 4);
        assert_eq!(j.predicted_len, 2048);
    }

    #[test]
    fn requeue_applies_pending_demotion() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        q.admit(Job::new(req(1, 10, 50), 10, 2048), 0).unwrap();
        {
            let j = q.get_mut(1).unwrap();
            j.prefilled = true;
            j.generated = 10;
        }
        q.requeue(1, 5).unwrap();
        let j = q.get(1).unwrap();
        assert_eq!(j.predicted_len, 20);
        assert_eq!(j.level, 1);
        q.check().unwrap();
    }

    #[test]
    fn aging_steps_one_level_per_threshold() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        // 2000 steps of 10 ms: deep in the top band
        q.admit(Job::new(req(1, 10, 2000), 2000, 4096), 0).unwrap();
        q.admit(Job::new(req(2, 10, 1), 1, 4096), 0).unwrap();
        assert_eq!(q.get(1).unwrap().level, 3);
        assert!(q.apply_aging(999_999).is_empty());
        assert_eq!(q.apply_aging(1_000_000), vec![1]);
        assert_eq!(q.get(1).unwrap().level, 2);
        q.apply_aging(2_000_000);
        q.apply_aging(3_000_000);
        assert_eq!(q.get(1).unwrap().level, 0);
        assert_eq!(q.get(2).unwrap().level, 0);
        q.apply_aging(9_000_000);
        assert_eq!(q.get(1).unwrap().level, 0);
        q.check().unwrap();
    }

    #[test]
    fn promoted_job_leads_its_new_level() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        // 150 steps of 10 ms: level 1
        q.admit(Job::new(req(1, 10, 150), 150, 4096), 0).unwrap();
        q.admit(Job::new(req(2, 10, 2), 2, 4096), 500_000).unwrap();
        assert_eq!(q.get(1).unwrap().level, 1);
        assert_eq!(q.ranked_ids(), vec![2, 1]);
        assert_eq!(q.apply_aging(1_000_000), vec![1]);
        assert_eq!(q.ranked_ids(), vec![1, 2]);
        // level 0 jobs are never promoted
        assert!(q.apply_aging(9_000_000).is_empty());
        {
            let j = q.get_mut(1).unwrap();
            j.prefilled = true;
            j.generated = 1;
        }
        q.requeue(1, 9_000_000).unwrap();
        assert_eq!(q.ranked_ids()[0], 1);
        q.check().unwrap();
    }

    #[test]
    fn aged_job_stays_up_on_requeue_until_demoted() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        q.admit(Job::new(req(1, 10, 2000), 1500, 4096), 0).unwrap();
        assert_eq!(q.get(1).unwrap().level, 3);
        q.apply_aging(1_000_000);
        q.apply_aging(2_000_000);
        assert_eq!(q.get(1).unwrap().level, 1);
        {
            let j = q.get_mut(1).unwrap();
            j.prefilled = true;
            j.generated = 1;
        }
        q.requeue(1, 2_000_000).unwrap();
        assert_eq!(q.get(1).unwrap().level, 1);
        assert!(q.get(1).unwrap().aged.is_some());
        q.get_mut(1).unwrap().generated = 1500;
        q.requeue(1, 2_100_000).unwrap();
        let j = q.get(1).unwrap();
        assert_eq!(j.aged, None);
        // 1500 steps of 10 ms left after doubling: the last band
        assert_eq!(j.level, 3);
        q.check().unwrap();
    }

    #[test]
    fn infinite_aging_never_promotes() {
        let mut c = cfg();
        c.aging_ms = f64::INFINITY;
        let mut q = PriorityQueueSet::new(c, coeffs()).unwrap();
        q.admit(Job::new(req(1, 10, 2000), 2000, 4096), 0).unwrap();
        assert!(q.apply_aging(u64::MAX / 2).is_empty());
        assert_eq!(q.get(1).unwrap().level, 3);
    }

    #[test]
    fn blocked_jobs_are_skipped() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        q.admit(Job::new(req(1, 10, 5), 5, 2048), 0).unwrap();
        q.admit(Job::new(req(2, 10, 500), 500, 2048), 0).unwrap();
        assert!(q.get(1).unwrap().level < q.get(2).unwrap().level);
        let sel = q.select_batch(8, |j| {
            if j.id() == 1 {
                Admission::BlockedSwap
            } else {
                Admission::Run
            }
        });
        assert_eq!(sel.batch, vec![2]);
        assert_eq!(sel.blocked_swap, vec![1]);
    }

    #[test]
    fn batch_is_capped_and_ordered() {
        let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
        for i in 0..20u64 {
            let n = ((i * 37) % 300 + 1) as u32;
            q.admit(Job::new(req(i, 10, n), n, 2048), 0).unwrap();
        }
        let sel = q.select_batch(8, |_| Admission::Run);
        assert_eq!(sel.batch.len(), 8);
        let mut all: Vec<&Job> = q.jobs().collect();
        all.sort_by(|a, b| {
            (a.level, a.remaining_ms, a.enqueue_seq)
                .partial_cmp(&(b.level, b.remaining_ms, b.enqueue_seq))
                .unwrap()
        });
        let expect: Vec<u64> = all[..8].iter().map(|j| j.id()).collect();
        assert_eq!(sel.batch, expect);
    }

    proptest! {
        #[test]
        fn scaling_costs_and_bands_preserves_selection(
            lens in proptest::collection::vec((1u32..1500, 1u32..1500), 1..30),
            exp in -4i32..6,
            max_batch in 1usize..10,
        ) {
            let k = 2f64.powi(exp);
            let base = CostCoefficients::new(0.12, 0.0008, 28.0).unwrap();
            let mut c1 = cfg();
            c1.band_base_ms = 1000.0;
            let mut c2 = c1;
            c2.band_base_ms = 1000.0 * k;
            let mut a = PriorityQueueSet::new(c1, base).unwrap();
            let mut b = PriorityQueueSet::new(c2, base.scaled(k)).unwrap();
            for (i, &(s, n)) in lens.iter().enumerate() {
                a.admit(Job::new(req(i as u64, s, n), n, 2048), 0).unwrap();
                b.admit(Job::new(req(i as u64, s, n), n, 2048), 0).unwrap();
            }
            let sa = a.select_batch(max_batch, |_| Admission::Run);
            let sb = b.select_batch(max_batch, |_| Admission::Run);
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn every_job_in_exactly_one_queue(
            lens in proptest::collection::vec((1u32..500, 1u32..500, 1u32..500), 1..25),
            steps in 1usize..40,
        ) {
            let mut q = PriorityQueueSet::new(cfg(), coeffs()).unwrap();
            for (i, &(s, n, p)) in lens.iter().enumerate() {
                q.admit(Job::new(req(i as u64, s, n), p, 2048), 0).unwrap();
            }
            let mut now = 0;
            for _ in 0..steps {
                now += 400_000;
                q.apply_aging(now);
                let sel = q.select_batch(4, |_| Admission::Run);
                for id in sel.batch {
                    let done = {
                        let j = q.get_mut(id).unwrap();
                        j.prefilled = true;
                        j.generated += 1;
                        j.is_finished()
                    };
                    let before = q.get(id).unwrap().predicted_len;
                    if done {
                        q.remove(id);
                    } else {
                        q.requeue(id, now).unwrap();
                        prop_assert!(q.get(id).unwrap().predicted_len >= before);
                    }
                }
                prop_assert!(q.check().is_ok());
            }
        }
    }
}
