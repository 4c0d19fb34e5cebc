//! Resource accounting and per-stage worker pools.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("requested {requested} slots but only {free} of {budget} are free")]
    Exhausted { requested: usize, free: usize, budget: usize },
    #[error("pool {0:?} has been destroyed")]
    Destroyed(String),
}

/// Counts abstract compute slots in use against a fixed budget. Clones share
/// the same accounting.
#[derive(Debug, Clone)]
pub struct ResourceLedger {
    inner: Arc<LedgerInner>,
}

#[derive(Debug)]
struct LedgerInner {
    budget: usize,
    allocated: Mutex<usize>,
    peak: AtomicUsize,
}

impl ResourceLedger {
    pub fn new(budget: usize) -> Self {
        Self { inner: Arc::new(LedgerInner { budget, allocated: Mutex::new(0), peak: AtomicUsize::new(0) }) }
    }

    pub fn budget(&self) -> usize {
        self.inner.budget
    }

    pub fn allocated(&self) -> usize {
        *self.inner.allocated.lock().expect("ledger lock")
    }

    pub fn free(&self) -> usize {
        self.budget() - self.allocated()
    }

    /// Highest allocation ever observed.
    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn reserve(&self, slots: usize) -> Result<Reservation, PoolError> {
        let budget = self.budget();
        let mut allocated = self.inner.allocated.lock().expect("ledger lock");
        if *allocated + slots > budget {
            return Err(PoolError::Exhausted { requested: slots, free: budget - *allocated, budget });
        }
        *allocated += slots;
        self.inner.peak.fetch_max(*allocated, Ordering::SeqCst);
        Ok(Reservation { ledger: self.clone(), slots })
    }

    fn release(&self, slots: usize) {
        *self.inner.allocated.lock().expect("ledger lock") -= slots;
    }
}

/// Slots held until dropped.
#[derive(Debug)]
pub struct Reservation {
    ledger: ResourceLedger,
    slots: usize,
}

impl Reservation {
    pub fn slots(&self) -> usize {
        self.slots
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.ledger.release(self.slots);
    }
}

/// Result of one attempt at a trial.
#[derive(Debug)]
pub struct Attempt<R> {
    pub result: Result<R, AttemptError>,
    /// Virtual seconds the attempt occupied its worker.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    Transient(String),
    Persistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialStatus {
    Ok,
    Failed,
    /// Not launched because an earlier stage failed it.
    Excluded,
}

#[derive(Debug)]
pub struct TrialOutcome<R> {
    pub index: usize,
    pub result: Result<R, String>,
    pub attempts: u32,
    /// Virtual placement on the pool's schedule.
    pub worker: usize,
    pub start: f64,
    pub end: f64,
}

impl<R> TrialOutcome<R> {
    pub fn status(&self) -> TrialStatus {
        if self.result.is_ok() {
            TrialStatus::Ok
        } else {
            TrialStatus::Failed
        }
    }
}

/// Workers for one stage, holding their slots from creation to [`destroy`](StagePool::destroy).
#[derive(Debug)]
pub struct StagePool {
    name: String,
    workers: usize,
    retry_budget: u32,
    reservation: Option<Reservation>,
}

impl StagePool {
    /// Reserves `workers * slots_per_worker` slots.
    pub fn create(
        name: impl Into<String>,
        ledger: &ResourceLedger,
        workers: usize,
        slots_per_worker: usize,
        retry_budget: u32,
    ) -> Result<Self, PoolError> {
        let workers = workers.max(1);
        let reservation = ledger.reserve(workers * slots_per_worker)?;
        Ok(Self { name: name.into(), workers, retry_budget, reservation: Some(reservation) })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_destroyed(&self) -> bool {
        self.reservation.is_none()
    }

    /// Releases the pool's slots. Calling it again does nothing.
    pub fn destroy(&mut self) {
        if self.reservation.take().is_some() {
            log::debug!("pool {} destroyed", self.name);
        }
    }

    /// Runs every item to a terminal outcome and returns outcomes in item
    /// order. Transient failures are retried up to the retry budget.
    pub fn run<T, R, F>(&mut self, items: &[T], work: F) -> Result<Vec<TrialOutcome<R>>, PoolError>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T, u32) -> Attempt<R> + Sync,
    {
        if self.is_destroyed() {
            return Err(PoolError::Destroyed(self.name.clone()));
        }
        let queue = Mutex::new((0..items.len()).collect::<VecDeque<_>>());
        let (tx, rx) = mpsc::channel::<(usize, Result<R, String>, u32, f64)>();
        let retry_budget = self.retry_budget;
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(items.len()) {
                let tx = tx.clone();
                let (queue, work) = (&queue, &work);
                scope.spawn(move || loop {
                    let Some(i) = queue.lock().expect("queue lock").pop_front() else { break };
                    let mut attempt = 0;
                    let mut cost = 0.0;
                    let result = loop {
                        let a = work(i, &items[i], attempt);
                        cost += a.cost;
                        attempt += 1;
                        match a.result {
                            Ok(r) => break Ok(r),
                            Err(AttemptError::Transient(e)) if attempt <= retry_budget => {
                                log::info!("trial {i}: transient failure, retrying: {e}");
                            }
                            Err(AttemptError::Transient(e) | AttemptError::Persistent(e)) => break Err(e),
                        }
                    };
                    if tx.send((i, result, attempt, cost)).is_err() {
                        break;
                    }
                });
            }
        });
        drop(tx);

        let mut slots: Vec<Option<Attempted<R>>> = (0..items.len()).map(|_| None).collect();
        for (i, result, attempts, cost) in rx {
            slots[i] = Some((result, attempts, cost));
        }
        let costs: Vec<f64> = slots.iter().map(|s| s.as_ref().map_or(0.0, |s| s.2)).collect();
        let placement = list_schedule(&costs, self.workers);
        Ok(slots
            .into_iter()
            .zip(placement)
            .enumerate()
            .map(|(index, (slot, (worker, start, end)))| {
                let (result, attempts, _) = slot.expect("every trial reports back");
                TrialOutcome { index, result, attempts, worker, start, end }
            })
            .collect())
    }
}

/// Final result, attempt count and virtual cost of one trial.
type Attempted<R> = (Result<R, String>, u32, f64);

impl Drop for StagePool {
    fn drop(&mut self) {
        self.destroy();
    }
}

/// Greedy in-order schedule: each job goes to the worker that frees up
/// first (lowest index on ties). Returns `(worker, start, end)` per job.
pub fn list_schedule(costs: &[f64], workers: usize) -> Vec<(usize, f64, f64)> {
    let mut free_at = vec![0.0f64; workers.max(1)];
    costs
        .iter()
        .map(|&c| {
            let (w, &t) = free_at
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                .expect("at least one worker");
            free_at[w] = t + c;
            (w, t, t + c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_accounting() {
        let ledger = ResourceLedger::new(4);
        let a = ledger.reserve(3).unwrap();
        assert!(matches!(ledger.reserve(2), Err(PoolError::Exhausted { free: 1, .. })));
        drop(a);
        assert_eq!(ledger.allocated(), 0);
        assert_eq!(ledger.peak(), 3);
    }

    #[test]
    fn five_trials_two_workers_take_three_waves() {
        let ledger = ResourceLedger::new(2);
        let mut pool = StagePool::create("compress", &ledger, 2, 1, 2).unwrap();
        assert_eq!(ledger.free(), 0);
        let out = pool.run(&[(); 5], |_, _, _| Attempt { result: Ok(()), cost: 10.0 }).unwrap();
        let makespan = out.iter().map(|o| o.end).fold(0.0, f64::max);
        assert_eq!(makespan, 30.0);
        pool.destroy();
        pool.destroy();
        assert_eq!(ledger.free(), 2);
        assert!(matches!(pool.run(&[()], |_, _, _| Attempt { result: Ok(()), cost: 1.0 }), Err(PoolError::Destroyed(_))));
    }

    #[test]
    fn retries_are_bounded() {
        let ledger = ResourceLedger::new(3);
        let mut pool = StagePool::create("s", &ledger, 3, 1, 2).unwrap();
        // item = number of transient failures before success
        let out = pool
            .run(&[0u32, 1, 2, 3], |_, &fails, attempt| Attempt {
                result: if attempt < fails { Err(AttemptError::Transient("x".into())) } else { Ok(attempt) },
                cost: 1.0,
            })
            .unwrap();
        let summary: Vec<(bool, u32)> = out.iter().map(|o| (o.result.is_ok(), o.attempts)).collect();
        assert_eq!(summary, vec![(true, 1), (true, 2), (true, 3), (false, 3)]);
    }

    #[test]
    fn persistent_failures_are_not_retried() {
        let ledger = ResourceLedger::new(1);
        let mut pool = StagePool::create("s", &ledger, 1, 1, 5).unwrap();
        let out = pool
            .run(&[()], |_, _, _| Attempt::<()> { result: Err(AttemptError::Persistent("gone".into())), cost: 2.0 })
            .unwrap();
        assert_eq!(out[0].attempts, 1);
        assert_eq!(out[0].status(), TrialStatus::Failed);
    }

    #[test]
    fn pool_larger_than_budget_is_refused() {
        let ledger = ResourceLedger::new(2);
        assert!(StagePool::create("s", &ledger, 3, 1, 0).is_err());
        assert_eq!(ledger.allocated(), 0);
    }
}
