//! In-process simulated communicator.
//!
//! A [`World`] runs one closure per rank (SPMD style). Inside the closure a
//! [`Communicator`] offers the collectives the model-parallel layer needs.
//! Contributions are buffered per rank and folded in rank-ascending order
//! by whichever participant arrives last, so the reduction order never
//! depends on thread timing.
//!
//! Two backends are provided:
//!
//! * `Threaded` runs every rank on its own OS thread.
//! * `Sequential` also gives each rank a thread but passes a baton so that
//!   exactly one rank executes at a time, in rank order between
//!   collectives. It is the deterministic reference schedule.
//!
//! A world of size one runs its closure inline on the calling thread with
//! no synchronisation at all, which also makes it usable on targets without
//! threads.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Sequential,
    Threaded,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Backend::Sequential),
            "threaded" => Ok(Backend::Threaded),
            other => Err(Error::config(format!(
                "unknown backend `{other}` (expected sequential or threaded)"
            ))),
        }
    }
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// A group of `size` simulated workers.
#[derive(Clone, Debug)]
pub struct World {
    size: usize,
    backend: Backend,
    timeout: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    AllGather,
    AllReduceSum,
    AllReduceMax,
    Barrier,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::AllGather => "allgather",
            Op::AllReduceSum => "allreduce_sum",
            Op::AllReduceMax => "allreduce_max",
            Op::Barrier => "barrier",
        }
    }
}

struct State {
    generation: u64,
    arrived: usize,
    op: Option<Op>,
    slots: Vec<Option<Matrix>>,
    result: Option<std::result::Result<Arc<Matrix>, String>>,
    departed: usize,
    aborted: Option<String>,
    turn: usize,
}

struct Shared {
    size: usize,
    backend: Backend,
    timeout: Duration,
    state: Mutex<State>,
    cv: Condvar,
}

/// Per-rank handle passed to the worker closure.
pub struct Communicator {
    rank: usize,
    shared: Arc<Shared>,
}

impl World {
    pub fn new(size: usize, backend: Backend) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("world size must be positive"));
        }
        Ok(World {
            size,
            backend,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Runs `worker` once per rank and returns the per-rank results in rank
    /// order. If any rank fails, the first failing rank's error is returned
    /// (ranks that failed only because a peer aborted are skipped in favour
    /// of the root cause).
    pub fn run<R, F>(&self, worker: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&Communicator) -> Result<R> + Sync,
    {
        let shared = Arc::new(Shared {
            size: self.size,
            backend: self.backend,
            timeout: self.timeout,
            state: Mutex::new(State {
                generation: 0,
                arrived: 0,
                op: None,
                slots: vec![None; self.size],
                result: None,
                departed: 0,
                aborted: None,
                turn: 0,
            }),
            cv: Condvar::new(),
        });

        if self.size == 1 {
            let comm = Communicator { rank: 0, shared };
            return worker(&comm).map(|r| vec![r]);
        }

        let outcomes: Vec<Result<R>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..self.size)
                .map(|rank| {
                    let comm = Communicator {
                        rank,
                        shared: Arc::clone(&shared),
                    };
                    let worker = &worker;
                    scope.spawn(move || {
                        let out = comm.wait_turn("start").and_then(|_| worker(&comm));
                        comm.depart(out.as_ref().err());
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(rank, h)| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Collective {
                            op: "run",
                            rank,
                            reason: "worker panicked".into(),
                        })
                    })
                })
                .collect()
        });

        let mut values = Vec::with_capacity(self.size);
        let mut first_err = None;
        let mut secondary_err = None;
        for out in outcomes {
            match out {
                Ok(v) => values.push(v),
                Err(e @ Error::Collective { .. }) => {
                    if secondary_err.is_none() {
                        secondary_err = Some(e);
                    }
                }
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
        }
        match first_err.or(secondary_err) {
            Some(e) => Err(e),
            None => Ok(values),
        }
    }
}

impl Communicator {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.size
    }

    /// Concatenates every rank's `N×d` block, rank 0 on top.
    pub fn allgather(&self, local: &Matrix) -> Result<Matrix> {
        self.collective(Op::AllGather, local.clone())
    }

    /// Element-wise sum across ranks, accumulated in rank order.
    pub fn allreduce_sum(&self, local: &Matrix) -> Result<Matrix> {
        self.collective(Op::AllReduceSum, local.clone())
    }

    /// Element-wise maximum across ranks.
    pub fn allreduce_max(&self, local: &Matrix) -> Result<Matrix> {
        self.collective(Op::AllReduceMax, local.clone())
    }

    pub fn barrier(&self) -> Result<()> {
        self.collective(Op::Barrier, Matrix::zeros(0, 0))
            .map(|_| ())
    }

    /// Sum of one scalar per rank.
    pub fn allreduce_scalar(&self, value: f64) -> Result<f64> {
        Ok(self
            .allreduce_sum(&Matrix::new(1, 1, vec![value])?)?
            .get(0, 0))
    }

    /// Concatenation of every rank's index list, rank 0 first.
    pub fn allgather_indices(&self, local: &[usize]) -> Result<Vec<usize>> {
        let m = Matrix::new(local.len(), 1, local.iter().map(|&v| v as f64).collect())?;
        Ok(self
            .allgather(&m)?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect())
    }

    fn err(&self, op: Op, reason: impl Into<String>) -> Error {
        Error::Collective {
            op: op.name(),
            rank: self.rank,
            reason: reason.into(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared
            .state
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn wait<'a>(
        &self,
        mut guard: MutexGuard<'a, State>,
        op: &'static str,
        done: impl Fn(&State) -> bool,
        missing_peer: impl Fn(&State) -> bool,
    ) -> Result<MutexGuard<'a, State>> {
        let mut deadline = None;
        loop {
            if done(&guard) {
                return Ok(guard);
            }
            let fail = |reason: String| Error::Collective {
                op,
                rank: self.rank,
                reason,
            };
            if let Some(reason) = &guard.aborted {
                return Err(fail(format!("aborted: {reason}")));
            }
            if missing_peer(&guard) {
                return Err(fail("a peer left before joining this collective".into()));
            }
            // Instant is only touched once a wait is actually needed.
            let deadline =
                *deadline.get_or_insert_with(|| std::time::Instant::now() + self.shared.timeout);
            let now = std::time::Instant::now();
            if now >= deadline {
                guard.aborted = Some(format!("rank {} timed out in {op}", self.rank));
                self.shared.cv.notify_all();
                return Err(fail(format!(
                    "timed out after {:?}; a participant never arrived (hang)",
                    self.shared.timeout
                )));
            }
            guard = self
                .shared
                .cv
                .wait_timeout(guard, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn wait_turn(&self, op: &'static str) -> Result<()> {
        if self.shared.backend != Backend::Sequential {
            return Ok(());
        }
        let guard = self.lock();
        self.wait(guard, op, |s| s.turn == self.rank, |_| false)
            .map(|_| ())
    }

    fn collective(&self, op: Op, payload: Matrix) -> Result<Matrix> {
        let size = self.shared.size;
        if size == 1 {
            return Ok(payload);
        }
        let sequential = self.shared.backend == Backend::Sequential;
        let mut guard = self.lock();
        if sequential {
            guard = self.wait(guard, op.name(), |s| s.turn == self.rank, |_| false)?;
        }
        if let Some(reason) = &guard.aborted {
            return Err(self.err(op, format!("aborted: {reason}")));
        }
        match guard.op {
            None => guard.op = Some(op),
            Some(other) if other != op => {
                let reason = format!(
                    "rank {} called {} while peers are in {}",
                    self.rank,
                    op.name(),
                    other.name()
                );
                guard.aborted = Some(reason.clone());
                self.shared.cv.notify_all();
                return Err(self.err(op, reason));
            }
            Some(_) => {}
        }
        guard.slots[self.rank] = Some(payload);
        guard.arrived += 1;
        let my_generation = guard.generation;

        if guard.arrived == size {
            let slots: Vec<Matrix> = guard.slots.iter_mut().map(|s| s.take().unwrap()).collect();
            guard.result = Some(fold(op, slots).map(Arc::new));
            guard.arrived = 0;
            guard.op = None;
            guard.generation += 1;
            guard.turn = 0;
            self.shared.cv.notify_all();
        } else {
            if sequential {
                guard.turn = self.rank + 1;
                self.shared.cv.notify_all();
            }
            guard = self.wait(
                guard,
                op.name(),
                |s| s.generation != my_generation,
                |s| s.departed > 0,
            )?;
        }

        let result = guard
            .result
            .clone()
            .expect("result published with generation");
        if sequential {
            guard = self.wait(guard, op.name(), |s| s.turn == self.rank, |_| false)?;
        }
        drop(guard);
        result
            .map(|m| Matrix::clone(&m))
            .map_err(|reason| self.err(op, reason))
    }

    fn depart(&self, error: Option<&Error>) {
        let mut guard = self.lock();
        guard.departed += 1;
        if let Some(e) = error {
            if guard.aborted.is_none() && !matches!(e, Error::Collective { .. }) {
                guard.aborted = Some(format!("rank {} failed: {e}", self.rank));
            }
        }
        if self.shared.backend == Backend::Sequential && guard.turn == self.rank {
            guard.turn = self.rank + 1;
        }
        self.shared.cv.notify_all();
    }
}

fn fold(op: Op, slots: Vec<Matrix>) -> std::result::Result<Matrix, String> {
    let shape = slots[0].shape();
    if let Some((r, m)) = slots.iter().enumerate().find(|(_, m)| m.shape() != shape) {
        return Err(format!(
            "payload shape mismatch: rank 0 sent {:?}, rank {r} sent {:?}",
            shape,
            m.shape()
        ));
    }
    match op {
        Op::Barrier => Ok(Matrix::zeros(0, 0)),
        Op::AllGather => Matrix::vstack(&slots).map_err(|e| e.to_string()),
        Op::AllReduceSum | Op::AllReduceMax => {
            let mut iter = slots.into_iter();
            let mut acc = iter.next().unwrap();
            for m in iter {
                acc = match op {
                    Op::AllReduceSum => acc.zip_with(&m, |a, b| a + b),
                    _ => acc.zip_with(&m, f64::max),
                }
                .map_err(|e| e.to_string())?;
            }
            acc.ensure_finite(op.name()).map_err(|e| e.to_string())?;
            Ok(acc)
        }
    }
}
