//! Deterministic interleaving driver over the pause-point hooks.
//!
//! A [`Scheduler`] installed as a tree's step hook parks chosen threads at
//! chosen stage boundaries while the orchestrating test advances others,
//! replaying documented races exactly. Waits are bounded: a schedule that
//! can never be satisfied panics with a deadlock report instead of hanging
//! the suite.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::backbone::{PausePoint, StepHook, Tree, TreeConfig, TreeValue, VariantKind};
use crate::aggregate::AggregateSpec;
use crate::verify::history::History;

const WAIT_LIMIT: Duration = Duration::from_secs(10);

#[derive(Default)]
struct SchedState {
    /// Next pause point each thread must stop at.
    stops: HashMap<usize, PausePoint>,
    /// Threads currently parked, with the point they stopped at.
    parked: HashMap<usize, PausePoint>,
}

/// Hook-driven scheduler: park/release by (thread, pause point).
pub struct Scheduler {
    state: Mutex<SchedState>,
    cv: Condvar,
}

impl Scheduler {
    pub fn new() -> Arc<Self> {
        Arc::new(Scheduler {
            state: Mutex::new(SchedState::default()),
            cv: Condvar::new(),
        })
    }

    /// Arms a stop: the next time `tid` reaches `point` it parks until
    /// released. Must be armed before the thread can reach the point.
    pub fn stop_at(&self, tid: usize, point: PausePoint) {
        let mut st = self.state.lock().unwrap();
        st.stops.insert(tid, point);
    }

    /// Blocks until `tid` parks at `point`.
    pub fn await_parked(&self, tid: usize, point: PausePoint) {
        let mut st = self.state.lock().unwrap();
        let deadline = std::time::Instant::now() + WAIT_LIMIT;
        while st.parked.get(&tid) != Some(&point) {
            let timeout = deadline.saturating_duration_since(std::time::Instant::now());
            if timeout.is_zero() {
                panic!("schedule deadlock: thread {tid} never parked at {point:?}");
            }
            let (guard, _) = self.cv.wait_timeout(st, timeout).unwrap();
            st = guard;
        }
    }

    /// Releases a parked thread (and disarms its stop).
    pub fn release(&self, tid: usize) {
        let mut st = self.state.lock().unwrap();
        st.stops.remove(&tid);
        st.parked.remove(&tid);
        self.cv.notify_all();
    }

    /// Arms a stop and returns once the thread parks there.
    pub fn run_until(&self, tid: usize, point: PausePoint) {
        self.await_parked(tid, point);
    }
}

impl StepHook for Scheduler {
    fn pause(&self, tid: usize, point: PausePoint) {
        let mut st = self.state.lock().unwrap();
        if st.stops.get(&tid) != Some(&point) {
            return;
        }
        st.parked.insert(tid, point);
        self.cv.notify_all();
        let deadline = std::time::Instant::now() + WAIT_LIMIT;
        while st.parked.get(&tid) == Some(&point) {
            let timeout = deadline.saturating_duration_since(std::time::Instant::now());
            if timeout.is_zero() {
                panic!("schedule deadlock: thread {tid} parked at {point:?} was never released");
            }
            let (guard, _) = self.cv.wait_timeout(st, timeout).unwrap();
            st = guard;
        }
    }
}

/// A tree wired for deterministic interleaving: history recording on and a
/// fresh scheduler installed as its step hook.
pub struct Interleaver<V: 'static> {
    pub tree: Tree<V>,
    pub sched: Arc<Scheduler>,
}

impl<V: TreeValue> Interleaver<V> {
    pub fn new(kind: VariantKind, spec: AggregateSpec<V>, threads: usize) -> Self {
        let tree = Tree::with_config(
            kind,
            spec,
            threads,
            TreeConfig {
                record_history: true,
                ..TreeConfig::default()
            },
        )
        .expect("interleaver tree");
        let sched = Scheduler::new();
        tree.set_step_hook(sched.clone() as Arc<dyn StepHook>);
        Interleaver { tree, sched }
    }

    /// Drains the history recorded so far.
    pub fn history(&self) -> History {
        History::new(self.tree.drain_history())
    }
}
