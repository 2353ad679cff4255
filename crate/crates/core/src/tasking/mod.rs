//! A small cooperative asynchronous many-task runtime.
//!
//! Tasks are futures driven by a fixed pool of worker threads. Each worker
//! owns a FIFO run queue; an idle worker steals from the highest-index
//! non-empty queue. A task that awaits a pending [`CompletionToken`] yields its
//! worker and is requeued when the token is fulfilled, possibly onto a
//! different worker. Lifecycle transitions are reported to an optional
//! [`TaskObserver`] so a profiler can time tasks across suspensions.

mod runtime;
mod timer;
mod token;

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

pub use runtime::{DeadlockReport, ExternalHold, RunError, Runtime, RuntimeHandle, SchedulerConfig, SpawnError};
pub use token::{make_promise, suspend_on, AlreadyFulfilled, CompletionToken, Promise, SuspendOn};

/// Flat-profile bucket for tasks spawned without a name.
pub const UNNAMED_TASK: &str = "unnamed-task";

/// Globally unique (per locality run) task id. Zero is the implicit root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Guid(pub u64);

impl Guid {
    pub const ROOT: Guid = Guid(0);

    pub fn is_root(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskIdentity {
    pub guid: Guid,
    pub name: Option<Arc<str>>,
    pub parent: Option<Guid>,
    pub locality: u32,
}

impl TaskIdentity {
    /// The name the task is aggregated under.
    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or(UNNAMED_TASK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum UsageError {
    #[error("suspension requested outside of a runtime task")]
    OutsideTask,
}

/// Receives task lifecycle events. Timestamps come from [`crate::clock`] and
/// are read once by the runtime per event.
///
/// Implementations must tolerate concurrent calls from every worker.
pub trait TaskObserver: Send + Sync {
    fn on_task_create(&self, identity: &TaskIdentity, ts_ns: u64);
    fn on_task_start(&self, guid: Guid, worker: usize, ts_ns: u64);
    fn on_task_yield(&self, guid: Guid, ts_ns: u64);
    fn on_task_resume(&self, guid: Guid, worker: usize, ts_ns: u64);
    fn on_task_stop(&self, guid: Guid, ts_ns: u64);
}

thread_local! {
    static CURRENT_TASK: Cell<Option<Guid>> = const { Cell::new(None) };
    static CURRENT_WORKER: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Guid of the task running on this thread, if any.
pub fn current_task() -> Option<Guid> {
    CURRENT_TASK.with(|c| c.get())
}

/// Index of the worker this thread belongs to, if it is a runtime worker.
pub fn current_worker() -> Option<usize> {
    CURRENT_WORKER.with(|c| c.get())
}
