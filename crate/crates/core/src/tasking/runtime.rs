use std::cell::Cell;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::task::{Context, Poll, Wake, Waker};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::timer::TimerService;
use super::token::{make_promise, CompletionToken};
use super::{Guid, TaskIdentity, TaskObserver, CURRENT_TASK, CURRENT_WORKER};
use crate::clock;

type BoxFuture = Pin<Box<dyn Future<Output = ()> + Send>>;

static NEXT_RUNTIME_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CURRENT_RUNTIME: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub worker_count: usize,
    /// Offsets the round-robin placement of externally spawned tasks.
    pub seed: u64,
    /// Locality rank stamped into every [`TaskIdentity`].
    pub locality: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { worker_count: 1, seed: 0, locality: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpawnError {
    #[error("runtime is shut down")]
    ShutDown,
    #[error("parent guid {0} has not been allocated")]
    UnknownParent(Guid),
    #[error("worker_count must be at least 1")]
    NoWorkers,
}

/// Tasks left suspended with nothing able to wake them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockReport {
    pub suspended: Vec<Guid>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunError {
    #[error("deadlock: tasks {:?} are suspended with no pending fulfillment", .0.suspended)]
    Deadlock(DeadlockReport),
    #[error(transparent)]
    Spawn(#[from] SpawnError),
    #[error("{count} task(s) panicked; first: {first}")]
    TaskPanicked { count: usize, first: String },
    #[error("timed out waiting for idle")]
    Timeout,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TaskState {
    Scheduled,
    Running,
    RunningNotified,
    Suspended,
    Done,
}

struct Task {
    identity: TaskIdentity,
    future: Mutex<Option<BoxFuture>>,
    // Only touched with `Shared::sched` held.
    state: Mutex<TaskState>,
    started: std::sync::atomic::AtomicBool,
    shared: Weak<Shared>,
}

impl Wake for Task {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if let Some(shared) = self.shared.upgrade() {
            shared.wake(self);
        }
    }
}

struct Sched {
    queues: Vec<VecDeque<Arc<Task>>>,
    running: usize,
    live: usize,
    holds: usize,
    suspended: BTreeSet<Guid>,
    suspended_tasks: HashMap<Guid, Arc<Task>>,
    shutdown: bool,
    next_external: usize,
    deadlock: Option<DeadlockReport>,
    panics: Vec<String>,
    completions: HashMap<Arc<str>, u64>,
}

impl Sched {
    fn queued(&self) -> bool {
        self.queues.iter().any(|q| !q.is_empty())
    }

    fn pop(&mut self, worker: usize) -> Option<Arc<Task>> {
        if let Some(t) = self.queues[worker].pop_front() {
            return Some(t);
        }
        let victim = (0..self.queues.len()).rev().find(|&i| !self.queues[i].is_empty())?;
        self.queues[victim].pop_front()
    }
}

pub(crate) struct Shared {
    id: u64,
    config: SchedulerConfig,
    observer: Option<Arc<dyn TaskObserver>>,
    next_guid: AtomicU64,
    sched: Mutex<Sched>,
    work_cv: Condvar,
    idle_cv: Condvar,
    timer: TimerService,
}

impl Shared {
    fn on_this_runtime(&self) -> bool {
        CURRENT_RUNTIME.with(|c| c.get()) == self.id
    }

    fn wake(&self, task: &Arc<Task>) {
        let mut s = self.sched.lock();
        let mut state = task.state.lock();
        match *state {
            TaskState::Suspended => {
                *state = TaskState::Scheduled;
                drop(state);
                s.suspended.remove(&task.identity.guid);
                s.suspended_tasks.remove(&task.identity.guid);
                let q = self.target_queue(&mut s);
                s.queues[q].push_back(task.clone());
                drop(s);
                self.work_cv.notify_one();
            }
            TaskState::Running => *state = TaskState::RunningNotified,
            TaskState::Scheduled | TaskState::RunningNotified | TaskState::Done => {}
        }
    }

    fn target_queue(&self, s: &mut Sched) -> usize {
        if self.on_this_runtime() {
            if let Some(w) = CURRENT_WORKER.with(|c| c.get()) {
                return w;
            }
        }
        let n = s.queues.len();
        let q = (s.next_external + self.config.seed as usize) % n;
        s.next_external = s.next_external.wrapping_add(1);
        q
    }

    fn release_hold(&self) {
        let mut s = self.sched.lock();
        s.holds -= 1;
        if s.holds == 0 {
            drop(s);
            self.work_cv.notify_all();
        }
    }

    fn spawn_boxed(self: &Arc<Self>, identity: TaskIdentity, fut: BoxFuture) -> Result<(), SpawnError> {
        let task = Arc::new(Task {
            identity,
            future: Mutex::new(Some(fut)),
            state: Mutex::new(TaskState::Scheduled),
            started: std::sync::atomic::AtomicBool::new(false),
            shared: Arc::downgrade(self),
        });
        let mut s = self.sched.lock();
        if s.shutdown {
            return Err(SpawnError::ShutDown);
        }
        if let Some(obs) = &self.observer {
            obs.on_task_create(&task.identity, clock::now_ns());
        }
        s.live += 1;
        let q = self.target_queue(&mut s);
        s.queues[q].push_back(task);
        drop(s);
        self.work_cv.notify_one();
        Ok(())
    }

    fn allocate_identity(&self, name: Option<&str>, parent: Option<Guid>) -> Result<TaskIdentity, SpawnError> {
        let parent = match parent {
            Some(p) => {
                if p.0 >= self.next_guid.load(Ordering::SeqCst) {
                    return Err(SpawnError::UnknownParent(p));
                }
                p
            }
            None => match super::current_task() {
                Some(g) if self.on_this_runtime() => g,
                _ => Guid::ROOT,
            },
        };
        let guid = Guid(self.next_guid.fetch_add(1, Ordering::SeqCst));
        Ok(TaskIdentity { guid, name: name.map(Arc::from), parent: Some(parent), locality: self.config.locality })
    }

    fn detect_deadlock(&self, s: &mut Sched) -> Vec<Arc<Task>> {
        if s.live == 0 || s.running > 0 || s.holds > 0 || s.queued() || s.suspended.is_empty() {
            return Vec::new();
        }
        let report = DeadlockReport { suspended: s.suspended.iter().copied().collect() };
        s.suspended.clear();
        let abandoned: Vec<Arc<Task>> = s.suspended_tasks.drain().map(|(_, t)| t).collect();
        for t in &abandoned {
            *t.state.lock() = TaskState::Done;
        }
        s.live -= abandoned.len();
        s.deadlock = Some(report);
        self.idle_cv.notify_all();
        abandoned
    }
}

fn drop_futures(tasks: Vec<Arc<Task>>) {
    for t in tasks {
        let fut = t.future.lock().take();
        drop(fut);
    }
}

fn worker_loop(shared: Arc<Shared>, worker: usize) {
    CURRENT_RUNTIME.with(|c| c.set(shared.id));
    CURRENT_WORKER.with(|c| c.set(Some(worker)));
    loop {
        let task = {
            let mut s = shared.sched.lock();
            loop {
                if let Some(t) = s.pop(worker) {
                    *t.state.lock() = TaskState::Running;
                    s.running += 1;
                    break t;
                }
                if s.shutdown {
                    return;
                }
                let abandoned = shared.detect_deadlock(&mut s);
                if !abandoned.is_empty() {
                    drop(s);
                    drop_futures(abandoned);
                    s = shared.sched.lock();
                    continue;
                }
                shared.work_cv.wait(&mut s);
            }
        };
        run_task(&shared, worker, task);
    }
}

fn run_task(shared: &Arc<Shared>, worker: usize, task: Arc<Task>) {
    let guid = task.identity.guid;
    if let Some(obs) = &shared.observer {
        let now = clock::now_ns();
        if task.started.swap(true, Ordering::Relaxed) {
            obs.on_task_resume(guid, worker, now);
        } else {
            obs.on_task_start(guid, worker, now);
        }
    } else {
        task.started.store(true, Ordering::Relaxed);
    }

    let waker = Waker::from(task.clone());
    let mut cx = Context::from_waker(&waker);
    CURRENT_TASK.with(|c| c.set(Some(guid)));
    let outcome = {
        let mut slot = task.future.lock();
        match slot.as_mut() {
            Some(fut) => std::panic::catch_unwind(AssertUnwindSafe(|| fut.as_mut().poll(&mut cx))),
            None => Ok(Poll::Ready(())),
        }
    };
    CURRENT_TASK.with(|c| c.set(None));

    let finished = match outcome {
        Ok(Poll::Ready(())) => None,
        Ok(Poll::Pending) => {
            if let Some(obs) = &shared.observer {
                obs.on_task_yield(guid, clock::now_ns());
            }
            let mut s = shared.sched.lock();
            s.running -= 1;
            let mut state = task.state.lock();
            if *state == TaskState::RunningNotified {
                *state = TaskState::Scheduled;
                drop(state);
                s.queues[worker].push_back(task);
            } else {
                *state = TaskState::Suspended;
                drop(state);
                s.suspended.insert(guid);
                s.suspended_tasks.insert(guid, task);
                if s.running == 0 && !s.queued() {
                    drop(s);
                    shared.work_cv.notify_all();
                }
            }
            return;
        }
        Err(payload) => Some(panic_message(payload.as_ref())),
    };

    if let Some(obs) = &shared.observer {
        obs.on_task_stop(guid, clock::now_ns());
    }
    let fut = task.future.lock().take();
    drop(fut);
    let mut s = shared.sched.lock();
    *task.state.lock() = TaskState::Done;
    s.running -= 1;
    s.live -= 1;
    if let Some(msg) = finished {
        s.panics.push(msg);
    }
    let name: Arc<str> = task.identity.name.clone().unwrap_or_else(|| Arc::from(super::UNNAMED_TASK));
    *s.completions.entry(name).or_insert(0) += 1;
    let idle = s.live == 0;
    let stalled = s.running == 0 && !s.queued();
    drop(s);
    if idle {
        shared.idle_cv.notify_all();
    }
    if stalled {
        shared.work_cv.notify_all();
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

/// Keeps deadlock detection off while an event from outside the task graph
/// (a timer, a device, the network) is still expected to fulfill a token.
pub struct ExternalHold {
    shared: Weak<Shared>,
}

impl Drop for ExternalHold {
    fn drop(&mut self) {
        if let Some(s) = self.shared.upgrade() {
            s.release_hold();
        }
    }
}

impl std::fmt::Debug for ExternalHold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ExternalHold")
    }
}

/// Cloneable, non-owning access to a runtime: spawning, holds and timers.
#[derive(Clone)]
pub struct RuntimeHandle {
    shared: Arc<Shared>,
}

impl RuntimeHandle {
    pub fn locality(&self) -> u32 {
        self.shared.config.locality
    }

    pub fn worker_count(&self) -> usize {
        self.shared.config.worker_count
    }

    /// Spawns a task. Inside a task of this runtime the new task's parent is
    /// the current task, otherwise the implicit root.
    pub fn spawn<F, T>(&self, name: Option<&str>, body: F) -> Result<CompletionToken<T>, SpawnError>
    where
        F: Future<Output = T> + Send + 'static,
        T: Send + 'static,
    {
        self.spawn_with_parent(name, None, body)
    }

    pub fn spawn_with_parent<F, T>(
        &self,
        name: Option<&str>,
        parent: Option<Guid>,
        body: F,
    ) -> Result<CompletionToken<T>, SpawnError>
    where
        F: Future<Output = T> + Send + 'static,
        T: Send + 'static,
    {
        if self.shared.sched.lock().shutdown {
            return Err(SpawnError::ShutDown);
        }
        let identity = self.shared.allocate_identity(name, parent)?;
        let (promise, token) = make_promise();
        let fut: BoxFuture = Box::pin(async move {
            let v = body.await;
            let _ = promise.fulfill(v);
        });
        self.shared.spawn_boxed(identity, fut)?;
        Ok(token)
    }

    /// Like [`RuntimeHandle::spawn`] but also returns the new task's identity.
    pub fn spawn_identified<F, T>(
        &self,
        name: Option<&str>,
        parent: Option<Guid>,
        body: F,
    ) -> Result<(TaskIdentity, CompletionToken<T>), SpawnError>
    where
        F: Future<Output = T> + Send + 'static,
        T: Send + 'static,
    {
        if self.shared.sched.lock().shutdown {
            return Err(SpawnError::ShutDown);
        }
        let identity = self.shared.allocate_identity(name, parent)?;
        let (promise, token) = make_promise();
        let fut: BoxFuture = Box::pin(async move {
            let v = body.await;
            let _ = promise.fulfill(v);
        });
        self.shared.spawn_boxed(identity.clone(), fut)?;
        Ok((identity, token))
    }

    /// Records an interval that was not executed as a task (e.g. time a
    /// message spent between receipt and dispatch) as a completed task with
    /// its own guid. Observers see create/start/stop with the given times.
    pub fn record_interval(
        &self,
        name: &str,
        parent: Option<Guid>,
        start_ns: u64,
        stop_ns: u64,
        lane: usize,
    ) -> Result<TaskIdentity, SpawnError> {
        let parent = Some(parent.unwrap_or(Guid::ROOT));
        let identity = self.shared.allocate_identity(Some(name), parent)?;
        if let Some(obs) = &self.shared.observer {
            obs.on_task_create(&identity, start_ns);
            obs.on_task_start(identity.guid, lane, start_ns);
            obs.on_task_stop(identity.guid, stop_ns.max(start_ns));
        }
        Ok(identity)
    }

    pub fn hold(&self) -> ExternalHold {
        self.shared.sched.lock().holds += 1;
        ExternalHold { shared: Arc::downgrade(&self.shared) }
    }

    /// Runs `f` on the runtime's timer thread at `deadline_ns`. The runtime is
    /// held (no deadlock verdict) until `f` has run.
    pub fn call_at(&self, deadline_ns: u64, f: impl FnOnce() + Send + 'static) {
        let hold = self.hold();
        self.shared.timer.schedule_at(
            deadline_ns,
            Box::new(move || {
                f();
                drop(hold);
            }),
        );
    }

    /// A token fulfilled once `duration` has elapsed.
    pub fn sleep(&self, duration: Duration) -> CompletionToken<()> {
        let (p, t) = make_promise();
        let deadline = clock::now_ns() + duration.as_nanos() as u64;
        self.call_at(deadline, move || {
            let _ = p.fulfill(());
        });
        t
    }

    /// Blocks until every spawned task has completed, or reports a deadlock.
    /// Tasks named in a deadlock report are discarded.
    pub fn wait_idle(&self) -> Result<(), RunError> {
        self.wait_idle_deadline(None)
    }

    pub fn wait_idle_timeout(&self, timeout: Duration) -> Result<(), RunError> {
        self.wait_idle_deadline(Some(Instant::now() + timeout))
    }

    fn wait_idle_deadline(&self, deadline: Option<Instant>) -> Result<(), RunError> {
        let mut s = self.shared.sched.lock();
        loop {
            if let Some(report) = s.deadlock.take() {
                return Err(RunError::Deadlock(report));
            }
            if s.live == 0 {
                if !s.panics.is_empty() {
                    let count = s.panics.len();
                    let first = s.panics.drain(..).next().unwrap_or_default();
                    return Err(RunError::TaskPanicked { count, first });
                }
                return Ok(());
            }
            match deadline {
                Some(d) => {
                    if self.shared.idle_cv.wait_until(&mut s, d).timed_out() {
                        return Err(RunError::Timeout);
                    }
                }
                None => self.shared.idle_cv.wait(&mut s),
            }
        }
    }

    /// Spawns `root` and waits for it and all of its descendants.
    pub fn run_until_idle<F>(&self, name: &str, root: F) -> Result<Duration, RunError>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let start = Instant::now();
        self.spawn(Some(name), root)?;
        self.wait_idle()?;
        Ok(start.elapsed())
    }

    /// Completed-task counts per name, maintained whether or not an observer
    /// is installed.
    pub fn completion_counts(&self) -> HashMap<String, u64> {
        self.shared.sched.lock().completions.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// Number of guids handed out so far (including the root).
    pub fn guids_allocated(&self) -> u64 {
        self.shared.next_guid.load(Ordering::SeqCst)
    }

    pub fn is_shut_down(&self) -> bool {
        self.shared.sched.lock().shutdown
    }
}

/// Owns the worker threads. Dropping it shuts the pool down.
pub struct Runtime {
    handle: RuntimeHandle,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Runtime {
    pub fn new(config: SchedulerConfig, observer: Option<Arc<dyn TaskObserver>>) -> Result<Self, SpawnError> {
        if config.worker_count == 0 {
            return Err(SpawnError::NoWorkers);
        }
        clock::init();
        let id = NEXT_RUNTIME_ID.fetch_add(1, Ordering::Relaxed);
        let shared = Arc::new(Shared {
            id,
            observer,
            next_guid: AtomicU64::new(1),
            sched: Mutex::new(Sched {
                queues: (0..config.worker_count).map(|_| VecDeque::new()).collect(),
                running: 0,
                live: 0,
                holds: 0,
                suspended: BTreeSet::new(),
                suspended_tasks: HashMap::new(),
                shutdown: false,
                next_external: 0,
                deadlock: None,
                panics: Vec::new(),
                completions: HashMap::new(),
            }),
            work_cv: Condvar::new(),
            idle_cv: Condvar::new(),
            timer: TimerService::start(format!("amt-timer-{}", config.locality)),
            config: config.clone(),
        });
        let workers = (0..config.worker_count)
            .map(|w| {
                let s = shared.clone();
                std::thread::Builder::new()
                    .name(format!("amt-{}-w{}", config.locality, w))
                    .spawn(move || worker_loop(s, w))
                    .expect("spawn worker thread")
            })
            .collect();
        Ok(Runtime { handle: RuntimeHandle { shared }, workers: Mutex::new(workers) })
    }

    pub fn handle(&self) -> RuntimeHandle {
        self.handle.clone()
    }

    /// Stops the workers and the timer. Tasks still queued or suspended are
    /// dropped without running to completion.
    pub fn shutdown(&self) {
        let shared = &self.handle.shared;
        let leftovers: Vec<Arc<Task>> = {
            let mut s = shared.sched.lock();
            if s.shutdown {
                return;
            }
            s.shutdown = true;
            let mut v: Vec<Arc<Task>> = s.queues.iter_mut().flat_map(|q| q.drain(..)).collect();
            v.extend(s.suspended_tasks.drain().map(|(_, t)| t));
            s.suspended.clear();
            s.live -= v.len().min(s.live);
            v
        };
        shared.work_cv.notify_all();
        shared.idle_cv.notify_all();
        for w in self.workers.lock().drain(..) {
            let _ = w.join();
        }
        shared.timer.stop();
        drop_futures(leftovers);
    }
}

impl std::ops::Deref for Runtime {
    type Target = RuntimeHandle;

    fn deref(&self) -> &RuntimeHandle {
        &self.handle
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}
