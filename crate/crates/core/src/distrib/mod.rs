//! Multi-locality execution. Each [`Locality`] owns a runtime, a simulated
//! device and (optionally) a profiler, and talks to its peers through a
//! [`Transport`]: in-process channels or length-prefixed TCP frames.
//!
//! Remote actions arrive as parcels. The receive loop times the interval
//! from receipt to spawn as a `schedule_parcel` task and makes it the parent
//! of the spawned action task, so both show up in the target's profile.

mod transport;
mod wire;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::task::{Context, Poll};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

use crate::clock;
use crate::device::{ActivitySink, Device, DeviceConfig, DeviceError};
use crate::export::{decode_snapshot, encode_snapshot, DecodeError};
use crate::profiler::{ConfigError, MonitorHandle, Profiler, ProfilerConfig, Snapshot};
use crate::tasking::{
    make_promise, CompletionToken, ExternalHold, Guid, Promise, RunError, Runtime, RuntimeHandle, SchedulerConfig,
    SpawnError, TaskObserver,
};

pub use transport::{
    inproc_endpoints, tcp_loopback_endpoints, Endpoint, InProcTransport, Incoming, TcpOptions, TcpTransport, Transport,
    TransportError,
};
pub use wire::{read_frame, write_frame, Control, Frame, FrameError, Parcel, ReplyStatus};

pub const SCHEDULE_PARCEL: &str = "schedule_parcel";

pub type ActionFuture = Pin<Box<dyn Future<Output = Vec<u8>> + Send>>;
/// Handler for a named action: receives the source rank and the payload,
/// returns the reply payload.
pub type ActionFn = Arc<dyn Fn(u32, Vec<u8>) -> ActionFuture + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RemoteError {
    #[error("no action named {0:?} on the target")]
    UnknownAction(String),
    #[error("action panicked: {0}")]
    ActionPanicked(String),
}

pub type Reply = Result<Vec<u8>, RemoteError>;

#[derive(Debug, thiserror::Error)]
pub enum DistribError {
    #[error("unknown target locality {0}")]
    UnknownTarget(u32),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Spawn(#[from] SpawnError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Profiler(#[from] ConfigError),
    #[error("{what} timed out waiting for ranks {missing:?}")]
    Timeout { what: &'static str, missing: Vec<u32> },
    #[error("snapshot from rank {rank}: {source}")]
    Decode { rank: u32, source: DecodeError },
}

/// Per-action parcel counts for one locality.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageStats {
    pub parcels_sent: BTreeMap<String, u64>,
    pub parcels_received: BTreeMap<String, u64>,
    pub bytes_sent: u64,
    pub send_failures: u64,
}

impl MessageStats {
    pub fn merge(&mut self, other: &MessageStats) {
        for (k, v) in &other.parcels_sent {
            *self.parcels_sent.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.parcels_received {
            *self.parcels_received.entry(k.clone()).or_insert(0) += v;
        }
        self.bytes_sent += other.bytes_sent;
        self.send_failures += other.send_failures;
    }

    pub fn total_sent(&self) -> u64 {
        self.parcels_sent.values().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.parcels_received.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct LocalityConfig {
    pub workers: usize,
    pub seed: u64,
    /// `None` runs without any observer installed.
    pub profiler: Option<ProfilerConfig>,
    pub device: DeviceConfig,
    pub start_monitor: bool,
    /// Bound on barrier and reduction waits.
    pub timeout: Duration,
}

impl Default for LocalityConfig {
    fn default() -> Self {
        LocalityConfig {
            workers: 1,
            seed: 0,
            profiler: Some(ProfilerConfig::default()),
            device: DeviceConfig::default(),
            start_monitor: false,
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Default)]
struct SyncState {
    barrier_epoch: u64,
    barrier: HashMap<u64, BTreeSet<u32>>,
    reduce_epoch: u64,
    snapshots: HashMap<u64, BTreeMap<u32, Vec<u8>>>,
}

struct Shared {
    rank: u32,
    world_size: u32,
    timeout: Duration,
    rt: RuntimeHandle,
    transport: Arc<dyn Transport>,
    actions: RwLock<HashMap<String, ActionFn>>,
    pending: Mutex<HashMap<u64, (Promise<Reply>, ExternalHold)>>,
    next_parcel: AtomicU64,
    stats: Mutex<MessageStats>,
    sync: Mutex<SyncState>,
    sync_cv: Condvar,
}

/// Cloneable access to a locality from inside its tasks.
#[derive(Clone)]
pub struct LocalityHandle {
    shared: Arc<Shared>,
    device: Arc<Device>,
    profiler: Option<Arc<Profiler>>,
}

impl LocalityHandle {
    pub fn rank(&self) -> u32 {
        self.shared.rank
    }

    pub fn world_size(&self) -> u32 {
        self.shared.world_size
    }

    pub fn runtime(&self) -> &RuntimeHandle {
        &self.shared.rt
    }

    pub fn device(&self) -> &Arc<Device> {
        &self.device
    }

    pub fn profiler(&self) -> Option<&Arc<Profiler>> {
        self.profiler.as_ref()
    }

    pub fn register_action<F>(&self, name: &str, f: F)
    where
        F: Fn(u32, Vec<u8>) -> ActionFuture + Send + Sync + 'static,
    {
        self.shared.actions.write().insert(name.to_string(), Arc::new(f));
    }

    /// Sends a parcel invoking `action_name` on `target`. The token resolves
    /// with the action's reply. Sending to self still goes through the
    /// transport.
    pub fn remote_action(
        &self,
        target: u32,
        action_name: &str,
        payload: Vec<u8>,
    ) -> Result<CompletionToken<Reply>, DistribError> {
        let s = &self.shared;
        if target >= s.world_size {
            return Err(DistribError::UnknownTarget(target));
        }
        let parcel_id = s.next_parcel.fetch_add(1, Ordering::Relaxed);
        let (promise, token) = make_promise();
        s.pending.lock().insert(parcel_id, (promise, s.rt.hold()));
        {
            let mut st = s.stats.lock();
            *st.parcels_sent.entry(action_name.to_string()).or_insert(0) += 1;
            st.bytes_sent += payload.len() as u64;
        }
        let parcel = Parcel { parcel_id, source: s.rank, target, action_name: action_name.to_string(), payload };
        if let Err(e) = s.transport.send(target, Frame::Parcel(parcel)) {
            s.pending.lock().remove(&parcel_id);
            let mut st = s.stats.lock();
            st.send_failures += 1;
            if let Some(n) = st.parcels_sent.get_mut(action_name) {
                *n -= 1;
            }
            return Err(e.into());
        }
        Ok(token)
    }

    pub fn message_stats(&self) -> MessageStats {
        self.shared.stats.lock().clone()
    }

    /// Blocks until every locality has entered the same barrier epoch. Must
    /// not be called from a runtime task.
    pub fn barrier(&self) -> Result<(), DistribError> {
        let s = &self.shared;
        let epoch = {
            let mut sync = s.sync.lock();
            sync.barrier_epoch += 1;
            sync.barrier_epoch
        };
        for r in (0..s.world_size).filter(|&r| r != s.rank) {
            s.transport.send(r, Frame::Control(Control::BarrierEnter { epoch, rank: s.rank }))?;
        }
        let deadline = Instant::now() + s.timeout;
        let mut sync = s.sync.lock();
        sync.barrier.entry(epoch).or_default().insert(s.rank);
        loop {
            let entered = &sync.barrier[&epoch];
            if entered.len() as u32 == s.world_size {
                sync.barrier.remove(&epoch);
                return Ok(());
            }
            if s.sync_cv.wait_until(&mut sync, deadline).timed_out() {
                let entered = &sync.barrier[&epoch];
                let missing = (0..s.world_size).filter(|r| !entered.contains(r)).collect();
                return Err(DistribError::Timeout { what: "barrier", missing });
            }
        }
    }

    /// Current profile of this locality, after flushing completed device
    /// activity. Empty when running without a profiler.
    pub fn snapshot(&self) -> Snapshot {
        self.device.flush();
        self.profiler.as_ref().map(|p| p.snapshot()).unwrap_or_default()
    }

    /// Waits for local work, synchronizes with every locality, then waits
    /// again for work triggered by late parcels.
    pub fn quiesce(&self) -> Result<(), DistribError> {
        self.shared.rt.wait_idle()?;
        self.barrier()?;
        self.shared.rt.wait_idle()?;
        Ok(())
    }

    /// Sends this locality's snapshot to `root`. On the root, collects every
    /// rank's snapshot and returns them with their fold. All localities must
    /// call it, after [`LocalityHandle::quiesce`].
    pub fn reduce_profiles(&self, root: u32) -> Result<Option<Reduction>, DistribError> {
        let s = &self.shared;
        if root >= s.world_size {
            return Err(DistribError::UnknownTarget(root));
        }
        let epoch = {
            let mut sync = s.sync.lock();
            sync.reduce_epoch += 1;
            sync.reduce_epoch
        };
        let own = self.snapshot();
        if s.rank != root {
            s.transport.send(root, Frame::Snapshot { epoch, rank: s.rank, bytes: encode_snapshot(&own) })?;
            return Ok(None);
        }
        let deadline = Instant::now() + s.timeout;
        let received = {
            let mut sync = s.sync.lock();
            loop {
                let have = sync.snapshots.get(&epoch).map_or(0, |m| m.len());
                if have as u32 + 1 >= s.world_size {
                    break sync.snapshots.remove(&epoch).unwrap_or_default();
                }
                if s.sync_cv.wait_until(&mut sync, deadline).timed_out() {
                    let got = sync.snapshots.get(&epoch);
                    let missing = (0..s.world_size)
                        .filter(|&r| r != s.rank && !got.is_some_and(|m| m.contains_key(&r)))
                        .collect();
                    return Err(DistribError::Timeout { what: "profile reduction", missing });
                }
            }
        };
        let mut per_rank = BTreeMap::new();
        per_rank.insert(s.rank, own);
        for (rank, bytes) in received {
            let snap = decode_snapshot(&bytes).map_err(|source| DistribError::Decode { rank, source })?;
            per_rank.insert(rank, snap);
        }
        let parts: Vec<Snapshot> = per_rank.values().cloned().collect();
        Ok(Some(Reduction { merged: Snapshot::fold(&parts), per_rank }))
    }
}

/// Result of a profile reduction at the root.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub merged: Snapshot,
    pub per_rank: BTreeMap<u32, Snapshot>,
}

pub struct Locality {
    handle: LocalityHandle,
    runtime: Runtime,
    monitor: Option<MonitorHandle>,
    inbox_tx: Sender<Incoming>,
    receiver: Option<JoinHandle<()>>,
}

impl std::ops::Deref for Locality {
    type Target = LocalityHandle;

    fn deref(&self) -> &LocalityHandle {
        &self.handle
    }
}

impl Locality {
    pub fn new(config: &LocalityConfig, endpoint: Endpoint) -> Result<Self, DistribError> {
        let Endpoint { transport, inbox, inbox_tx } = endpoint;
        let rank = transport.rank();
        let profiler = match &config.profiler {
            Some(pc) => Some(Arc::new(Profiler::new(ProfilerConfig { rank, ..pc.clone() })?)),
            None => None,
        };
        let observer = profiler.clone().map(|p| p as Arc<dyn TaskObserver>);
        let runtime = Runtime::new(
            SchedulerConfig { worker_count: config.workers, seed: config.seed, locality: rank },
            observer,
        )?;
        let sink = profiler.clone().map(|p| p as Arc<dyn ActivitySink>);
        let device = Arc::new(Device::new(config.device.clone(), runtime.handle(), sink)?);
        let shared = Arc::new(Shared {
            rank,
            world_size: transport.world_size(),
            timeout: config.timeout,
            rt: runtime.handle(),
            transport,
            actions: RwLock::new(HashMap::new()),
            pending: Mutex::new(HashMap::new()),
            next_parcel: AtomicU64::new(1),
            stats: Mutex::new(MessageStats::default()),
            sync: Mutex::new(SyncState::default()),
            sync_cv: Condvar::new(),
        });
        let loop_shared = shared.clone();
        let receiver = std::thread::Builder::new()
            .name(format!("amt-parcels-{rank}"))
            .spawn(move || receive_loop(loop_shared, inbox))
            .expect("spawn receive thread");
        let monitor = match (&profiler, config.start_monitor) {
            (Some(p), true) => Some(p.start_monitor()),
            _ => None,
        };
        Ok(Locality {
            handle: LocalityHandle { shared, device, profiler },
            runtime,
            monitor,
            inbox_tx,
            receiver: Some(receiver),
        })
    }

    pub fn handle(&self) -> LocalityHandle {
        self.handle.clone()
    }
}

impl Drop for Locality {
    fn drop(&mut self) {
        if let Some(m) = self.monitor.take() {
            m.stop();
        }
        let _ = self.inbox_tx.send(Incoming::Stop);
        if let Some(t) = self.receiver.take() {
            let _ = t.join();
        }
        self.runtime.shutdown();
        self.handle.device.final_flush();
    }
}

/// One locality per endpoint, all with the same configuration.
pub fn build_world(config: &LocalityConfig, endpoints: Vec<Endpoint>) -> Result<Vec<Locality>, DistribError> {
    endpoints.into_iter().map(|e| Locality::new(config, e)).collect()
}

pub fn inproc_world(world_size: u32, config: &LocalityConfig) -> Result<Vec<Locality>, DistribError> {
    build_world(config, inproc_endpoints(world_size))
}

pub fn tcp_loopback_world(world_size: u32, config: &LocalityConfig) -> Result<Vec<Locality>, DistribError> {
    build_world(config, tcp_loopback_endpoints(world_size, TcpOptions::default())?)
}

/// Runs `f` on every locality concurrently, one thread each, and returns
/// the results in rank order. Collective operations need this shape.
pub fn on_each<T: Send>(world: &[Locality], f: impl Fn(&Locality) -> T + Sync) -> Vec<T> {
    std::thread::scope(|scope| {
        let hs: Vec<_> = world.iter().map(|l| scope.spawn(|| f(l))).collect();
        hs.into_iter().map(|h| h.join().expect("locality thread panicked")).collect()
    })
}

/// Quiesces the whole world and reduces every rank's profile to `root`.
pub fn reduce_world(world: &[Locality], root: u32) -> Result<Reduction, DistribError> {
    let mut root_result = None;
    for r in on_each(world, |l| l.quiesce().and_then(|_| l.reduce_profiles(root))) {
        if let Some(red) = r? {
            root_result = Some(red);
        }
    }
    root_result.ok_or(DistribError::UnknownTarget(root))
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic".into())
}

/// Turns a panic inside the wrapped future into an error value.
struct CatchUnwind(ActionFuture);

impl Future for CatchUnwind {
    type Output = Result<Vec<u8>, String>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        match std::panic::catch_unwind(AssertUnwindSafe(|| self.0.as_mut().poll(cx))) {
            Ok(Poll::Ready(v)) => Poll::Ready(Ok(v)),
            Ok(Poll::Pending) => Poll::Pending,
            Err(p) => Poll::Ready(Err(panic_message(p.as_ref()))),
        }
    }
}

fn send_reply(s: &Shared, target: u32, parcel_id: u64, status: ReplyStatus, payload: Vec<u8>) {
    if s.transport.send(target, Frame::Control(Control::Reply { parcel_id, status, payload })).is_err() {
        s.stats.lock().send_failures += 1;
    }
}

fn dispatch_parcel(s: &Arc<Shared>, parcel: Parcel) {
    let received_ns = clock::now_ns();
    *s.stats.lock().parcels_received.entry(parcel.action_name.clone()).or_insert(0) += 1;
    let action = s.actions.read().get(&parcel.action_name).cloned();
    let Some(action) = action else {
        send_reply(s, parcel.source, parcel.parcel_id, ReplyStatus::UnknownAction, parcel.action_name.into_bytes());
        return;
    };
    let Parcel { parcel_id, source, action_name, payload, .. } = parcel;
    let fut = CatchUnwind(action(source, payload));
    // The receive thread gets its own lane after the workers.
    let lane = s.rt.worker_count();
    let spawn_ns = clock::now_ns();
    let parent = match s.rt.record_interval(SCHEDULE_PARCEL, Some(Guid::ROOT), received_ns, spawn_ns, lane) {
        Ok(id) => id.guid,
        Err(_) => return,
    };
    let reply_to = s.clone();
    let spawned = s.rt.spawn_with_parent(Some(&action_name), Some(parent), async move {
        match fut.await {
            Ok(bytes) => send_reply(&reply_to, source, parcel_id, ReplyStatus::Ok, bytes),
            Err(msg) => send_reply(&reply_to, source, parcel_id, ReplyStatus::ActionPanicked, msg.into_bytes()),
        }
    });
    if spawned.is_err() {
        send_reply(s, source, parcel_id, ReplyStatus::ActionPanicked, b"target runtime is shut down".to_vec());
    }
}

fn receive_loop(s: Arc<Shared>, inbox: Receiver<Incoming>) {
    while let Ok(Incoming::Frame { source, frame }) = inbox.recv() {
        match frame {
            Frame::Parcel(p) => dispatch_parcel(&s, p),
            Frame::Control(Control::Reply { parcel_id, status, payload }) => {
                let entry = s.pending.lock().remove(&parcel_id);
                if let Some((promise, _hold)) = entry {
                    let reply = match status {
                        ReplyStatus::Ok => Ok(payload),
                        ReplyStatus::UnknownAction => {
                            Err(RemoteError::UnknownAction(String::from_utf8_lossy(&payload).into_owned()))
                        }
                        ReplyStatus::ActionPanicked => {
                            Err(RemoteError::ActionPanicked(String::from_utf8_lossy(&payload).into_owned()))
                        }
                    };
                    let _ = promise.fulfill(reply);
                }
            }
            Frame::Control(Control::BarrierEnter { epoch, rank }) => {
                s.sync.lock().barrier.entry(epoch).or_default().insert(rank);
                s.sync_cv.notify_all();
            }
            Frame::Snapshot { epoch, rank, bytes } => {
                s.sync.lock().snapshots.entry(epoch).or_default().insert(rank, bytes);
                s.sync_cv.notify_all();
            }
            Frame::Control(Control::Hello { .. }) => {}
            Frame::Control(Control::Shutdown) => {
                debug_assert!(source < s.world_size);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests;
