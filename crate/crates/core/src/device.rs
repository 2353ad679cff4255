//! Simulated accelerator: a pool of in-order streams on a virtual timeline,
//! buffered activity records, and device/host-pinned memory accounting.
//!
//! Work submitted to a stream starts when the stream drains and occupies it
//! for the requested duration. Completion is signalled through the runtime's
//! timer thread, so a token is never fulfilled before its record's end time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::clock;
use crate::tasking::{make_promise, CompletionToken, Guid, RuntimeHandle};

pub const DEFAULT_STREAM_COUNT: u32 = 128;
pub const DEFAULT_CAPTURE_LATENCY_NS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActivityKind {
    Kernel,
    CopyHostToDevice,
    CopyDeviceToHost,
    CopyDeviceToDevice,
    Alloc,
    Free,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; 6] = [
        ActivityKind::Kernel,
        ActivityKind::CopyHostToDevice,
        ActivityKind::CopyDeviceToHost,
        ActivityKind::CopyDeviceToDevice,
        ActivityKind::Alloc,
        ActivityKind::Free,
    ];

    pub fn is_copy(self) -> bool {
        matches!(
            self,
            ActivityKind::CopyHostToDevice | ActivityKind::CopyDeviceToHost | ActivityKind::CopyDeviceToDevice
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityKind::Kernel => "kernel",
            ActivityKind::CopyHostToDevice => "memcpy_htod",
            ActivityKind::CopyDeviceToHost => "memcpy_dtoh",
            ActivityKind::CopyDeviceToDevice => "memcpy_dtod",
            ActivityKind::Alloc => "alloc",
            ActivityKind::Free => "free",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// One device-side event, delivered asynchronously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityRecord {
    pub kind: ActivityKind,
    pub name: String,
    /// Locality that owns the device; stamped by the receiving profiler.
    pub rank: u32,
    pub device_id: u32,
    pub stream_id: u32,
    pub start_ns: u64,
    pub end_ns: u64,
    pub bytes: Option<u64>,
    pub correlation_guid: Guid,
}

impl ActivityRecord {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }

    pub(crate) fn sort_key(&self) -> (u32, u32, u32, u64, u64, ActivityKind, &str, Guid, Option<u64>) {
        (
            self.rank,
            self.device_id,
            self.stream_id,
            self.start_ns,
            self.end_ns,
            self.kind,
            self.name.as_str(),
            self.correlation_guid,
            self.bytes,
        )
    }
}

/// Consumer of device activity and memory counters (normally the profiler).
pub trait ActivitySink: Send + Sync {
    fn deliver_activity(&self, records: Vec<ActivityRecord>);

    fn device_counter(&self, _name: &str, _value: f64) {}

    /// When false the device skips building records altogether.
    fn wants_activity(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub device_id: u32,
    pub stream_count: u32,
    pub copy_bandwidth_bytes_per_s: f64,
    pub activity_buffer_capacity: usize,
    /// Stream time spent ahead of each kernel or copy while activity records
    /// are being captured, modelling the launch serialization of tracing.
    pub activity_capture_latency_ns: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            device_id: 0,
            stream_count: DEFAULT_STREAM_COUNT,
            copy_bandwidth_bytes_per_s: 10e9,
            activity_buffer_capacity: 4096,
            activity_capture_latency_ns: DEFAULT_CAPTURE_LATENCY_NS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeviceError {
    #[error("stream {stream} out of range (device has {count} streams)")]
    InvalidStream { stream: u32, count: u32 },
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("copy size must be positive")]
    ZeroBytes,
    #[error("{0:?} is not a copy kind")]
    NotACopy(ActivityKind),
    #[error("handle {0} was already freed")]
    DoubleFree(u64),
    #[error("unknown handle {0}")]
    UnknownHandle(u64),
    #[error("invalid device configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemorySpace {
    Device,
    HostPinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemHandle(pub u64);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceMemoryState {
    pub current_device_bytes: u64,
    pub peak_device_bytes: u64,
    pub current_host_pinned_bytes: u64,
    pub peak_host_pinned_bytes: u64,
}

#[derive(Default)]
struct MemoryTracker {
    state: DeviceMemoryState,
    live: HashMap<MemHandle, (u64, MemorySpace)>,
    next_handle: u64,
}

impl MemoryTracker {
    fn alloc(&mut self, bytes: u64, space: MemorySpace) -> MemHandle {
        self.next_handle += 1;
        let h = MemHandle(self.next_handle);
        self.live.insert(h, (bytes, space));
        let st = &mut self.state;
        match space {
            MemorySpace::Device => {
                st.current_device_bytes += bytes;
                st.peak_device_bytes = st.peak_device_bytes.max(st.current_device_bytes);
            }
            MemorySpace::HostPinned => {
                st.current_host_pinned_bytes += bytes;
                st.peak_host_pinned_bytes = st.peak_host_pinned_bytes.max(st.current_host_pinned_bytes);
            }
        }
        h
    }

    fn free(&mut self, h: MemHandle) -> Result<(u64, MemorySpace), DeviceError> {
        let Some((bytes, space)) = self.live.remove(&h) else {
            return Err(if h.0 >= 1 && h.0 <= self.next_handle {
                DeviceError::DoubleFree(h.0)
            } else {
                DeviceError::UnknownHandle(h.0)
            });
        };
        match space {
            MemorySpace::Device => self.state.current_device_bytes -= bytes,
            MemorySpace::HostPinned => self.state.current_host_pinned_bytes -= bytes,
        }
        Ok((bytes, space))
    }
}

pub struct Device {
    config: DeviceConfig,
    rt: RuntimeHandle,
    sink: Option<Arc<dyn ActivitySink>>,
    // Virtual time at which each stream drains.
    streams: Vec<Mutex<u64>>,
    next_stream: AtomicUsize,
    buffer: Mutex<Vec<ActivityRecord>>,
    memory: Mutex<MemoryTracker>,
}

impl Device {
    pub fn new(
        config: DeviceConfig,
        rt: RuntimeHandle,
        sink: Option<Arc<dyn ActivitySink>>,
    ) -> Result<Self, DeviceError> {
        if config.stream_count == 0 {
            return Err(DeviceError::Config("stream_count must be at least 1"));
        }
        if config.activity_buffer_capacity == 0 {
            return Err(DeviceError::Config("activity_buffer_capacity must be at least 1"));
        }
        if config.copy_bandwidth_bytes_per_s.is_nan() || config.copy_bandwidth_bytes_per_s <= 0.0 {
            return Err(DeviceError::Config("copy bandwidth must be positive"));
        }
        Ok(Device {
            streams: (0..config.stream_count).map(|_| Mutex::new(0)).collect(),
            config,
            rt,
            sink,
            next_stream: AtomicUsize::new(0),
            buffer: Mutex::new(Vec::new()),
            memory: Mutex::new(MemoryTracker::default()),
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    /// Round-robin stream selection over the pool.
    pub fn next_stream(&self) -> u32 {
        (self.next_stream.fetch_add(1, Ordering::Relaxed) % self.config.stream_count as usize) as u32
    }

    fn capture(&self) -> bool {
        self.sink.as_ref().is_some_and(|s| s.wants_activity())
    }

    fn check_stream(&self, stream_id: u32) -> Result<(), DeviceError> {
        if stream_id >= self.config.stream_count {
            return Err(DeviceError::InvalidStream { stream: stream_id, count: self.config.stream_count });
        }
        Ok(())
    }

    /// Reserves `duration_ns` on a stream after its queued work; returns the
    /// interval and a token fulfilled when it ends.
    fn occupy(&self, stream_id: u32, duration_ns: u64, capture: bool) -> (u64, u64, CompletionToken<()>) {
        let lead = if capture { self.config.activity_capture_latency_ns } else { 0 };
        let (start, end) = {
            let mut busy = self.streams[stream_id as usize].lock();
            let start = (*busy).max(clock::now_ns()) + lead;
            let end = start + duration_ns;
            *busy = end;
            (start, end)
        };
        let (p, t) = make_promise();
        self.rt.call_at(end, move || {
            let _ = p.fulfill(());
        });
        (start, end, t)
    }

    pub fn launch_kernel(
        &self,
        name: &str,
        stream_id: u32,
        duration_ns: u64,
        launching_task: Guid,
    ) -> Result<CompletionToken<()>, DeviceError> {
        self.check_stream(stream_id)?;
        if duration_ns == 0 {
            return Err(DeviceError::ZeroDuration);
        }
        let capture = self.capture();
        let (start, end, token) = self.occupy(stream_id, duration_ns, capture);
        if capture {
            self.buffer_record(ActivityRecord {
                kind: ActivityKind::Kernel,
                name: name.to_string(),
                rank: 0,
                device_id: self.config.device_id,
                stream_id,
                start_ns: start,
                end_ns: end,
                bytes: None,
                correlation_guid: launching_task,
            });
        }
        Ok(token)
    }

    /// Transfer time for `bytes` at the configured bandwidth, at least 1 ns.
    pub fn copy_duration_ns(&self, bytes: u64) -> u64 {
        ((bytes as f64 / self.config.copy_bandwidth_bytes_per_s) * 1e9).round().max(1.0) as u64
    }

    pub fn enqueue_copy(
        &self,
        kind: ActivityKind,
        bytes: u64,
        stream_id: u32,
        launching_task: Guid,
    ) -> Result<CompletionToken<()>, DeviceError> {
        if !kind.is_copy() {
            return Err(DeviceError::NotACopy(kind));
        }
        self.check_stream(stream_id)?;
        if bytes == 0 {
            return Err(DeviceError::ZeroBytes);
        }
        let capture = self.capture();
        let (start, end, token) = self.occupy(stream_id, self.copy_duration_ns(bytes), capture);
        if capture {
            self.buffer_record(ActivityRecord {
                kind,
                name: kind.as_str().to_string(),
                rank: 0,
                device_id: self.config.device_id,
                stream_id,
                start_ns: start,
                end_ns: end,
                bytes: Some(bytes),
                correlation_guid: launching_task,
            });
        }
        Ok(token)
    }

    pub fn device_alloc(&self, bytes: u64, launching_task: Guid) -> MemHandle {
        self.alloc_in(MemorySpace::Device, bytes, launching_task)
    }

    pub fn host_alloc_pinned(&self, bytes: u64, launching_task: Guid) -> MemHandle {
        self.alloc_in(MemorySpace::HostPinned, bytes, launching_task)
    }

    fn alloc_in(&self, space: MemorySpace, bytes: u64, task: Guid) -> MemHandle {
        let (h, state) = {
            let mut m = self.memory.lock();
            let h = m.alloc(bytes, space);
            (h, m.state)
        };
        self.after_memory_change(ActivityKind::Alloc, space, bytes, task, state);
        h
    }

    /// Frees a device or host-pinned allocation.
    pub fn free(&self, handle: MemHandle, launching_task: Guid) -> Result<(), DeviceError> {
        let ((bytes, space), state) = {
            let mut m = self.memory.lock();
            let r = m.free(handle)?;
            (r, m.state)
        };
        self.after_memory_change(ActivityKind::Free, space, bytes, launching_task, state);
        Ok(())
    }

    pub fn device_free(&self, handle: MemHandle, launching_task: Guid) -> Result<(), DeviceError> {
        self.free(handle, launching_task)
    }

    fn after_memory_change(
        &self,
        kind: ActivityKind,
        space: MemorySpace,
        bytes: u64,
        task: Guid,
        st: DeviceMemoryState,
    ) {
        let Some(sink) = &self.sink else { return };
        match space {
            MemorySpace::Device => {
                sink.device_counter("device.current_bytes", st.current_device_bytes as f64);
                sink.device_counter("device.peak_bytes", st.peak_device_bytes as f64);
            }
            MemorySpace::HostPinned => {
                sink.device_counter("host.pinned_current_bytes", st.current_host_pinned_bytes as f64);
                sink.device_counter("host.pinned_peak_bytes", st.peak_host_pinned_bytes as f64);
            }
        }
        if self.capture() {
            let now = clock::now_ns();
            let name = match space {
                MemorySpace::Device => kind.as_str().to_string(),
                MemorySpace::HostPinned => format!("{}_host_pinned", kind.as_str()),
            };
            self.buffer_record(ActivityRecord {
                kind,
                name,
                rank: 0,
                device_id: self.config.device_id,
                stream_id: 0,
                start_ns: now,
                end_ns: now,
                bytes: Some(bytes),
                correlation_guid: task,
            });
        }
    }

    pub fn memory_state(&self) -> DeviceMemoryState {
        self.memory.lock().state
    }

    fn buffer_record(&self, record: ActivityRecord) {
        let full = self.buffer.lock().len() >= self.config.activity_buffer_capacity;
        if full {
            if let Some(sink) = &self.sink {
                self.flush_activity(sink.as_ref());
            }
        }
        self.buffer.lock().push(record);
    }

    fn take_completed(&self, all: bool) -> Vec<ActivityRecord> {
        let now = clock::now_ns();
        let mut b = self.buffer.lock();
        let (mut done, pending): (Vec<_>, Vec<_>) =
            std::mem::take(&mut *b).into_iter().partition(|r| all || r.end_ns <= now);
        *b = pending;
        drop(b);
        done.sort_by_key(|r| (r.stream_id, r.start_ns, r.end_ns));
        done
    }

    /// Delivers every completed, undelivered record to `sink`. Within a
    /// stream records arrive in start-time order.
    pub fn flush_activity(&self, sink: &dyn ActivitySink) -> usize {
        let done = self.take_completed(false);
        let n = done.len();
        if n > 0 {
            sink.deliver_activity(done);
        }
        n
    }

    /// Flushes to the attached sink.
    pub fn flush(&self) -> usize {
        match &self.sink {
            Some(s) => self.flush_activity(s.as_ref()),
            None => 0,
        }
    }

    /// Delivers everything still buffered, completed or not.
    pub fn final_flush(&self) -> usize {
        let Some(sink) = &self.sink else { return 0 };
        let done = self.take_completed(true);
        let n = done.len();
        if n > 0 {
            sink.deliver_activity(done);
        }
        n
    }

    pub fn buffered(&self) -> usize {
        self.buffer.lock().len()
    }
}

impl Drop for Device {
    fn drop(&mut self) {
        self.final_flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasking::{suspend_on, Runtime, SchedulerConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Duration;

    #[derive(Default)]
    struct Collect {
        records: Mutex<Vec<ActivityRecord>>,
        counters: Mutex<Vec<(String, f64)>>,
    }

    impl ActivitySink for Collect {
        fn deliver_activity(&self, records: Vec<ActivityRecord>) {
            self.records.lock().extend(records);
        }
        fn device_counter(&self, name: &str, value: f64) {
            self.counters.lock().push((name.to_string(), value));
        }
    }

    fn setup(cfg: DeviceConfig) -> (Runtime, Device, Arc<Collect>) {
        let rt = Runtime::new(SchedulerConfig { worker_count: 2, ..Default::default() }, None).unwrap();
        let sink = Arc::new(Collect::default());
        let dev = Device::new(cfg, rt.handle(), Some(sink.clone() as Arc<dyn ActivitySink>)).unwrap();
        (rt, dev, sink)
    }

    #[test]
    fn invalid_stream_and_duration() {
        let (_rt, dev, _) = setup(DeviceConfig::default());
        assert_eq!(
            dev.launch_kernel("k", 128, 10, Guid(1)).unwrap_err(),
            DeviceError::InvalidStream { stream: 128, count: 128 }
        );
        assert_eq!(dev.launch_kernel("k", 0, 0, Guid(1)).unwrap_err(), DeviceError::ZeroDuration);
        assert_eq!(
            dev.enqueue_copy(ActivityKind::Kernel, 10, 0, Guid(1)).unwrap_err(),
            DeviceError::NotACopy(ActivityKind::Kernel)
        );
        assert_eq!(
            dev.enqueue_copy(ActivityKind::CopyHostToDevice, 0, 0, Guid(1)).unwrap_err(),
            DeviceError::ZeroBytes
        );
    }

    #[test]
    fn single_kernel_duration() {
        let (_rt, dev, sink) = setup(DeviceConfig::default());
        let t = dev.launch_kernel("k", 3, 100_000, Guid(1)).unwrap();
        t.wait_blocking();
        assert_eq!(dev.flush(), 1);
        let r = sink.records.lock()[0].clone();
        let d = r.duration_ns() as f64;
        assert!((d - 100_000.0).abs() <= 5_000.0);
        assert_eq!(r.stream_id, 3);
        assert!(clock::now_ns() >= r.end_ns);
    }

    #[test]
    fn same_stream_serializes() {
        let (_rt, dev, sink) = setup(DeviceConfig::default());
        let a = dev.launch_kernel("a", 5, 1_000_000, Guid(1)).unwrap();
        let b = dev.launch_kernel("b", 5, 1_000_000, Guid(1)).unwrap();
        a.wait_blocking();
        b.wait_blocking();
        dev.flush();
        let r = sink.records.lock().clone();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].start_ns, r[0].end_ns + DEFAULT_CAPTURE_LATENCY_NS);
    }

    #[test]
    fn distinct_streams_overlap() {
        let (rt, dev, sink) = setup(DeviceConfig::default());
        let dev = Arc::new(dev);
        let d = dev.clone();
        let elapsed = rt
            .run_until_idle("launcher", async move {
                let a = d.launch_kernel("a", 0, 1_000_000, Guid(1)).unwrap();
                let b = d.launch_kernel("b", 1, 1_000_000, Guid(1)).unwrap();
                suspend_on(&a).await.unwrap();
                suspend_on(&b).await.unwrap();
            })
            .unwrap();
        assert!(elapsed >= Duration::from_millis(1));
        dev.flush();
        let r = sink.records.lock().clone();
        assert!(r[1].start_ns < r[0].end_ns && r[0].start_ns < r[1].end_ns);
    }

    #[test]
    fn no_capture_latency_without_sink() {
        let rt = Runtime::new(SchedulerConfig::default(), None).unwrap();
        let dev = Device::new(DeviceConfig::default(), rt.handle(), None).unwrap();
        let t0 = clock::now_ns();
        dev.launch_kernel("a", 0, 100_000, Guid(1)).unwrap().wait_blocking();
        // Back-to-back kernels without capture leave no gap on the stream.
        let busy = *dev.streams[0].lock();
        assert!(busy - t0 < 100_000 + DEFAULT_CAPTURE_LATENCY_NS);
    }

    #[test]
    fn copy_duration_from_bandwidth() {
        let (_rt, dev, sink) = setup(DeviceConfig { copy_bandwidth_bytes_per_s: 1e9, ..Default::default() });
        let t = dev.enqueue_copy(ActivityKind::CopyDeviceToDevice, 1_000_000, 0, Guid(2)).unwrap();
        t.wait_blocking();
        dev.flush();
        let r = sink.records.lock()[0].clone();
        assert_eq!(r.duration_ns(), 1_000_000);
        assert_eq!(r.kind, ActivityKind::CopyDeviceToDevice);
        assert_eq!(r.bytes, Some(1_000_000));
    }

    #[test]
    fn copy_bytes_are_conserved() {
        let (_rt, dev, sink) = setup(DeviceConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kinds = [ActivityKind::CopyHostToDevice, ActivityKind::CopyDeviceToHost, ActivityKind::CopyDeviceToDevice];
        let mut requested = 0u64;
        let mut toks = Vec::new();
        for _ in 0..200 {
            let bytes = rng.gen_range(1..100_000u64);
            requested += bytes;
            let kind = kinds[rng.gen_range(0..3)];
            toks.push(dev.enqueue_copy(kind, bytes, rng.gen_range(0..128), Guid(1)).unwrap());
        }
        for t in toks {
            t.wait_blocking();
        }
        dev.flush();
        let total: u64 = sink.records.lock().iter().filter_map(|r| r.bytes).sum();
        assert_eq!(total, requested);
    }

    #[test]
    fn memory_accounting_examples() {
        let (_rt, dev, sink) = setup(DeviceConfig::default());
        let a = dev.device_alloc(100, Guid(1));
        let _b = dev.device_alloc(50, Guid(1));
        dev.device_free(a, Guid(1)).unwrap();
        let st = dev.memory_state();
        assert_eq!((st.current_device_bytes, st.peak_device_bytes), (50, 150));
        assert_eq!(dev.device_free(a, Guid(1)).unwrap_err(), DeviceError::DoubleFree(a.0));
        assert_eq!(dev.device_free(MemHandle(999), Guid(1)).unwrap_err(), DeviceError::UnknownHandle(999));
        let c = sink.counters.lock();
        assert_eq!(c.iter().filter(|(n, _)| n == "device.current_bytes").count(), 3);
        assert_eq!(c.last().unwrap(), &("device.peak_bytes".to_string(), 150.0));
        drop(c);
        dev.flush();
        let kinds: Vec<ActivityKind> = sink.records.lock().iter().map(|r| r.kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == ActivityKind::Alloc).count(), 2);
        assert_eq!(kinds.iter().filter(|k| **k == ActivityKind::Free).count(), 1);
    }

    #[test]
    fn free_everything_keeps_peak() {
        let (_rt, dev, _) = setup(DeviceConfig::default());
        let hs: Vec<_> = [10, 20, 30].iter().map(|&b| dev.device_alloc(b, Guid(1))).collect();
        for h in hs {
            dev.device_free(h, Guid(1)).unwrap();
        }
        let st = dev.memory_state();
        assert_eq!((st.current_device_bytes, st.peak_device_bytes), (0, 60));
    }

    proptest! {
        // Reference: a plain running sum with a running maximum.
        #[test]
        fn memory_trajectory_matches_bump_counter(ops in proptest::collection::vec((any::<bool>(), 1u64..10_000), 1..80)) {
            let rt = Runtime::new(SchedulerConfig::default(), None).unwrap();
            let dev = Device::new(DeviceConfig::default(), rt.handle(), None).unwrap();
            let mut live: Vec<(MemHandle, u64)> = Vec::new();
            let (mut cur, mut peak) = (0u64, 0u64);
            for (i, (alloc, bytes)) in ops.into_iter().enumerate() {
                if alloc || live.is_empty() {
                    live.push((dev.device_alloc(bytes, Guid(1)), bytes));
                    cur += bytes;
                    peak = peak.max(cur);
                } else {
                    let (h, b) = live.remove(i % live.len());
                    dev.device_free(h, Guid(1)).unwrap();
                    cur -= b;
                }
                let st = dev.memory_state();
                prop_assert_eq!(st.current_device_bytes, cur);
                prop_assert_eq!(st.peak_device_bytes, peak);
            }
        }
    }

    #[test]
    fn flush_is_at_most_once() {
        let (_rt, dev, sink) = setup(DeviceConfig::default());
        assert_eq!(dev.flush(), 0);
        let toks: Vec<_> = (0..10).map(|i| dev.launch_kernel("k", i, 50_000, Guid(i as u64 + 1)).unwrap()).collect();
        for t in &toks {
            t.wait_blocking();
        }
        assert_eq!(dev.flush(), 10);
        assert_eq!(dev.flush(), 0);
        let recs = sink.records.lock();
        assert!(recs.iter().all(|r| r.correlation_guid.0 >= 1 && r.correlation_guid.0 <= 10));
    }

    #[test]
    fn in_flight_records_wait_for_completion() {
        let (_rt, dev, _) = setup(DeviceConfig::default());
        let t = dev.launch_kernel("slow", 0, 20_000_000, Guid(1)).unwrap();
        assert_eq!(dev.flush(), 0);
        t.wait_blocking();
        assert_eq!(dev.flush(), 1);
    }

    #[test]
    fn full_buffer_forces_flush() {
        let (_rt, dev, sink) = setup(DeviceConfig { activity_buffer_capacity: 4, ..Default::default() });
        for i in 0..4 {
            dev.launch_kernel("k", i, 1_000, Guid(1)).unwrap().wait_blocking();
        }
        assert_eq!(dev.buffered(), 4);
        dev.launch_kernel("k", 0, 1_000, Guid(1)).unwrap();
        assert_eq!(sink.records.lock().len(), 4);
        assert_eq!(dev.buffered(), 1);
    }

    #[test]
    fn drop_delivers_remaining() {
        let (_rt, dev, sink) = setup(DeviceConfig::default());
        dev.launch_kernel("k", 0, 50_000_000, Guid(1)).unwrap();
        drop(dev);
        assert_eq!(sink.records.lock().len(), 1);
    }
}
