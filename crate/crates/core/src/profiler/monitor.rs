//! Operating-system interrogation for the periodic monitor.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::Profiler;

pub const CPU_UTILIZATION: &str = "process.cpu_utilization";
pub const RSS_BYTES: &str = "process.rss_bytes";
pub const PEAK_RSS_BYTES: &str = "process.peak_rss_bytes";

#[derive(Debug, thiserror::Error)]
pub enum OsQueryError {
    #[error("reading {path}: {source}")]
    Io { path: &'static str, source: std::io::Error },
    #[error("field {0} missing from /proc/self/status")]
    MissingField(&'static str),
    #[error("getrusage failed")]
    Rusage,
}

/// Process CPU time (user + system) in nanoseconds.
pub fn process_cpu_time_ns() -> Result<u64, OsQueryError> {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage writes a full rusage struct into the pointer on success.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return Err(OsQueryError::Rusage);
    }
    // SAFETY: rc == 0 means the struct was initialised.
    let u = unsafe { usage.assume_init() };
    let tv = |t: libc::timeval| t.tv_sec as u64 * 1_000_000_000 + t.tv_usec as u64 * 1_000;
    Ok(tv(u.ru_utime) + tv(u.ru_stime))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryUsage {
    pub rss_bytes: u64,
    pub peak_rss_bytes: u64,
}

fn status_kb(status: &str, field: &'static str) -> Result<u64, OsQueryError> {
    status
        .lines()
        .find_map(|l| l.strip_prefix(field))
        .and_then(|rest| rest.trim_start_matches(':').split_whitespace().next())
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or(OsQueryError::MissingField(field))
}

pub fn parse_status(status: &str) -> Result<MemoryUsage, OsQueryError> {
    Ok(MemoryUsage {
        rss_bytes: status_kb(status, "VmRSS")? * 1024,
        peak_rss_bytes: status_kb(status, "VmHWM")? * 1024,
    })
}

pub fn memory_usage() -> Result<MemoryUsage, OsQueryError> {
    let path = "/proc/self/status";
    let s = std::fs::read_to_string(path).map_err(|source| OsQueryError::Io { path, source })?;
    parse_status(&s)
}

#[derive(Debug, Default)]
pub(super) struct MonitorState {
    pub last_wall_ns: u64,
    pub last_cpu_ns: u64,
    pub peak_rss: u64,
    pub ticks: u64,
}

/// Background thread calling [`Profiler::monitor_tick`] every period.
/// Stops when dropped.
pub struct MonitorHandle {
    stop: Arc<(Mutex<bool>, Condvar)>,
    thread: Option<JoinHandle<()>>,
}

impl MonitorHandle {
    pub(super) fn start(profiler: Arc<Profiler>, period: Duration) -> Self {
        let stop = Arc::new((Mutex::new(false), Condvar::new()));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("amt-monitor".into())
            .spawn(move || {
                let origin = Instant::now();
                let mut k = 1u32;
                let (lock, cv) = &*flag;
                let mut stopped = lock.lock();
                loop {
                    let deadline = origin + period * k;
                    while !*stopped && Instant::now() < deadline {
                        cv.wait_until(&mut stopped, deadline);
                    }
                    if *stopped {
                        return;
                    }
                    drop(stopped);
                    profiler.monitor_tick();
                    k += 1;
                    stopped = lock.lock();
                }
            })
            .expect("spawn monitor thread");
        MonitorHandle { stop, thread: Some(thread) }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        *self.stop.0.lock() = true;
        self.stop.1.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MonitorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_status_fields() {
        let s = "Name:\tx\nVmHWM:\t  2048 kB\nVmRSS:\t  1024 kB\n";
        assert_eq!(parse_status(s).unwrap(), MemoryUsage { rss_bytes: 1024 * 1024, peak_rss_bytes: 2048 * 1024 });
        assert!(matches!(parse_status("VmRSS: 1 kB"), Err(OsQueryError::MissingField("VmHWM"))));
    }

    #[test]
    fn live_process_has_positive_rss() {
        let m = memory_usage().unwrap();
        assert!(m.rss_bytes > 0);
        assert!(m.peak_rss_bytes >= m.rss_bytes);
        assert!(process_cpu_time_ns().is_ok());
    }
}
