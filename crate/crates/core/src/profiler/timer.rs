use crate::tasking::TaskIdentity;

use super::snapshot::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerState {
    Created,
    Running,
    Yielded,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal lifecycle transition from {from:?} on {event}")]
pub struct LifecycleViolation {
    pub from: TimerState,
    pub event: &'static str,
}

/// Lifecycle timer for one task instance. Only time between a start/resume
/// and the following yield/stop counts as active.
#[derive(Debug, Clone)]
pub struct TaskTimer {
    pub identity: TaskIdentity,
    pub create_ns: u64,
    pub first_start_ns: u64,
    pub last_stop_ns: u64,
    pub accumulated_active_ns: u64,
    pub yield_count: u64,
    pub state: TimerState,
    segment_start_ns: u64,
    worker: u32,
    segments: Option<Vec<Segment>>,
}

impl TaskTimer {
    pub fn new(identity: TaskIdentity, create_ns: u64, keep_segments: bool) -> Self {
        TaskTimer {
            identity,
            create_ns,
            first_start_ns: 0,
            last_stop_ns: 0,
            accumulated_active_ns: 0,
            yield_count: 0,
            state: TimerState::Created,
            segment_start_ns: 0,
            worker: 0,
            segments: keep_segments.then(Vec::new),
        }
    }

    fn expect(&self, want: TimerState, event: &'static str) -> Result<(), LifecycleViolation> {
        if self.state == want {
            Ok(())
        } else {
            Err(LifecycleViolation { from: self.state, event })
        }
    }

    pub fn start(&mut self, ts_ns: u64, worker: usize) -> Result<(), LifecycleViolation> {
        self.expect(TimerState::Created, "start")?;
        self.first_start_ns = ts_ns;
        self.open(ts_ns, worker);
        Ok(())
    }

    pub fn yield_at(&mut self, ts_ns: u64) -> Result<(), LifecycleViolation> {
        self.expect(TimerState::Running, "yield")?;
        self.close(ts_ns);
        self.yield_count += 1;
        self.state = TimerState::Yielded;
        Ok(())
    }

    pub fn resume(&mut self, ts_ns: u64, worker: usize) -> Result<(), LifecycleViolation> {
        self.expect(TimerState::Yielded, "resume")?;
        self.open(ts_ns, worker);
        Ok(())
    }

    pub fn stop(&mut self, ts_ns: u64) -> Result<(), LifecycleViolation> {
        self.expect(TimerState::Running, "stop")?;
        self.close(ts_ns);
        self.last_stop_ns = self.segment_end(ts_ns);
        self.state = TimerState::Stopped;
        Ok(())
    }

    fn open(&mut self, ts_ns: u64, worker: usize) {
        self.segment_start_ns = ts_ns.max(self.last_stop_ns);
        self.worker = worker as u32;
        self.state = TimerState::Running;
    }

    fn segment_end(&self, ts_ns: u64) -> u64 {
        ts_ns.max(self.segment_start_ns)
    }

    fn close(&mut self, ts_ns: u64) {
        let end = self.segment_end(ts_ns);
        self.accumulated_active_ns += end - self.segment_start_ns;
        // Track the latest instant seen so a later segment cannot start earlier.
        self.last_stop_ns = end;
        if let Some(segs) = &mut self.segments {
            segs.push(Segment { start_ns: self.segment_start_ns, end_ns: end, worker: self.worker });
        }
    }

    /// Active time including the currently open segment, if any.
    pub fn active_until(&self, now_ns: u64) -> u64 {
        match self.state {
            TimerState::Running => self.accumulated_active_ns + now_ns.saturating_sub(self.segment_start_ns),
            _ => self.accumulated_active_ns,
        }
    }

    pub fn span_ns(&self) -> u64 {
        self.last_stop_ns.saturating_sub(self.first_start_ns)
    }

    pub fn take_segments(&mut self) -> Vec<Segment> {
        self.segments.take().unwrap_or_default()
    }
}
