//! Deadline-ordered callback thread used for timed fulfillments (sleeps,
//! simulated device completions).

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::clock;

type Callback = Box<dyn FnOnce() + Send>;

// Below this distance to the deadline the thread yields instead of sleeping;
// condvar timeouts overshoot by tens of microseconds.
const SPIN_WINDOW_NS: u64 = 60_000;

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    callbacks: HashMap<u64, Callback>,
    next_seq: u64,
    stop: bool,
}

struct TimerShared {
    queue: Mutex<Queue>,
    cv: Condvar,
}

pub(crate) struct TimerService {
    shared: Arc<TimerShared>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl TimerService {
    pub(crate) fn start(name: String) -> Self {
        let shared = Arc::new(TimerShared { queue: Mutex::new(Queue::default()), cv: Condvar::new() });
        let worker = shared.clone();
        let thread = std::thread::Builder::new().name(name).spawn(move || run(&worker)).expect("spawn timer thread");
        TimerService { shared, thread: Mutex::new(Some(thread)) }
    }

    /// Runs `f` on the timer thread once the clock reaches `deadline_ns`.
    pub(crate) fn schedule_at(&self, deadline_ns: u64, f: Callback) {
        let mut q = self.shared.queue.lock();
        let seq = q.next_seq;
        q.next_seq += 1;
        q.heap.push(Reverse((deadline_ns, seq)));
        q.callbacks.insert(seq, f);
        drop(q);
        self.shared.cv.notify_one();
    }

    pub(crate) fn stop(&self) {
        self.shared.queue.lock().stop = true;
        self.shared.cv.notify_all();
        if let Some(t) = self.thread.lock().take() {
            let _ = t.join();
        }
    }
}

fn run(shared: &TimerShared) {
    let mut q = shared.queue.lock();
    loop {
        if q.stop {
            // Pending callbacks are dropped; their promises stay unfulfilled.
            q.callbacks.clear();
            return;
        }
        let Some(&Reverse((deadline, seq))) = q.heap.peek() else {
            shared.cv.wait(&mut q);
            continue;
        };
        let now = clock::now_ns();
        if now >= deadline {
            q.heap.pop();
            let cb = q.callbacks.remove(&seq);
            drop(q);
            if let Some(cb) = cb {
                cb();
            }
            q = shared.queue.lock();
            continue;
        }
        let remaining = deadline - now;
        if remaining > SPIN_WINDOW_NS {
            let sleep = Duration::from_nanos(remaining - SPIN_WINDOW_NS);
            shared.cv.wait_for(&mut q, sleep);
        } else {
            drop(q);
            std::thread::yield_now();
            q = shared.queue.lock();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;

    #[test]
    fn fires_in_deadline_order() {
        let timer = TimerService::start("test-timer".into());
        let (tx, rx) = mpsc::channel();
        let base = clock::now_ns();
        for (i, delay_ms) in [(0u32, 6u64), (1, 2), (2, 4)] {
            let tx = tx.clone();
            timer.schedule_at(base + delay_ms * 1_000_000, Box::new(move || tx.send((i, clock::now_ns())).unwrap()));
        }
        let order: Vec<(u32, u64)> = (0..3).map(|_| rx.recv().unwrap()).collect();
        assert_eq!(order.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(order[0].1 >= base + 2_000_000);
        timer.stop();
    }
}
