//! Single-assignment completion tokens and their promise halves.

use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll, Waker};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{current_task, Guid, UsageError};

struct TokenState<T> {
    value: Option<T>,
    waiters: Vec<(Guid, Waker)>,
}

struct TokenInner<T> {
    state: Mutex<TokenState<T>>,
    cv: Condvar,
}

impl<T> TokenInner<T> {
    fn new(value: Option<T>) -> Self {
        TokenInner { state: Mutex::new(TokenState { value, waiters: Vec::new() }), cv: Condvar::new() }
    }
}

/// The consumer side of a promise/future pair.
///
/// A token transitions from pending to fulfilled exactly once. Any number of
/// tasks may suspend on it; all of them are woken by the single fulfillment.
pub struct CompletionToken<T> {
    inner: Arc<TokenInner<T>>,
}

impl<T> Clone for CompletionToken<T> {
    fn clone(&self) -> Self {
        CompletionToken { inner: self.inner.clone() }
    }
}

impl<T> fmt::Debug for CompletionToken<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionToken").field("fulfilled", &self.is_fulfilled()).finish()
    }
}

/// The producer side of a promise/future pair.
pub struct Promise<T> {
    inner: Arc<TokenInner<T>>,
}

impl<T> Clone for Promise<T> {
    fn clone(&self) -> Self {
        Promise { inner: self.inner.clone() }
    }
}

impl<T> fmt::Debug for Promise<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Promise").finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("promise already fulfilled")]
pub struct AlreadyFulfilled;

/// Creates a linked promise and token.
pub fn make_promise<T>() -> (Promise<T>, CompletionToken<T>) {
    let inner = Arc::new(TokenInner::new(None));
    (Promise { inner: inner.clone() }, CompletionToken { inner })
}

impl<T> Promise<T> {
    /// Fulfills the linked token. A second fulfillment is rejected and leaves
    /// the stored value untouched.
    pub fn fulfill(&self, value: T) -> Result<(), AlreadyFulfilled> {
        let waiters = {
            let mut st = self.inner.state.lock();
            if st.value.is_some() {
                return Err(AlreadyFulfilled);
            }
            st.value = Some(value);
            std::mem::take(&mut st.waiters)
        };
        self.inner.cv.notify_all();
        for (_, waker) in waiters {
            waker.wake();
        }
        Ok(())
    }

    pub fn token(&self) -> CompletionToken<T> {
        CompletionToken { inner: self.inner.clone() }
    }
}

impl<T> CompletionToken<T> {
    /// A token that is fulfilled from the start.
    pub fn ready(value: T) -> Self {
        CompletionToken { inner: Arc::new(TokenInner::new(Some(value))) }
    }

    pub fn is_fulfilled(&self) -> bool {
        self.inner.state.lock().value.is_some()
    }

    /// Guids of tasks currently suspended on this token.
    pub fn waiter_guids(&self) -> Vec<Guid> {
        self.inner.state.lock().waiters.iter().map(|(g, _)| *g).collect()
    }
}

impl<T: Clone> CompletionToken<T> {
    pub fn try_get(&self) -> Option<T> {
        self.inner.state.lock().value.clone()
    }

    /// Blocks the calling OS thread until fulfillment. Meant for driver threads
    /// outside the runtime; tasks use [`suspend_on`].
    pub fn wait_blocking(&self) -> T {
        let mut st = self.inner.state.lock();
        loop {
            if let Some(v) = &st.value {
                return v.clone();
            }
            self.inner.cv.wait(&mut st);
        }
    }

    pub fn wait_blocking_timeout(&self, timeout: Duration) -> Option<T> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        loop {
            if let Some(v) = &st.value {
                return Some(v.clone());
            }
            if self.inner.cv.wait_until(&mut st, deadline).timed_out() {
                return st.value.clone();
            }
        }
    }

    fn poll_value(&self, guid: Guid, cx: &mut Context<'_>) -> Poll<T> {
        let mut st = self.inner.state.lock();
        if let Some(v) = &st.value {
            return Poll::Ready(v.clone());
        }
        match st.waiters.iter_mut().find(|(g, _)| *g == guid) {
            Some((_, w)) => w.clone_from(cx.waker()),
            None => st.waiters.push((guid, cx.waker().clone())),
        }
        Poll::Pending
    }
}

/// Suspends the current task until `token` is fulfilled and yields its value.
///
/// If the token is already fulfilled the call completes on first poll and the
/// task does not yield. Awaiting this outside a runtime task is a usage error.
pub fn suspend_on<T: Clone>(token: &CompletionToken<T>) -> SuspendOn<'_, T> {
    SuspendOn { token }
}

pub struct SuspendOn<'a, T> {
    token: &'a CompletionToken<T>,
}

impl<T: Clone> Future for SuspendOn<'_, T> {
    type Output = Result<T, UsageError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let Some(guid) = current_task() else {
            return Poll::Ready(Err(UsageError::OutsideTask));
        };
        self.token.poll_value(guid, cx).map(Ok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_fulfill_rejected_and_value_kept() {
        let (p, t) = make_promise();
        p.fulfill(1).unwrap();
        assert_eq!(p.fulfill(2), Err(AlreadyFulfilled));
        assert_eq!(t.try_get(), Some(1));
    }

    #[test]
    fn blocking_wait_sees_value_from_other_thread() {
        let (p, t) = make_promise::<u32>();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(5));
            p.fulfill(7).unwrap();
        });
        assert_eq!(t.wait_blocking(), 7);
        h.join().unwrap();
    }

    #[test]
    fn suspend_outside_task_is_usage_error() {
        let t = CompletionToken::ready(3u8);
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        let mut fut = suspend_on(&t);
        let r = Pin::new(&mut fut).poll(&mut cx);
        assert!(matches!(r, Poll::Ready(Err(UsageError::OutsideTask))));
    }
}
