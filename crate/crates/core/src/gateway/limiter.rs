use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding the in-flight calls of one backend.
#[derive(Debug)]
pub struct Limiter {
    capacity: usize,
    state: Mutex<State>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct State {
    in_flight: usize,
    peak: usize,
}

pub struct Slot<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "limiter capacity must be positive");
        Self { capacity, state: Mutex::new(State::default()), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Slot<'_> {
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while state.in_flight >= self.capacity {
            state = self.freed.wait(state).unwrap_or_else(|e| e.into_inner());
        }
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        Slot { limiter: self }
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).peak
    }
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().unwrap_or_else(|e| e.into_inner());
        state.in_flight -= 1;
        drop(state);
        self.limiter.freed.notify_one();
    }
}
