//! Bounded per-channel message buffer shared by publishers and the
//! dispatcher.

use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::OverflowPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Blocked,
    Dropped,
}

/// Admission rule on its own: a message fits if occupancy plus its size
/// stays within capacity; otherwise the policy decides.
pub fn buffer_admit(occupancy: u64, capacity: u64, size: u64, policy: OverflowPolicy) -> Admission {
    if occupancy + size <= capacity {
        Admission::Admitted
    } else {
        match policy {
            OverflowPolicy::Block => Admission::Blocked,
            OverflowPolicy::DropNewest => Admission::Dropped,
        }
    }
}

/// A buffered DATA frame. `size` is the body length, which is what counts
/// against capacity; `frame` is the full wire form forwarded to subscribers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub frame: Vec<u8>,
    pub size: u64,
}

#[derive(Debug, Default)]
struct State {
    queue: VecDeque<Message>,
    occupancy: u64,
    frame_bytes: u64,
    closed: bool,
}

#[derive(Debug)]
pub struct ChannelBuffer {
    capacity: u64,
    policy: OverflowPolicy,
    state: Mutex<State>,
    not_empty: Condvar,
    not_full: Condvar,
}

impl ChannelBuffer {
    pub fn new(capacity: u64, policy: OverflowPolicy) -> Self {
        ChannelBuffer {
            capacity,
            policy,
            state: Mutex::new(State::default()),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Non-blocking admission. A `Blocked` or `Dropped` message is handed back.
    pub fn try_push(&self, msg: Message) -> Result<(), (Admission, Message)> {
        let mut s = self.state.lock();
        if s.closed {
            return Err((Admission::Dropped, msg));
        }
        match buffer_admit(s.occupancy, self.capacity, msg.size, self.policy) {
            Admission::Admitted => {
                Self::enqueue(&mut s, msg);
                drop(s);
                self.not_empty.notify_one();
                Ok(())
            }
            other => Err((other, msg)),
        }
    }

    /// Admits `msg`, waiting for space under the block policy. Returns
    /// `Dropped` when the drop policy discards it or the buffer closes.
    pub fn push(&self, msg: Message) -> Admission {
        let mut s = self.state.lock();
        loop {
            if s.closed {
                return Admission::Dropped;
            }
            match buffer_admit(s.occupancy, self.capacity, msg.size, self.policy) {
                Admission::Admitted => {
                    Self::enqueue(&mut s, msg);
                    drop(s);
                    self.not_empty.notify_one();
                    return Admission::Admitted;
                }
                Admission::Dropped => return Admission::Dropped,
                Admission::Blocked => self.not_full.wait(&mut s),
            }
        }
    }

    fn enqueue(s: &mut State, msg: Message) {
        s.occupancy += msg.size;
        s.frame_bytes += msg.frame.len() as u64;
        s.queue.push_back(msg);
    }

    /// Moves up to `max` messages into `out`, waiting while the buffer is
    /// empty. Returns false once the buffer is closed and drained.
    pub fn pop_batch(&self, max: usize, out: &mut Vec<Message>) -> bool {
        let mut s = self.state.lock();
        while s.queue.is_empty() {
            if s.closed {
                return false;
            }
            self.not_empty.wait(&mut s);
        }
        let n = max.min(s.queue.len());
        let st = &mut *s;
        for m in st.queue.drain(..n) {
            st.occupancy -= m.size;
            st.frame_bytes -= m.frame.len() as u64;
            out.push(m);
        }
        drop(s);
        self.not_full.notify_all();
        true
    }

    /// Like [`pop_batch`](Self::pop_batch) but gives up after `timeout`.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<Message> {
        let mut s = self.state.lock();
        if s.queue.is_empty() && !s.closed {
            self.not_empty.wait_for(&mut s, timeout);
        }
        let m = s.queue.pop_front()?;
        s.occupancy -= m.size;
        s.frame_bytes -= m.frame.len() as u64;
        drop(s);
        self.not_full.notify_all();
        Some(m)
    }

    pub fn occupancy(&self) -> u64 {
        self.state.lock().occupancy
    }

    /// Wire bytes of everything still queued.
    pub fn buffered_frame_bytes(&self) -> u64 {
        self.state.lock().frame_bytes
    }

    pub fn len(&self) -> usize {
        self.state.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stops admissions and wakes every waiter. Queued messages can still
    /// be popped.
    pub fn close(&self) {
        self.state.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }
}
