//! Completion-event routing.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{self, Receiver, Sender};

use thiserror::Error;

use crate::hal::{Event, HalDriver, HalError};

pub type Handler = Box<dyn FnMut(&Event) + Send>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WaitError {
    /// Nothing that could raise the event is outstanding.
    #[error("event {0:#x} can never arrive")]
    Starved(u32),
    #[error(transparent)]
    Hal(#[from] HalError),
}

/// Maps event ids to handlers. Events arrive on a channel (the device holds
/// the sender) or are posted directly.
#[derive(Default)]
pub struct EventDispatcher {
    handlers: BTreeMap<u32, Handler>,
    pending: VecDeque<Event>,
    source: Option<Receiver<Event>>,
    delivered: u64,
    unknown: u64,
}

impl std::fmt::Debug for EventDispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventDispatcher")
            .field("handlers", &self.handlers.keys().collect::<Vec<_>>())
            .field("pending", &self.pending)
            .field("delivered", &self.delivered)
            .field("unknown", &self.unknown)
            .finish()
    }
}

impl EventDispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// A dispatcher plus the sender to hand to the event source.
    pub fn channel() -> (Sender<Event>, Self) {
        let (tx, rx) = mpsc::channel();
        let d = Self {
            source: Some(rx),
            ..Self::default()
        };
        (tx, d)
    }

    /// Registers `handler` for `id`, returning the one it replaces.
    pub fn register_handler(&mut self, id: u32, handler: Handler) -> Option<Handler> {
        self.handlers.insert(id, handler)
    }

    pub fn unregister_handler(&mut self, id: u32) -> Option<Handler> {
        self.handlers.remove(&id)
    }

    /// Invokes the handler for `event.id`. Events nobody listens for are
    /// counted and dropped.
    pub fn dispatch_event(&mut self, event: &Event) -> bool {
        match self.handlers.get_mut(&event.id) {
            Some(h) => {
                h(event);
                self.delivered += 1;
                true
            }
            None => {
                self.unknown += 1;
                false
            }
        }
    }

    pub fn post(&mut self, event: Event) {
        self.pending.push_back(event);
    }

    fn collect(&mut self) {
        if let Some(rx) = &self.source {
            self.pending.extend(rx.try_iter());
        }
    }

    /// Dispatches everything queued so far. Returns the number handled.
    pub fn pump(&mut self) -> usize {
        self.collect();
        let mut handled = 0;
        while let Some(ev) = self.pending.pop_front() {
            handled += self.dispatch_event(&ev) as usize;
        }
        handled
    }

    /// Blocks on the device until `id` arrives. Other events seen on the way
    /// stay queued. A registered handler for `id` still runs.
    pub fn wait_for<H: HalDriver + ?Sized>(&mut self, id: u32, hal: &mut H) -> Result<Event, WaitError> {
        loop {
            self.collect();
            if let Some(pos) = self.pending.iter().position(|e| e.id == id) {
                let ev = self.pending.remove(pos).expect("position is in range");
                if let Some(h) = self.handlers.get_mut(&id) {
                    h(&ev);
                }
                self.delivered += 1;
                return Ok(ev);
            }
            if !hal.wait_for_interrupt()? {
                self.collect();
                if !self.pending.iter().any(|e| e.id == id) {
                    return Err(WaitError::Starved(id));
                }
            }
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn unknown_events(&self) -> u64 {
        self.unknown
    }

    /// Drops queued events and resets counters. Handlers stay registered.
    pub fn clear(&mut self) {
        self.collect();
        self.pending.clear();
        self.delivered = 0;
        self.unknown = 0;
    }
}
