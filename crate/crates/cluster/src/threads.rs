//! Accounting of principal threads: the long-lived role threads of master, worker
//! and client. Render pool threads are not principal and are never registered.

use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

#[derive(Debug, Default)]
struct Census {
    live: Vec<(u64, String)>,
    next_id: u64,
    total: usize,
    peak: usize,
}

#[derive(Debug, Default, Clone)]
pub struct ThreadRegistry {
    inner: Arc<Mutex<Census>>,
}

/// Keeps one thread registered until dropped.
#[must_use]
pub struct Registration {
    registry: ThreadRegistry,
    id: u64,
}

impl Drop for Registration {
    fn drop(&mut self) {
        self.registry.inner.lock().unwrap().live.retain(|(id, _)| *id != self.id);
    }
}

impl ThreadRegistry {
    pub fn new() -> ThreadRegistry {
        ThreadRegistry::default()
    }

    /// Registers the calling thread under `name`.
    pub fn register(&self, name: impl Into<String>) -> Registration {
        let mut c = self.inner.lock().unwrap();
        let id = c.next_id;
        c.next_id += 1;
        c.live.push((id, name.into()));
        c.total += 1;
        c.peak = c.peak.max(c.live.len());
        Registration { registry: self.clone(), id }
    }

    /// Spawns a registered principal thread.
    pub fn spawn<T: Send + 'static>(
        &self,
        name: impl Into<String>,
        f: impl FnOnce() -> T + Send + 'static,
    ) -> std::io::Result<JoinHandle<T>> {
        let name = name.into();
        let registry = self.clone();
        thread::Builder::new().name(name.clone()).spawn(move || {
            let _reg = registry.register(name);
            f()
        })
    }

    pub fn live(&self) -> usize {
        self.inner.lock().unwrap().live.len()
    }

    pub fn live_names(&self) -> Vec<String> {
        self.inner.lock().unwrap().live.iter().map(|(_, n)| n.clone()).collect()
    }

    /// Threads ever registered.
    pub fn total(&self) -> usize {
        self.inner.lock().unwrap().total
    }

    /// Most threads registered at once.
    pub fn peak(&self) -> usize {
        self.inner.lock().unwrap().peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_live_total_and_peak() {
        let r = ThreadRegistry::new();
        let a = r.register("main");
        let (tx, rx) = std::sync::mpsc::channel::<()>();
        let h = r.spawn("helper", move || rx.recv().unwrap()).unwrap();
        while r.live() < 2 {
            thread::yield_now();
        }
        assert_eq!(r.live_names().len(), 2);
        tx.send(()).unwrap();
        h.join().unwrap();
        drop(a);
        assert_eq!(r.live(), 0);
        assert_eq!(r.total(), 2);
        assert_eq!(r.peak(), 2);
    }
}
