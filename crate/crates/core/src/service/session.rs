use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::engine::ClusterView;
use crate::sketch::Sketch;

/// Per-user search state.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Session {
    pub id: String,
    pub query: Option<Sketch>,
    pub clusters: Vec<ClusterView>,
    pub suggestion: Option<Sketch>,
    /// Searches plus perturbations so far.
    pub iteration: u64,
}

struct Entry {
    last_used: Instant,
    session: Arc<tokio::sync::Mutex<Session>>,
}

/// Sessions keyed by id. The outer lock only guards the map; each session
/// has its own async lock so slow requests do not block other users.
pub struct SessionStore {
    next: AtomicU64,
    ttl: Duration,
    map: Mutex<HashMap<String, Entry>>,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self {
            next: AtomicU64::new(1),
            ttl,
            map: Mutex::new(HashMap::new()),
        }
    }

    fn sweep(&self, map: &mut HashMap<String, Entry>, now: Instant) {
        let before = map.len();
        map.retain(|_, e| now.duration_since(e.last_used) < self.ttl);
        if map.len() < before {
            log::debug!("dropped {} idle sessions", before - map.len());
        }
    }

    pub fn create(&self) -> String {
        let id = format!("s{}", self.next.fetch_add(1, Ordering::Relaxed));
        self.insert(id.clone());
        id
    }

    fn insert(&self, id: String) -> Arc<tokio::sync::Mutex<Session>> {
        let now = Instant::now();
        let mut map = self.map.lock().expect("session map poisoned");
        self.sweep(&mut map, now);
        let session = Arc::new(tokio::sync::Mutex::new(Session {
            id: id.clone(),
            ..Session::default()
        }));
        map.insert(
            id,
            Entry {
                last_used: now,
                session: session.clone(),
            },
        );
        session
    }

    /// The session, refreshed, or `None` when unknown or expired.
    pub fn get(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Session>>> {
        let now = Instant::now();
        let mut map = self.map.lock().expect("session map poisoned");
        self.sweep(&mut map, now);
        map.get_mut(id).map(|e| {
            e.last_used = now;
            e.session.clone()
        })
    }

    pub fn get_or_create(&self, id: &str) -> Arc<tokio::sync::Mutex<Session>> {
        self.get(id).unwrap_or_else(|| self.insert(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
