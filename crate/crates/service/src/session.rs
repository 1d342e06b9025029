//! In-memory upload sessions. Nothing is written to disk; expiry or a
//! restart drops the uploaded data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use albumseq::Corpus;
use rand::rngs::OsRng;
use rand::RngCore;

/// Opaque 128-bit token, hex encoded.
pub type SessionId = String;

#[derive(Debug)]
struct Session {
    corpus: Arc<Corpus>,
    created: Instant,
    last_access: Instant,
}

#[derive(Debug)]
pub struct SessionStore {
    ttl: Duration,
    sessions: Mutex<HashMap<SessionId, Session>>,
}

fn new_id() -> SessionId {
    let mut bytes = [0u8; 16];
    OsRng.fill_bytes(&mut bytes);
    bytes.iter().fold(String::with_capacity(32), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn create(&self, corpus: Corpus) -> SessionId {
        self.create_at(corpus, Instant::now())
    }

    pub fn create_at(&self, corpus: Corpus, now: Instant) -> SessionId {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let id = loop {
            let id = new_id();
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        sessions.insert(
            id.clone(),
            Session {
                corpus: Arc::new(corpus),
                created: now,
                last_access: now,
            },
        );
        id
    }

    /// Returns the session's corpus and refreshes its idle timer. An
    /// expired session is removed and reported as missing.
    pub fn get(&self, id: &str) -> Option<Arc<Corpus>> {
        self.get_at(id, Instant::now())
    }

    pub fn get_at(&self, id: &str, now: Instant) -> Option<Arc<Corpus>> {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let expired = match sessions.get_mut(id) {
            None => return None,
            Some(s) if now.saturating_duration_since(s.last_access) >= self.ttl => true,
            Some(s) => {
                s.last_access = now;
                return Some(Arc::clone(&s.corpus));
            }
        };
        if expired {
            sessions.remove(id);
        }
        None
    }

    /// Age of a live session since creation.
    pub fn age(&self, id: &str, now: Instant) -> Option<Duration> {
        let sessions = self.sessions.lock().expect("session lock poisoned");
        sessions
            .get(id)
            .map(|s| now.saturating_duration_since(s.created))
    }

    /// Drops every session idle for at least the TTL; returns how many.
    pub fn purge_expired(&self, now: Instant) -> usize {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let before = sessions.len();
        sessions.retain(|_, s| now.saturating_duration_since(s.last_access) < self.ttl);
        before - sessions.len()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
