//! Search engine, sessions and the HTTP API.

mod engine;
mod http;
mod session;

pub use engine::{index_corpus, ClusterView, CorpusRecord, Engine, Hit, PerturbOutcome, SearchOutcome};
pub use http::{router, serve, AppState};
pub use session::{Session, SessionStore};
