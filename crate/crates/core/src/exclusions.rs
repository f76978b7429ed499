//! Shared handle over the exclusion store and its retrieval index.
//!
//! Readers take an `Arc` to the current [`Generation`] and keep using it for
//! the whole request. Writers are serialized, build the next generation off
//! to the side and publish it with a single pointer swap.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use crate::retrieval::{Bm25Index, Bm25Params, RetrievalResult};
use crate::store::{ExclusionRecord, ExclusionStore, RecordDraft, StoreError, StoreVersion};

/// An immutable view of the store together with the index built over it.
#[derive(Debug, Clone)]
pub struct Generation {
    pub number: u64,
    pub store: ExclusionStore,
    pub index: Bm25Index,
}

impl Generation {
    pub fn retrieve(&self, query: &str, draft: &str, k: usize) -> Vec<RetrievalResult> {
        self.index.retrieve_top_k(query, draft, k)
    }

    pub fn record(&self, id: &str) -> Option<&ExclusionRecord> {
        self.store.get(id)
    }
}

#[derive(Debug)]
pub struct ExclusionSet {
    current: RwLock<Arc<Generation>>,
    writer: Mutex<()>,
    persist_to: Option<PathBuf>,
}

impl ExclusionSet {
    pub fn new(store: ExclusionStore, params: Bm25Params) -> Self {
        let index = Bm25Index::build(params, store.records());
        Self {
            current: RwLock::new(Arc::new(Generation {
                number: 0,
                store,
                index,
            })),
            writer: Mutex::new(()),
            persist_to: None,
        }
    }

    /// Snapshots the store to `path` after every successful mutation.
    pub fn persist_to(mut self, path: impl Into<PathBuf>) -> Self {
        self.persist_to = Some(path.into());
        self
    }

    pub fn current(&self) -> Arc<Generation> {
        self.current
            .read()
            .expect("generation lock poisoned")
            .clone()
    }

    pub fn version(&self) -> StoreVersion {
        self.current().store.version()
    }

    pub fn add(&self, drafts: &[RecordDraft]) -> Result<StoreVersion, StoreError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let base = self.current();
        let records = base.store.prepare_add(drafts)?;
        let mut next = (*base).clone();
        next.index.update(records.iter(), std::iter::empty());
        next.store.apply_add(records);
        self.publish(next)
    }

    pub fn remove(&self, ids: &[String]) -> Result<StoreVersion, StoreError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let base = self.current();
        base.store.prepare_remove(ids)?;
        let mut next = (*base).clone();
        next.index
            .update(std::iter::empty(), ids.iter().map(String::as_str));
        next.store.apply_remove(ids);
        self.publish(next)
    }

    fn publish(&self, mut next: Generation) -> Result<StoreVersion, StoreError> {
        next.number += 1;
        if let Some(path) = &self.persist_to {
            next.store.snapshot(path)?;
        }
        let version = next.store.version();
        *self.current.write().expect("generation lock poisoned") = Arc::new(next);
        Ok(version)
    }
}
