//! Image-independent reasoning for classes the model did not report.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{build_generic_reason_prompt, parse_reason_chains, ReasonChain, ReasonerConfig, ReasonerError};
use crate::backends::ChatBackend;
use crate::vocab::{ClassId, ClassVocabulary};

type Slot = Arc<Mutex<Option<ReasonChain>>>;

/// Generic reasoning with a run-wide cache keyed by
/// `(vocabulary hash, class id)`. Each key is dispatched to the backend at
/// most once, also under concurrent use.
#[derive(Debug, Default)]
pub struct GenericReasoner {
    config: ReasonerConfig,
    slots: Mutex<HashMap<(String, ClassId), Slot>>,
    lookups: AtomicU64,
    dispatched: AtomicU64,
}

impl GenericReasoner {
    pub fn new(config: ReasonerConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// Classes resolved by the backend so far (cache misses).
    pub fn dispatched(&self) -> u64 {
        self.dispatched.load(Ordering::Relaxed)
    }

    pub fn lookups(&self) -> u64 {
        self.lookups.load(Ordering::Relaxed)
    }

    fn slot(&self, key: (String, ClassId)) -> Slot {
        self.slots
            .lock()
            .expect("generic cache poisoned")
            .entry(key)
            .or_default()
            .clone()
    }

    fn reason_one(&self, chat: &dyn ChatBackend, name: &str) -> Result<ReasonChain, ReasonerError> {
        let req = build_generic_reason_prompt(name, &self.config);
        let mut last = None;
        for attempt in 1..=self.config.retries {
            match chat.chat(&req) {
                Err(mut e) => {
                    e.attempts = attempt;
                    last = Some(ReasonerError::Backend(e));
                }
                Ok(resp) => match parse_reason_chains(&resp.text, &[name]) {
                    Ok(mut m) => return Ok(m.remove(name).expect("parser returns every expected class")),
                    Err(e) => last = Some(e),
                },
            }
        }
        Err(last.expect("retries >= 1"))
    }

    /// One chain per requested class, in class-id order.
    pub fn run(
        &self,
        chat: &dyn ChatBackend,
        vocab: &ClassVocabulary,
        classes: &[ClassId],
    ) -> Result<BTreeMap<ClassId, ReasonChain>, ReasonerError> {
        if self.config.retries == 0 {
            return Err(ReasonerError::NoRetries);
        }
        let vocab_hash = vocab.content_hash();
        let mut out = BTreeMap::new();
        for &id in classes {
            let name = vocab
                .name(id)
                .ok_or_else(|| ReasonerError::Merge(format!("class id {id} is not in the vocabulary")))?;
            self.lookups.fetch_add(1, Ordering::Relaxed);
            let slot = self.slot((vocab_hash.clone(), id));
            let mut guard = slot.lock().expect("generic slot poisoned");
            let chain = match guard.as_ref() {
                Some(c) => c.clone(),
                None => {
                    self.dispatched.fetch_add(1, Ordering::Relaxed);
                    let c = self.reason_one(chat, name)?;
                    *guard = Some(c.clone());
                    c
                }
            };
            out.insert(id, chain);
        }
        Ok(out)
    }
}
