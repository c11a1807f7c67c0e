use std::collections::BTreeMap;
use std::path::Path;

use crate::jsonl::{self, JsonlError};
use crate::model::{InstructionId, ModelId, Response};

/// All collected responses, keyed by `(instruction, model)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResponseStore {
    responses: BTreeMap<(InstructionId, ModelId), Response>,
}

impl ResponseStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the response for its `(instruction, model)` key.
    pub fn insert(&mut self, r: Response) -> Option<Response> {
        self.responses
            .insert((r.instruction_id.clone(), r.model_id.clone()), r)
    }

    pub fn get(&self, instruction: &InstructionId, model: &ModelId) -> Option<&Response> {
        self.responses.get(&(instruction.clone(), model.clone()))
    }

    pub fn contains(&self, instruction: &InstructionId, model: &ModelId) -> bool {
        self.get(instruction, model).is_some()
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Response> {
        self.responses.values()
    }

    pub fn for_model<'a>(&'a self, model: &'a ModelId) -> impl Iterator<Item = &'a Response> {
        self.responses.values().filter(move |r| &r.model_id == model)
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        let mut store = Self::new();
        for r in jsonl::read_or_empty::<Response>(path)? {
            store.insert(r);
        }
        Ok(store)
    }

    /// Writes responses in key order, so identical stores give identical files.
    pub fn save(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write(path, None, self.responses.values())
    }
}

impl FromIterator<Response> for ResponseStore {
    fn from_iter<T: IntoIterator<Item = Response>>(iter: T) -> Self {
        let mut s = Self::new();
        for r in iter {
            s.insert(r);
        }
        s
    }
}
