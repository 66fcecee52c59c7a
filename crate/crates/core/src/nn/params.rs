use std::collections::HashMap;
use std::path::Path;

use ndarray::ArrayD;

use crate::container::Container;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f32>,
    pub trainable: bool,
}

/// Named parameter tensors of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: ArrayD<f32>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Scalar count of all parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn fill(&mut self, v: f32) {
        for e in &mut self.entries {
            e.value.fill(v);
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "checkpoint");
        for e in &self.entries {
            c.insert_f32(&e.name, e.value.clone(), "param");
        }
        c
    }

    /// Overwrites parameter values from a container, requiring every
    /// registered name to be present with a matching shape.
    pub fn load_from(&mut self, c: &Container, dir: &Path) -> Result<()> {
        for e in &mut self.entries {
            let v = c.f32(&e.name).map_err(|_| Error::Container {
                path: dir.to_path_buf(),
                msg: format!("checkpoint lacks parameter {}", e.name),
            })?;
            if v.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator.
#[derive(Debug, Clone)]
pub struct Grads {
    values: Vec<Option<ArrayD<f32>>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self {
            values: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: ArrayD<f32>) {
        if id.0 >= self.values.len() {
            self.values.resize(id.0 + 1, None);
        }
        match &mut self.values[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.values.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.values.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
