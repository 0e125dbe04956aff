use rand::Rng;

use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Glorot-uniform: `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`.
    pub fn glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape product matches"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every name must exist
    /// with a matching shape.
    pub fn load_values<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<(), AutodiffError> {
        for (name, t) in entries {
            let id =
                self.find(name).ok_or_else(|| AutodiffError::StateMismatch(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(AutodiffError::StateMismatch(format!(
                    "{name}: expected {:?}, got {:?}",
                    self.values[id.0].shape(),
                    t.shape()
                )));
            }
            self.values[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients; `None` marks parameters the loss did not reach.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self { slots: vec![None; len] }
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.slots[id.0] = Some(g);
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Drops every gradient except those for `keep`.
    pub fn retain(&mut self, keep: &[ParamId]) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !keep.iter().any(|k| k.0 == i) {
                *slot = None;
            }
        }
    }
}
