use rand::Rng;

use super::array::{Array, Element};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable leaf arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-scale, scale]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-scale..=scale)))
            .collect();
        self.add(
            name,
            Array::from_vec(shape, data).expect("shape matches data"),
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn load_from<U: Element>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for (id, name, value) in other.iter() {
            let _ = id;
            let target = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if self.values[target.0].shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}`: shape {:?} != {:?}",
                    self.values[target.0].shape(),
                    value.shape()
                )));
            }
            self.values[target.0] = value.cast();
        }
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count {} != {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Array::cast).collect(),
        }
    }
}

/// Per-parameter gradient accumulators produced by `Graph::backward`.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Array<T>>,
}

impl<T: Element> Gradients<T> {
    pub(crate) fn new(grads: Vec<Array<T>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn is_all_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].data().iter().all(|x| *x == T::zero())
    }
}
