use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tensor::numel;
use super::{DiffError, Scalar, Tensor};

/// A named dense array of learned values; the unit of checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    name: String,
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self, DiffError> {
        if shape.contains(&0) || numel(&shape) != values.len() {
            return Err(DiffError::DataLength { shape, len: values.len() });
        }
        Ok(ParamTensor { name: name.into(), shape, values, requires_grad: true })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Self, DiffError> {
        Self::new(name, shape.to_vec(), alloc::vec![T::zero(); numel(shape)])
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64_lossless())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, p: ParamTensor<T>) -> Result<(), DiffError> {
        if self.index.contains_key(p.name()) {
            return Err(DiffError::DuplicateParam(p.name().to_string()));
        }
        self.index.insert(p.name().to_string(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<T>, DiffError> {
        self.index.get(name).map(|&i| &self.params[i]).ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor<T>, DiffError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(DiffError::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|p| p.cast()).collect(), index: self.index.clone() }
    }

    /// Overwrites every value with the same-named tensor of `other`.
    /// Both stores must hold identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<(), DiffError> {
        for p in &mut self.params {
            let src = other.get(p.name())?;
            if src.shape() != p.shape() {
                return Err(DiffError::ParamShape { name: p.name.clone(), expected: p.shape.clone(), found: src.shape().to_vec() });
            }
            p.values.copy_from_slice(src.values());
        }
        Ok(())
    }

    /// Checks that `other` has exactly the same names and shapes; reports
    /// the first offending tensor.
    pub fn check_layout(&self, other: &ParamStore<T>) -> Result<(), DiffError> {
        for p in &self.params {
            let q = other.get(p.name()).map_err(|_| DiffError::MissingParam(p.name.clone()))?;
            if q.shape() != p.shape() {
                return Err(DiffError::ParamShape { name: p.name.clone(), expected: p.shape.clone(), found: q.shape().to_vec() });
            }
        }
        if let Some(extra) = other.params.iter().find(|q| !self.contains(q.name())) {
            return Err(DiffError::UnknownParam(extra.name.clone()));
        }
        Ok(())
    }
}

/// Gradient map from parameter name to a tensor of matching shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        let grads = store.iter().filter(|p| p.requires_grad()).map(|p| (p.name().to_string(), Tensor::zeros(p.shape()))).collect();
        Gradients { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> T {
        self.grads.values().flat_map(|t| t.data().iter()).fold(T::zero(), |acc, &g| acc + g * g).sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.grads.values_mut() {
            for g in t.data_mut() {
                *g = *g * factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|t| t.all_finite())
    }
}
