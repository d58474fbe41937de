//! Dense tensors, parameter stores and the differentiation tape.

mod check;
mod graph;
pub mod io;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::rng::{self, Rng};
use crate::{Error, Real, Result};

pub use check::finite_diff_check;
pub use graph::{sigmoid, softplus, Graph, Var};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, F::zero())
    }

    pub fn full(dims: &[usize], v: F) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), data.iter().map(|&v| F::c(v)).collect())
    }

    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: rng::normal_vec(rng, n, std),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    /// Rows of a tensor whose leading axis indexes samples.
    pub fn row(&self, i: usize) -> &[F] {
        let w = self.data.len() / self.dims[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn stack_rows(rows: &[&[F]], row_dims: &[usize]) -> Result<Self> {
        let w: usize = row_dims.iter().product();
        let mut data = Vec::with_capacity(w * rows.len());
        for r in rows {
            if r.len() != w {
                return Err(Error::shape(format!(
                    "row of {} values, expected {w}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        let mut dims = vec![rows.len()];
        dims.extend_from_slice(row_dims);
        Self::new(dims, data)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }
}

/// Ordered map of named tensors. Frozen entries never become gradient leaves.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Arc<Tensor<F>>>,
    frozen: HashSet<String>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
            frozen: HashSet::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Arc::new(t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<F>>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replace the value of an existing entry (optimizer updates).
    pub fn set(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if slot.dims() != t.dims() {
            return Err(Error::shape(format!(
                "`{name}`: {:?} vs {:?}",
                slot.dims(),
                t.dims()
            )));
        }
        *slot = Arc::new(t);
        Ok(())
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn freeze_all(&mut self) {
        for k in self.entries.keys() {
            self.frozen.insert(k.clone());
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<F>>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Bitwise equality of every entry.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, v)| {
                other.entries.get(k).is_some_and(|o| {
                    o.dims() == v.dims()
                        && o.data()
                            .iter()
                            .zip(v.data())
                            .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
                })
            })
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap<F> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> GradMap<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, g: Tensor<F>) {
        self.entries.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data().iter().all(|v| *v == F::zero()))
    }

    /// `self += scale * other`, entry-wise; keys missing in `self` are created.
    pub fn accumulate(&mut self, other: &GradMap<F>, scale: F) {
        for (k, g) in &other.entries {
            let slot = self
                .entries
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += scale * *b;
            }
        }
    }

    /// Largest relative difference over all entries, with a floor on the
    /// denominator.
    pub fn max_rel_diff(&self, other: &GradMap<F>, floor: f64) -> f64 {
        let mut worst = 0.0f64;
        for (k, a) in &self.entries {
            let zeros;
            let b = match other.entries.get(k) {
                Some(b) => b,
                None => {
                    zeros = Tensor::zeros(a.dims());
                    &zeros
                }
            };
            for (x, y) in a.data().iter().zip(b.data()) {
                let (x, y) = (x.f64(), y.f64());
                let d = (x - y).abs() / x.abs().max(y.abs()).max(floor);
                worst = worst.max(d);
            }
        }
        for (k, b) in &other.entries {
            if !self.entries.contains_key(k) && b.max_abs() != F::zero() {
                worst = worst.max(1.0);
            }
        }
        worst
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_dims() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn param_store_keeps_insertion_order() {
        let mut p = ParamStore::<f32>::new();
        for n in ["z", "a", "m"] {
            p.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        p.freeze("a");
        assert!(p.is_frozen("a") && !p.is_frozen("z"));
    }

    #[test]
    fn gradmap_accumulate_and_diff() {
        let mut a = GradMap::<f64>::new();
        let mut b = GradMap::<f64>::new();
        b.insert("w".into(), Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        a.accumulate(&b, 2.0);
        assert_eq!(a.get("w").unwrap().data(), &[2.0, 4.0]);
        assert!((a.max_rel_diff(&b, 1e-12) - 0.5).abs() < 1e-15);
    }
}
