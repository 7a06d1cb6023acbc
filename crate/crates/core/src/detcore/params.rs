use ndarray::{Array1, ArrayView2};
use sha2::{Digest, Sha256};

use crate::Real;

/// Flat parameter storage with hierarchical names and logical shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Array1<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Array1<F>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name.into());
        self.shapes.push(shape);
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn value(&self, id: usize) -> &Array1<F> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array1<F> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Array1<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array1<F>] {
        &mut self.values
    }

    pub fn slice(&self, id: usize) -> &[F] {
        self.values[id].as_slice().expect("contiguous parameter")
    }

    /// Parameter viewed as `[shape[0], rest]`, the layout of convolution weights.
    pub fn matrix(&self, id: usize) -> ArrayView2<'_, F> {
        let rows = self.shapes[id][0];
        let cols = self.values[id].len() / rows;
        ArrayView2::from_shape((rows, cols), self.slice(id)).expect("parameter shape")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Array1<F>> {
        self.values.iter().map(|v| Array1::zeros(v.len())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names and raw little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            hasher.update(name.as_bytes());
            hasher.update(F::to_le_bytes_vec(v.as_slice().expect("contiguous parameter")));
        }
        hex::encode(hasher.finalize())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::lit(x.as_f64()))).collect(),
        }
    }
}
