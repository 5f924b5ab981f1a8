use super::Matrix;
use crate::error::{invalid, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered registry of named trainable matrices.
///
/// Declaration order is the serialization order of checkpoints and the
/// order in which gradients are reported.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value of `id`; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Copies every parameter of `other` whose name and shape match.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, value) in other.iter() {
            if let Some(id) = self.id_of(name) {
                if self.values[id.0].shape() == value.shape() {
                    self.values[id.0] = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Largest absolute entry-wise difference against a store with the same layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Uniform(−a, a) with `a = √(6 / (rows + cols))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut super::Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    Matrix::from_raw(rows, cols, data)
}

/// Seeded initializer whose draws depend only on the seed and the
/// parameter name, not on registration order.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn glorot(&self, name: &str, rows: usize, cols: usize) -> Matrix {
        glorot_uniform(rows, cols, &mut super::Rng::derive(self.seed, name))
    }
}
