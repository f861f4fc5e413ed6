use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Mat,
    grad: Mat,
    m: Mat,
    v: Mat,
}

/// Named trainable arrays with gradient slots and Adam moments.
///
/// Values are kept at single precision (every stored value is exactly
/// representable as `f32`) while all arithmetic runs in `f64`. That keeps
/// checkpoints bit-exact without giving up double precision gradients.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
}

pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter `{name}`");
        let shape = value.raw_dim();
        self.slots.push(Slot {
            name,
            value: value.mapv(round_f32),
            grad: Mat::zeros(shape),
            m: Mat::zeros(shape),
            v: Mat::zeros(shape),
        });
        ParamId(self.slots.len() - 1)
    }

    /// Uniform in ±1/√fan_in.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.slots[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Mat) {
        self.slots[id.0].grad += g;
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    pub(crate) fn moments_mut(&mut self, id: ParamId) -> (&mut Mat, &mut Mat, &mut Mat, &Mat) {
        let s = &mut self.slots[id.0];
        (&mut s.value, &mut s.m, &mut s.v, &s.grad)
    }

    /// Replaces all values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        if other.slots.len() != self.slots.len() {
            return Err(Error::Checkpoint("parameter count differs".into()));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
            a.value.assign(&b.value);
        }
        Ok(())
    }

    /// Snapshot of the values alone (gradients and moments zeroed).
    pub fn values_snapshot(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for s in &self.slots {
            out.add(s.name.clone(), s.value.clone());
        }
        out
    }

    pub fn reset_moments(&mut self) {
        for s in &mut self.slots {
            s.m.fill(0.0);
            s.v.fill(0.0);
        }
    }
}
