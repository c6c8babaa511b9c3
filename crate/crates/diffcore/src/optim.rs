//! Named parameter storage and the Adam optimizer.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Ordered collection of learnable tensors with gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

/// Tape handles for every parameter of a [`ParamSet`], in insertion order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Places every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), requires_grad))
            .collect();
        Bound { vars }
    }

    /// Adds the leaf gradients held by `tape` into the gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (entry, var) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(*var) {
                entry
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }
}

/// Rescales the gradients of all sets so that their joint L2 norm is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(sets: &mut [&mut ParamSet], max_norm: f64) -> f64 {
    let norm = sets.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for s in sets.iter_mut() {
            s.scale_grads(f);
        }
    }
    norm
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let slots = params
            .entries
            .iter()
            .map(|e| AdamSlot {
                m: vec![0.0; e.value.len()],
                v: vec![0.0; e.value.len()],
                step: 0,
            })
            .collect();
        Self { config, slots }
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        adam_step(params, &mut self.slots, self.config)
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients.
pub fn adam_step(params: &mut ParamSet, state: &mut [AdamSlot], cfg: AdamConfig) -> Result<()> {
    if state.len() < params.len() {
        return Err(DiffError::MissingState(state.len()));
    }
    for (i, (entry, slot)) in params.entries.iter_mut().zip(state.iter_mut()).enumerate() {
        if slot.m.len() != entry.value.len() {
            return Err(DiffError::MissingState(i));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let values = entry.value.data_mut();
        for (j, g) in entry.grad.data().iter().enumerate() {
            slot.m[j] = cfg.beta1 * slot.m[j] + (1.0 - cfg.beta1) * g;
            slot.v[j] = cfg.beta2 * slot.v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = slot.m[j] / bc1;
            let v_hat = slot.v[j] / bc2;
            values[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    params.zero_grad();
    Ok(())
}
