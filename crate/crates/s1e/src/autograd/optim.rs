//! Named parameter storage and first-order optimizers.
//!
//! Parameters live in a [`ParamSet`] in registration order; that order is
//! also the checkpoint serialization order, which keeps checkpoints
//! byte-identical across runs of the same configuration.

use std::collections::HashMap;

use super::graph::GradMap;
use super::tensor::{Result, Tensor, TensorError};

/// Handle to one named parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry {
    name: String,
    tensor: Tensor,
    frozen: bool,
}

/// Ordered collection of named, trainable tensors.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            frozen: false,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Replace the value of a parameter, preserving shape.
    pub fn set_value(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        entry.tensor = entry.tensor.with_data(data, true)?;
        Ok(())
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Plain gradient descent: `p <- p - lr * g` for every non-frozen parameter.
///
/// Every non-frozen parameter must have a gradient in `grads`; frozen ones
/// are skipped whether or not a gradient is present.
pub fn sgd_step(params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
    assert!(lr >= 0.0, "learning rate must be non-negative");
    for i in 0..params.entries.len() {
        if params.entries[i].frozen {
            continue;
        }
        let g = match grads.get(&params.entries[i].tensor) {
            Some(g) => g,
            None => {
                return Err(TensorError::MissingGrad {
                    name: params.entries[i].name.clone(),
                })
            }
        };
        let updated: Vec<f64> = params.entries[i]
            .tensor
            .data()
            .iter()
            .zip(g)
            .map(|(p, gv)| p - lr * gv)
            .collect();
        params.set_value(ParamId(i), updated)?;
    }
    Ok(())
}

/// Learning-rate schedule over a fixed step budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optimizer kinds behind the shared step interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Stateful optimizer used by the training loop. Parameters absent from a
/// step's gradient map (for example the mask-head MLPs on a text-only batch)
/// are treated as having zero gradient rather than erroring, so mixed
/// VQA/segmentation batches optimize cleanly.
pub struct Optimizer {
    kind: OptimKind,
    base_lr: f64,
    schedule: Schedule,
    total_steps: usize,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, base_lr: f64, schedule: Schedule, total_steps: usize) -> Optimizer {
        Optimizer {
            kind,
            base_lr,
            schedule,
            total_steps,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.base_lr, self.step, self.total_steps)
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        let lr = self.current_lr();
        if self.m.is_empty() {
            for id in params.ids() {
                self.m.push(vec![0.0; params.get(id).numel()]);
                self.v.push(vec![0.0; params.get(id).numel()]);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let zero_len = params.len();
        for (i, id) in (0..zero_len).map(ParamId).enumerate() {
            if params.is_frozen(id) {
                continue;
            }
            let cur = params.get(id).clone();
            let own_zero;
            let g: &[f64] = match grads.get(&cur) {
                Some(g) => g,
                None => {
                    own_zero = vec![0.0; cur.numel()];
                    &own_zero
                }
            };
            let updated: Vec<f64> = match self.kind {
                OptimKind::Sgd => cur.data().iter().zip(g).map(|(p, gv)| p - lr * gv).collect(),
                OptimKind::Adam => {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    let b1 = self.beta1;
                    let b2 = self.beta2;
                    let bc1 = 1.0 - b1.powf(t);
                    let bc2 = 1.0 - b2.powf(t);
                    cur.data()
                        .iter()
                        .enumerate()
                        .map(|(j, p)| {
                            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                            let mhat = m[j] / bc1;
                            let vhat = v[j] / bc2;
                            p - lr * mhat / (vhat.sqrt() + self.eps)
                        })
                        .collect()
                }
            };
            params.set_value(id, updated)?;
        }
        Ok(())
    }
}
