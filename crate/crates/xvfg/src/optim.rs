//! Named parameter storage, per-iteration tape sessions, and the
//! adaptive-moment optimizer.

use indexmap::IndexMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map of named parameter tensors. Insertion order is the canonical
/// order for optimizer sweeps and checkpoint layout, so runs are
/// reproducible.
#[derive(Default, Clone)]
pub struct ParamBank {
    entries: IndexMap<String, Tensor>,
}

impl ParamBank {
    pub fn new() -> Self {
        ParamBank::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(slot.shape(), tensor.shape(), "parameter {name:?} shape change");
        *slot = tensor;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count_elements(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// One forward/backward pass over a fresh tape.
///
/// Parameters enter the tape lazily through [`Session::param`]; the first
/// touch snapshots the bank value as a differentiable leaf and every later
/// touch returns the same tape node, so weights shared between pipeline
/// stages accumulate gradients through one node.
#[derive(Default)]
pub struct Session {
    pub tape: Tape,
    touched: HashMap<String, Var>,
    touch_order: Vec<String>,
}

impl Session {
    pub fn new() -> Self {
        Session::default()
    }

    pub fn param(&mut self, bank: &ParamBank, name: &str) -> Var {
        if let Some(v) = self.touched.get(name) {
            return v.clone();
        }
        let var = self.tape.leaf(bank.get(name).clone());
        self.touched.insert(name.to_string(), var.clone());
        self.touch_order.push(name.to_string());
        var
    }

    /// The tape leaf a parameter got this session, if it was touched.
    pub fn touched(&self, name: &str) -> Option<&Var> {
        self.touched.get(name)
    }
}

/// Adaptive-moment estimation over an explicit list of parameter names.
/// The list fixes the update order; moments live here, keyed by position.
pub struct Adam {
    names: Vec<String>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(names: Vec<String>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = names.len();
        Adam {
            names,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![None; n],
            v: vec![None; n],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance one step. Parameters with no gradient this session decay
    /// their moments against a zero gradient and stay put when moments are
    /// zero; the step count advances regardless.
    pub fn step(&mut self, bank: &mut ParamBank, session: &Session, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, name) in self.names.iter().enumerate() {
            let param = bank.get(name).clone();
            let grad = session
                .touched(name)
                .and_then(|var| grads.of(var))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(param.shape()));
            assert_eq!(
                grad.shape(),
                param.shape(),
                "gradient shape mismatch for {name:?}"
            );
            let m_prev = self.m[i].take().unwrap_or_else(|| Tensor::zeros(param.shape()));
            let v_prev = self.v[i].take().unwrap_or_else(|| Tensor::zeros(param.shape()));
            let m = m_prev.zip_map(&grad, |m, g| self.beta1 * m + (1.0 - self.beta1) * g);
            let v = v_prev.zip_map(&grad, |v, g| self.beta2 * v + (1.0 - self.beta2) * g * g);
            let mut out = Vec::with_capacity(param.numel());
            for ((&p, &mi), &vi) in param
                .data()
                .iter()
                .zip(m.data().iter())
                .zip(v.data().iter())
            {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                out.push(p - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            bank.set(name, Tensor::new(param.shape(), out));
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
    }
}

/// One bias-corrected adaptive-moment update on a single tensor; the
/// building block [`Adam::step`] applies per parameter.
pub fn adam_update(
    param: &Tensor,
    grad: &Tensor,
    m: &Tensor,
    v: &Tensor,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let m_new = m.zip_map(grad, |m, g| beta1 * m + (1.0 - beta1) * g);
    let v_new = v.zip_map(grad, |v, g| beta2 * v + (1.0 - beta2) * g * g);
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    let mut out = Vec::with_capacity(param.numel());
    for ((&p, &mi), &vi) in param
        .data()
        .iter()
        .zip(m_new.data().iter())
        .zip(v_new.data().iter())
    {
        out.push(p - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps));
    }
    (Tensor::new(param.shape(), out), m_new, v_new)
}
