//! Named parameter sets and a plain Adam optimizer.

use super::{Tensor, TensorError};

/// Ordered collection of named trainable tensors. Order is declaration order
/// and is part of the on-disk contract for weight files and update vectors.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Flatten all parameter values in declaration order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data());
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamParams {
    pub fn with_lr(lr: f32) -> AdamParams {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct OptimizerState {
    pub hyper: AdamParams,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, hyper: AdamParams) -> OptimizerState {
        OptimizerState {
            hyper,
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter. Gradients must be populated and
    /// are cleared afterwards.
    pub fn adam_step(&mut self, params: &ParamSet) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.hyper.beta1 as f64;
        let b2 = self.hyper.beta2 as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.hyper.beta1 * m[j] + (1.0 - self.hyper.beta1) * g;
                v[j] = self.hyper.beta2 * v[j] + (1.0 - self.hyper.beta2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                data[j] -=
                    (self.hyper.lr as f64 * mhat / (vhat.sqrt() + self.hyper.eps as f64)) as f32;
            }
        }
        params.zero_grads();
        Ok(())
    }
}
