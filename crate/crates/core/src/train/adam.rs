use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Adam moments and step count, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Adam without weight decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<(String, Var)>,
    state: AdamState,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let mut state = AdamState::default();
        for (name, var) in &params {
            state.m.insert(name.clone(), var.zeros_like()?);
            state.v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            params,
            state,
        })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Restores moments for every tracked parameter found in `state`.
    pub fn load_state(&mut self, state: &AdamState) -> Result<()> {
        self.state.step = state.step;
        for (name, _) in &self.params {
            if let (Some(m), Some(v)) = (state.m.get(name), state.v.get(name)) {
                self.state.m.insert(name.clone(), m.clone());
                self.state.v.insert(name.clone(), v.clone());
            }
        }
        Ok(())
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self.state.m.get(name).expect("moment exists");
            let v = self.state.v.get(name).expect("moment exists");
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.state.m.insert(name.clone(), m);
            self.state.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
