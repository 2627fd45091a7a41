//! Adam with sparse row updates.
//!
//! A single global step counter drives bias correction; first and second
//! moments are stored densely but only rows touched by a step's gradient
//! are read or written, so untouched embeddings stay bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kge::{EmbeddingModel, SparseGrads};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "adam epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m_entity: Vec<f64>,
    v_entity: Vec<f64>,
    m_relation: Vec<f64>,
    v_relation: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel, cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m_entity: vec![0.0; model.entity_data().len()],
            v_entity: vec![0.0; model.entity_data().len()],
            m_relation: vec![0.0; model.relation_data().len()],
            v_relation: vec![0.0; model.relation_data().len()],
        }
    }

    pub(crate) fn from_raw(
        cfg: AdamConfig,
        step: u64,
        m_entity: Vec<f64>,
        v_entity: Vec<f64>,
        m_relation: Vec<f64>,
        v_relation: Vec<f64>,
    ) -> Self {
        AdamState {
            cfg,
            step,
            m_entity,
            v_entity,
            m_relation,
            v_relation,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        (
            &self.m_entity,
            &self.v_entity,
            &self.m_relation,
            &self.v_relation,
        )
    }

    /// One optimization step: descends along the gradient, updating only
    /// the touched rows. Rows are processed in sorted id order so the
    /// update is independent of gradient map iteration order.
    pub fn apply(&mut self, model: &mut EmbeddingModel, grads: &SparseGrads, lr: f64) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.epsilon;
        let bc1 = 1.0 - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(self.step.min(i32::MAX as u64) as i32);
        let width = model.width();

        let update = |rows: &SparseGradsRows, params: &mut [f64], m: &mut [f64], v: &mut [f64]| {
            let mut ids: Vec<u32> = rows.keys().copied().collect();
            ids.sort_unstable();
            for id in ids {
                let g = &rows[&id];
                let base = id as usize * width;
                for (k, &gk) in g.iter().enumerate() {
                    let i = base + k;
                    m[i] = b1 * m[i] + (1.0 - b1) * gk;
                    v[i] = b2 * v[i] + (1.0 - b2) * gk * gk;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        };
        update(
            &grads.entity,
            model.entity_data_mut(),
            &mut self.m_entity,
            &mut self.v_entity,
        );
        update(
            &grads.relation,
            model.relation_data_mut(),
            &mut self.m_relation,
            &mut self.v_relation,
        );
    }
}

type SparseGradsRows = std::collections::HashMap<u32, Vec<f64>>;
