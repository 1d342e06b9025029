use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
}

/// Every trainable array, in a fixed declared order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Xavier,
    Zeros,
    Ones,
}

impl ParamStore {
    pub(crate) fn push<R: Rng>(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> usize {
        let data = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            Init::Xavier => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect()
            }
        };
        self.blocks.push(ParamBlock {
            name,
            value: Matrix::from_vec(rows, cols, data),
        });
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.blocks
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.value)
    }

    /// Snap every value to the nearest f32 so checkpoints store it exactly.
    pub fn round_to_f32(&mut self) {
        for b in &mut self.blocks {
            b.value
                .data
                .iter_mut()
                .for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

/// One gradient array per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradientSet {
            blocks: store
                .blocks
                .iter()
                .map(|b| Matrix::zeros(b.value.rows, b.value.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().for_each(|b| b.scale(s));
    }

    /// Errors on the first block holding a non-finite entry.
    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (g, p) in self.blocks.iter().zip(&store.blocks) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .blocks
            .iter()
            .map(|b| vec![0.0; b.value.data.len()])
            .collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientSet) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (bi, block) in store.blocks.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[bi], &mut self.second[bi]);
            for (i, (p, g)) in block
                .value
                .data
                .iter_mut()
                .zip(&grads.blocks[bi].data)
                .enumerate()
            {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
