//! Dual encoder mapping image features and prompt tokens into a shared
//! unit-norm embedding space, with the tape autodiff and optimizer it trains
//! with.

pub mod graph;
pub mod optim;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{LossError, LossKind, ShardPlan};
pub use graph::{temperature_from_log, Gradients, Graph, Var, TEMPERATURE_MAX, TEMPERATURE_MIN};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("token id {id} outside a table of {rows} rows")]
    TokenIdOutOfRange { id: usize, rows: usize },
    #[error("empty token list")]
    EmptyTokenList,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub d_tok: usize,
    pub vocab_size: usize,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 12,
            hidden: 64,
            d_emb: 32,
            d_tok: 32,
            vocab_size: crate::prompt::DEFAULT_VOCAB_SIZE,
            init_temperature: 0.07,
        }
    }
}

/// Parameter slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    ImageW1,
    ImageB1,
    ImageW2,
    ImageB2,
    TokenTable,
    TextW1,
    TextB1,
    TextW2,
    TextB2,
    LogTemperature,
}

impl Param {
    pub const ALL: [Param; 10] = [
        Param::ImageW1,
        Param::ImageB1,
        Param::ImageW2,
        Param::ImageB2,
        Param::TokenTable,
        Param::TextW1,
        Param::TextB1,
        Param::TextW2,
        Param::TextB2,
        Param::LogTemperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::ImageW1 => "image_w1",
            Param::ImageB1 => "image_b1",
            Param::ImageW2 => "image_w2",
            Param::ImageB2 => "image_b2",
            Param::TokenTable => "token_table",
            Param::TextW1 => "text_w1",
            Param::TextB1 => "text_b1",
            Param::TextW2 => "text_w2",
            Param::TextB2 => "text_b2",
            Param::LogTemperature => "log_temperature",
        }
    }

    /// Weight decay applies to weight matrices and the token table only.
    pub fn decays(self) -> bool {
        matches!(
            self,
            Param::ImageW1 | Param::ImageW2 | Param::TokenTable | Param::TextW1 | Param::TextW2
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub config: ModelConfig,
    /// Indexed by `Param as usize`.
    pub params: Vec<Tensor>,
}

/// Graph handles for every parameter after [`DualEncoder::bind`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, p: Param) -> Var {
        self.0[p as usize]
    }
}

impl DualEncoder {
    /// Weights drawn from N(0, 1/fan_in), biases zero, token table N(0, 1),
    /// temperature at `config.init_temperature`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor::matrix(rows, cols, data).expect("consistent shape")
        };
        let (d_in, h, d_emb, d_tok) = (config.d_in, config.hidden, config.d_emb, config.d_tok);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let params = vec![
            gaussian(d_in, h, fan(d_in)),
            Tensor::zeros(&[1, h]),
            gaussian(h, d_emb, fan(h)),
            Tensor::zeros(&[1, d_emb]),
            // last row is the null token used for empty prompts
            gaussian(config.vocab_size + 1, d_tok, 1.0),
            gaussian(d_tok, h, fan(d_tok)),
            Tensor::zeros(&[1, h]),
            gaussian(h, d_emb, fan(h)),
            Tensor::zeros(&[1, d_emb]),
            Tensor::scalar(config.init_temperature.ln()),
        ];
        DualEncoder { config, params }
    }

    pub fn param(&self, p: Param) -> &Tensor {
        &self.params[p as usize]
    }

    pub fn param_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.params[p as usize]
    }

    pub fn temperature(&self) -> f64 {
        temperature_from_log(self.param(Param::LogTemperature).data[0])
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        Param::ALL.iter().map(|p| p.decays()).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|t| g.leaf(t.clone())).collect())
    }

    pub fn image_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: &Tensor,
    ) -> Result<Var, ModelError> {
        if features.cols() != self.config.d_in || features.shape.len() != 2 {
            return Err(ModelError::ShapeMismatch {
                expected: vec![features.rows(), self.config.d_in],
                found: features.shape.clone(),
            });
        }
        let x = g.leaf(features.clone());
        let h = g.matmul(x, b.var(Param::ImageW1))?;
        let h = g.add_bias(h, b.var(Param::ImageB1))?;
        let h = g.silu(h);
        let o = g.matmul(h, b.var(Param::ImageW2))?;
        let o = g.add_bias(o, b.var(Param::ImageB2))?;
        Ok(g.normalize_rows(o))
    }

    pub fn text_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        token_lists: &[Vec<u32>],
    ) -> Result<Var, ModelError> {
        let v = self.config.vocab_size;
        let mut lists = Vec::with_capacity(token_lists.len());
        for list in token_lists {
            if let Some(&bad) = list.iter().find(|&&t| t as usize >= v) {
                return Err(ModelError::TokenIdOutOfRange {
                    id: bad as usize,
                    rows: v,
                });
            }
            lists.push(if list.is_empty() {
                vec![v]
            } else {
                list.iter().map(|&t| t as usize).collect()
            });
        }
        let pooled = g.mean_pool(b.var(Param::TokenTable), lists)?;
        let h = g.matmul(pooled, b.var(Param::TextW1))?;
        let h = g.add_bias(h, b.var(Param::TextB1))?;
        let h = g.silu(h);
        let o = g.matmul(h, b.var(Param::TextW2))?;
        let o = g.add_bias(o, b.var(Param::TextB2))?;
        Ok(g.normalize_rows(o))
    }

    pub fn encode_images(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let out = self.image_forward(&mut g, &b, features)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_texts(&self, token_lists: &[Vec<u32>]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let out = self.text_forward(&mut g, &b, token_lists)?;
        Ok(g.value(out).clone())
    }

    /// Contrastive loss of a paired batch and its gradient for every
    /// parameter, in storage order.
    pub fn loss_and_gradients(
        &self,
        features: &Tensor,
        token_lists: &[Vec<u32>],
        labels: &[usize],
        kind: LossKind,
        plan: &ShardPlan,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let img = self.image_forward(&mut g, &b, features)?;
        let txt = self.text_forward(&mut g, &b, token_lists)?;
        let loss = g.contrastive(img, txt, b.var(Param::LogTemperature), labels, kind, plan)?;
        let grads = g.backward(loss)?;
        let out = Param::ALL
            .iter()
            .map(|&p| grads.get_or_zeros(b.var(p), self.param(p)))
            .collect();
        Ok((g.value(loss).data[0], out))
    }
}
