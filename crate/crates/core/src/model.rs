//! Agent encoder: a GRU over each window followed by a 20→5 projection.

use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, gru_backward, gru_forward, linear_backward, linear_forward, AdamConfig, AdamState,
    GruCache, GruParams, LinearCache, LinearParams, Mat, Parameters, RngStream,
};
use crate::{AgentId, EMBEDDING_DIM, HIDDEN_DIM};

/// Trainable weights of one encoder. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub gru: GruParams,
    pub proj: LinearParams,
}

impl EncoderParams {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            gru: GruParams::zeros(n_features, HIDDEN_DIM),
            proj: LinearParams::zeros(HIDDEN_DIM, EMBEDDING_DIM),
        }
    }

    pub fn init(n_features: usize, rng: &mut RngStream) -> Self {
        Self {
            gru: GruParams::init(n_features, HIDDEN_DIM, rng),
            proj: LinearParams::init(HIDDEN_DIM, EMBEDDING_DIM, rng),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

impl Parameters for EncoderParams {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut b = self.gru.blocks();
        b.extend(self.proj.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut b = self.gru.blocks_mut();
        b.extend(self.proj.blocks_mut());
        b
    }
}

/// One agent's private encoder together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub agent_id: AgentId,
    pub n_features: usize,
    pub params: EncoderParams,
    pub optimizer: AdamState,
}

impl AgentModel {
    pub fn new(agent_id: AgentId, n_features: usize, rng: &mut RngStream) -> Self {
        Self::from_params(agent_id, EncoderParams::init(n_features, rng))
    }

    pub fn from_params(agent_id: AgentId, params: EncoderParams) -> Self {
        let optimizer = AdamState::for_params(&params);
        Self {
            agent_id,
            n_features: params.gru.input_width(),
            params,
            optimizer,
        }
    }

    /// Embeds every window of `batch`. Each window starts from a zero hidden
    /// state and is summarised by its last hidden state.
    pub fn encode(&self, batch: &WindowBatch) -> Result<(EmbeddingBatch, EncodeCache)> {
        if batch.agent_id != self.agent_id {
            return Err(Error::Contract(format!(
                "agent {} asked to encode a batch of agent {}",
                self.agent_id, batch.agent_id
            )));
        }
        let h0 = vec![0.0; HIDDEN_DIM];
        let mut summaries = Mat::zeros(batch.len(), HIDDEN_DIM);
        let mut gru = Vec::with_capacity(batch.len());
        for (r, window) in batch.windows.iter().enumerate() {
            if window.cols() != self.n_features {
                return Err(Error::shape(
                    "window features",
                    format!("{} features for agent {}", self.n_features, self.agent_id),
                    format!("{} features", window.cols()),
                ));
            }
            let (states, cache) = gru_forward(window, &h0, &self.params.gru)?;
            summaries
                .row_mut(r)
                .copy_from_slice(states.row(states.rows() - 1));
            gru.push(cache);
        }
        let (embeddings, proj) = linear_forward(&summaries, &self.params.proj)?;
        Ok((
            EmbeddingBatch {
                agent_id: self.agent_id,
                embeddings,
                indices: batch.indices.clone(),
            },
            EncodeCache {
                agent_id: self.agent_id,
                gru,
                proj,
            },
        ))
    }

    /// Gradients of a scalar loss w.r.t. the encoder parameters, summed over
    /// the batch, given that loss's gradient w.r.t. the embeddings.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache,
        d_embeddings: &Mat,
    ) -> Result<EncoderParams> {
        if cache.agent_id != self.agent_id {
            return Err(Error::Contract(format!(
                "cache of agent {} used with agent {}",
                cache.agent_id, self.agent_id
            )));
        }
        if d_embeddings.shape() != (cache.gru.len(), EMBEDDING_DIM) {
            return Err(Error::shape(
                "embedding cotangent",
                format!("{}x{EMBEDDING_DIM}", cache.gru.len()),
                format!("{}x{}", d_embeddings.rows(), d_embeddings.cols()),
            ));
        }
        let (proj, d_summaries) = linear_backward(&self.params.proj, &cache.proj, d_embeddings)?;
        let mut grads = EncoderParams {
            gru: GruParams::zeros(self.n_features, HIDDEN_DIM),
            proj,
        };
        for (r, gc) in cache.gru.iter().enumerate() {
            let (g, _) = gru_backward(&self.params.gru, gc, d_summaries.row(r))?;
            for ((_, acc), (_, b)) in grads.gru.blocks_mut().into_iter().zip(g.blocks()) {
                acc.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        Ok(grads)
    }

    /// One Adam step over all parameter blocks.
    pub fn apply_update(&mut self, grads: &EncoderParams, adam: &AdamConfig) -> Result<()> {
        adam_step(&mut self.params, grads, &mut self.optimizer, adam)
    }
}

/// Consecutive windows of one agent's series, in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub agent_id: AgentId,
    /// Each window is `L × k`: one row per time step.
    pub windows: Vec<Mat>,
    /// Logical position `t` of the last step of each window.
    pub indices: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Embeddings of a [`WindowBatch`], one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub agent_id: AgentId,
    pub embeddings: Mat,
    pub indices: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    agent_id: AgentId,
    gru: Vec<GruCache>,
    proj: LinearCache,
}
