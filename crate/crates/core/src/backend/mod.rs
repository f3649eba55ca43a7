//! Frozen toy text backbone, its adapters, and the visual feature store.
//!
//! The backbone is a small transformer whose weights are a pure function of
//! `EncoderConfig::seed`. It runs in one of two modes:
//!
//! * **encoder**: bidirectional attention over `[CLS] w_1 … w_m`; the context
//!   vector is the final `[CLS]` state and token probabilities come from
//!   masking one position at a time.
//! * **decoder**: causal attention over `BOS w_1 … w_m`; the context vector is
//!   the final state of the last token and the state at input index `t`
//!   predicts `w_{t+1}`.
//!
//! Adapters are added in parallel to every feed-forward sublayer with a
//! `tanh` bottleneck.

mod adapter;
mod features;
mod model;
mod tokenizer;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use adapter::{
    AdapterInit, AdapterLayer, AdapterParams, AdapterRoute, AdapterSection, AdapterShape, BottleneckAdapter,
    CKPT_MAGIC,
};
pub use features::{visual_features, FeatureProvider};
pub use tokenizer::{TokenSequence, Tokenizer, CLS, MASK, NUM_SPECIAL, PAD, UNK};

pub(crate) use model::Trace;

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, Mat};
use crate::rng;
use model::FrozenWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub mode: Mode,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Maximum number of text tokens (the start token is extra).
    pub max_len: usize,
    pub seed: u64,
    pub reduction: usize,
    pub visual_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: Mode::Encoder,
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            vocab_size: 256,
            max_len: 64,
            seed: 0,
            reduction: 16,
            visual_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.hidden_dim == 0 || self.heads == 0 {
            return bad("layers, hidden_dim and heads must be positive".into());
        }
        if self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            return bad(format!("vocab_size must exceed {NUM_SPECIAL}"));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        self.adapter_shape().map(|_| ())
    }

    pub fn adapter_shape(&self) -> Result<AdapterShape> {
        AdapterShape::new(self.layers, self.hidden_dim, self.reduction, self.visual_dim)
    }
}

/// Final hidden states for `[start] w_1 … w_m` and the context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Mat,
    pub context: Vec<f64>,
}

pub struct Backbone {
    config: EncoderConfig,
    shape: AdapterShape,
    tokenizer: Tokenizer,
    frozen: FrozenWeights,
    forward_calls: AtomicUsize,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Backbone {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(config.seed, 0xF0_2E);
        let frozen = FrozenWeights::random(
            config.layers,
            config.hidden_dim,
            config.heads,
            config.vocab_size,
            config.max_len + 1,
            config.mode == Mode::Decoder,
            &mut r,
        );
        Ok(Backbone {
            shape: config.adapter_shape()?,
            tokenizer: Tokenizer::new(config.vocab_size),
            frozen,
            config,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn adapter_shape(&self) -> AdapterShape {
        self.shape
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Tokenizes and checks the length limit.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let t = self.tokenizer.encode(text);
        self.check_len(&t)?;
        Ok(t)
    }

    /// Fresh adapters for this backbone: zero up-projections.
    pub fn init_adapters(&self, seed: u64) -> AdapterParams {
        AdapterParams::init(self.shape, AdapterInit::for_shape(&self.shape), seed)
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// SHA-256 of every frozen weight.
    pub fn frozen_fingerprint(&self) -> String {
        self.frozen.fingerprint()
    }

    fn check_len(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::LengthOverflow { len: tokens.len(), max: self.config.max_len });
        }
        Ok(())
    }

    pub(crate) fn input_ids(&self, tokens: &TokenSequence, mask_at: Option<usize>) -> Vec<u32> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(tokens.as_slice());
        if let Some(p) = mask_at {
            ids[p + 1] = MASK;
        }
        ids
    }

    /// Index of the context vector within the final hidden states.
    pub(crate) fn context_index(&self, num_tokens: usize) -> usize {
        match self.config.mode {
            Mode::Encoder => 0,
            Mode::Decoder => num_tokens,
        }
    }

    /// Input row whose output predicts text token `position`.
    pub(crate) fn prediction_row(&self, position: usize) -> usize {
        match self.config.mode {
            Mode::Encoder => position + 1,
            Mode::Decoder => position,
        }
    }

    pub(crate) fn trace(&self, ids: &[u32], route: AdapterRoute, params: &AdapterParams) -> Trace {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.frozen.forward(ids, params.adapter(route))
    }

    pub(crate) fn backward(
        &self,
        trace: &Trace,
        d_out: &Mat,
        route: AdapterRoute,
        params: &AdapterParams,
        grad: &mut AdapterParams,
    ) {
        if let (Some(a), Some(g)) = (params.adapter(route), grad.adapter_mut(route)) {
            self.frozen.backward(trace, d_out, a, g);
        }
    }

    pub(crate) fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.frozen.logits(hidden)
    }

    pub(crate) fn logits_backward(&self, d_logits: &[f64]) -> Vec<f64> {
        self.frozen.logits_backward(d_logits)
    }

    pub fn encode(&self, tokens: &TokenSequence, route: AdapterRoute, params: &AdapterParams) -> Result<HiddenStates> {
        self.check_len(tokens)?;
        params.check_shape(&self.shape)?;
        let trace = self.trace(&self.input_ids(tokens, None), route, params);
        let context = trace.out.row(self.context_index(tokens.len())).to_vec();
        Ok(HiddenStates { states: trace.out, context })
    }

    /// Log-distribution over the vocabulary for the token at `position`.
    ///
    /// Encoder mode replaces that token with `[MASK]`; decoder mode reads the
    /// causal state just before it.
    pub fn token_log_probs(
        &self,
        tokens: &TokenSequence,
        position: usize,
        route: AdapterRoute,
        params: &AdapterParams,
    ) -> Result<Vec<f64>> {
        self.check_len(tokens)?;
        params.check_shape(&self.shape)?;
        if position >= tokens.len() {
            return Err(Error::PositionOutOfRange { position, len: tokens.len() });
        }
        let mask = (self.config.mode == Mode::Encoder).then_some(position);
        let trace = self.trace(&self.input_ids(tokens, mask), route, params);
        Ok(log_softmax(&self.logits(trace.out.row(self.prediction_row(position)))))
    }
}
