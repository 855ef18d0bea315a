//! The localization network: query embedding, cross-modal encoder, query-guided
//! highlighting and the span predictor.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod spans;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::rng::Rng;
use layers::{sinusoidal_positions, Conv1d, Ctx, EncoderBlock, Linear, Mlp};
pub use params::{ParamId, Parameters};
pub use spans::propose_spans;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("token id {token} outside vocabulary of size {vocab}")]
    OutOfVocabulary { token: u32, vocab: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub query_embed_dim: usize,
    /// Longest proposed span in clips; `None` means `ceil(0.25 · L)`.
    pub max_span_length: Option<usize>,
    pub qgh_kernel: usize,
    /// Width of the local convolution in each encoder block; 0 disables it.
    pub conv_kernel: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 128,
            encoder_layers: 2,
            attention_heads: 4,
            dropout: 0.1,
            query_embed_dim: 32,
            max_span_length: None,
            qgh_kernel: 1,
            conv_kernel: 5,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden_size == 0 || self.attention_heads == 0 || self.hidden_size % self.attention_heads != 0 {
            return bad("hidden_size must be a positive multiple of attention_heads");
        }
        if self.query_embed_dim == 0 {
            return bad("query_embed_dim must be positive");
        }
        if self.qgh_kernel == 0 {
            return bad("qgh_kernel must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.max_span_length == Some(0) {
            return bad("max_span_length must be positive");
        }
        Ok(())
    }

    pub fn span_limit(&self, clips: usize) -> usize {
        self.max_span_length
            .unwrap_or_else(|| (clips as f64 * 0.25).ceil() as usize)
            .max(1)
    }
}

/// Data-dependent input sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub cheap_width: usize,
    pub expensive_width: usize,
    pub clips: usize,
}

impl ModelDims {
    pub fn visual_width(&self) -> usize {
        self.cheap_width + self.expensive_width
    }
}

/// Head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LocalizerOutputs {
    /// `L×1`, in (0, 1).
    pub highlight: Var,
    /// `1×L` log-probabilities.
    pub start_logp: Var,
    /// `1×L` log-probabilities.
    pub end_logp: Var,
}

/// Plain copies of head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerValues {
    pub highlight: Vec<f64>,
    pub start_logp: Vec<f64>,
    pub end_logp: Vec<f64>,
}

impl LocalizerValues {
    pub fn read(tape: &Tape, out: &LocalizerOutputs) -> Self {
        Self {
            highlight: tape.value(out.highlight).iter().copied().collect(),
            start_logp: tape.value(out.start_logp).iter().copied().collect(),
            end_logp: tape.value(out.end_logp).iter().copied().collect(),
        }
    }

    pub fn highlight_column(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.highlight.len(), 1), self.highlight.clone()).expect("column")
    }

    pub fn start_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.start_logp.len()), self.start_logp.clone()).expect("row")
    }

    pub fn end_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.end_logp.len()), self.end_logp.clone()).expect("row")
    }
}

/// Bidirectional context-query attention fused by a linear projection.
#[derive(Clone, Debug)]
pub struct ContextQueryAttention {
    pub w_context: ParamId,
    pub w_query: ParamId,
    pub w_product: ParamId,
    pub proj: Linear,
}

impl ContextQueryAttention {
    fn new(params: &mut Parameters, dim: usize, rng: &mut Rng) -> Self {
        Self {
            w_context: params.add_scaled_normal("cqa.w_context", dim, 1, rng),
            w_query: params.add_scaled_normal("cqa.w_query", dim, 1, rng),
            w_product: params.add_scaled_normal("cqa.w_product", 1, dim, rng),
            proj: Linear::new(params, "cqa.proj", 4 * dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, context: Var, query: Var) -> Var {
        let wc = tape.param(self.w_context, params.value(self.w_context));
        let wq = tape.param(self.w_query, params.value(self.w_query));
        let wp = tape.param(self.w_product, params.value(self.w_product));
        let s_ctx = tape.matmul(context, wc);
        let s_q = tape.matmul(query, wq);
        let s_q = tape.transpose(s_q);
        let cw = tape.mul(context, wp);
        let s_prod = tape.matmul_t(cw, query);
        let sim = tape.add(s_prod, s_ctx);
        let sim = tape.add(sim, s_q);

        // context-to-query
        let row_attn = tape.softmax_rows(sim);
        let c2q = tape.matmul(row_attn, query);
        // query-to-context
        let best = tape.row_max(sim);
        let best = tape.transpose(best);
        let weights = tape.softmax_rows(best);
        let q2c = tape.matmul(weights, context);

        let c_c2q = tape.mul(context, c2q);
        let c_q2c = tape.mul(context, q2c);
        let fused = tape.concat_cols(&[context, c2q, c_c2q, c_q2c]);
        self.proj.forward(tape, params, fused)
    }
}

/// The full localization network plus its parameter handles.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub embedding: ParamId,
    pub visual_proj: Linear,
    pub query_proj: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub cqa: ContextQueryAttention,
    pub highlight: Conv1d,
    pub span_block: EncoderBlock,
    pub start_head: Mlp,
    pub end_head: Mlp,
}

impl Localizer {
    /// Registers all localizer weights in `params`.
    pub fn new(config: &ModelConfig, dims: ModelDims, params: &mut Parameters, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_size;
        let embedding = params.add_scaled_normal("query.embedding", dims.vocab_size, config.query_embed_dim, rng);
        // unit-variance rows rather than 1/vocab scaling
        let scale = (dims.vocab_size as f64).sqrt();
        params.value_mut(embedding).mapv_inplace(|v| v * scale);
        Ok(Self {
            config: config.clone(),
            dims,
            embedding,
            visual_proj: Linear::new(params, "enc.visual_proj", dims.visual_width(), d, rng),
            query_proj: Linear::new(params, "enc.query_proj", config.query_embed_dim, d, rng),
            encoder: (0..config.encoder_layers)
                .map(|i| {
                    EncoderBlock::new(
                        params,
                        &format!("enc.block{i}"),
                        d,
                        config.attention_heads,
                        config.conv_kernel,
                        rng,
                    )
                })
                .collect(),
            cqa: ContextQueryAttention::new(params, d, rng),
            highlight: Conv1d::new(params, "qgh.conv", d, 1, config.qgh_kernel, rng),
            span_block: EncoderBlock::new(params, "span.block", d, config.attention_heads, 0, rng),
            start_head: Mlp::new(params, "span.start", d, d, 1, rng),
            end_head: Mlp::new(params, "span.end", d, d, 1, rng),
        })
    }

    /// `T × D_q` query features; row `t` is the embedding of token `t`.
    pub fn encode_query(&self, tape: &mut Tape, params: &Parameters, tokens: &[u32]) -> Result<Var, ModelError> {
        let vocab = self.dims.vocab_size;
        let mut onehot = Array2::zeros((tokens.len(), vocab));
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= vocab {
                return Err(ModelError::OutOfVocabulary { token: tok, vocab });
            }
            onehot[[t, tok as usize]] = 1.0;
        }
        let table = tape.param(self.embedding, params.value(self.embedding));
        let oh = tape.constant(onehot);
        Ok(tape.matmul(oh, table))
    }

    fn add_positions(&self, tape: &mut Tape, x: Var) -> Var {
        if !self.config.positional_encoding {
            return x;
        }
        let (rows, dim) = tape.shape(x);
        tape.add_const(x, sinusoidal_positions(rows, dim))
    }

    /// `L × D_h` cross-modal features for `visual` (`L × (D_s + D_v)`) and query `q`.
    pub fn cross_modal_encode(
        &self,
        tape: &mut Tape,
        params: &Parameters,
        visual: Var,
        query: Var,
        ctx: &mut Ctx,
    ) -> Result<Var, ModelError> {
        let (_, vw) = tape.shape(visual);
        if vw != self.dims.visual_width() {
            return Err(ModelError::DimensionMismatch(format!(
                "visual width {vw} but model expects {}",
                self.dims.visual_width()
            )));
        }
        let (_, qw) = tape.shape(query);
        if qw != self.config.query_embed_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "query width {qw} but model expects {}",
                self.config.query_embed_dim
            )));
        }
        let mut v = self.visual_proj.forward(tape, params, visual);
        v = self.add_positions(tape, v);
        let mut q = self.query_proj.forward(tape, params, query);
        q = self.add_positions(tape, q);
        for block in &self.encoder {
            v = block.forward(tape, params, v, ctx);
            q = block.forward(tape, params, q, ctx);
        }
        Ok(self.cqa.forward(tape, params, v, q))
    }

    /// Highlight probabilities `Ŝ_h` (`L×1`).
    pub fn qgh_scores(&self, tape: &mut Tape, params: &Parameters, features: Var) -> Var {
        let logits = self.highlight.forward(tape, params, features);
        tape.sigmoid(logits)
    }

    /// Rows of `features` scaled by the matching highlight score.
    pub fn reweight(tape: &mut Tape, features: Var, highlight: Var) -> Var {
        tape.mul(features, highlight)
    }

    /// Start and end log-probabilities over clip positions.
    pub fn span_predict(&self, tape: &mut Tape, params: &Parameters, weighted: Var, ctx: &mut Ctx) -> (Var, Var) {
        let x = self.add_positions(tape, weighted);
        let h = self.span_block.forward(tape, params, x, ctx);
        let s = self.start_head.forward(tape, params, h);
        let e = self.end_head.forward(tape, params, h);
        let s = tape.transpose(s);
        let e = tape.transpose(e);
        (tape.log_softmax_rows(s), tape.log_softmax_rows(e))
    }

    /// Highlighting and span prediction on top of encoded features.
    pub fn localize(&self, tape: &mut Tape, params: &Parameters, features: Var, ctx: &mut Ctx) -> LocalizerOutputs {
        let highlight = self.qgh_scores(tape, params, features);
        let weighted = Self::reweight(tape, features, highlight);
        let (start_logp, end_logp) = self.span_predict(tape, params, weighted, ctx);
        LocalizerOutputs {
            highlight,
            start_logp,
            end_logp,
        }
    }
}

/// `s ⊕ v` as an `L × (D_s + D_v)` tape constant.
pub fn concat_features(cheap: &Array2<f32>, expensive: &Array2<f64>) -> Array2<f64> {
    let c = cheap.mapv(f64::from);
    ndarray::concatenate(ndarray::Axis(1), &[c.view(), expensive.view()]).expect("row counts match")
}

#[cfg(test)]
mod tests;
