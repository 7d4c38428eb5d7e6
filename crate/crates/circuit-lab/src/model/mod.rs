//! A small pre-norm decoder-only transformer over the autodiff graph.
//!
//! Architecture, per layer: `x += attn(ln(x))`, then `x += mlp(ln(x))`,
//! with learned token and position embeddings going in and a final layer
//! norm before the (optionally weight-tied) vocabulary projection. Linear
//! layers use the row convention `y = x · W + b` with `W: [d_in × d_out]`.
//!
//! The model owns a flat parameter list with stable indices and names (see
//! [`layout`]); everything downstream — optimizers, adapters, checkpoints —
//! addresses parameters by that layout rather than by walking a module
//! tree.

pub mod checkpoint;

use crate::corpus::{EncodedExample, EOS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, TensorId};
use crate::trace::{ForwardTrace, TraceConfig, TraceDims, TraceRecorder, TraceableModel};

/// Layer-norm variance epsilon used by every norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the normal init used for every weight matrix and
/// embedding table.
pub const INIT_STD: f64 = 0.02;

/// Default number of tokens greedy generation will add.
pub const DEFAULT_MAX_NEW: usize = 32;

/// Hyperparameters fixing a model's shape.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Share the output projection with the token embedding table.
    pub tie_lm_head: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_mlp: 256,
            vocab_size: 512,
            max_seq_len: 128,
            tie_lm_head: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must cover the four special tokens".into(),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Flat parameter layout. A model's parameter list is:
///
/// ```text
/// [TOK_EMB, POS_EMB,
///  layer 0: LN1_GAIN..=MLP_PROJ_B (16 entries),
///  layer 1: …,
///  FINAL_GAIN, FINAL_BIAS,
///  LM_HEAD_W (untied models only)]
/// ```
pub mod layout {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const BASE: usize = 2;
    pub const STRIDE: usize = 16;

    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const ATTN_Q_W: usize = 2;
    pub const ATTN_Q_B: usize = 3;
    pub const ATTN_K_W: usize = 4;
    pub const ATTN_K_B: usize = 5;
    pub const ATTN_V_W: usize = 6;
    pub const ATTN_V_B: usize = 7;
    pub const ATTN_O_W: usize = 8;
    pub const ATTN_O_B: usize = 9;
    pub const LN2_GAIN: usize = 10;
    pub const LN2_BIAS: usize = 11;
    pub const MLP_FC_W: usize = 12;
    pub const MLP_FC_B: usize = 13;
    pub const MLP_PROJ_W: usize = 14;
    pub const MLP_PROJ_B: usize = 15;

    /// Index of `offset` within layer `layer` in the flat parameter list.
    pub fn layer_param(layer: usize, offset: usize) -> usize {
        BASE + layer * STRIDE + offset
    }

    /// Index of the final norm gain; bias follows it.
    pub fn final_norm(n_layers: usize) -> usize {
        BASE + n_layers * STRIDE
    }

    /// Index of the untied LM head weight.
    pub fn lm_head(n_layers: usize) -> usize {
        final_norm(n_layers) + 2
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether optimizers may update this tensor. Frozen parameters also
    /// skip gradient accumulation entirely.
    pub trainable: bool,
}

/// Low-rank additive path on one weight matrix, already materialized as
/// graph leaves: the projection computes `y += scale · (x · down) · up`.
/// This is how adapters inject themselves into a forward pass without the
/// model knowing anything about adapter bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct LinearOverlay {
    /// Flat parameter index of the weight matrix being augmented.
    pub weight_index: usize,
    /// `[d_in × r]` leaf.
    pub down: TensorId,
    /// `[r × d_out]` leaf.
    pub up: TensorId,
    pub scale: f64,
}

/// Decoder-only causal language model.
#[derive(Debug, Clone)]
pub struct GptModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> GptModel<T> {
    /// Initialize a fresh model: weights and embeddings `N(0, 0.02)`,
    /// biases zero, norm gains one. Draw order is parameter order, so two
    /// models built from equal-state RNGs are identical.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, s, d, m) = (config.vocab_size, config.max_seq_len, config.d_model, config.d_mlp);
        let mut params = Vec::with_capacity(layout::lm_head(config.n_layers) + 1);

        let normal = |name: &str, rows: usize, cols: usize, rng: &mut Rng| {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.next_normal() * INIT_STD))
                .collect();
            Param {
                name: name.to_string(),
                tensor: Tensor::new(data, vec![rows, cols]).expect("shape is non-empty"),
                trainable: true,
            }
        };
        let filled = |name: &str, len: usize, value: T| Param {
            name: name.to_string(),
            tensor: Tensor::new(vec![value; len], vec![len]).expect("shape is non-empty"),
            trainable: true,
        };

        params.push(normal("tok_emb", v, d, rng));
        params.push(normal("pos_emb", s, d, rng));
        for l in 0..config.n_layers {
            let p = |suffix: &str| format!("layer{l}.{suffix}");
            params.push(filled(&p("ln1.gain"), d, T::ONE));
            params.push(filled(&p("ln1.bias"), d, T::ZERO));
            params.push(normal(&p("attn.q.w"), d, d, rng));
            params.push(filled(&p("attn.q.b"), d, T::ZERO));
            params.push(normal(&p("attn.k.w"), d, d, rng));
            params.push(filled(&p("attn.k.b"), d, T::ZERO));
            params.push(normal(&p("attn.v.w"), d, d, rng));
            params.push(filled(&p("attn.v.b"), d, T::ZERO));
            params.push(normal(&p("attn.o.w"), d, d, rng));
            params.push(filled(&p("attn.o.b"), d, T::ZERO));
            params.push(filled(&p("ln2.gain"), d, T::ONE));
            params.push(filled(&p("ln2.bias"), d, T::ZERO));
            params.push(normal(&p("mlp.fc.w"), d, m, rng));
            params.push(filled(&p("mlp.fc.b"), m, T::ZERO));
            params.push(normal(&p("mlp.proj.w"), m, d, rng));
            params.push(filled(&p("mlp.proj.b"), d, T::ZERO));
        }
        params.push(filled("final_norm.gain", d, T::ONE));
        params.push(filled("final_norm.bias", d, T::ZERO));
        if !config.tie_lm_head {
            params.push(normal("lm_head.w", d, v, rng));
        }

        Ok(GptModel { config, params })
    }

    /// Closed-form parameter count for a config, before building anything.
    ///
    /// With vocabulary `V`, context `S`, width `d`, MLP width `m`, and `L`
    /// layers, a tied model holds
    ///
    /// ```text
    /// V·d + S·d + L·(4d² + 2dm + 9d + m) + 2d
    /// ```
    ///
    /// scalars — embeddings, then per layer four `d×d` attention projections
    /// with biases (`4d²+4d`), two norms (`4d`), and the MLP pair
    /// (`dm+m+md+d`), then the final norm. Untied models add `d·V` for the
    /// output head. At the conventional `m = 4d` the per-layer term is
    /// `12d² + 13d`.
    pub fn count_params(config: &ModelConfig) -> usize {
        let (v, s, d, m, l) =
            (config.vocab_size, config.max_seq_len, config.d_model, config.d_mlp, config.n_layers);
        let per_layer = 4 * d * d + 2 * d * m + 9 * d + m;
        let head = if config.tie_lm_head { 0 } else { d * v };
        v * d + s * d + l * per_layer + 2 * d + head
    }

    /// Total scalars actually held, which must agree with
    /// [`GptModel::count_params`].
    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalars in trainable tensors only.
    pub fn n_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn param_named(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn set_trainable_all(&mut self, on: bool) {
        for p in &mut self.params {
            p.trainable = on;
        }
    }

    /// Freeze everything except the transformer blocks listed in `layers`.
    /// Embeddings and the final norm stay frozen, which confines learning
    /// to the named blocks.
    pub fn set_trainable_layers_only(&mut self, layers: &[usize]) -> Result<()> {
        for &l in layers {
            if l >= self.config.n_layers {
                return Err(Error::Config(format!(
                    "layer {l} out of range for a {}-layer model",
                    self.config.n_layers
                )));
            }
        }
        self.set_trainable_all(false);
        for &l in layers {
            for off in 0..layout::STRIDE {
                self.params[layout::layer_param(l, off)].trainable = true;
            }
        }
        Ok(())
    }

    /// Insert every parameter as a graph leaf, in layout order. For
    /// gradient graphs, leaves of frozen parameters opt out of tracking.
    pub fn leaf_params(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| {
                g.leaf_from(p.tensor.data(), p.tensor.shape(), p.trainable)
                    .expect("parameter tensors are well-formed")
            })
            .collect()
    }

    pub fn trace_dims(&self) -> TraceDims {
        TraceDims {
            n_layers: self.config.n_layers,
            n_heads: self.config.n_heads,
            d_mlp: self.config.d_mlp,
            d_model: self.config.d_model,
        }
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Degenerate("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Append the forward computation for one sequence to `g`, returning the
    /// `[seq_len × vocab]` logits node. `param_ids` must come from
    /// [`GptModel::leaf_params`] on the same graph; several sequences may
    /// share one graph (and therefore one set of parameter leaves).
    /// `overlays` inject low-rank adapter paths; a recorder, when given,
    /// captures internals as the pass is built.
    pub(crate) fn build_forward(
        &self,
        g: &mut Graph<T>,
        param_ids: &[TensorId],
        tokens: &[u32],
        overlays: &[LinearOverlay],
        mut recorder: Option<&mut TraceRecorder<'_, T>>,
    ) -> Result<TensorId> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let dh = cfg.d_head();

        let token_rows: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let position_rows: Vec<usize> = (0..t).collect();
        let tok_e = g.gather_rows(param_ids[layout::TOK_EMB], &token_rows)?;
        let pos_e = g.gather_rows(param_ids[layout::POS_EMB], &position_rows)?;
        let mut x = g.add(tok_e, pos_e)?;

        for l in 0..cfg.n_layers {
            let pid = |off: usize| param_ids[layout::layer_param(l, off)];

            let ln1 = g.layer_norm(x, pid(layout::LN1_GAIN), pid(layout::LN1_BIAS), LN_EPS)?;
            let q = self.linear(g, ln1, param_ids, layout::layer_param(l, layout::ATTN_Q_W), overlays)?;
            let k = self.linear(g, ln1, param_ids, layout::layer_param(l, layout::ATTN_K_W), overlays)?;
            let v = self.linear(g, ln1, param_ids, layout::layer_param(l, layout::ATTN_V_W), overlays)?;

            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qs = g.slice_cols(q, lo, hi)?;
                let ks = g.slice_cols(k, lo, hi)?;
                let vs = g.slice_cols(v, lo, hi)?;
                let att = g.causal_attention(qs, ks, vs)?;
                if let Some(rec) = recorder.as_deref_mut() {
                    if rec.wants_attention() {
                        let weights = g.attention_weights(att)?.to_vec();
                        rec.record_attention(&weights);
                    }
                }
                head_outs.push(att);
            }
            let merged = g.concat_cols(&head_outs)?;
            let attn_out =
                self.linear(g, merged, param_ids, layout::layer_param(l, layout::ATTN_O_W), overlays)?;
            x = g.add(x, attn_out)?;

            let ln2 = g.layer_norm(x, pid(layout::LN2_GAIN), pid(layout::LN2_BIAS), LN_EPS)?;
            let fc = self.linear(g, ln2, param_ids, layout::layer_param(l, layout::MLP_FC_W), overlays)?;
            let hidden = g.gelu(fc)?;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.record_mlp_hidden(g.data(hidden));
            }
            let mlp_out =
                self.linear(g, hidden, param_ids, layout::layer_param(l, layout::MLP_PROJ_W), overlays)?;
            x = g.add(x, mlp_out)?;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.record_residual(g.data(x));
            }
        }

        let fi = layout::final_norm(cfg.n_layers);
        let normed = g.layer_norm(x, param_ids[fi], param_ids[fi + 1], LN_EPS)?;
        if cfg.tie_lm_head {
            // Tied head: logits = x · Eᵀ against the token embedding table.
            g.matmul_nt(normed, param_ids[layout::TOK_EMB])
        } else {
            g.matmul(normed, param_ids[layout::lm_head(cfg.n_layers)])
        }
    }

    /// One linear layer `x · W + b`, where the bias is the parameter right
    /// after the weight, plus any adapter overlay registered on `W`.
    fn linear(
        &self,
        g: &mut Graph<T>,
        x: TensorId,
        param_ids: &[TensorId],
        weight_index: usize,
        overlays: &[LinearOverlay],
    ) -> Result<TensorId> {
        let mut y = g.matmul(x, param_ids[weight_index])?;
        for ov in overlays.iter().filter(|ov| ov.weight_index == weight_index) {
            let lo = g.matmul(x, ov.down)?;
            let lo = g.matmul(lo, ov.up)?;
            let lo = g.scale(lo, T::from_f64(ov.scale))?;
            y = g.add(y, lo)?;
        }
        g.add_bias(y, param_ids[weight_index + 1])
    }

    /// Plain forward pass: `[seq_len × vocab]` logits.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let ids = self.leaf_params(&mut g);
        let logits = self.build_forward(&mut g, &ids, tokens, &[], None)?;
        Ok(g.detach(logits))
    }

    /// Forward pass that also captures internals. The logits are bitwise
    /// identical to [`GptModel::forward`] on the same tokens — capture is
    /// purely observational.
    pub fn forward_with_trace(
        &self,
        tokens: &[u32],
        example_index: usize,
        config: &TraceConfig,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.validate_tokens(tokens)?;
        let mut g = Graph::inference();
        let ids = self.leaf_params(&mut g);
        let mut rec = TraceRecorder::new(config, self.trace_dims(), example_index, tokens.len())?;
        let logits = self.build_forward(&mut g, &ids, tokens, &[], Some(&mut rec))?;
        Ok((g.detach(logits), rec.finish()?))
    }
}

impl<T: Scalar> TraceableModel<T> for GptModel<T> {
    fn trace_dims(&self) -> TraceDims {
        GptModel::trace_dims(self)
    }

    fn forward_traced(
        &self,
        tokens: &[u32],
        example_index: usize,
        config: &TraceConfig,
    ) -> Result<ForwardTrace<T>> {
        self.forward_with_trace(tokens, example_index, config)
            .map(|(_, trace)| trace)
    }
}

/// Anything that maps a token prefix to next-token logits. Implemented by
/// the base model and by adapter-wrapped models, so generation and scoring
/// code runs unchanged over both.
pub trait CausalLm<T: Scalar>: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `[seq_len × vocab]` logits for a prefix.
    fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>>;
}

impl<T: Scalar> CausalLm<T> for GptModel<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.forward(tokens)
    }
}

/// Greedy decoding: repeatedly append the argmax token (lowest index wins
/// ties) until EOS is emitted, `max_new` tokens have been added, or the
/// context fills up. Returns only the generated continuation, including the
/// terminating EOS when one is produced.
pub fn generate_greedy<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Degenerate("empty generation prompt".into()));
    }
    if prompt.len() > model.max_seq_len() {
        return Err(Error::Length { len: prompt.len(), max: model.max_seq_len() });
    }
    let v = model.vocab_size();
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < model.max_seq_len() {
        let logits = model.logits(&seq)?;
        let row = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = i;
            }
        }
        let tok = best as u32;
        out.push(tok);
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

/// Teacher-forced log-probability of an encoded example's masked positions:
/// `Σ log p(token_i | tokens_{<i})` over positions where the loss mask is
/// set. Accumulated in f64 via log-sum-exp for stability.
pub fn sequence_log_prob<T: Scalar, M: CausalLm<T>>(
    model: &M,
    encoded: &EncodedExample,
) -> Result<f64> {
    let n = encoded.tokens.len();
    if n < 2 {
        return Err(Error::Degenerate("scoring needs at least two tokens".into()));
    }
    if n > model.max_seq_len() {
        return Err(Error::Length { len: n, max: model.max_seq_len() });
    }
    if encoded.loss_mask.len() != n {
        return Err(Error::Contract(format!(
            "loss mask has {} entries for {n} tokens",
            encoded.loss_mask.len()
        )));
    }
    if !encoded.loss_mask[1..].iter().any(|&m| m) {
        return Err(Error::Degenerate("loss mask selects no positions".into()));
    }
    let v = model.vocab_size();
    let logits = model.logits(&encoded.tokens)?;
    let data = logits.data();
    let mut total = 0.0f64;
    for i in 1..n {
        if !encoded.loss_mask[i] {
            continue;
        }
        let row = &data[(i - 1) * v..i * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
        let sum: f64 = row.iter().map(|&x| (x.to_f64() - max).exp()).sum();
        let target = encoded.tokens[i] as usize;
        if target >= v {
            return Err(Error::Contract(format!("target id {target} outside vocabulary of {v}")));
        }
        total += row[target].to_f64() - max - sum.ln();
    }
    Ok(total)
}

/// Standalone single-head causal attention over explicit `[T×d_k]` inputs:
/// returns the `[T×d_k]` output and the `[T×T]` post-softmax weight matrix
/// (exact zeros above the diagonal). The same kernel the model uses,
/// exposed for direct inspection.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let qi = g.leaf(q);
    let ki = g.leaf(k);
    let vi = g.leaf(v);
    let att = g.causal_attention(qi, ki, vi)?;
    let t = g.shape(att)[0];
    let weights = Tensor::new(g.attention_weights(att)?.to_vec(), vec![t, t])?;
    Ok((g.detach(att), weights))
}
