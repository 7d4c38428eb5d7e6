//! Passive capture of model internals during forward passes.
//!
//! A trace records, per example, the per-head attention distributions, the
//! post-activation MLP hidden vectors, and the post-block residual stream.
//! Capture never alters computation: a traced forward pass produces
//! bitwise-identical logits to an untraced one, because the recorder only
//! copies values the pass computes anyway.
//!
//! Memory layouts are flat row-major:
//! - attention: `[layer][head][row][key]`, each row a distribution over the
//!   `seq_len` key positions (exactly zero above the diagonal);
//! - MLP hidden: `[layer][row][d_mlp]`;
//! - residual: `[layer][row][d_model]`.
//!
//! `row` indexes the captured query positions: all `seq_len` positions, or
//! just the final one when tracing generation-style behavior.

use std::path::Path;

use crate::blob::{read_blob, write_blob};
use crate::corpus::{corpus_fingerprint, EncodedExample};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// File magic for serialized trace sets.
pub const TRACE_MAGIC: &[u8; 8] = b"MICLTRC1";

/// Which query positions a trace records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TracePositions {
    /// Every position in the sequence.
    All,
    /// Only the final position (what next-token generation conditions on).
    LastOnly,
}

/// What a traced forward pass captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TraceConfig {
    pub capture_attention: bool,
    pub capture_mlp_hidden: bool,
    pub capture_residual: bool,
    pub positions: TracePositions,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            capture_attention: true,
            capture_mlp_hidden: true,
            capture_residual: true,
            positions: TracePositions::All,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capture_attention || self.capture_mlp_hidden || self.capture_residual) {
            return Err(Error::Config(
                "trace config captures nothing; enable at least one stream".into(),
            ));
        }
        Ok(())
    }
}

/// Model dimensions a trace is laid out against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TraceDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub d_model: usize,
}

/// Captured internals of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// Position of the source example within its corpus.
    pub example_index: usize,
    pub seq_len: usize,
    /// Number of captured query rows (`seq_len` or 1).
    pub rows: usize,
    pub positions: TracePositions,
    /// `[layer][head][row][key]`; empty when attention capture is off.
    pub attention: Vec<T>,
    /// `[layer][row][d_mlp]`; empty when MLP capture is off.
    pub mlp_hidden: Vec<T>,
    /// `[layer][row][d_model]`; empty when residual capture is off.
    pub residual_out: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// The sequence position captured row `r` corresponds to.
    pub fn query_pos(&self, r: usize) -> usize {
        match self.positions {
            TracePositions::All => r,
            TracePositions::LastOnly => self.seq_len - 1,
        }
    }

    /// Attention distribution of `(layer, head)` at captured row `r`,
    /// `seq_len` weights over key positions.
    pub fn attention_row(&self, dims: &TraceDims, layer: usize, head: usize, r: usize) -> &[T] {
        let t = self.seq_len;
        let start = ((layer * dims.n_heads + head) * self.rows + r) * t;
        &self.attention[start..start + t]
    }

    /// Post-activation MLP hidden vector at `(layer, row)`.
    pub fn mlp_row(&self, dims: &TraceDims, layer: usize, r: usize) -> &[T] {
        let start = (layer * self.rows + r) * dims.d_mlp;
        &self.mlp_hidden[start..start + dims.d_mlp]
    }

    /// Residual-stream vector after block `layer` at captured row `r`.
    pub fn residual_row(&self, dims: &TraceDims, layer: usize, r: usize) -> &[T] {
        let start = (layer * self.rows + r) * dims.d_model;
        &self.residual_out[start..start + dims.d_model]
    }
}

/// Incremental recorder threaded through a forward pass. The pass calls the
/// `record_*` methods with full per-layer buffers; the recorder copies out
/// only the configured rows.
pub struct TraceRecorder<'a, T> {
    config: &'a TraceConfig,
    dims: TraceDims,
    trace: ForwardTrace<T>,
}

impl<'a, T: Scalar> TraceRecorder<'a, T> {
    pub fn new(
        config: &'a TraceConfig,
        dims: TraceDims,
        example_index: usize,
        seq_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        if seq_len == 0 {
            return Err(Error::Degenerate("cannot trace an empty sequence".into()));
        }
        let rows = match config.positions {
            TracePositions::All => seq_len,
            TracePositions::LastOnly => 1,
        };
        let alloc = |on: bool, per_row: usize| {
            if on {
                Vec::with_capacity(dims.n_layers * rows * per_row)
            } else {
                Vec::new()
            }
        };
        Ok(TraceRecorder {
            config,
            dims,
            trace: ForwardTrace {
                example_index,
                seq_len,
                rows,
                positions: config.positions,
                attention: alloc(config.capture_attention, dims.n_heads * seq_len),
                mlp_hidden: alloc(config.capture_mlp_hidden, dims.d_mlp),
                residual_out: alloc(config.capture_residual, dims.d_model),
            },
        })
    }

    pub fn wants_attention(&self) -> bool {
        self.config.capture_attention
    }

    /// Record one head's `[seq_len × seq_len]` attention weight matrix.
    /// Heads must be recorded in order within each layer.
    pub fn record_attention(&mut self, weights: &[T]) {
        if !self.config.capture_attention {
            return;
        }
        let t = self.trace.seq_len;
        debug_assert_eq!(weights.len(), t * t);
        for r in 0..self.trace.rows {
            let q = self.trace.query_pos(r);
            self.trace.attention.extend_from_slice(&weights[q * t..(q + 1) * t]);
        }
    }

    /// Record one layer's `[seq_len × d_mlp]` post-activation hidden matrix.
    pub fn record_mlp_hidden(&mut self, hidden: &[T]) {
        if !self.config.capture_mlp_hidden {
            return;
        }
        self.copy_rows(hidden, self.dims.d_mlp, |tr| &mut tr.mlp_hidden);
    }

    /// Record one layer's `[seq_len × d_model]` post-block residual matrix.
    pub fn record_residual(&mut self, residual: &[T]) {
        if !self.config.capture_residual {
            return;
        }
        self.copy_rows(residual, self.dims.d_model, |tr| &mut tr.residual_out);
    }

    fn copy_rows(
        &mut self,
        source: &[T],
        width: usize,
        dest: impl Fn(&mut ForwardTrace<T>) -> &mut Vec<T>,
    ) {
        debug_assert_eq!(source.len(), self.trace.seq_len * width);
        for r in 0..self.trace.rows {
            let q = self.trace.query_pos(r);
            let row = &source[q * width..(q + 1) * width];
            dest(&mut self.trace).extend_from_slice(row);
        }
    }

    /// Finish recording, checking that every configured stream was filled
    /// for every layer.
    pub fn finish(self) -> Result<ForwardTrace<T>> {
        let tr = &self.trace;
        let expect = |on: bool, per_row: usize| if on { self.dims.n_layers * tr.rows * per_row } else { 0 };
        let checks = [
            ("attention", tr.attention.len(), expect(self.config.capture_attention, self.dims.n_heads * tr.seq_len)),
            ("mlp_hidden", tr.mlp_hidden.len(), expect(self.config.capture_mlp_hidden, self.dims.d_mlp)),
            ("residual", tr.residual_out.len(), expect(self.config.capture_residual, self.dims.d_model)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Contract(format!(
                    "trace stream {name} holds {got} values, expected {want}; \
                     a forward pass under-reported a layer"
                )));
            }
        }
        Ok(self.trace)
    }
}

/// Anything that can run a traced forward pass: the base model directly, or
/// a model with adapters attached.
pub trait TraceableModel<T: Scalar>: Sync {
    fn trace_dims(&self) -> TraceDims;
    /// Run `tokens` through the model, returning the captured trace.
    fn forward_traced(
        &self,
        tokens: &[u32],
        example_index: usize,
        config: &TraceConfig,
    ) -> Result<ForwardTrace<T>>;
}

/// An ordered collection of traces from one model over one corpus.
#[derive(Debug, Clone)]
pub struct TraceSet<T> {
    /// Which model produced this set, e.g. "base" or "fine-tuned".
    pub tag: String,
    pub dims: TraceDims,
    pub config: TraceConfig,
    /// Fingerprint of the encoded corpus the traces were taken over. Trace
    /// sets are only comparable when fingerprints match.
    pub fingerprint: u64,
    pub traces: Vec<ForwardTrace<T>>,
}

/// Trace every example through the model, in corpus order. Examples are
/// processed in parallel; the output order is still the corpus order.
pub fn trace_corpus<T: Scalar, M: TraceableModel<T>>(
    model: &M,
    examples: &[EncodedExample],
    config: &TraceConfig,
    tag: &str,
) -> Result<TraceSet<T>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Degenerate("cannot trace an empty corpus".into()));
    }
    use rayon::prelude::*;
    let traces: Vec<ForwardTrace<T>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| model.forward_traced(&ex.tokens, i, config))
        .collect::<Result<_>>()?;
    Ok(TraceSet {
        tag: tag.to_string(),
        dims: model.trace_dims(),
        config: *config,
        fingerprint: corpus_fingerprint(examples),
        traces,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TraceHeader {
    tag: String,
    dims: TraceDims,
    config: TraceConfig,
    /// Hex string; JSON numbers cannot carry full u64 precision.
    fingerprint: String,
    examples: Vec<TraceEntryMeta>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TraceEntryMeta {
    index: usize,
    seq_len: usize,
    rows: usize,
}

/// Write a trace set to the shared binary container (f32 payloads).
pub fn save_traces<T: Scalar>(path: &Path, set: &TraceSet<T>) -> Result<()> {
    let header = TraceHeader {
        tag: set.tag.clone(),
        dims: set.dims,
        config: set.config,
        fingerprint: format!("{:016x}", set.fingerprint),
        examples: set
            .traces
            .iter()
            .map(|tr| TraceEntryMeta {
                index: tr.example_index,
                seq_len: tr.seq_len,
                rows: tr.rows,
            })
            .collect(),
    };
    let header_json = serde_json::to_string(&header).map_err(|e| Error::json(path, e))?;

    let d = &set.dims;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for (i, tr) in set.traces.iter().enumerate() {
        if set.config.capture_attention {
            tensors.push((
                format!("t{i}.attn"),
                Tensor::new(
                    tr.attention.clone(),
                    vec![d.n_layers, d.n_heads, tr.rows, tr.seq_len],
                )?,
            ));
        }
        if set.config.capture_mlp_hidden {
            tensors.push((
                format!("t{i}.mlp"),
                Tensor::new(tr.mlp_hidden.clone(), vec![d.n_layers, tr.rows, d.d_mlp])?,
            ));
        }
        if set.config.capture_residual {
            tensors.push((
                format!("t{i}.resid"),
                Tensor::new(tr.residual_out.clone(), vec![d.n_layers, tr.rows, d.d_model])?,
            ));
        }
    }
    let refs: Vec<(&str, &Tensor<T>)> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_blob(path, TRACE_MAGIC, &header_json, &refs)
}

/// Read a trace set back. Payloads are stored as f32 regardless of the
/// precision they were computed in.
pub fn load_traces(path: &Path) -> Result<TraceSet<f32>> {
    let blob = read_blob(path, TRACE_MAGIC)?;
    let header: TraceHeader =
        serde_json::from_str(&blob.header_json).map_err(|e| Error::json(path, e))?;
    let fingerprint = u64::from_str_radix(&header.fingerprint, 16).map_err(|_| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        msg: format!("bad fingerprint field {:?}", header.fingerprint),
    })?;
    let bad = |msg: String| Error::Format { path: path.display().to_string(), offset: 0, msg };

    let d = header.dims;
    let mut traces = Vec::with_capacity(header.examples.len());
    for (i, meta) in header.examples.iter().enumerate() {
        let fetch = |suffix: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let name = format!("t{i}.{suffix}");
            let tensor = blob
                .tensor(&name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if tensor.shape() != shape {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            Ok(tensor.data().to_vec())
        };
        let attention = if header.config.capture_attention {
            fetch("attn", &[d.n_layers, d.n_heads, meta.rows, meta.seq_len])?
        } else {
            Vec::new()
        };
        let mlp_hidden = if header.config.capture_mlp_hidden {
            fetch("mlp", &[d.n_layers, meta.rows, d.d_mlp])?
        } else {
            Vec::new()
        };
        let residual_out = if header.config.capture_residual {
            fetch("resid", &[d.n_layers, meta.rows, d.d_model])?
        } else {
            Vec::new()
        };
        traces.push(ForwardTrace {
            example_index: meta.index,
            seq_len: meta.seq_len,
            rows: meta.rows,
            positions: header.config.positions,
            attention,
            mlp_hidden,
            residual_out,
        });
    }
    Ok(TraceSet {
        tag: header.tag,
        dims: d,
        config: header.config,
        fingerprint,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> TraceDims {
        TraceDims { n_layers: 2, n_heads: 2, d_mlp: 3, d_model: 2 }
    }

    /// A stand-in model whose "internals" are deterministic functions of
    /// position, so layout bugs show up as wrong values.
    struct StubModel;

    impl TraceableModel<f32> for StubModel {
        fn trace_dims(&self) -> TraceDims {
            dims()
        }

        fn forward_traced(
            &self,
            tokens: &[u32],
            example_index: usize,
            config: &TraceConfig,
        ) -> Result<ForwardTrace<f32>> {
            let d = self.trace_dims();
            let t = tokens.len();
            let mut rec = TraceRecorder::<f32>::new(config, d, example_index, t)?;
            for layer in 0..d.n_layers {
                for head in 0..d.n_heads {
                    // Causal one-hot on the diagonal, tagged by indices.
                    let mut w = vec![0.0f32; t * t];
                    for q in 0..t {
                        w[q * t + q] = 1.0 + (layer * 10 + head) as f32 * 0.0;
                    }
                    rec.record_attention(&w);
                }
                let hidden: Vec<f32> = (0..t * d.d_mlp)
                    .map(|j| (layer * 1000 + j) as f32)
                    .collect();
                rec.record_mlp_hidden(&hidden);
                let resid: Vec<f32> = (0..t * d.d_model)
                    .map(|j| -((layer * 1000 + j) as f32))
                    .collect();
                rec.record_residual(&resid);
            }
            rec.finish()
        }
    }

    fn enc(tokens: &[u32]) -> EncodedExample {
        EncodedExample { tokens: tokens.to_vec(), loss_mask: vec![true; tokens.len()] }
    }

    #[test]
    fn recorder_layout_all_positions() {
        let cfg = TraceConfig::default();
        let set = trace_corpus(&StubModel, &[enc(&[1, 5, 6, 2])], &cfg, "base").unwrap();
        assert_eq!(set.tag, "base");
        assert_eq!(set.traces.len(), 1);
        let tr = &set.traces[0];
        let d = dims();
        assert_eq!(tr.rows, 4);
        // Diagonal one-hot rows survive the copy in the right order.
        for layer in 0..d.n_layers {
            for head in 0..d.n_heads {
                for r in 0..tr.rows {
                    let row = tr.attention_row(&d, layer, head, r);
                    assert_eq!(row.len(), 4);
                    for (k, &w) in row.iter().enumerate() {
                        let want = if k == r { 1.0 } else { 0.0 };
                        assert_eq!(w, want, "layer {layer} head {head} row {r} key {k}");
                    }
                }
            }
        }
        // MLP rows carry the per-layer offset pattern.
        assert_eq!(tr.mlp_row(&d, 0, 1), &[3.0, 4.0, 5.0]);
        assert_eq!(tr.mlp_row(&d, 1, 0), &[1000.0, 1001.0, 1002.0]);
        assert_eq!(tr.residual_row(&d, 1, 2), &[-1004.0, -1005.0]);
    }

    #[test]
    fn last_only_captures_final_row() {
        let cfg = TraceConfig { positions: TracePositions::LastOnly, ..TraceConfig::default() };
        let set = trace_corpus(&StubModel, &[enc(&[1, 5, 2])], &cfg, "base").unwrap();
        let tr = &set.traces[0];
        let d = dims();
        assert_eq!(tr.rows, 1);
        assert_eq!(tr.query_pos(0), 2);
        let row = tr.attention_row(&d, 0, 1, 0);
        assert_eq!(row, &[0.0, 0.0, 1.0]);
        assert_eq!(tr.mlp_row(&d, 0, 0), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn disabled_streams_stay_empty() {
        let cfg = TraceConfig {
            capture_attention: true,
            capture_mlp_hidden: false,
            capture_residual: false,
            positions: TracePositions::All,
        };
        let set = trace_corpus(&StubModel, &[enc(&[1, 2])], &cfg, "x").unwrap();
        let tr = &set.traces[0];
        assert!(!tr.attention.is_empty());
        assert!(tr.mlp_hidden.is_empty());
        assert!(tr.residual_out.is_empty());
    }

    #[test]
    fn all_streams_off_is_a_config_error() {
        let cfg = TraceConfig {
            capture_attention: false,
            capture_mlp_hidden: false,
            capture_residual: false,
            positions: TracePositions::All,
        };
        assert!(matches!(
            trace_corpus(&StubModel, &[enc(&[1, 2])], &cfg, "x"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_corpus_is_degenerate() {
        assert!(matches!(
            trace_corpus(&StubModel, &[], &TraceConfig::default(), "x"),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tracing_is_deterministic_and_order_preserving() {
        let examples = vec![enc(&[1, 4, 2]), enc(&[1, 9, 9, 2]), enc(&[1, 2])];
        let cfg = TraceConfig::default();
        let a = trace_corpus(&StubModel, &examples, &cfg, "base").unwrap();
        let b = trace_corpus(&StubModel, &examples, &cfg, "base").unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x, y);
        }
        for (i, tr) in a.traces.iter().enumerate() {
            assert_eq!(tr.example_index, i);
            assert_eq!(tr.seq_len, examples[i].tokens.len());
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.bin");
        let examples = vec![enc(&[1, 4, 2]), enc(&[1, 9, 9, 2])];
        let set = trace_corpus(&StubModel, &examples, &TraceConfig::default(), "fine-tuned").unwrap();
        save_traces(&path, &set).unwrap();
        let loaded = load_traces(&path).unwrap();
        assert_eq!(loaded.tag, "fine-tuned");
        assert_eq!(loaded.dims, set.dims);
        assert_eq!(loaded.config, set.config);
        assert_eq!(loaded.fingerprint, set.fingerprint);
        assert_eq!(loaded.traces.len(), 2);
        for (a, b) in loaded.traces.iter().zip(&set.traces) {
            assert_eq!(a, b, "f32 payloads roundtrip bitwise");
        }
    }

    #[test]
    fn partial_capture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.bin");
        let cfg = TraceConfig {
            capture_attention: false,
            capture_mlp_hidden: true,
            capture_residual: false,
            positions: TracePositions::LastOnly,
        };
        let set = trace_corpus(&StubModel, &[enc(&[1, 7, 2])], &cfg, "lora").unwrap();
        save_traces(&path, &set).unwrap();
        let loaded = load_traces(&path).unwrap();
        assert!(loaded.traces[0].attention.is_empty());
        assert_eq!(loaded.traces[0].mlp_hidden, set.traces[0].mlp_hidden);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.bin");
        let set = trace_corpus(&StubModel, &[enc(&[1, 2])], &TraceConfig::default(), "x").unwrap();
        save_traces(&path, &set).unwrap();
        assert!(matches!(
            read_blob(&path, b"MICLCKP1"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn under_reported_layer_is_a_contract_error() {
        let cfg = TraceConfig::default();
        let mut rec = TraceRecorder::<f32>::new(&cfg, dims(), 0, 2).unwrap();
        // Record only one of the two layers.
        rec.record_attention(&[1.0, 0.0, 0.0, 1.0]);
        rec.record_attention(&[1.0, 0.0, 0.0, 1.0]);
        rec.record_mlp_hidden(&[0.0; 6]);
        rec.record_residual(&[0.0; 4]);
        assert!(matches!(rec.finish(), Err(Error::Contract(_))));
    }
}
