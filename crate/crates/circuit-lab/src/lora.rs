//! Low-rank adapters on attention projections.
//!
//! An adapter augments one frozen weight matrix `W: [d_in × d_out]` with a
//! residual low-rank path: `y = x·W + (α/r) · (x·down)·up`, where
//! `down: [d_in × r]` starts at `N(0, 0.02)` and `up: [r × d_out]` starts
//! at zero. A freshly attached adapter therefore computes exactly what the
//! base model computes; training moves only `down`/`up` while every base
//! parameter stays frozen. Merging folds `(α/r)·down·up` back into `W`,
//! recovering a plain model that needs no adapter machinery at inference.

use std::fmt;
use std::path::Path;

use crate::blob::{read_blob, write_blob};
use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{layout, GptModel, LinearOverlay, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, TensorId};
use crate::trace::{ForwardTrace, TraceConfig, TraceDims, TraceRecorder, TraceableModel};
use crate::train::{run_training, EpochStats, TrainConfig, Trainable, TrainReport};

/// File magic for serialized adapter sets.
pub const LORA_MAGIC: &[u8; 8] = b"MICLLORA";

/// Which attention projection an adapter sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    /// Layout offset of this projection's weight within a layer.
    fn weight_offset(self) -> usize {
        match self {
            Projection::Q => layout::ATTN_Q_W,
            Projection::K => layout::ATTN_K_W,
            Projection::V => layout::ATTN_V_W,
            Projection::O => layout::ATTN_O_W,
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" | "Q" => Ok(Projection::Q),
            "k" | "K" => Ok(Projection::K),
            "v" | "V" => Ok(Projection::V),
            "o" | "O" => Ok(Projection::O),
            _ => Err(Error::Config(format!("unknown projection {s:?}; expected q, k, v, or o"))),
        }
    }
}

/// Adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projections to adapt in each targeted layer.
    pub projections: Vec<Projection>,
    /// Layers to adapt; `None` adapts every layer.
    pub layers: Option<Vec<usize>>,
    /// Seed for `down` initialization.
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            projections: vec![Projection::Q, Projection::V],
            layers: None,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if self.rank > model.d_model {
            return Err(Error::Config(format!(
                "adapter rank {} exceeds d_model {}; the low-rank path would not be low-rank",
                self.rank, model.d_model
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.projections.is_empty() {
            return Err(Error::Config("at least one projection must be targeted".into()));
        }
        let mut seen = self.projections.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.projections.len() {
            return Err(Error::Config("duplicate projections in adapter config".into()));
        }
        if let Some(layers) = &self.layers {
            if layers.is_empty() {
                return Err(Error::Config("targeted layer list is empty".into()));
            }
            let mut seen = layers.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != layers.len() {
                return Err(Error::Config("duplicate layers in adapter config".into()));
            }
            for &l in layers {
                if l >= model.n_layers {
                    return Err(Error::Config(format!(
                        "adapter targets layer {l} but the model has {} layers",
                        model.n_layers
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scale `α/r` applied to the low-rank path.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The layers this config touches, ascending.
    pub fn target_layers(&self, n_layers: usize) -> Vec<usize> {
        match &self.layers {
            Some(layers) => {
                let mut l = layers.clone();
                l.sort_unstable();
                l
            }
            None => (0..n_layers).collect(),
        }
    }
}

/// One low-rank pair on one projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Scalar> {
    pub layer: usize,
    pub projection: Projection,
    /// `[d_in × r]`.
    pub down: Tensor<T>,
    /// `[r × d_out]`.
    pub up: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    fn weight_index(&self) -> usize {
        layout::layer_param(self.layer, self.projection.weight_offset())
    }
}

/// A frozen base model plus live adapters.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T: Scalar> {
    base: GptModel<T>,
    config: LoraConfig,
    adapters: Vec<LoraAdapter<T>>,
}

/// Attach fresh adapters to `base`. `down` matrices draw from `rng`
/// (layer-ascending, then projection order as configured); `up` matrices
/// start at zero, so the adapted model is functionally identical to the
/// base until trained.
pub fn attach<T: Scalar>(
    base: GptModel<T>,
    config: LoraConfig,
    rng: &mut Rng,
) -> Result<AdaptedModel<T>> {
    config.validate(&base.config)?;
    let d = base.config.d_model;
    let r = config.rank;
    let mut adapters = Vec::new();
    for layer in config.target_layers(base.config.n_layers) {
        for &projection in &config.projections {
            let down_data = (0..d * r)
                .map(|_| T::from_f64(rng.next_normal() * crate::model::INIT_STD))
                .collect();
            adapters.push(LoraAdapter {
                layer,
                projection,
                down: Tensor::new(down_data, vec![d, r])?,
                up: Tensor::zeros(vec![r, d]),
            });
        }
    }
    Ok(AdaptedModel { base, config, adapters })
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn base(&self) -> &GptModel<T> {
        &self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    /// Scalars the optimizer may move: `r·(d_in + d_out)` per adapter.
    pub fn count_trainable(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.down.numel() + a.up.numel())
            .sum()
    }

    /// Leaf base parameters (always frozen here) and adapter tensors (live),
    /// returning the slot list: base params first, then per adapter its
    /// `down` and `up`.
    fn leaf_slots(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        let mut slots: Vec<TensorId> = self
            .base
            .params
            .iter()
            .map(|p| {
                g.leaf_from(p.tensor.data(), p.tensor.shape(), false)
                    .expect("parameter tensors are well-formed")
            })
            .collect();
        for a in &self.adapters {
            slots.push(
                g.leaf_from(a.down.data(), a.down.shape(), true)
                    .expect("adapter tensors are well-formed"),
            );
            slots.push(
                g.leaf_from(a.up.data(), a.up.shape(), true)
                    .expect("adapter tensors are well-formed"),
            );
        }
        slots
    }

    /// Overlay descriptors for slot ids produced by [`Self::leaf_slots`].
    fn overlays_for(&self, slots: &[TensorId]) -> Vec<LinearOverlay> {
        let base_len = self.base.params.len();
        self.adapters
            .iter()
            .enumerate()
            .map(|(i, a)| LinearOverlay {
                weight_index: a.weight_index(),
                down: slots[base_len + 2 * i],
                up: slots[base_len + 2 * i + 1],
                scale: self.config.scale(),
            })
            .collect()
    }

    /// Logits through the adapted forward pass.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let slots = self.leaf_slots(&mut g);
        let overlays = self.overlays_for(&slots);
        let id = self
            .base
            .build_forward(&mut g, &slots, tokens, &overlays, None)?;
        Ok(g.detach(id))
    }

    /// Traced forward pass; capture is as passive as the base model's.
    pub fn forward_with_trace(
        &self,
        tokens: &[u32],
        example_index: usize,
        config: &TraceConfig,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut g = Graph::inference();
        let slots = self.leaf_slots(&mut g);
        let overlays = self.overlays_for(&slots);
        let mut rec =
            TraceRecorder::new(config, self.base.trace_dims(), example_index, tokens.len())?;
        let id = self
            .base
            .build_forward(&mut g, &slots, tokens, &overlays, Some(&mut rec))?;
        Ok((g.detach(id), rec.finish()?))
    }

    /// Fold every adapter into its weight matrix and return the plain
    /// model: `W ← W + (α/r)·down·up`, accumulated in f64.
    pub fn merge(mut self) -> Result<GptModel<T>> {
        let scale = self.config.scale();
        for a in &self.adapters {
            let idx = a.weight_index();
            let (d_in, r) = (a.down.shape()[0], a.down.shape()[1]);
            let d_out = a.up.shape()[1];
            let weight = self.base.params[idx].tensor.data_mut();
            debug_assert_eq!(weight.len(), d_in * d_out);
            for i in 0..d_in {
                for j in 0..d_out {
                    let mut acc = 0.0f64;
                    for k in 0..r {
                        acc += a.down.data()[i * r + k].to_f64() * a.up.data()[k * d_out + j].to_f64();
                    }
                    let w = weight[i * d_out + j].to_f64() + scale * acc;
                    weight[i * d_out + j] = T::from_f64(w);
                }
            }
        }
        Ok(self.base)
    }

    /// Write the adapters (not the base) to `path`.
    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        let header = AdapterHeader {
            config: self.config.clone(),
            base: self.base.config.clone(),
        };
        let header_json = serde_json::to_string(&header).map_err(|e| Error::json(path, e))?;
        let mut names = Vec::with_capacity(self.adapters.len() * 2);
        for a in &self.adapters {
            names.push((format!("layer{}.{}.down", a.layer, a.projection), &a.down));
            names.push((format!("layer{}.{}.up", a.layer, a.projection), &a.up));
        }
        let refs: Vec<(&str, &Tensor<T>)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_blob(path, LORA_MAGIC, &header_json, &refs)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AdapterHeader {
    config: LoraConfig,
    base: ModelConfig,
}

/// Load adapters from `path` and attach them to `base`, which must have the
/// exact config the adapters were trained against.
pub fn load_adapters(base: GptModel<f32>, path: &Path) -> Result<AdaptedModel<f32>> {
    let blob = read_blob(path, LORA_MAGIC)?;
    let header: AdapterHeader =
        serde_json::from_str(&blob.header_json).map_err(|e| Error::json(path, e))?;
    if header.base != base.config {
        return Err(Error::Config(format!(
            "adapters were built for a different base model ({:?} vs {:?})",
            header.base, base.config
        )));
    }
    header.config.validate(&base.config)?;
    let bad = |msg: String| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        msg,
    };
    let d = base.config.d_model;
    let r = header.config.rank;
    let mut adapters = Vec::new();
    for layer in header.config.target_layers(base.config.n_layers) {
        for &projection in &header.config.projections {
            let fetch = |suffix: &str, shape: [usize; 2]| -> Result<Tensor<f32>> {
                let name = format!("layer{layer}.{projection}.{suffix}");
                let t = blob
                    .tensor(&name)
                    .ok_or_else(|| bad(format!("missing adapter tensor {name}")))?;
                if t.shape() != shape {
                    return Err(bad(format!(
                        "adapter tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            };
            adapters.push(LoraAdapter {
                layer,
                projection,
                down: fetch("down", [d, r])?,
                up: fetch("up", [r, d])?,
            });
        }
    }
    if blob.tensors.len() != adapters.len() * 2 {
        return Err(bad(format!(
            "adapter file holds {} tensors but the config implies {}",
            blob.tensors.len(),
            adapters.len() * 2
        )));
    }
    Ok(AdaptedModel { base, config: header.config, adapters })
}

impl<T: Scalar> Trainable<T> for AdaptedModel<T> {
    fn leaf_all(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.leaf_slots(g)
    }

    fn example_loss(
        &self,
        g: &mut Graph<T>,
        slots: &[TensorId],
        ex: &EncodedExample,
    ) -> Result<TensorId> {
        let n = ex.tokens.len();
        if n < 2 {
            return Err(Error::Degenerate("training example with fewer than two tokens".into()));
        }
        let overlays = self.overlays_for(slots);
        let targets: Vec<usize> = ex.tokens[1..].iter().map(|&t| t as usize).collect();
        let mask = ex.loss_mask[1..].to_vec();
        let logits = self
            .base
            .build_forward(g, slots, &ex.tokens[..n - 1], &overlays, None)?;
        g.cross_entropy_masked(logits, &targets, &mask)
    }

    fn trainable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.base.params.len()];
        flags.extend(std::iter::repeat(true).take(self.adapters.len() * 2));
        flags
    }

    fn slot_values(&self) -> Vec<Vec<T>> {
        let mut values: Vec<Vec<T>> = self
            .base
            .params
            .iter()
            .map(|p| p.tensor.data().to_vec())
            .collect();
        for a in &self.adapters {
            values.push(a.down.data().to_vec());
            values.push(a.up.data().to_vec());
        }
        values
    }

    fn set_slot_values(&mut self, values: &[Vec<T>]) {
        let base_len = self.base.params.len();
        for (p, v) in self.base.params.iter_mut().zip(&values[..base_len]) {
            p.tensor.data_mut().copy_from_slice(v);
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.down.data_mut().copy_from_slice(&values[base_len + 2 * i]);
            a.up.data_mut().copy_from_slice(&values[base_len + 2 * i + 1]);
        }
    }

    fn trainable_tensors(&mut self) -> Vec<&mut Tensor<T>> {
        let mut tensors = Vec::with_capacity(self.adapters.len() * 2);
        for a in &mut self.adapters {
            tensors.push(&mut a.down);
            tensors.push(&mut a.up);
        }
        tensors
    }
}

impl<T: Scalar> crate::model::CausalLm<T> for AdaptedModel<T> {
    fn vocab_size(&self) -> usize {
        self.base.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.base.config.max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.forward(tokens)
    }
}

impl<T: Scalar> TraceableModel<T> for AdaptedModel<T> {
    fn trace_dims(&self) -> TraceDims {
        self.base.trace_dims()
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

/// Train only the adapters; the base stays bitwise frozen.
pub fn train_lora<T: Scalar>(
    adapted: &mut AdaptedModel<T>,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    run_training(adapted, train_set, val_set, config, |_: &EpochStats, _| {})
}
