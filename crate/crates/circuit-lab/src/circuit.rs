//! Summarization-circuit identification: rank layers by how much their
//! attention changed between two model states and package the result so
//! adapter training can target exactly those layers.
//!
//! The primary layer score is the mean per-head attention KL — the most
//! change-sensitive signal the differential report carries. An alternative
//! combined score (KL z-score plus |ΔActMag| z-score, equal weights) is
//! available behind an option for experiments where activation shifts
//! matter as much as attention shifts.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{LoraConfig, Projection};
use crate::metrics::{DiffMeta, DiffReport, NeuronDelta};

/// Default number of circuit layers to select.
pub const DEFAULT_TOP_K: usize = 3;
/// Default quantile (nearest-rank) above which heads are listed.
pub const DEFAULT_HEAD_QUANTILE: f64 = 0.9;
/// Neuron rows attached per selected layer.
pub const NEURONS_PER_LAYER: usize = 50;

/// How layers are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean per-head attention KL (the default).
    #[default]
    KlOnly,
    /// Equal-weight sum of the layer's KL z-score and |ΔActMag| z-score.
    Combined,
}

/// Options for [`identify_circuit`].
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitOptions {
    /// Number of layers to select.
    pub k: usize,
    /// Nearest-rank quantile of all per-head KL values above which heads
    /// are listed, in `(0, 1]`.
    pub head_quantile: f64,
    pub score_mode: ScoreMode,
}

impl Default for CircuitOptions {
    fn default() -> Self {
        CircuitOptions {
            k: DEFAULT_TOP_K,
            head_quantile: DEFAULT_HEAD_QUANTILE,
            score_mode: ScoreMode::KlOnly,
        }
    }
}

/// One selected layer with its score.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CircuitLayer {
    pub layer: usize,
    pub score: f64,
}

/// One head above the KL quantile threshold. Heads that fall outside the
/// selected layers are kept but marked auxiliary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CircuitHead {
    pub layer: usize,
    pub head: usize,
    pub kl: f64,
    pub auxiliary: bool,
}

/// Top neuron deltas of one selected layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerNeurons {
    pub layer: usize,
    pub neurons: Vec<NeuronDelta>,
}

/// The identified circuit: ranked layers, salient heads, per-layer neuron
/// tables, and the provenance of the report it was derived from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CircuitSpec {
    /// Selected layers, score-descending (ties toward the lower index).
    pub layers: Vec<CircuitLayer>,
    /// Heads at or above the quantile threshold, KL-descending.
    pub heads: Vec<CircuitHead>,
    /// Top neuron deltas for each selected layer, in layer-rank order.
    pub neurons: Vec<LayerNeurons>,
    pub score_mode: ScoreMode,
    pub head_quantile: f64,
    /// The KL value at the quantile threshold.
    pub head_threshold: f64,
    pub provenance: DiffMeta,
}

impl CircuitSpec {
    /// Selected layer indices in rank order.
    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }
}

/// Mean and population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores; a zero-spread input maps to all zeros rather than dividing
/// by zero.
fn z_scores(values: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(values);
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Nearest-rank quantile of `values` (unsorted input, `q` in `(0, 1]`).
fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
}

/// Rank layers of a differential report and emit the circuit.
///
/// The layer score is the mean per-head KL (or the combined z-score under
/// [`ScoreMode::Combined`]); the top `k` layers are selected, every head
/// at or above the `head_quantile` nearest-rank threshold of all
/// layer×head KL values is listed (marked auxiliary when its layer was
/// not selected), and each selected layer carries its top
/// [`NEURONS_PER_LAYER`] neuron deltas.
pub fn identify_circuit(report: &DiffReport, options: &CircuitOptions) -> Result<CircuitSpec> {
    let n_layers = report.kl.n_layers;
    if options.k == 0 {
        return Err(Error::Config("circuit selection needs k ≥ 1".into()));
    }
    if options.k > n_layers {
        return Err(Error::Config(format!(
            "cannot select top {} of {n_layers} layers",
            options.k
        )));
    }
    if !(options.head_quantile > 0.0 && options.head_quantile <= 1.0) {
        return Err(Error::Config(format!(
            "head quantile must lie in (0, 1], got {}",
            options.head_quantile
        )));
    }
    if report.kl.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("circuit layer scores".into()));
    }

    let kl_means = report.kl.row_means();
    let scores: Vec<f64> = match options.score_mode {
        ScoreMode::KlOnly => kl_means.clone(),
        ScoreMode::Combined => {
            let actmag_delta: Vec<f64> = report
                .actmag_pre
                .values
                .iter()
                .zip(&report.actmag_post.values)
                .map(|(&p, &q)| (q - p).abs())
                .collect();
            let zk = z_scores(&kl_means);
            let za = z_scores(&actmag_delta);
            zk.iter().zip(&za).map(|(a, b)| a + b).collect()
        }
    };
    if scores.iter().all(|&s| s == 0.0) {
        return Err(Error::Degenerate(
            "no signal: all layer scores are zero, the two model states are indistinguishable"
                .into(),
        ));
    }

    let mut ranked: Vec<CircuitLayer> = scores
        .iter()
        .enumerate()
        .map(|(layer, &score)| CircuitLayer { layer, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)));
    ranked.truncate(options.k);
    let selected: Vec<usize> = ranked.iter().map(|l| l.layer).collect();

    let head_threshold = nearest_rank_quantile(&report.kl.values, options.head_quantile);
    let mut heads: Vec<CircuitHead> = report
        .kl
        .ranked()
        .into_iter()
        .filter(|&(_, _, kl)| kl >= head_threshold)
        .map(|(layer, head, kl)| CircuitHead {
            layer,
            head,
            kl,
            auxiliary: !selected.contains(&layer),
        })
        .collect();
    // `ranked()` is already KL-descending with deterministic tie order.
    heads.shrink_to_fit();

    let neurons = selected
        .iter()
        .map(|&layer| {
            let mut rows = report.neurons[layer].clone();
            rows.truncate(NEURONS_PER_LAYER);
            LayerNeurons { layer, neurons: rows }
        })
        .collect();

    Ok(CircuitSpec {
        layers: ranked,
        heads,
        neurons,
        score_mode: options.score_mode,
        head_quantile: options.head_quantile,
        head_threshold,
        provenance: report.meta.clone(),
    })
}

/// Convert a circuit into an adapter target set: its layers, with the
/// default rank-8 adapters on the Q and V projections.
pub fn to_lora_targets(spec: &CircuitSpec) -> Result<LoraConfig> {
    if spec.layers.is_empty() {
        return Err(Error::Config("cannot target an empty circuit".into()));
    }
    let mut layers = spec.layer_indices();
    layers.sort_unstable();
    layers.dedup();
    Ok(LoraConfig {
        projections: vec![Projection::Q, Projection::V],
        layers: Some(layers),
        ..LoraConfig::default()
    })
}

/// Serialize a circuit as pretty JSON (`circuit.json`).
pub fn save_circuit(path: &Path, spec: &CircuitSpec) -> Result<()> {
    let mut json = serde_json::to_string_pretty(spec).map_err(|e| Error::json(path, e))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Load a circuit from JSON.
pub fn load_circuit(path: &Path) -> Result<CircuitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ActivationSource, HeadMatrix, LayerKl, LayerVector};

    /// Hand-built 4-layer × 4-head report with the given per-head KL and
    /// per-layer ActMag values; the entropy fields are neutral.
    fn fake_report(kl: Vec<f64>, actmag_pre: Vec<f64>, actmag_post: Vec<f64>) -> DiffReport {
        let n_layers = actmag_pre.len();
        let n_heads = kl.len() / n_layers;
        let matrix = |values: Vec<f64>| HeadMatrix { n_layers, n_heads, values };
        let kl = matrix(kl);
        let d_mlp = 8;
        // Ranked |delta|-descending, as the metrics layer guarantees.
        let neurons = (0..n_layers)
            .map(|l| {
                (0..d_mlp)
                    .map(|i| {
                        let magnitude = (l + d_mlp - i) as f64 * 0.1;
                        NeuronDelta { index: i, pre: 0.0, post: magnitude, delta: magnitude }
                    })
                    .collect()
            })
            .collect();
        DiffReport {
            meta: DiffMeta {
                pre_tag: "base".into(),
                post_tag: "fine-tuned".into(),
                fingerprint: "00000000000000ff".into(),
                activation_source: ActivationSource::MlpHidden,
                reverse_kl: false,
                n_layers,
                n_heads,
                d_mlp,
                n_examples: 4,
                top_neurons: 50,
            },
            layer_kl: LayerKl {
                labels: vec!["base-vs-fine-tuned".into()],
                n_layers,
                values: kl.row_means(),
            },
            entropy_pre: matrix(vec![0.5; n_layers * n_heads]),
            entropy_post: matrix(vec![0.5; n_layers * n_heads]),
            entropy_diff: matrix(vec![0.0; n_layers * n_heads]),
            fraction_entropy_decreased: 0.0,
            actmag_pre: LayerVector { values: actmag_pre },
            actmag_post: LayerVector { values: actmag_post },
            neurons,
            kl,
        }
    }

    fn spread_report() -> DiffReport {
        // Layer means: 0.10, 0.40, 0.25, 0.05 → ranking 1, 2, 0, 3.
        let kl = vec![
            0.1, 0.1, 0.1, 0.1, // layer 0
            0.7, 0.3, 0.3, 0.3, // layer 1
            0.25, 0.25, 0.25, 0.25, // layer 2
            0.05, 0.05, 0.05, 0.05, // layer 3
        ];
        fake_report(kl, vec![1.0; 4], vec![1.0; 4])
    }

    #[test]
    fn top_layer_is_the_argmax_and_order_is_deterministic() {
        let report = spread_report();
        let spec = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        assert_eq!(spec.layer_indices(), vec![1, 2, 0]);
        assert!((spec.layers[0].score - 0.4).abs() < 1e-12);
        let again = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn ties_break_toward_the_lower_layer() {
        let kl = vec![
            0.2, 0.2, 0.2, 0.2, // layer 0
            0.2, 0.2, 0.2, 0.2, // layer 1 (tied with 0)
            0.9, 0.9, 0.9, 0.9, // layer 2
            0.0, 0.0, 0.0, 0.0, // layer 3
        ];
        let report = fake_report(kl, vec![1.0; 4], vec![1.0; 4]);
        let spec =
            identify_circuit(&report, &CircuitOptions { k: 2, ..Default::default() }).unwrap();
        assert_eq!(spec.layer_indices(), vec![2, 0]);
    }

    #[test]
    fn scale_invariance_of_the_selected_set() {
        let report = spread_report();
        let mut scaled = spread_report();
        for v in scaled.kl.values.iter_mut() {
            *v *= 37.5;
        }
        let a = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        let b = identify_circuit(&scaled, &CircuitOptions::default()).unwrap();
        assert_eq!(a.layer_indices(), b.layer_indices());
    }

    #[test]
    fn head_threshold_is_the_nearest_rank_quantile() {
        let report = spread_report();
        let spec = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        // 16 values, q=0.9 → rank ceil(14.4)=15 → 15th smallest = 0.3.
        assert_eq!(spec.head_threshold, 0.3);
        // Heads ≥ 0.3: (1,0)=0.7 and the three 0.3s of layer 1.
        assert_eq!(spec.heads.len(), 4);
        assert_eq!((spec.heads[0].layer, spec.heads[0].head), (1, 0));
        assert!(spec.heads.iter().all(|h| h.kl >= 0.3));
        // Layer 1 is selected, so none of these are auxiliary.
        assert!(spec.heads.iter().all(|h| !h.auxiliary));
    }

    #[test]
    fn heads_outside_selected_layers_are_auxiliary() {
        // Layer 3 holds the single hottest head but a weak mean; with k=1
        // only layer 1 is selected and the hot head is auxiliary.
        let kl = vec![
            0.0, 0.0, 0.0, 0.0, //
            0.4, 0.4, 0.4, 0.4, //
            0.0, 0.0, 0.0, 0.0, //
            0.9, 0.0, 0.0, 0.0, //
        ];
        let report = fake_report(kl, vec![1.0; 4], vec![1.0; 4]);
        let spec = identify_circuit(
            &report,
            &CircuitOptions { k: 1, head_quantile: 0.8, ..Default::default() },
        )
        .unwrap();
        assert_eq!(spec.layer_indices(), vec![1]);
        let hot = spec.heads.iter().find(|h| h.layer == 3).unwrap();
        assert!(hot.auxiliary);
        assert!(spec.heads.iter().filter(|h| h.layer == 1).all(|h| !h.auxiliary));
    }

    #[test]
    fn neurons_attach_to_selected_layers_in_rank_order() {
        let report = spread_report();
        let spec = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        let layers: Vec<usize> = spec.neurons.iter().map(|n| n.layer).collect();
        assert_eq!(layers, vec![1, 2, 0]);
        for table in &spec.neurons {
            assert!(!table.neurons.is_empty());
            assert!(table.neurons.len() <= NEURONS_PER_LAYER);
            // Ranked by |delta| descending, as the report provides.
            for pair in table.neurons.windows(2) {
                assert!(pair[0].delta.abs() >= pair[1].delta.abs());
            }
        }
    }

    #[test]
    fn combined_mode_can_reorder_layers() {
        // KL slightly favors layer 1; ActMag change massively favors
        // layer 3.
        let kl = vec![
            0.10, 0.10, 0.10, 0.10, //
            0.12, 0.12, 0.12, 0.12, //
            0.10, 0.10, 0.10, 0.10, //
            0.11, 0.11, 0.11, 0.11, //
        ];
        let report = fake_report(kl, vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0, 9.0]);
        let kl_only = identify_circuit(
            &report,
            &CircuitOptions { k: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(kl_only.layer_indices(), vec![1]);
        let combined = identify_circuit(
            &report,
            &CircuitOptions { k: 1, score_mode: ScoreMode::Combined, ..Default::default() },
        )
        .unwrap();
        assert_eq!(combined.layer_indices(), vec![3]);
    }

    #[test]
    fn degenerate_and_invalid_inputs_are_rejected() {
        let zero = fake_report(vec![0.0; 16], vec![1.0; 4], vec![1.0; 4]);
        assert!(matches!(
            identify_circuit(&zero, &CircuitOptions::default()),
            Err(Error::Degenerate(_))
        ));
        let report = spread_report();
        assert!(matches!(
            identify_circuit(&report, &CircuitOptions { k: 5, ..Default::default() }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            identify_circuit(&report, &CircuitOptions { k: 0, ..Default::default() }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            identify_circuit(
                &report,
                &CircuitOptions { head_quantile: 1.5, ..Default::default() }
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lora_targets_cover_the_circuit_layers() {
        let report = spread_report();
        let spec = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        let config = to_lora_targets(&spec).unwrap();
        assert_eq!(config.layers, Some(vec![0, 1, 2]));
        assert_eq!(config.projections, vec![Projection::Q, Projection::V]);
        assert_eq!(config.rank, 8);
        // The generated config passes adapter validation on a deep model.
        let model_config = crate::model::ModelConfig {
            n_layers: 12,
            ..crate::model::ModelConfig::default()
        };
        config.validate(&model_config).unwrap();

        let empty = CircuitSpec { layers: vec![], ..spec };
        assert!(matches!(to_lora_targets(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn circuit_json_roundtrip() {
        let report = spread_report();
        let spec = identify_circuit(&report, &CircuitOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("circuit.json");
        save_circuit(&path, &spec).unwrap();
        let loaded = load_circuit(&path).unwrap();
        assert_eq!(spec, loaded);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"layers\""));
        assert!(text.contains("\"provenance\""));
    }
}
