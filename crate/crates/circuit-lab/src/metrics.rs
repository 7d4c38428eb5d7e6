//! Differential interpretability metrics between trace sets.
//!
//! All comparisons require the two (or more) trace sets to cover the same
//! encoded corpus — same fingerprint, dims, and capture config — so every
//! per-head statistic is averaged over aligned (example, query-row) pairs.
//! Attention rows are treated as distributions over their *visible* prefix
//! (keys `0..=query_pos`); the exact zeros above the causal diagonal never
//! enter a divergence or entropy. Accumulation is f64 in fixed index order,
//! which makes every metric bit-reproducible across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trace::TraceSet;

/// Smoothing constant for divergences: both distributions get `eps` added
/// to every bin and are renormalized before the log-ratio.
pub const KL_EPS: f64 = 1e-10;

/// Number of per-layer neuron rows a diff report keeps by default.
pub const DEFAULT_TOP_NEURONS: usize = 50;

/// `KL(p ‖ q) = Σ p·ln(p/q)` with epsilon smoothing: `eps` is added to
/// every bin of both distributions and each is renormalized, so zero bins
/// never produce infinities.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "kl_divergence over mismatched supports ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    if eps < 0.0 {
        return Err(Error::Config(format!("negative smoothing epsilon {eps}")));
    }
    if p.iter().chain(q).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Numeric("kl_divergence input".into()));
    }
    let ps: f64 = p.iter().sum::<f64>() + eps * p.len() as f64;
    let qs: f64 = q.iter().sum::<f64>() + eps * q.len() as f64;
    if ps <= 0.0 || qs <= 0.0 {
        return Err(Error::Degenerate("kl_divergence over an all-zero distribution".into()));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let pn = (pi + eps) / ps;
        let qn = (qi + eps) / qs;
        if pn > 0.0 {
            kl += pn * (pn / qn).ln();
        }
    }
    Ok(kl)
}

/// Shannon entropy in nats, with the `0·ln 0 = 0` convention. Inputs are
/// expected to be (approximately) normalized; no smoothing is applied.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Contract("entropy of an empty distribution".into()));
    }
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Numeric("entropy input".into()));
    }
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    Ok(h)
}

/// A per-(layer, head) statistic, row-major `[n_layers × n_heads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f64>,
}

impl HeadMatrix {
    fn zeros(n_layers: usize, n_heads: usize) -> Self {
        HeadMatrix { n_layers, n_heads, values: vec![0.0; n_layers * n_heads] }
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    fn set(&mut self, layer: usize, head: usize, v: f64) {
        self.values[layer * self.n_heads + head] = v;
    }

    /// Mean over heads, one value per layer.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.n_layers)
            .map(|l| {
                let row = &self.values[l * self.n_heads..(l + 1) * self.n_heads];
                row.iter().sum::<f64>() / self.n_heads as f64
            })
            .collect()
    }

    /// All `(layer, head, value)` entries, descending by value; ties break
    /// toward the lower (layer, head) pair.
    pub fn ranked(&self) -> Vec<(usize, usize, f64)> {
        let mut entries: Vec<(usize, usize, f64)> = (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| (l, h)))
            .map(|(l, h)| (l, h, self.get(l, h)))
            .collect();
        entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        entries
    }

    /// CSV with a `head_0..head_{H−1}` header and one row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for h in 0..self.n_heads {
            if h > 0 {
                out.push(',');
            }
            let _ = write!(out, "head_{h}");
        }
        out.push('\n');
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                if h > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.get(l, h));
            }
            out.push('\n');
        }
        out
    }
}

/// A per-layer statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVector {
    pub values: Vec<f64>,
}

/// Which captured stream activation statistics read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSource {
    /// Post-GELU MLP hidden units (the default).
    MlpHidden,
    /// Post-block residual stream.
    Residual,
}

impl ActivationSource {
    pub fn name(self) -> &'static str {
        match self {
            ActivationSource::MlpHidden => "mlp_hidden",
            ActivationSource::Residual => "residual",
        }
    }
}

/// One neuron's before/after means.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NeuronDelta {
    pub index: usize,
    pub pre: f64,
    pub post: f64,
    pub delta: f64,
}

/// Per-layer mean attention KL between aligned sets of labeled columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKl {
    pub labels: Vec<String>,
    pub n_layers: usize,
    /// Row-major `[n_layers × labels.len()]`.
    pub values: Vec<f64>,
}

impl LayerKl {
    pub fn get(&self, layer: usize, pair: usize) -> f64 {
        self.values[layer * self.labels.len() + pair]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for label in &self.labels {
            let _ = write!(out, ",{label}");
        }
        out.push('\n');
        for l in 0..self.n_layers {
            let _ = write!(out, "{l}");
            for p in 0..self.labels.len() {
                let _ = write!(out, ",{}", self.get(l, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Check that two trace sets are comparable position by position.
fn require_aligned(a: &TraceSet<f32>, b: &TraceSet<f32>) -> Result<()> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Comparison(format!(
            "trace sets cover different corpora (fingerprints {:016x} vs {:016x})",
            a.fingerprint, b.fingerprint
        )));
    }
    if a.dims != b.dims {
        return Err(Error::Comparison(format!(
            "trace sets have different model dims ({:?} vs {:?})",
            a.dims, b.dims
        )));
    }
    if a.config != b.config {
        return Err(Error::Comparison(format!(
            "trace sets captured different streams ({:?} vs {:?})",
            a.config, b.config
        )));
    }
    if a.traces.len() != b.traces.len() {
        return Err(Error::Comparison(format!(
            "trace sets hold {} vs {} examples",
            a.traces.len(),
            b.traces.len()
        )));
    }
    Ok(())
}

fn require_attention(set: &TraceSet<f32>) -> Result<()> {
    if !set.config.capture_attention {
        return Err(Error::Contract(format!(
            "trace set {:?} did not capture attention",
            set.tag
        )));
    }
    Ok(())
}

fn require_stream(set: &TraceSet<f32>, source: ActivationSource) -> Result<()> {
    let ok = match source {
        ActivationSource::MlpHidden => set.config.capture_mlp_hidden,
        ActivationSource::Residual => set.config.capture_residual,
    };
    if !ok {
        return Err(Error::Contract(format!(
            "trace set {:?} did not capture {}",
            set.tag,
            source.name()
        )));
    }
    Ok(())
}

/// Visible-prefix slice of one attention row, as f64.
fn row_prefix(set: &TraceSet<f32>, t_index: usize, layer: usize, head: usize, r: usize) -> Vec<f64> {
    let tr = &set.traces[t_index];
    let full = tr.attention_row(&set.dims, layer, head, r);
    full[..=tr.query_pos(r)].iter().map(|&x| x as f64).collect()
}

/// Mean per-head attention divergence between aligned rows. The default
/// direction is `KL(pre ‖ post)`; `reverse` swaps the arguments.
pub fn attention_kl(
    pre: &TraceSet<f32>,
    post: &TraceSet<f32>,
    reverse: bool,
) -> Result<HeadMatrix> {
    require_aligned(pre, post)?;
    require_attention(pre)?;
    require_attention(post)?;
    let d = pre.dims;
    let mut out = HeadMatrix::zeros(d.n_layers, d.n_heads);
    for layer in 0..d.n_layers {
        for head in 0..d.n_heads {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (i, tr) in pre.traces.iter().enumerate() {
                for r in 0..tr.rows {
                    let p = row_prefix(pre, i, layer, head, r);
                    let q = row_prefix(post, i, layer, head, r);
                    let kl = if reverse {
                        kl_divergence(&q, &p, KL_EPS)?
                    } else {
                        kl_divergence(&p, &q, KL_EPS)?
                    };
                    sum += kl;
                    count += 1;
                }
            }
            out.set(layer, head, sum / count as f64);
        }
    }
    Ok(out)
}

/// Mean per-head attention entropy over visible prefixes.
pub fn attention_entropy(set: &TraceSet<f32>) -> Result<HeadMatrix> {
    require_attention(set)?;
    if set.traces.is_empty() {
        return Err(Error::Degenerate("entropy of an empty trace set".into()));
    }
    let d = set.dims;
    let mut out = HeadMatrix::zeros(d.n_layers, d.n_heads);
    for layer in 0..d.n_layers {
        for head in 0..d.n_heads {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (i, tr) in set.traces.iter().enumerate() {
                for r in 0..tr.rows {
                    sum += entropy(&row_prefix(set, i, layer, head, r))?;
                    count += 1;
                }
            }
            out.set(layer, head, sum / count as f64);
        }
    }
    Ok(out)
}

/// Per-head entropy change `post − pre` plus the fraction of heads whose
/// mean entropy strictly decreased.
pub fn entropy_diff(
    pre: &TraceSet<f32>,
    post: &TraceSet<f32>,
) -> Result<(HeadMatrix, f64)> {
    require_aligned(pre, post)?;
    let a = attention_entropy(pre)?;
    let b = attention_entropy(post)?;
    let values: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| y - x)
        .collect();
    let decreased = values.iter().filter(|&&v| v < 0.0).count();
    let fraction = decreased as f64 / values.len() as f64;
    Ok((HeadMatrix { n_layers: a.n_layers, n_heads: a.n_heads, values }, fraction))
}

/// Mean absolute activation per layer over (example, row, unit).
pub fn activation_magnitude(
    set: &TraceSet<f32>,
    source: ActivationSource,
) -> Result<LayerVector> {
    require_stream(set, source)?;
    if set.traces.is_empty() {
        return Err(Error::Degenerate("activation magnitude of an empty trace set".into()));
    }
    let d = set.dims;
    let width = match source {
        ActivationSource::MlpHidden => d.d_mlp,
        ActivationSource::Residual => d.d_model,
    };
    let mut values = Vec::with_capacity(d.n_layers);
    for layer in 0..d.n_layers {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for tr in &set.traces {
            for r in 0..tr.rows {
                let row = match source {
                    ActivationSource::MlpHidden => tr.mlp_row(&d, layer, r),
                    ActivationSource::Residual => tr.residual_row(&d, layer, r),
                };
                for &x in row {
                    sum += (x as f64).abs();
                }
                count += width;
            }
        }
        values.push(sum / count as f64);
    }
    Ok(LayerVector { values })
}

/// Per-neuron mean MLP activation in `layer`, before and after, ranked by
/// absolute change (descending, ties toward the lower index). `top_n` is
/// clamped to the layer width.
pub fn neuron_deltas(
    pre: &TraceSet<f32>,
    post: &TraceSet<f32>,
    layer: usize,
    top_n: usize,
) -> Result<Vec<NeuronDelta>> {
    require_aligned(pre, post)?;
    require_stream(pre, ActivationSource::MlpHidden)?;
    require_stream(post, ActivationSource::MlpHidden)?;
    let d = pre.dims;
    if layer >= d.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {} layers",
            d.n_layers
        )));
    }
    let mean_per_neuron = |set: &TraceSet<f32>| -> Vec<f64> {
        let mut sums = vec![0.0f64; d.d_mlp];
        let mut rows = 0usize;
        for tr in &set.traces {
            for r in 0..tr.rows {
                for (j, &x) in tr.mlp_row(&d, layer, r).iter().enumerate() {
                    sums[j] += x as f64;
                }
                rows += 1;
            }
        }
        sums.iter().map(|s| s / rows as f64).collect()
    };
    let pre_means = mean_per_neuron(pre);
    let post_means = mean_per_neuron(post);
    let mut deltas: Vec<NeuronDelta> = pre_means
        .iter()
        .zip(&post_means)
        .enumerate()
        .map(|(index, (&p, &q))| NeuronDelta { index, pre: p, post: q, delta: q - p })
        .collect();
    deltas.sort_by(|a, b| {
        b.delta
            .abs()
            .total_cmp(&a.delta.abs())
            .then(a.index.cmp(&b.index))
    });
    deltas.truncate(top_n.min(d.d_mlp));
    Ok(deltas)
}

/// Per-layer mean attention KL for each labeled `(pre, post)` pair, emitted
/// side by side as one column per label (e.g. base-vs-fine-tuned,
/// fine-tuned-vs-lora, base-vs-lora).
pub fn layer_kl_compare(
    pairs: &[(&TraceSet<f32>, &TraceSet<f32>, &str)],
    reverse: bool,
) -> Result<LayerKl> {
    if pairs.is_empty() {
        return Err(Error::Contract("layer_kl_compare needs at least one pair".into()));
    }
    let n_layers = pairs[0].0.dims.n_layers;
    let mut labels = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for &(pre, post, label) in pairs {
        if pre.dims.n_layers != n_layers {
            return Err(Error::Comparison(format!(
                "pair {label:?} has {} layers, expected {n_layers}",
                pre.dims.n_layers
            )));
        }
        let kl = attention_kl(pre, post, reverse)?;
        labels.push(label.to_string());
        columns.push(kl.row_means());
    }
    let mut values = Vec::with_capacity(n_layers * labels.len());
    for l in 0..n_layers {
        for col in &columns {
            values.push(col[l]);
        }
    }
    Ok(LayerKl { labels, n_layers, values })
}

/// Options for building a [`DiffReport`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiffOptions {
    /// Swap the KL direction to `KL(post ‖ pre)`.
    pub reverse_kl: bool,
    pub activation_source: ActivationSource,
    pub top_neurons: usize,
}

impl Default for DiffOptions {
    fn default() -> Self {
        DiffOptions {
            reverse_kl: false,
            activation_source: ActivationSource::MlpHidden,
            top_neurons: DEFAULT_TOP_NEURONS,
        }
    }
}

/// Report metadata, serialized as `meta.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffMeta {
    pub pre_tag: String,
    pub post_tag: String,
    /// Corpus fingerprint, hex.
    pub fingerprint: String,
    pub activation_source: ActivationSource,
    pub reverse_kl: bool,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub n_examples: usize,
    pub top_neurons: usize,
}

/// Everything the differential analysis produces for one pre/post pair.
#[derive(Debug, Clone)]
pub struct DiffReport {
    pub meta: DiffMeta,
    pub kl: HeadMatrix,
    pub entropy_pre: HeadMatrix,
    pub entropy_post: HeadMatrix,
    pub entropy_diff: HeadMatrix,
    pub fraction_entropy_decreased: f64,
    pub actmag_pre: LayerVector,
    pub actmag_post: LayerVector,
    /// Per-layer neuron tables, `n_layers` entries of up to `top_neurons`.
    pub neurons: Vec<Vec<NeuronDelta>>,
    /// Labeled per-layer KL columns; the basic report holds the single
    /// pre-vs-post column, multi-model comparisons replace it.
    pub layer_kl: LayerKl,
}

/// Compare two trace sets stream by stream.
pub fn diff_report(
    pre: &TraceSet<f32>,
    post: &TraceSet<f32>,
    options: &DiffOptions,
) -> Result<DiffReport> {
    require_aligned(pre, post)?;
    let kl = attention_kl(pre, post, options.reverse_kl)?;
    let entropy_pre = attention_entropy(pre)?;
    let entropy_post = attention_entropy(post)?;
    let (ediff, fraction) = entropy_diff(pre, post)?;
    let actmag_pre = activation_magnitude(pre, options.activation_source)?;
    let actmag_post = activation_magnitude(post, options.activation_source)?;
    let d = pre.dims;
    let neurons = (0..d.n_layers)
        .map(|l| neuron_deltas(pre, post, l, options.top_neurons))
        .collect::<Result<Vec<_>>>()?;
    let pair_label = format!("{}-vs-{}", pre.tag, post.tag);
    let layer_kl = layer_kl_compare(&[(pre, post, pair_label.as_str())], options.reverse_kl)?;
    Ok(DiffReport {
        meta: DiffMeta {
            pre_tag: pre.tag.clone(),
            post_tag: post.tag.clone(),
            fingerprint: format!("{:016x}", pre.fingerprint),
            activation_source: options.activation_source,
            reverse_kl: options.reverse_kl,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_mlp: d.d_mlp,
            n_examples: pre.traces.len(),
            top_neurons: options.top_neurons,
        },
        kl,
        entropy_pre,
        entropy_post,
        entropy_diff: ediff,
        fraction_entropy_decreased: fraction,
        actmag_pre,
        actmag_post,
        neurons,
        layer_kl,
    })
}

/// Percent change of activation magnitude relative to `pre`.
fn pct_change(pre: f64, post: f64) -> f64 {
    if pre == 0.0 {
        f64::NAN
    } else {
        (post - pre) / pre * 100.0
    }
}

/// Write a report directory: `kl.csv`, `entropy_pre.csv`,
/// `entropy_post.csv`, `entropy_diff.csv`, `actmag.csv`, `layer_kl.csv`,
/// one `neurons_layer<k>.csv` per layer, and `meta.json`. Deterministic
/// byte-for-byte given an identical report.
pub fn write_report_dir(dir: &Path, report: &DiffReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    };
    write("kl.csv", report.kl.to_csv())?;
    write("entropy_pre.csv", report.entropy_pre.to_csv())?;
    write("entropy_post.csv", report.entropy_post.to_csv())?;
    write("entropy_diff.csv", report.entropy_diff.to_csv())?;

    let mut actmag = String::from("layer,pre,post,delta,pct_change\n");
    for (l, (&p, &q)) in report
        .actmag_pre
        .values
        .iter()
        .zip(&report.actmag_post.values)
        .enumerate()
    {
        let _ = writeln!(actmag, "{l},{p},{q},{},{}", q - p, pct_change(p, q));
    }
    write("actmag.csv", actmag)?;
    write("layer_kl.csv", report.layer_kl.to_csv())?;

    for (l, neurons) in report.neurons.iter().enumerate() {
        let mut table = String::from("rank,neuron,pre,post,delta\n");
        for (rank, n) in neurons.iter().enumerate() {
            let _ = writeln!(table, "{rank},{},{},{},{}", n.index, n.pre, n.post, n.delta);
        }
        write(&format!("neurons_layer{l}.csv"), table)?;
    }

    let meta_path = dir.join("meta.json");
    let mut meta_json = serde_json::to_string_pretty(&report.meta)
        .map_err(|e| Error::json(&meta_path, e))?;
    meta_json.push('\n');
    fs::write(&meta_path, meta_json).map_err(|e| Error::io(&meta_path, e))?;

    // The headline fraction lives in its own tiny file so downstream
    // consumers don't have to recompute it from entropy_diff.csv.
    write(
        "entropy_fraction.csv",
        format!("fraction_heads_entropy_decreased\n{}\n", report.fraction_entropy_decreased),
    )
}
