//! Training: AdamW with decoupled weight decay, global-norm gradient
//! clipping, shuffled mini-batches, and early stopping on validation loss.
//!
//! Each step builds one graph for the whole batch: parameters enter as
//! leaves once, every example's shifted cross-entropy hangs off those
//! leaves, and the batch loss is the token-weighted mean of the per-example
//! means. A single backward pass then accumulates all gradients. Loss
//! bookkeeping and optimizer math run in f64 regardless of the model's
//! working precision.
//!
//! The engine trains anything implementing [`Trainable`] — the full model,
//! a layer-restricted model (frozen tensors never receive gradients), or a
//! model with adapters where only adapter tensors are live.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::model::GptModel;
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, TensorId};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Epochs without sufficient validation improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    /// Minimum decrease in validation loss that counts as improvement.
    pub min_improvement: f64,
    /// Seed for batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            patience: 6,
            min_improvement: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.min_improvement < 0.0 {
            return Err(Error::Config(
                "weight_decay, grad_clip, and min_improvement must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment buffers, one pair per trained tensor, held in
/// f64 so repeated tiny updates don't wash out.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        OptimizerState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First-moment buffer of slot `i` (exposed so tests can pin the
    /// clipping and accumulation arithmetic).
    pub fn moment1(&self, i: usize) -> &[f64] {
        &self.m[i]
    }
}

/// One AdamW update across aligned parameter/gradient lists.
///
/// Order of operations: clip the concatenated gradient to `grad_clip` by
/// global norm, fold it into the moments, then apply the decoupled update
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + eps)`. Weight decay multiplies the
/// pre-step parameter value and does not pass through the moments.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &mut [Vec<f64>],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "adamw_step: slot {i} sizes disagree ({} vs {} vs {})",
                p.numel(),
                g.len(),
                state.m[i].len()
            )));
        }
    }

    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm".into()));
    }
    if config.grad_clip > 0.0 && norm > config.grad_clip {
        let s = config.grad_clip / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = p.data_mut();
        for j in 0..g.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let theta = data[j].to_f64();
            let updated = theta - config.lr * config.weight_decay * theta
                - config.lr * m_hat / (v_hat.sqrt() + config.eps);
            data[j] = T::from_f64(updated);
        }
    }
    Ok(())
}

/// Early-stopping bookkeeping over validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_improvement: f64,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

/// What to do after observing one epoch's validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best: snapshot the parameters.
    Improved,
    /// No improvement yet, keep going.
    Continue,
    /// Patience exhausted, stop after this epoch.
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        EarlyStopper {
            patience,
            min_improvement,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if self.best - val_loss >= self.min_improvement {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.patience > 0 && self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_val(&self) -> f64 {
        self.best
    }
}

/// Per-epoch losses (token-weighted means).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of a training run. The trained object is left holding the
/// parameters of the best validation epoch, not the last one.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Write an `epoch,train_loss,val_loss` history table.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in history {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Anything the engine can train: exposes parameter slots and can build a
/// per-example loss on a graph whose leaves it created.
pub(crate) trait Trainable<T: Scalar> {
    /// Insert every parameter slot as a graph leaf, in a fixed order.
    /// Frozen slots must opt out of gradient tracking.
    fn leaf_all(&self, g: &mut Graph<T>) -> Vec<TensorId>;
    /// Scalar loss node for one example, referencing the slot leaves.
    fn example_loss(
        &self,
        g: &mut Graph<T>,
        slots: &[TensorId],
        ex: &EncodedExample,
    ) -> Result<TensorId>;
    fn trainable_flags(&self) -> Vec<bool>;
    fn slot_values(&self) -> Vec<Vec<T>>;
    fn set_slot_values(&mut self, values: &[Vec<T>]);
    /// Mutable tensors for the trainable slots only, in slot order.
    fn trainable_tensors(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Scalar> Trainable<T> for GptModel<T> {
    fn leaf_all(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.leaf_params(g)
    }

    fn example_loss(
        &self,
        g: &mut Graph<T>,
        slots: &[TensorId],
        ex: &EncodedExample,
    ) -> Result<TensorId> {
        let (inputs, targets, mask) = shifted_views(ex)?;
        let logits = self.build_forward(g, slots, inputs, &[], None)?;
        g.cross_entropy_masked(logits, &targets, &mask)
    }

    fn trainable_flags(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.trainable).collect()
    }

    fn slot_values(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    fn set_slot_values(&mut self, values: &[Vec<T>]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.tensor.data_mut().copy_from_slice(v);
        }
    }

    fn trainable_tensors(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.tensor)
            .collect()
    }
}

/// Next-token view of an encoded example: inputs drop the last token,
/// targets and mask shift left by one.
fn shifted_views(ex: &EncodedExample) -> Result<(&[u32], Vec<usize>, Vec<bool>)> {
    let n = ex.tokens.len();
    if n < 2 {
        return Err(Error::Degenerate("training example with fewer than two tokens".into()));
    }
    if ex.loss_mask.len() != n {
        return Err(Error::Contract(format!(
            "loss mask has {} entries for {n} tokens",
            ex.loss_mask.len()
        )));
    }
    let targets = ex.tokens[1..].iter().map(|&t| t as usize).collect();
    let mask = ex.loss_mask[1..].to_vec();
    Ok((&ex.tokens[..n - 1], targets, mask))
}

fn shifted_token_count(ex: &EncodedExample) -> usize {
    ex.loss_mask.iter().skip(1).filter(|&&m| m).count()
}

/// Token-weighted mean loss over a set, without touching gradients.
pub(crate) fn eval_loss<T: Scalar, M: Trainable<T>>(
    target: &M,
    examples: &[EncodedExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Degenerate("cannot evaluate loss on an empty set".into()));
    }
    let mut num = 0.0f64;
    let mut tokens = 0usize;
    for ex in examples {
        let count = shifted_token_count(ex);
        if count == 0 {
            continue;
        }
        let mut g = Graph::inference();
        let slots = target.leaf_all(&mut g);
        let loss = target.example_loss(&mut g, &slots, ex)?;
        num += g.data(loss)[0].to_f64() * count as f64;
        tokens += count;
    }
    if tokens == 0 {
        return Err(Error::Degenerate("no loss-bearing tokens in evaluation set".into()));
    }
    Ok(num / tokens as f64)
}

/// Token-weighted mean loss of `model` over `examples`.
pub fn compute_loss<T: Scalar>(model: &GptModel<T>, examples: &[EncodedExample]) -> Result<f64> {
    eval_loss(model, examples)
}

/// The loss [`compute_loss`] would report over `examples`, together with its
/// gradient for every parameter slot, in parameter order. Frozen slots get a
/// zero gradient. One graph, one backward pass — the exact quantities a
/// training step would apply, exposed for inspection and numeric
/// verification.
pub fn loss_gradients<T: Scalar>(
    model: &GptModel<T>,
    examples: &[EncodedExample],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let counts: Vec<usize> = examples.iter().map(shifted_token_count).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate(
            "no loss-bearing tokens in gradient evaluation set".into(),
        ));
    }

    let mut g = Graph::new();
    let slots = model.leaf_all(&mut g);
    let mut acc: Option<TensorId> = None;
    for (ex, &count) in examples.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let loss = model.example_loss(&mut g, &slots, ex)?;
        let scaled = g.scale(loss, T::from_f64(count as f64 / total as f64))?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    let batch_loss = acc.expect("total > 0 implies at least one contributing example");
    let loss_value = g.data(batch_loss)[0].to_f64();
    g.backward(batch_loss)?;

    let grads = slots
        .iter()
        .map(|&id| match g.grad(id) {
            Some(grad) => grad.iter().map(|&x| x.to_f64()).collect(),
            None => vec![0.0; g.data(id).len()],
        })
        .collect();
    Ok((loss_value, grads))
}

/// One optimizer step over a batch. Returns the batch loss and its token
/// count.
fn train_step<T: Scalar, M: Trainable<T>>(
    target: &mut M,
    batch: &[&EncodedExample],
    opt: &mut OptimizerState,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<(f64, usize)> {
    let diverged = |msg: String| Error::Training { epoch, step, msg };

    let counts: Vec<usize> = batch.iter().map(|ex| shifted_token_count(ex)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate("batch carries no loss-bearing tokens".into()));
    }

    let mut g = Graph::new();
    let slots = target.leaf_all(&mut g);
    let flags = target.trainable_flags();

    let mut acc: Option<TensorId> = None;
    for (ex, &count) in batch.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        // A non-finite activation mid-training means the parameters have
        // already blown up; report it as divergence, not a data error.
        let loss = target.example_loss(&mut g, &slots, ex).map_err(|e| match e {
            Error::Numeric(what) => diverged(format!("non-finite {what}")),
            other => other,
        })?;
        let scaled = g.scale(loss, T::from_f64(count as f64 / total as f64))?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    let batch_loss = acc.expect("total > 0 implies at least one contributing example");
    let loss_value = g.data(batch_loss)[0].to_f64();
    if !loss_value.is_finite() {
        return Err(diverged(format!("batch loss is {loss_value}")));
    }
    g.backward(batch_loss)?;

    let mut grads: Vec<Vec<f64>> = Vec::new();
    for (id, &trainable) in slots.iter().zip(&flags) {
        if !trainable {
            continue;
        }
        let numel = g.data(*id).len();
        grads.push(match g.grad(*id) {
            Some(grad) => grad.iter().map(|&x| x.to_f64()).collect(),
            // Trainable but untouched by this batch's graph: a zero
            // gradient keeps the state buffers aligned.
            None => vec![0.0; numel],
        });
    }
    drop(g);

    let mut tensors = target.trainable_tensors();
    adamw_step(&mut tensors, &mut grads, opt, config).map_err(|e| match e {
        Error::Numeric(what) => diverged(format!("non-finite {what}")),
        other => other,
    })?;
    Ok((loss_value, total))
}

/// Train until the epoch budget or early stopping ends the run, leaving
/// `target` holding the best-validation parameters. `on_epoch` sees the
/// target right after each epoch's update (before any best-restore).
pub(crate) fn run_training<T: Scalar, M: Trainable<T>>(
    target: &mut M,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &M),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Degenerate("training needs non-empty train and val sets".into()));
    }
    let sizes: Vec<usize> = target
        .slot_values()
        .iter()
        .zip(target.trainable_flags())
        .filter(|(_, trainable)| *trainable)
        .map(|(v, _)| v.len())
        .collect();
    if sizes.is_empty() {
        return Err(Error::Config("nothing is trainable".into()));
    }
    let mut opt = OptimizerState::new(&sizes);
    let mut rng = Rng::new(config.seed);
    let mut stopper = EarlyStopper::new(config.patience, config.min_improvement);
    let mut best_values = target.slot_values();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut token_sum = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, tokens) = train_step(target, &batch, &mut opt, config, epoch, step)?;
            loss_sum += loss * tokens as f64;
            token_sum += tokens;
        }
        let train_loss = loss_sum / token_sum as f64;
        let val_loss = eval_loss(target, val_set).map_err(|e| match e {
            Error::Numeric(what) => Error::Training {
                epoch,
                step: 0,
                msg: format!("non-finite {what} during validation"),
            },
            other => other,
        })?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                step: 0,
                msg: format!("validation loss is {val_loss}"),
            });
        }
        let stats = EpochStats { epoch, train_loss, val_loss };
        on_epoch(&stats, target);
        history.push(stats);

        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best_values = target.slot_values(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    target.set_slot_values(&best_values);
    Ok(TrainReport {
        history,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_val(),
        stopped_early,
    })
}

/// Train a model in place. See [`run_training`] for the engine contract.
pub fn train<T: Scalar>(
    model: &mut GptModel<T>,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    run_training(model, train_set, val_set, config, |_, _| {})
}

/// [`train`] with a per-epoch observer (called after each epoch's updates,
/// before the final best-epoch restore).
pub fn train_with_hook<T: Scalar>(
    model: &mut GptModel<T>,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats, &GptModel<T>),
) -> Result<TrainReport> {
    run_training(model, train_set, val_set, config, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn param(values: &[f64]) -> Tensor<f64> {
        Tensor::new(values.to_vec(), vec![values.len()]).unwrap()
    }

    fn config(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig { lr, weight_decay: wd, ..TrainConfig::default() }
    }

    #[test]
    fn adamw_zero_grad_shrinks_by_decay_only() {
        let mut p = param(&[1.0, -2.0]);
        let mut grads = vec![vec![0.0, 0.0]];
        let mut state = OptimizerState::new(&[2]);
        let cfg = config(0.1, 0.1);
        adamw_step(&mut [&mut p], &mut grads, &mut state, &cfg).unwrap();
        // Zero gradient leaves the moments at zero, so the update is the
        // decoupled decay alone: θ · (1 − lr·wd).
        assert_eq!(p.data(), &[1.0 * 0.99, -2.0 * 0.99]);

        let mut p = param(&[1.0]);
        let mut grads = vec![vec![0.0]];
        let mut state = OptimizerState::new(&[1]);
        adamw_step(&mut [&mut p], &mut grads, &mut state, &config(0.1, 0.0)).unwrap();
        assert_eq!(p.data(), &[1.0], "no decay and no gradient is a no-op");
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        // With bias correction, the first step reduces to
        // −lr · g / (|g| + eps), i.e. lr times the gradient's sign.
        let mut p = param(&[0.0, 0.0]);
        let mut grads = vec![vec![0.5, -0.25]];
        let mut state = OptimizerState::new(&[2]);
        let cfg = config(0.01, 0.0);
        adamw_step(&mut [&mut p], &mut grads, &mut state, &cfg).unwrap();
        assert!((p.data()[0] - (-0.01)).abs() < 1e-9, "{}", p.data()[0]);
        assert!((p.data()[1] - 0.01).abs() < 1e-9, "{}", p.data()[1]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_clips_by_global_norm_before_moments() {
        // Gradient (3, 4) has norm 5; with clip 1.0 the moments must see
        // (0.6, 0.8) scaled by (1 − β1).
        let mut p = param(&[0.0, 0.0]);
        let mut grads = vec![vec![3.0, 4.0]];
        let mut state = OptimizerState::new(&[2]);
        let cfg = TrainConfig { grad_clip: 1.0, ..config(0.01, 0.0) };
        adamw_step(&mut [&mut p], &mut grads, &mut state, &cfg).unwrap();
        let m = state.moment1(0);
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-15, "{}", m[0]);
        assert!((m[1] - 0.1 * 0.8).abs() < 1e-15, "{}", m[1]);
        // The clipped gradient is also what the caller's buffer now holds.
        assert!((grads[0][0] - 0.6).abs() < 1e-15);
        assert!((grads[0][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_validates_alignment() {
        let mut p = param(&[0.0]);
        let mut grads = vec![vec![0.0, 0.0]];
        let mut state = OptimizerState::new(&[1]);
        assert!(matches!(
            adamw_step(&mut [&mut p], &mut grads, &mut state, &config(0.01, 0.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn early_stopper_fixture() {
        // Losses 3,2,2,2,2,2,2,2 with patience 6: best at epoch 2, six
        // stale epochs later the run stops at epoch 8.
        let mut s = EarlyStopper::new(6, 1e-5);
        let losses = [3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            let epoch = i + 1;
            match s.observe(epoch, l) {
                StopDecision::Stop => {
                    stopped_at = Some(epoch);
                    break;
                }
                _ => {}
            }
        }
        assert_eq!(stopped_at, Some(8));
        assert_eq!(s.best_epoch(), 2);
        assert_eq!(s.best_val(), 2.0);
    }

    #[test]
    fn early_stopper_requires_meaningful_improvement() {
        let mut s = EarlyStopper::new(2, 1e-5);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        // A decrease smaller than min_improvement does not reset patience.
        assert_eq!(s.observe(2, 1.0 - 1e-7), StopDecision::Continue);
        assert_eq!(s.observe(3, 1.0 - 2e-7), StopDecision::Stop);
        assert_eq!(s.best_epoch(), 1);

        // Patience 0 disables stopping entirely.
        let mut s = EarlyStopper::new(0, 1e-5);
        for epoch in 1..=50 {
            assert_ne!(s.observe(epoch, 5.0), StopDecision::Stop);
        }
    }

    fn tiny_model(seed: u64) -> GptModel<f32> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            vocab_size: 32,
            max_seq_len: 16,
            tie_lm_head: true,
            seed,
        };
        GptModel::init(cfg.clone(), &mut Rng::new(cfg.seed)).unwrap()
    }

    /// Sequences with a fixed successor pattern the tiny model can learn:
    /// token k is always followed by (k + 1) mod 24, offset by specials.
    fn pattern_corpus(n: usize, seed: u64) -> Vec<EncodedExample> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let start = 4 + rng.next_below(24) as u32;
                let tokens: Vec<u32> = std::iter::once(1u32)
                    .chain((0..7).map(|i| 4 + ((start - 4 + i) % 24)))
                    .collect();
                let mut loss_mask = vec![true; tokens.len()];
                loss_mask[0] = false;
                EncodedExample { tokens, loss_mask }
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_pattern() {
        let mut model = tiny_model(1);
        let data = pattern_corpus(24, 7);
        let (train_set, val_set) = data.split_at(16);
        let before = compute_loss(&model, val_set).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 3e-3,
            patience: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut model, train_set, val_set, &cfg).unwrap();
        let after = compute_loss(&model, val_set).unwrap();
        assert!(
            after < before - 0.3,
            "5 epochs on a deterministic pattern must cut loss: {before} → {after}"
        );
        assert_eq!(report.history.len(), 5);
        assert!(report.history[4].train_loss < report.history[0].train_loss);
        assert!((report.best_val_loss - after).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let data = pattern_corpus(12, 9);
        let (tr, va) = data.split_at(8);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, patience: 0, seed: 5, ..TrainConfig::default() };

        let mut a = tiny_model(2);
        let ra = train(&mut a, tr, va, &cfg).unwrap();
        let mut b = tiny_model(2);
        let rb = train(&mut b, tr, va, &cfg).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.tensor.data(), y.tensor.data(), "param {}", x.name);
        }
        assert_eq!(ra.history, rb.history);
    }

    #[test]
    fn best_epoch_parameters_are_restored() {
        let data = pattern_corpus(12, 11);
        let (tr, va) = data.split_at(8);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, lr: 3e-3, patience: 0, seed: 1, ..TrainConfig::default() };
        let mut model = tiny_model(3);
        let mut per_epoch: Vec<Vec<Vec<f32>>> = Vec::new();
        let report = train_with_hook(&mut model, tr, va, &cfg, |_, m| {
            per_epoch.push(m.params.iter().map(|p| p.tensor.data().to_vec()).collect());
        })
        .unwrap();
        assert!(report.best_epoch >= 1 && report.best_epoch <= 4);
        let snapshot = &per_epoch[report.best_epoch - 1];
        for (p, snap) in model.params.iter().zip(snapshot) {
            assert_eq!(p.tensor.data(), snap.as_slice(), "param {} must match best epoch", p.name);
        }
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let data = pattern_corpus(8, 13);
        let (tr, va) = data.split_at(6);
        let mut model = tiny_model(4);
        model.set_trainable_layers_only(&[1]).unwrap();
        let frozen_before = model.param_named("layer0.attn.q.w").unwrap().tensor.data().to_vec();
        let live_before = model.param_named("layer1.attn.q.w").unwrap().tensor.data().to_vec();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, patience: 0, ..TrainConfig::default() };
        train(&mut model, tr, va, &cfg).unwrap();
        assert_eq!(
            model.param_named("layer0.attn.q.w").unwrap().tensor.data(),
            frozen_before.as_slice(),
            "frozen layer must be bitwise untouched"
        );
        assert_ne!(
            model.param_named("layer1.attn.q.w").unwrap().tensor.data(),
            live_before.as_slice(),
            "trainable layer must move"
        );
    }

    #[test]
    fn empty_sets_and_bad_configs_are_rejected() {
        let mut model = tiny_model(5);
        let data = pattern_corpus(4, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &[], &data, &cfg),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            train(&mut model, &data, &[], &cfg),
            Err(Error::Degenerate(_))
        ));
        let bad = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(
            train(&mut model, &data, &data, &bad),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig { beta1: 1.0, ..TrainConfig::default() };
        assert!(matches!(
            train(&mut model, &data, &data, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_location() {
        // An absurd learning rate with clipping disabled blows the
        // parameters up within a few steps.
        let mut model = tiny_model(6);
        let data = pattern_corpus(16, 3);
        let (tr, va) = data.split_at(12);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 1e10,
            grad_clip: 0.0,
            patience: 0,
            ..TrainConfig::default()
        };
        match train(&mut model, tr, va, &cfg) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_roundtrips_numbers_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![
            EpochStats { epoch: 1, train_loss: 3.25, val_loss: 3.5 },
            EpochStats { epoch: 2, train_loss: 2.125, val_loss: 2.0625 },
        ];
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,val_loss"));
        assert_eq!(lines.next(), Some("1,3.25,3.5"));
        assert_eq!(lines.next(), Some("2,2.125,2.0625"));
    }
}
