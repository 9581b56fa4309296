//! Teacher-forced training, optimization, decoding, and checkpoints.

mod checkpoint;
mod decode;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{greedy_decode, greedy_decode_batch, Decoded};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Seq2Seq;
use crate::vocab::{BOS, EOS};

/// A source/target pair of token ids, without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Pair {
    pub fn new(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        Self { src, tgt }
    }

    /// Decoder input `[BOS, y_1..y_T]` and targets `[y_1..y_T, EOS]`.
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(self.tgt.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&self.tgt);
        let mut targets = self.tgt.clone();
        targets.push(EOS);
        (input, targets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Peak learning rate, reached at `warmup`.
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            seed: 1,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps must be >= 1"));
        }
        self.validate_hyperparameters()
    }

    /// Everything [`validate`](Self::validate) checks except the step count.
    pub fn validate_hyperparameters(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup == 0 {
            return Err(Error::config("train.batch_size and train.warmup must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing must be in [0, 1)"));
        }
        if !(self.clip_norm > 0.0) || !(self.lr >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::config(
                "train.clip_norm and train.adam_eps must be > 0, train.lr >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Inverse square-root schedule with linear warmup, peaking at `cfg.lr` when
/// `step == cfg.warmup`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (s, w) = (step.max(1) as f64, cfg.warmup.max(1) as f64);
    cfg.lr * (s / w).min((w / s).sqrt())
}

/// Optimizer and bookkeeping state carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: usize,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    /// Seed from which batch order and dropout masks are derived per step.
    pub seed: u64,
    pub best_dev_loss: Option<f64>,
    pub best_step: Option<usize>,
}

impl TrainState {
    pub fn new(model: &Seq2Seq, seed: u64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            adam_m: zeros.clone(),
            adam_v: zeros,
            seed,
            best_dev_loss: None,
            best_step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dropout seed for example `index` of step `step`.
pub fn dropout_seed(seed: u64, step: usize, index: usize) -> u64 {
    mix(mix(seed, step as u64), index as u64 ^ 0x5eed)
}

/// Corpus indices of the batch used at 1-based `step`. The stream is the
/// concatenation of per-epoch permutations, so any step can be recomputed.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let start = (step - 1) * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for k in start..start + batch_size {
        if k / n != epoch {
            epoch = k / n;
            perm = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
        }
        out.push(perm[k % n]);
    }
    out
}

/// Loss and gradients of one example, already weighted by `weight`.
fn example_gradients(
    model: &Seq2Seq,
    pair: &Pair,
    weight: f64,
    smoothing: f64,
    dropout: Option<u64>,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let session = match dropout {
        Some(seed) => model.train_session(seed),
        None => model.grad_session(),
    };
    let tape = session.tape();
    let enc = session.encode(&pair.src, pair.src.len())?;
    let (input, targets) = pair.teacher_forcing();
    let dec = session.decode(&input, &enc)?;
    let ce = tape.cross_entropy(dec.logits, &targets, smoothing)?;
    let loss = tape.scale(ce, weight);
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, session.param_grads(&grads)))
}

/// Token-mean loss over `batch` and its gradient, one tape per example.
/// Per-example results are summed in batch order.
pub fn batch_gradients(
    model: &Seq2Seq,
    batch: &[Pair],
    smoothing: f64,
    dropout_seeds: Option<&[u64]>,
    exec: Execution,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let total: usize = batch.iter().map(|p| p.tgt.len() + 1).sum();
    let results = exec.map(batch, |i, pair| {
        let weight = (pair.tgt.len() + 1) as f64 / total as f64;
        example_gradients(model, pair, weight, smoothing, dropout_seeds.map(|s| s[i]))
    });
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (acc, part) in grads.iter_mut().zip(g) {
            if let Some(part) = part {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += p;
                }
            }
        }
    }
    Ok((loss, grads))
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One optimization step: forward, label-smoothed CE, backward, clip, Adam.
pub fn train_step(model: &mut Seq2Seq, batch: &[Pair], state: &mut TrainState, cfg: &TrainConfig) -> Result<StepStats> {
    train_step_with(model, batch, state, cfg, Execution::default())
}

pub fn train_step_with(
    model: &mut Seq2Seq,
    batch: &[Pair],
    state: &mut TrainState,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<StepStats> {
    let step = state.step + 1;
    let seeds: Option<Vec<u64>> =
        (model.config().dropout > 0.0).then(|| (0..batch.len()).map(|i| dropout_seed(state.seed, step, i)).collect());
    let (loss, mut grads) = batch_gradients(model, batch, cfg.label_smoothing, seeds.as_deref(), exec)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
    }
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {step}")));
    }

    let lr = lr_at(step, cfg);
    let t = step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, tensor) in model.params_mut().tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.adam_m[i], &mut state.adam_v[i], &grads[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            *p -= lr * update;
        }
    }
    for (tensor, g) in model.params_mut().tensors_mut().iter_mut().zip(grads) {
        tensor.set_grad(g)?;
    }
    state.step = step;
    Ok(StepStats {
        step,
        lr,
        loss,
        grad_norm,
    })
}

/// Runs steps `state.step + 1 ..= cfg.steps`, sampling batches from `train`.
/// `on_step` sees every completed step and may stop training with an error.
pub fn fit<F>(
    model: &mut Seq2Seq,
    state: &mut TrainState,
    train: &[Pair],
    cfg: &TrainConfig,
    exec: Execution,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepStats, &Seq2Seq, &mut TrainState) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    while state.step < cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, state.seed, state.step + 1);
        let batch: Vec<Pair> = idx.iter().map(|&i| train[i].clone()).collect();
        let stats = train_step_with(model, &batch, state, cfg, exec)?;
        on_step(&stats, model, state)?;
    }
    Ok(())
}

/// Token-mean cross-entropy (no smoothing, no dropout) over `pairs`.
pub fn evaluate_loss(model: &Seq2Seq, pairs: &[Pair], exec: Execution) -> Result<f64> {
    let per = exec.map(pairs, |_, pair| -> Result<(f64, usize)> {
        let s = model.eval_session();
        let enc = s.encode(&pair.src, pair.src.len())?;
        let (input, targets) = pair.teacher_forcing();
        let dec = s.decode(&input, &enc)?;
        let ce = s.tape().cross_entropy(dec.logits, &targets, 0.0)?;
        let v = s.tape().value(ce).data()[0];
        Ok((v * targets.len() as f64, targets.len()))
    });
    let (mut sum, mut count) = (0.0, 0usize);
    for r in per {
        let (s, n) = r?;
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::contract("no tokens to evaluate"));
    }
    Ok(sum / count as f64)
}

/// Fraction of target tokens (EOS included) whose teacher-forced argmax is correct.
pub fn teacher_forced_accuracy(model: &Seq2Seq, pairs: &[Pair], exec: Execution) -> Result<f64> {
    let per = exec.map(pairs, |_, pair| -> Result<(usize, usize)> {
        let s = model.eval_session();
        let enc = s.encode(&pair.src, pair.src.len())?;
        let (input, targets) = pair.teacher_forcing();
        let dec = s.decode(&input, &enc)?;
        let logits = s.tape().value(dec.logits);
        let hits = targets
            .iter()
            .enumerate()
            .filter(|(t, &y)| decode::argmax(logits.row(*t)) == y)
            .count();
        Ok((hits, targets.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for r in per {
        let (h, n) = r?;
        hits += h;
        total += n;
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compares the tape gradient of the teacher-forced loss on `pair` with
/// central finite differences over every parameter scalar. Dropout is off on
/// both routes.
pub fn model_grad_check(model: &Seq2Seq, pair: &Pair, smoothing: f64, eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = example_gradients(model, pair, 1.0, smoothing, None)?;
    let loss = |m: &Seq2Seq| -> Result<f64> {
        let s = m.eval_session();
        let enc = s.encode(&pair.src, pair.src.len())?;
        let (input, targets) = pair.teacher_forcing();
        let dec = s.decode(&input, &enc)?;
        let ce = s.tape().cross_entropy(dec.logits, &targets, smoothing)?;
        let v = s.tape().value(ce).data()[0];
        Ok(v)
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        let n = probe.params().tensors()[i].len();
        for j in 0..n {
            let original = probe.params().tensors()[i].data()[j];
            probe.params_mut().tensors_mut()[i].data_mut()[j] = original + eps;
            let up = loss(&probe)?;
            probe.params_mut().tensors_mut()[i].data_mut()[j] = original - eps;
            let down = loss(&probe)?;
            probe.params_mut().tensors_mut()[i].data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_ref().map_or(0.0, |g| g[j]);
            report.max_relative_error = report.max_relative_error.max(crate::tensor::relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.coordinates += 1;
        }
    }
    Ok(report)
}
