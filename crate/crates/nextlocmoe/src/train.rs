//! Coordinate-regression training.
//!
//! The objective is mean Euclidean distance between predicted and true
//! coordinates plus an entropy regularizer on the user-routing
//! distributions (scaled by `entropy_weight`), which pushes the router
//! toward confident, sparse selections. Optimization is Adam with global
//! gradient-norm clipping and a reduce-on-plateau learning-rate schedule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward_on_tape, save_checkpoint, ForwardOpts, ModelState, RoutingOverride,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the routing-entropy term in the total loss.
    pub entropy_weight: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Multiplied into the learning rate on plateau.
    pub plateau_factor: f64,
    /// Consecutive non-improving epochs tolerated before reducing.
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub ablate_function_moe: bool,
    pub ablate_persona_moe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            entropy_weight: 300.0,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-6,
            seed: 0,
            ablate_function_moe: false,
            ablate_persona_moe: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive and finite"));
        }
        if self.entropy_weight < 0.0 {
            return Err(Error::config("entropy_weight must be non-negative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must be in (0, 1)"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Euclidean distance between a `1 x 2` prediction and a target point,
/// on-tape. Exact at the value level (no epsilon inside the square root).
pub fn distance_var(tape: &mut Tape, pred: Var, target: [f64; 2]) -> Var {
    let t = tape.row(&target);
    let diff = tape.sub(pred, t);
    let sq = tape.hadamard(diff, diff);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

pub struct SampleLoss {
    pub loss: Var,
    pub dist: f64,
    pub entropy: f64,
    pub activated: Option<f64>,
}

/// Forward one sample and assemble `dist + entropy_weight * mean_entropy`.
pub fn sample_loss(
    state: &ModelState,
    tape: &mut Tape,
    sample: &Sample,
    opts: &ForwardOpts,
    entropy_weight: f64,
) -> Result<SampleLoss> {
    let out = forward_on_tape(state, tape, sample, opts)?;
    let dist = distance_var(tape, out.pred, [sample.target.x, sample.target.y]);
    let (loss, entropy) = match out.entropy {
        Some(h) if entropy_weight != 0.0 => {
            let weighted = tape.scale(h, entropy_weight);
            (tape.add(dist, weighted), tape.value(h)[(0, 0)])
        }
        Some(h) => (dist, tape.value(h)[(0, 0)]),
        None => (dist, 0.0),
    };
    let activated = if out.trace.user.is_empty() {
        None
    } else {
        let sum: usize = out.trace.user.iter().map(|u| u.evaluated).sum();
        Some(sum as f64 / out.trace.user.len() as f64)
    };
    Ok(SampleLoss {
        loss,
        dist: tape.value(dist)[(0, 0)],
        entropy,
        activated,
    })
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect();
        let v = store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let w = store.value_mut(id);
            for (((w, m), v), g) in w
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.iter())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients down so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without
/// improvement of the monitored value, multiply the learning rate by
/// `factor` (floored at `min_lr`) and restart the count.
pub struct Plateau {
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Plateau {
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, monitored: f64, lr: f64) -> f64 {
        if monitored < self.best {
            self.best = monitored;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_dist: f64,
    pub train_entropy: f64,
    pub val_dist: f64,
    pub grad_norm: f64,
    /// Mean number of personalized experts evaluated per MoE layer.
    pub activated_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_val_dist: f64,
    pub best_epoch: usize,
    pub final_lr: f64,
}

#[derive(Default)]
pub struct TrainSink<'a> {
    /// One JSON line per epoch is written here.
    pub log: Option<&'a mut dyn Write>,
    /// Best-validation checkpoint target.
    pub checkpoint_path: Option<&'a Path>,
}

/// Mean Euclidean distance of the model over `samples` (no gradients).
pub fn evaluate_mean_distance(
    state: &ModelState,
    samples: &[Sample],
    opts: &ForwardOpts,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate on an empty sample set"));
    }
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new(&state.store);
        let out = forward_on_tape(state, &mut tape, s, opts)?;
        let p = tape.value(out.pred);
        let (dx, dy) = (p[(0, 0)] - s.target.x, p[(0, 1)] - s.target.y);
        total += (dx * dx + dy * dy).sqrt();
    }
    Ok(total / samples.len() as f64)
}

pub fn train(
    state: &mut ModelState,
    train_samples: &[Sample],
    val_samples: &[Sample],
    cfg: &TrainConfig,
    mut sink: TrainSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let fwd = ForwardOpts {
        training: true,
        ablate_function_moe: cfg.ablate_function_moe,
        ablate_persona_moe: cfg.ablate_persona_moe,
        ..Default::default()
    };
    let eval_opts = ForwardOpts {
        ablate_function_moe: cfg.ablate_function_moe,
        ablate_persona_moe: cfg.ablate_persona_moe,
        ..Default::default()
    };

    let mut adam = Adam::new(&state.store, cfg.lr);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_val_dist: f64::INFINITY,
        best_epoch: 0,
        final_lr: cfg.lr,
    };
    let mut indices: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        indices.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_dist = 0.0;
        let mut epoch_entropy = 0.0;
        let mut epoch_activated = 0.0;
        let mut activated_count = 0usize;
        let mut norm_sum = 0.0;
        let mut n_batches = 0usize;

        for batch in indices.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros(state.store.len());
            let inv = 1.0 / batch.len() as f64;
            for (k, &si) in batch.iter().enumerate() {
                let sample = &train_samples[si];
                let mut tape = Tape::new(&state.store);
                let mut opts = fwd.clone();
                opts.dropout_seed = cfg
                    .seed
                    .wrapping_add((epoch as u64) << 32)
                    .wrapping_add((n_batches as u64) << 8)
                    .wrapping_add(k as u64);
                let sl = sample_loss(state, &mut tape, sample, &opts, cfg.entropy_weight)?;
                let loss_value = tape.value(sl.loss)[(0, 0)];
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {loss_value} at epoch {epoch}, batch {n_batches}, \
                         sample `{}` (lr {:.3e}, dist {:.6}, entropy {:.6})",
                        sample.user, adam.lr, sl.dist, sl.entropy
                    )));
                }
                epoch_loss += loss_value;
                epoch_dist += sl.dist;
                epoch_entropy += sl.entropy;
                if let Some(a) = sl.activated {
                    epoch_activated += a;
                    activated_count += 1;
                }
                let scaled = tape.scale(sl.loss, inv);
                grads.accumulate(tape.backward(scaled));
            }
            norm_sum += clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut state.store, &grads);
            n_batches += 1;
        }

        let n = train_samples.len() as f64;
        let val_dist = if val_samples.is_empty() {
            epoch_dist / n
        } else {
            evaluate_mean_distance(state, val_samples, &eval_opts)?
        };
        let stats = EpochStats {
            epoch,
            lr: adam.lr,
            train_loss: epoch_loss / n,
            train_dist: epoch_dist / n,
            train_entropy: epoch_entropy / n,
            val_dist,
            grad_norm: norm_sum / n_batches.max(1) as f64,
            activated_mean: if activated_count > 0 {
                epoch_activated / activated_count as f64
            } else {
                0.0
            },
        };
        if let Some(log) = sink.log.as_mut() {
            let line = serde_json::to_string(&stats)?;
            writeln!(log, "{line}")?;
        }
        if val_dist < report.best_val_dist {
            report.best_val_dist = val_dist;
            report.best_epoch = epoch;
            if let Some(path) = sink.checkpoint_path {
                save_checkpoint(state, path)?;
            }
        }
        adam.lr = plateau.step(val_dist, adam.lr);
        report.final_lr = adam.lr;
        report.epochs.push(stats);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_param: String,
}

/// Compare analytic gradients against central finite differences on one
/// sample. Routing selections are frozen to the reference forward's choices
/// so the loss surface stays smooth under perturbation. Checks up to
/// `max_probes` trainable scalars (all of them if the budget allows).
pub fn gradient_check(
    state: &mut ModelState,
    sample: &Sample,
    entropy_weight: f64,
    eps: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    // Pin the discrete routing decisions.
    let (_, trace) = crate::backbone::predict(state, sample)?;
    let overrides = RoutingOverride {
        function_selection: Some(trace.function.iter().map(|f| f.selected.clone()).collect()),
        user_selection: Some(trace.user.iter().map(|u| u.selected.clone()).collect()),
        ..Default::default()
    };
    let opts = ForwardOpts {
        overrides: Some(overrides),
        ..Default::default()
    };

    let mut tape = Tape::new(&state.store);
    let sl = sample_loss(state, &mut tape, sample, &opts, entropy_weight)?;
    let grads = tape.backward(sl.loss);

    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    let ids: Vec<ParamId> = state.store.ids().collect();
    for id in &ids {
        if state.store.is_trainable(*id) {
            for flat in 0..state.store.value(*id).len() {
                probes.push((*id, flat));
            }
        }
    }
    if probes.len() > max_probes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        probes.shuffle(&mut rng);
        probes.truncate(max_probes);
    }

    let loss_at = |state: &ModelState| -> Result<f64> {
        let mut tape = Tape::new(&state.store);
        let sl = sample_loss(state, &mut tape, sample, &opts, entropy_weight)?;
        Ok(tape.value(sl.loss)[(0, 0)])
    };

    let mut worst = (0.0f64, String::new());
    for (id, flat) in &probes {
        let cols = state.store.value(*id).ncols();
        let pos = (*flat / cols, *flat % cols);
        let original = state.store.value(*id)[pos];
        let set = |state: &mut ModelState, v: f64| {
            state.store.value_mut(*id)[pos] = v;
        };
        set(state, original + eps);
        let plus = loss_at(state)?;
        set(state, original - eps);
        let minus = loss_at(state)?;
        set(state, original);
        let fd = (plus - minus) / (2.0 * eps);
        let an = grads.get(*id).map(|g| g[pos]).unwrap_or(0.0);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
        if rel > worst.0 {
            worst = (rel, format!("{}[{}]", state.store.name(*id), flat));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        checked: probes.len(),
        worst_param: worst.1,
    })
}
