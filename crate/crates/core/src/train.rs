//! Mini-batch training with AdamW and a cosine learning-rate schedule.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, RetrievalResult, RetrievalSpec};
use crate::io::write_atomic;
use crate::nets::{forward_all, ModelBundle};
use crate::objectives::{check_lambda, objective_loss, Direction, LossBreakdown, ObjectiveKind};
use crate::rng::{self, substream};
use crate::synth::TripletDataset;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub objective: ObjectiveKind,
    pub direction: Direction,
    pub seed: u64,
    /// Epochs between evaluation passes; 0 evaluates only after training.
    pub eval_every: usize,
    /// Global gradient-norm clamp; off when `None`.
    pub clip_grad_norm: Option<f64>,
    /// Return the parameters of the epoch with the lowest mean training loss
    /// instead of the final ones.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_min: 1e-6,
            lambda: 0.5,
            mask_ratio: 0.0,
            objective: ObjectiveKind::Confu,
            direction: Direction::Symmetric,
            seed: 0,
            eval_every: 0,
            clip_grad_norm: None,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..=self.learning_rate).contains(&self.lr_min) {
            return Err(Error::config(
                "train.lr_min",
                "must lie in [0, learning_rate]",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        check_lambda(self.lambda)
            .map_err(|_| Error::config("train.lambda", "must lie in [0, 1]"))?;
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("train.mask_ratio", "must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("train.clip_grad_norm", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`; steps past the end
/// stay at `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if total_steps == 0 && step == 0 {
            lr_max
        } else {
            lr_min
        };
    }
    let t = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update. Weight decay multiplies the weights by
/// `1 − lr·weight_decay` directly; `decay[i] = false` exempts parameter `i`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
    decay: &[bool],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay.len() != n {
        return Err(Error::contract(format!(
            "adamw: {n} params, {} grads, {} moments, {} decay flags",
            grads.len(),
            state.m.len(),
            decay.len()
        )));
    }
    for i in 0..n {
        let s = params[i].shape();
        if grads[i].shape() != s || state.m[i].shape() != s || state.v[i].shape() != s {
            return Err(Error::contract(format!(
                "adamw: parameter {i} has shape {s:?} but grad {:?}",
                grads[i].shape()
            )));
        }
    }
    state.t += 1;
    let AdamHyper {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
    } = *hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..n {
        let shrink = if decay[i] {
            1.0 - lr * weight_decay
        } else {
            1.0
        };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, &g) in grads[i].data().iter().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] = p[k] * shrink - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let f = max / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= f;
            }
        }
    }
    norm
}

/// One optimizer step as written to the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Rows in this batch; the last batch of an epoch may be short.
    pub batch_rows: usize,
    pub scale: f64,
    pub total: f64,
    /// ConFu family only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<LossBreakdown>,
    /// Per-anchor substitution losses of the triplet baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor_terms: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub metrics: Vec<EvalMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetric {
    pub target: usize,
    pub queries: Vec<usize>,
    pub pool_size: usize,
    pub metric: String,
    pub value: f64,
    pub chance: f64,
}

impl From<&RetrievalResult> for EvalMetric {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            target: r.spec.target,
            queries: r.spec.queries.clone(),
            pool_size: r.spec.pool_size,
            metric: r.spec.metric.to_string(),
            value: r.value,
            chance: r.chance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Wall-clock seconds per epoch. Not part of the trace.
    pub epoch_seconds: Vec<f64>,
    pub final_checksum: String,
    /// Set when `keep_best` picked an earlier epoch.
    pub best_epoch: Option<usize>,
    /// Results of the last evaluation pass.
    pub final_eval: Vec<RetrievalResult>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

impl TrainReport {
    /// JSONL trace: step records, with eval records placed after the last
    /// step of the epoch they follow. Contains no timings, so identical runs
    /// produce identical bytes.
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        let push = |line: TraceLine<'_>, out: &mut String| -> Result<()> {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
            Ok(())
        };
        while let Some(e) = evals.next_if(|e| e.epoch == 0) {
            push(TraceLine::Eval(e), &mut out)?;
        }
        for (i, s) in self.steps.iter().enumerate() {
            push(TraceLine::Step(s), &mut out)?;
            let epoch_done = self.steps.get(i + 1).is_none_or(|n| n.epoch != s.epoch);
            if epoch_done {
                while let Some(e) = evals.next_if(|e| e.epoch == s.epoch + 1) {
                    push(TraceLine::Eval(e), &mut out)?;
                }
            }
        }
        for e in evals {
            push(TraceLine::Eval(e), &mut out)?;
        }
        Ok(out)
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.trace_jsonl()?.as_bytes())
    }
}

/// Held-out data and retrieval specs evaluated during training.
pub struct EvalHook<'a> {
    pub data: &'a TripletDataset,
    pub specs: &'a [RetrievalSpec],
}

pub fn train(
    bundle: ModelBundle,
    dataset: &TripletDataset,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    train_with_eval(bundle, dataset, cfg, None)
}

/// Trains `bundle` on `dataset`. The trajectory depends only on the inputs:
/// shuffling and masking draw from substreams of `cfg.seed`.
pub fn train_with_eval(
    mut bundle: ModelBundle,
    dataset: &TripletDataset,
    cfg: &TrainConfig,
    hook: Option<EvalHook<'_>>,
) -> Result<(ModelBundle, TrainReport)> {
    cfg.validate()?;
    let dims = bundle.input_dims();
    if dims.iter().any(|&d| d != dataset.dim()) {
        return Err(Error::config(
            "model.input_dim",
            format!(
                "bundle expects {dims:?} but the dataset has dimension {}",
                dataset.dim()
            ),
        ));
    }
    if let Some(h) = &hook {
        for s in h.specs {
            s.validate()?;
        }
        if h.data.dim() != dataset.dim() {
            return Err(Error::config(
                "eval data",
                "dimension differs from the training data",
            ));
        }
    }
    bundle.lambda = cfg.lambda;
    bundle.mask_ratio = cfg.mask_ratio;
    bundle.objective = cfg.objective;

    let n = dataset.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let total_steps = cfg.epochs * per_epoch;
    let decay = bundle.decay_mask();
    let mut adam = {
        let params = bundle.params_mut();
        let refs: Vec<&Tensor> = params.iter().map(|p| &**p).collect();
        AdamState::new(&refs)
    };
    let mut shuffle_rng = substream(cfg.seed, rng::SHUFFLE);
    let mut mask_rng = substream(cfg.seed, rng::MASK);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut last_good: Option<usize> = None;
    let mut step = 0usize;

    let run_eval = |b: &ModelBundle, epoch: usize, report: &mut TrainReport| -> Result<()> {
        if let Some(h) = &hook {
            let mut eval_bundle = b.clone();
            eval_bundle.mask_ratio = 0.0;
            let rs = evaluate_model(&eval_bundle, h.data, h.specs)?;
            report.evals.push(EvalRecord {
                epoch,
                metrics: rs.iter().map(EvalMetric::from).collect(),
            });
            report.final_eval = rs;
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.learning_rate, cfg.lr_min);
            let batch = dataset.batch(chunk);
            let mut tape = Tape::new();
            let model = bundle.bind(&mut tape, true);
            let e = forward_all(
                &bundle,
                &model,
                &mut tape,
                [&batch[0], &batch[1], &batch[2]],
                true,
                &mut mask_rng,
            )?;
            let scale = bundle.critic.scale_var(&mut tape, model.log_scale);
            let out = objective_loss(
                &mut tape,
                &e,
                cfg.objective,
                cfg.lambda,
                scale,
                cfg.direction,
            )?;
            let total = tape.value(out.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step, last_good });
            }
            let breakdown = match (&out.confu, cfg.objective.confu_lambda(cfg.lambda)) {
                (Some(t), Some(l)) => Some(LossBreakdown::from_terms(&tape, t, l, chunk.len())?),
                _ => None,
            };
            let mut grads = tape.backward(out.total)?;
            let mut gs: Vec<Tensor> = model.vars().into_iter().map(|v| grads.take(v)).collect();
            if let Some(c) = cfg.clip_grad_norm {
                clip_global_norm(&mut gs, c);
            }
            let hyper = AdamHyper::new(lr, cfg.weight_decay);
            adamw_step(&mut bundle.params_mut(), &gs, &mut adam, &hyper, &decay)?;
            if !bundle.all_finite() {
                return Err(Error::NonFiniteLoss { step, last_good });
            }
            report.steps.push(StepRecord {
                step,
                epoch,
                lr,
                batch_rows: chunk.len(),
                scale: tape.value(scale).item(),
                total,
                breakdown,
                anchor_terms: out.anchors.map(|a| a.map(|v| tape.value(v).item())),
            });
            epoch_loss += total * chunk.len() as f64;
            last_good = Some(step);
            step += 1;
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if cfg.keep_best {
            let mean = epoch_loss / n as f64;
            if best.as_ref().is_none_or(|(l, _, _)| mean < *l) {
                best = Some((mean, epoch, bundle.clone()));
            }
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            run_eval(&bundle, epoch + 1, &mut report)?;
        }
    }

    if let Some((_, epoch, b)) = best {
        if epoch + 1 != cfg.epochs {
            report.best_epoch = Some(epoch);
            bundle = b;
        }
    }
    let evaluated_last = report.evals.last().is_some_and(|e| e.epoch == cfg.epochs);
    if hook.is_some() && (!evaluated_last || report.best_epoch.is_some()) {
        run_eval(&bundle, cfg.epochs, &mut report)?;
    }
    report.final_checksum = bundle.checksum();
    Ok((bundle, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_model, ModelConfig};
    use crate::synth::{generate, XorConfig};

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
    }

    fn one_param(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut p = one_param(0.3);
        let mut st = AdamState::new(&[&p]);
        adamw_step(
            &mut [&mut p],
            &[one_param(0.0)],
            &mut st,
            &AdamHyper::new(1e-2, 0.0),
            &[true],
        )
        .unwrap();
        assert_eq!(p.item(), 0.3);
    }

    #[test]
    fn adamw_first_step_is_sign() {
        for g in [2.5, -0.01] {
            let mut p = one_param(1.0);
            let mut st = AdamState::new(&[&p]);
            adamw_step(
                &mut [&mut p],
                &[one_param(g)],
                &mut st,
                &AdamHyper::new(1e-3, 0.0),
                &[true],
            )
            .unwrap();
            assert!((p.item() - (1.0 - 1e-3 * g.signum())).abs() < 1e-9);
        }
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = one_param(2.0);
        let mut st = AdamState::new(&[&p]);
        let h = AdamHyper::new(0.1, 0.5);
        adamw_step(&mut [&mut p], &[one_param(0.0)], &mut st, &h, &[true]).unwrap();
        assert!((p.item() - 2.0 * 0.95).abs() < 1e-15);
        let mut q = one_param(2.0);
        let mut st = AdamState::new(&[&q]);
        adamw_step(&mut [&mut q], &[one_param(0.0)], &mut st, &h, &[false]).unwrap();
        assert_eq!(q.item(), 2.0);
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut p = one_param(1.0);
        let mut st = AdamState::new(&[&p]);
        let e = adamw_step(
            &mut [&mut p],
            &[Tensor::zeros(1, 2)],
            &mut st,
            &AdamHyper::new(1e-3, 0.0),
            &[true],
        );
        assert!(matches!(e, Err(Error::Contract(_))));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    fn tiny() -> (ModelBundle, TripletDataset, TrainConfig) {
        let (tr, _) = generate(&XorConfig {
            d: 3,
            n_train: 40,
            n_test: 10,
            ..XorConfig::default()
        })
        .unwrap();
        let bundle = init_model(&ModelConfig::symmetric(3, 8, 4), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        (bundle, tr, cfg)
    }

    #[test]
    fn zero_epochs_leave_bundle_unchanged() {
        let (b, ds, mut cfg) = tiny();
        cfg.epochs = 0;
        let (out, rep) = train(b.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.checksum(), b.checksum());
        assert!(rep.steps.is_empty());
    }

    #[test]
    fn trace_length_keeps_partial_batch() {
        let (b, ds, cfg) = tiny();
        let (_, rep) = train(b, &ds, &cfg).unwrap();
        assert_eq!(rep.steps.len(), 2 * 3);
        assert_eq!(rep.steps[2].batch_rows, 8);
        assert!(rep.steps[0].breakdown.is_some());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (_, ds, cfg) = tiny();
        let b = init_model(&ModelConfig::symmetric(4, 8, 4), 0).unwrap();
        assert!(matches!(train(b, &ds, &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn runs_are_reproducible() {
        let (b, ds, mut cfg) = tiny();
        cfg.mask_ratio = 0.3;
        let (_, r1) = train(b.clone(), &ds, &cfg).unwrap();
        let (_, r2) = train(b, &ds, &cfg).unwrap();
        assert_eq!(r1.trace_jsonl().unwrap(), r2.trace_jsonl().unwrap());
        assert_eq!(r1.final_checksum, r2.final_checksum);
    }

    #[test]
    fn triclip_matches_confu_at_lambda_zero() {
        let (b, ds, mut cfg) = tiny();
        cfg.lambda = 0.0;
        let (_, a) = train(b.clone(), &ds, &cfg).unwrap();
        cfg.objective = ObjectiveKind::TriClip;
        cfg.lambda = 0.5;
        let (_, t) = train(b, &ds, &cfg).unwrap();
        let totals = |r: &TrainReport| r.steps.iter().map(|s| s.total).collect::<Vec<_>>();
        assert_eq!(totals(&a), totals(&t));
        assert_eq!(a.final_checksum, t.final_checksum);
    }

    #[test]
    fn every_objective_trains() {
        for kind in ObjectiveKind::ALL {
            let (b, ds, mut cfg) = tiny();
            cfg.objective = kind;
            let (out, rep) = train(b, &ds, &cfg).unwrap();
            assert!(out.all_finite());
            assert_eq!(out.objective, kind);
            assert_eq!(
                rep.steps[0].anchor_terms.is_some(),
                kind.confu_lambda(0.5).is_none()
            );
        }
    }

    #[test]
    fn eval_records_follow_epochs() {
        let (b, ds, mut cfg) = tiny();
        cfg.eval_every = 1;
        let mut spec = RetrievalSpec::xor_default();
        spec.pool_size = 4;
        spec.n_pools = 5;
        let specs = [spec];
        let hook = EvalHook {
            data: &ds,
            specs: &specs,
        };
        let (_, rep) = train_with_eval(b, &ds, &cfg, Some(hook)).unwrap();
        assert_eq!(rep.evals.len(), 2);
        let trace = rep.trace_jsonl().unwrap();
        let kinds: Vec<&str> = trace
            .lines()
            .map(|l| {
                if l.contains(r#""type":"eval""#) {
                    "e"
                } else {
                    "s"
                }
            })
            .collect();
        assert_eq!(kinds, ["s", "s", "s", "e", "s", "s", "s", "e"]);
    }
}
