#![allow(dead_code)]

use confu::nets::{forward_all, init_model, pair_index, ModelBundle, ModelConfig, PAIRS};
use confu::objectives::{objective_loss, Direction, ObjectiveKind};
use confu::rng::{substream, MASK};
use confu::tensor::{Tape, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = substream(seed, "test/gaussian");
    let data = (0..rows * cols)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn gaussian_batch(n: usize, d: usize, seed: u64) -> [Tensor; 3] {
    [0, 1, 2].map(|m| gaussian(n, d, seed.wrapping_mul(3).wrapping_add(m)))
}

pub fn bundle(
    d: usize,
    hidden: usize,
    embed: usize,
    seed: u64,
    kind: ObjectiveKind,
) -> ModelBundle {
    let mut b = init_model(&ModelConfig::symmetric(d, hidden, embed), seed).unwrap();
    b.objective = kind;
    b
}

pub struct LossEval {
    pub total: f64,
    pub grads: Vec<Tensor>,
    pub pair: Option<[f64; 3]>,
    pub fused: Option<[f64; 3]>,
}

/// One training-mode forward/backward pass with the mask disabled.
pub fn loss_and_grads(
    bundle: &ModelBundle,
    kind: ObjectiveKind,
    lambda: f64,
    batch: &[Tensor; 3],
    dir: Direction,
) -> LossEval {
    let mut tape = Tape::new();
    let model = bundle.bind(&mut tape, true);
    let mut rng = substream(0, MASK);
    let e = forward_all(
        bundle,
        &model,
        &mut tape,
        [&batch[0], &batch[1], &batch[2]],
        true,
        &mut rng,
    )
    .unwrap();
    let scale = bundle.critic.scale_var(&mut tape, model.log_scale);
    let out = objective_loss(&mut tape, &e, kind, lambda, scale, dir).unwrap();
    let total = tape.value(out.total).item();
    let pair = out
        .confu
        .as_ref()
        .map(|t| t.pair.map(|v| tape.value(v).item()));
    let fused = out
        .confu
        .as_ref()
        .map(|t| t.fused.map(|v| tape.value(v).item()));
    let mut g = tape.backward(out.total).unwrap();
    let grads = model.vars().into_iter().map(|v| g.take(v)).collect();
    LossEval {
        total,
        grads,
        pair,
        fused,
    }
}

pub fn loss(bundle: &ModelBundle, kind: ObjectiveKind, lambda: f64, batch: &[Tensor; 3]) -> f64 {
    loss_and_grads(bundle, kind, lambda, batch, Direction::Symmetric).total
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    /// Relative error over entries with `max(|analytic|, |numeric|) >= 1e-5`,
    /// regardless of the floor.
    pub max_rel_significant: f64,
    pub checked: usize,
    /// Entries whose absolute disagreement exceeded the floor.
    pub above_floor: usize,
}

/// Compares every parameter gradient with central differences. An entry
/// passes when the absolute gap is at most `floor` or the relative gap is
/// below the caller's tolerance; `max_rel` is taken over entries above the
/// floor.
pub fn grad_check(
    bundle: &ModelBundle,
    kind: ObjectiveKind,
    lambda: f64,
    batch: &[Tensor; 3],
    eps: f64,
    floor: f64,
) -> GradCheck {
    let analytic = loss_and_grads(bundle, kind, lambda, batch, Direction::Symmetric).grads;
    let mut work = bundle.clone();
    let mut out = GradCheck {
        max_rel: 0.0,
        max_rel_significant: 0.0,
        checked: 0,
        above_floor: 0,
    };
    for (p, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = work.params_mut()[p].data()[i];
            work.params_mut()[p].data_mut()[i] = orig + eps;
            let up = loss(&work, kind, lambda, batch);
            work.params_mut()[p].data_mut()[i] = orig - eps;
            let down = loss(&work, kind, lambda, batch);
            work.params_mut()[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = g.data()[i];
            let gap = (a - numeric).abs();
            out.checked += 1;
            let mag = a.abs().max(numeric.abs());
            if mag >= 1e-5 {
                out.max_rel_significant = out.max_rel_significant.max(gap / mag);
            }
            if gap > floor {
                out.above_floor += 1;
                out.max_rel = out.max_rel.max(gap / a.abs().max(numeric.abs()));
            }
        }
    }
    out
}

/// Relabels modalities: new slot `s` holds old modality `sigma[s]`. Fusion
/// networks follow their pair, and a pair whose order flips gets its
/// first-layer input halves swapped so it sees the same features.
pub fn permute_bundle(b: &ModelBundle, sigma: [usize; 3]) -> ModelBundle {
    let mut out = b.clone();
    for (s, &old) in sigma.iter().enumerate() {
        out.encoders[s] = b.encoders[old].clone();
        out.projectors[s] = b.projectors[old].clone();
        out.config.encoders[s] = b.config.encoders[old].clone();
        out.config.projectors[s] = b.config.projectors[old].clone();
    }
    for (k, &(a, c)) in PAIRS.iter().enumerate() {
        let (oa, oc) = (sigma[a], sigma[c]);
        let src = pair_index(oa.min(oc), oa.max(oc)).unwrap();
        let mut net = b.fusions[src].clone();
        if oa > oc {
            let w = &net.layers[0].weight;
            let (rows, cols) = (w.rows(), w.cols());
            let half = rows / 2;
            let mut data = Vec::with_capacity(rows * cols);
            for r in (half..rows).chain(0..half) {
                data.extend_from_slice(w.row(r));
            }
            net.layers[0].weight = Tensor::from_vec(rows, cols, data).unwrap();
        }
        out.fusions[k] = net;
        out.config.fusions[k] = b.config.fusions[src].clone();
    }
    out
}

pub fn permute_batch(batch: &[Tensor; 3], sigma: [usize; 3]) -> [Tensor; 3] {
    sigma.map(|m| batch[m].clone())
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
