//! Exact t-SNE (O(N^2) per iteration) with perplexity calibration, early
//! exaggeration, momentum and per-coordinate gains.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::rng::{normal, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    /// `N x 2`, row-major.
    pub points: Vec<[f64; 2]>,
    /// KL(P || Q) after every iteration past the exaggeration phase.
    pub kl_trace: Vec<f64>,
    pub notes: Vec<String>,
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional affinities with per-point precision found by bisection
/// so that each row's entropy equals `ln(perplexity)`.
fn conditional_p(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        let di = &d[i * n..(i + 1) * n];
        let min_d = (0..n).filter(|&j| j != i).map(|j| di[j]).fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(di[j] - min_d) * beta).exp() };
                sum += row[j];
                dot += row[j] * (di[j] - min_d);
            }
            let h = sum.ln() + beta * dot / sum;
            let diff = h - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_infinite() { beta / 2.0 } else { (beta + lo) / 2.0 };
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    p
}

fn kl(p: &[f64], q_num: &[f64], q_sum: f64) -> f64 {
    p.iter()
        .zip(q_num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &qn)| pij * (pij / (qn / q_sum).max(1e-300)).ln())
        .sum()
}

/// Unnormalized Student-t affinities of `y` into `num`; returns their sum.
fn student_t(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut q_sum = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            q_sum += 2.0 * v;
        }
    }
    q_sum
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mean = [y.iter().map(|r| r[0]).sum::<f64>() / n, y.iter().map(|r| r[1]).sum::<f64>() / n];
    for r in y {
        r[0] -= mean[0];
        r[1] -= mean[1];
    }
}

/// Two-dimensional embedding of `x`. Needs at least `3 * perplexity` rows.
pub fn tsne(x: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if (n as f64) < 3.0 * config.perplexity {
        return Err(LensError::Contract(format!(
            "t-SNE with perplexity {} needs at least {} points, got {n}",
            config.perplexity,
            (3.0 * config.perplexity).ceil()
        )));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(LensError::Contract("t-SNE input rows must be finite and of equal width".into()));
    }
    let mut notes = Vec::new();
    let mut d = sq_dists(x);
    let duplicates = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| d[i * n + j] == 0.0).count();
    let mut data: Vec<Vec<f64>> = x.to_vec();
    if duplicates > 0 {
        let mut rng = rng_for(config.seed, "tsne-jitter", 0);
        let scale = d.iter().copied().fold(0.0, f64::max).sqrt().max(1.0) * 1e-6;
        for row in &mut data {
            for v in row.iter_mut() {
                *v += normal(&mut rng, scale);
            }
        }
        d = sq_dists(&data);
        notes.push(format!("{duplicates} duplicate pairs; jitter of scale {scale:.1e} applied"));
    }
    let cond = conditional_p(&d, n, config.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }
    drop(cond);
    drop(d);

    let mut rng = rng_for(config.seed, "tsne-init", 0);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal(&mut rng, 1e-4), normal(&mut rng, 1e-4)]).collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::new();
    let mut restarts = 0usize;
    for it in 0..config.iterations {
        let exag = if it < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let mom = if it < config.exaggeration_iters { config.momentum } else { config.final_momentum };
        let q_sum = student_t(&y, &mut num);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * p[i * n + j] - w / q_sum) * w;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        let before = y.clone();
        for i in 0..n {
            for c in 0..2 {
                let same_sign = (grad[i][c] > 0.0) == (vel[i][c] > 0.0);
                gains[i][c] = if same_sign { (gains[i][c] * 0.8).max(0.01) } else { gains[i][c] + 0.2 };
                vel[i][c] = mom * vel[i][c] - config.learning_rate * gains[i][c] * grad[i][c];
                y[i][c] += vel[i][c];
            }
        }
        if it + 1 < config.exaggeration_iters {
            center(&mut y);
            continue;
        }
        let q_sum = student_t(&y, &mut num);
        let mut cost = kl(&p, &num, q_sum);
        if let Some(&last) = kl_trace.last() {
            if cost > last {
                // Past exaggeration the cost is the true KL: reject a momentum
                // step that raised it, restart from rest and backtrack a plain
                // gradient step until the cost no longer rises.
                restarts += 1;
                vel.iter_mut().for_each(|v| *v = [0.0; 2]);
                gains.iter_mut().for_each(|g| *g = [1.0; 2]);
                let mut step = config.learning_rate;
                y.clone_from(&before);
                cost = last;
                for _ in 0..60 {
                    let trial: Vec<[f64; 2]> =
                        before.iter().zip(&grad).map(|(b, g)| [b[0] - step * g[0], b[1] - step * g[1]]).collect();
                    let q_sum = student_t(&trial, &mut num);
                    let c = kl(&p, &num, q_sum);
                    if c <= last {
                        y = trial;
                        cost = c;
                        break;
                    }
                    step /= 2.0;
                }
            }
        }
        center(&mut y);
        kl_trace.push(cost);
    }
    if restarts > 0 {
        notes.push(format!("{restarts} momentum restarts after a rise in KL"));
    }
    Ok(TsneResult { points: y, kl_trace, notes })
}

/// Share of points whose nearest other point carries the same label.
pub fn nn_purity<L: PartialEq>(points: &[[f64; 2]], labels: &[L]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let mut same = 0;
    for i in 0..n {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2);
            if d < best.1 {
                best = (j, d);
            }
        }
        if labels[best.0] == labels[i] {
            same += 1;
        }
    }
    same as f64 / n as f64
}

/// 1-NN purity in the original space (reference for the embedding's).
pub fn nn_purity_high<L: PartialEq>(x: &[Vec<f64>], labels: &[L]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 1.0;
    }
    let d = sq_dists(x);
    let mut same = 0;
    for i in 0..n {
        let j = (0..n).filter(|&j| j != i).min_by(|&a, &b| d[i * n + a].total_cmp(&d[i * n + b])).unwrap_or(i);
        if labels[j] == labels[i] {
            same += 1;
        }
    }
    same as f64 / n as f64
}
