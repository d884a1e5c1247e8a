//! Linear classifiers on frozen codewords.

use crate::config::ClassifyConfig;
use crate::error::{Error, Result};

/// Scales every row to unit Euclidean length; zero rows stay zero.
pub fn l2_normalize(rows: &mut [Vec<f64>]) {
    for r in rows {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn check_inputs(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Usage(format!("{} feature rows for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Usage("feature rows must share a positive width".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Usage(format!("label {bad} out of range for {classes} classes")));
    }
    let mut present = vec![false; classes];
    y.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Usage("training split holds a single class".into()));
    }
    Ok(d)
}

/// One-vs-rest hinge-loss classifier trained by full-batch subgradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    /// Per class: `d` weights followed by the bias.
    pub weights: Vec<Vec<f64>>,
}

impl LinearSvm {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ClassifyConfig) -> Result<Self> {
        let d = check_inputs(x, y, classes)?;
        if !(cfg.lambda >= 0.0 && cfg.step > 0.0) || cfg.iterations == 0 {
            return Err(Error::Config("classifier needs lambda >= 0, step > 0 and iterations > 0".into()));
        }
        let n = x.len() as f64;
        let weights = (0..classes)
            .map(|c| {
                let sign = |i: usize| if y[i] == c { 1.0 } else { -1.0 };
                let mut w = vec![0.0; d + 1];
                let mut best = (f64::INFINITY, w.clone());
                let mut grad = vec![0.0; d + 1];
                for t in 1..=cfg.iterations {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let mut hinge = 0.0;
                    for (i, xi) in x.iter().enumerate() {
                        let s = sign(i);
                        let margin = s * (dot(&w[..d], xi) + w[d]);
                        if margin < 1.0 {
                            hinge += 1.0 - margin;
                            grad[..d].iter_mut().zip(xi).for_each(|(g, v)| *g -= s * v);
                            grad[d] -= s;
                        }
                    }
                    let reg = 0.5 * cfg.lambda * dot(&w[..d], &w[..d]);
                    let objective = reg + hinge / n;
                    if objective < best.0 {
                        best = (objective, w.clone());
                    }
                    let eta = cfg.step / (t as f64).sqrt();
                    for k in 0..d {
                        w[k] -= eta * (cfg.lambda * w[k] + grad[k] / n);
                    }
                    w[d] -= eta * grad[d] / n;
                }
                best.1
            })
            .collect();
        Ok(LinearSvm { weights })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let d = x.len();
        argmax(self.weights.iter().map(|w| dot(&w[..d], x) + w[d]))
    }
}

/// Assigns each sample to the class with the nearest mean feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    pub centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<Self> {
        let d = check_inputs(x, y, classes)?;
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (xi, &l) in x.iter().zip(y) {
            sums[l].iter_mut().zip(xi).for_each(|(s, v)| *s += v);
            counts[l] += 1;
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(NearestCentroid { centroids })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(self.centroids.iter().map(|c| match c {
            Some(c) => -c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            None => f64::NEG_INFINITY,
        }))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First index of the largest score.
fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Two-sided 99% normal-approximation band around the chance rate `p` for
/// `n` test samples.
pub fn chance_band(p: f64, n: usize) -> f64 {
    2.576 * (p * (1.0 - p) / n.max(1) as f64).sqrt()
}
