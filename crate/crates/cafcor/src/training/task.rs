//! Training tasks with exact gradients.
//!
//! Three objectives cover the regimes the schedules care about: a diagonal
//! quadratic (known strong convexity, curvature, and closed-form minimum),
//! softmax regression with L2 regularization (convex, smoothness bounded by
//! the feature norms), and a one-hidden-layer tanh network (nonconvex).

use crate::linalg;
use crate::rng::{domain, KeyedStream};

/// One data point: features plus a class label (ignored by regression-style
/// objectives).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

pub type Dataset = Vec<Example>;

/// A differentiable per-example loss over a flat parameter vector.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    /// Loss of one example; when `grad` is given, the example gradient is
    /// accumulated into it.
    fn example_loss_grad(&self, theta: &[f64], ex: &Example, grad: Option<&mut [f64]>) -> f64;

    /// Predicted class, for classification objectives.
    fn predict(&self, _theta: &[f64], _ex: &Example) -> Option<usize> {
        None
    }

    /// Number of classes, when labels are meaningful.
    fn classes(&self) -> Option<usize> {
        None
    }

    /// Smoothness constant of the honest loss, when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    /// Strong-convexity constant, when known.
    fn strong_convexity(&self) -> Option<f64> {
        None
    }

    /// Infimum of the honest loss over the given datasets, when the task
    /// can produce it (closed form or deterministic offline solve).
    fn loss_star(&self, _honest: &[Dataset]) -> Option<f64> {
        None
    }
}

/// Mean loss and gradient of the averaged per-worker empirical losses.
pub fn honest_loss_grad(
    objective: &dyn Objective,
    honest: &[Dataset],
    theta: &[f64],
) -> (f64, Vec<f64>) {
    let d = objective.dim();
    let mut total_loss = 0.0;
    let mut total_grad = vec![0.0; d];
    let mut worker_grad = vec![0.0; d];
    for data in honest {
        worker_grad.iter_mut().for_each(|g| *g = 0.0);
        let mut worker_loss = 0.0;
        for ex in data {
            worker_loss += objective.example_loss_grad(theta, ex, Some(&mut worker_grad));
        }
        let inv_m = 1.0 / data.len() as f64;
        total_loss += worker_loss * inv_m;
        linalg::axpy(&mut total_grad, inv_m, &worker_grad);
    }
    let inv_h = 1.0 / honest.len() as f64;
    linalg::scale(&mut total_grad, inv_h);
    (total_loss * inv_h, total_grad)
}

/// Fraction of examples whose predicted class matches the label.
pub fn accuracy(objective: &dyn Objective, theta: &[f64], data: &Dataset) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    for ex in data {
        match objective.predict(theta, ex) {
            Some(c) if c == ex.y => hits += 1,
            Some(_) => {}
            None => return None,
        }
    }
    Some(hits as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Quadratic task
// ---------------------------------------------------------------------------

/// Per-example loss `0.5 (theta - x)^T A (theta - x)` with a shared diagonal
/// `A`; the honest loss is strongly convex with exactly known constants and
/// a closed-form minimum.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    curvature: Vec<f64>,
}

impl QuadraticTask {
    pub fn new(curvature: Vec<f64>) -> Self {
        assert!(!curvature.is_empty());
        assert!(curvature.iter().all(|a| *a > 0.0));
        Self { curvature }
    }

    /// Evenly spaced curvature between `mu` and `l`.
    pub fn with_spectrum(d: usize, mu: f64, l: f64) -> Self {
        assert!(d >= 1 && mu > 0.0 && l >= mu);
        let curvature = (0..d)
            .map(|i| {
                if d == 1 {
                    mu
                } else {
                    mu + (l - mu) * i as f64 / (d - 1) as f64
                }
            })
            .collect();
        Self::new(curvature)
    }

    /// Minimizer of the honest loss: the mean of worker-mean points.
    pub fn minimizer(&self, honest: &[Dataset]) -> Vec<f64> {
        let d = self.curvature.len();
        let mut out = vec![0.0; d];
        for data in honest {
            let mut worker_mean = vec![0.0; d];
            for ex in data {
                linalg::axpy(&mut worker_mean, 1.0, &ex.x);
            }
            linalg::axpy(&mut out, 1.0 / data.len() as f64, &worker_mean);
        }
        linalg::scale(&mut out, 1.0 / honest.len() as f64);
        out
    }
}

impl Objective for QuadraticTask {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    #[allow(clippy::needless_range_loop)]
    fn example_loss_grad(&self, theta: &[f64], ex: &Example, grad: Option<&mut [f64]>) -> f64 {
        let mut loss = 0.0;
        if let Some(g) = grad {
            for k in 0..self.curvature.len() {
                let diff = theta[k] - ex.x[k];
                loss += 0.5 * self.curvature[k] * diff * diff;
                g[k] += self.curvature[k] * diff;
            }
        } else {
            for k in 0..self.curvature.len() {
                let diff = theta[k] - ex.x[k];
                loss += 0.5 * self.curvature[k] * diff * diff;
            }
        }
        loss
    }

    fn smoothness(&self) -> Option<f64> {
        self.curvature.iter().copied().reduce(f64::max)
    }

    fn strong_convexity(&self) -> Option<f64> {
        self.curvature.iter().copied().reduce(f64::min)
    }

    fn loss_star(&self, honest: &[Dataset]) -> Option<f64> {
        let theta_star = self.minimizer(honest);
        Some(honest_loss_grad(self, honest, &theta_star).0)
    }
}

// ---------------------------------------------------------------------------
// Softmax regression
// ---------------------------------------------------------------------------

/// Multinomial logistic regression with bias terms and L2 regularization.
#[derive(Debug, Clone)]
pub struct LogisticTask {
    classes: usize,
    features: usize,
    l2: f64,
    /// Largest squared norm of an augmented feature vector, set from data;
    /// drives the smoothness bound `L <= 0.5 max ||x~||^2 + l2`.
    max_feature_sq: f64,
}

impl LogisticTask {
    pub fn new(classes: usize, features: usize, l2: f64, data: &[&Dataset]) -> Self {
        assert!(classes >= 2 && features >= 1 && l2 >= 0.0);
        let mut max_feature_sq = 1.0f64;
        for ds in data {
            for ex in ds.iter() {
                max_feature_sq = max_feature_sq.max(linalg::norm_sq(&ex.x) + 1.0);
            }
        }
        Self {
            classes,
            features,
            l2,
            max_feature_sq,
        }
    }

    fn block(&self) -> usize {
        self.features + 1
    }

    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let b = self.block();
        (0..self.classes)
            .map(|c| {
                let row = &theta[c * b..(c + 1) * b];
                linalg::dot(&row[..self.features], x) + row[self.features]
            })
            .collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - max)).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Deterministic offline minimization of the honest loss (Nesterov
    /// descent with fixed step), run until the gradient norm drops to the
    /// requested tolerance.
    pub fn solve_offline(
        &self,
        honest: &[Dataset],
        tol: f64,
        max_iters: usize,
    ) -> Option<(Vec<f64>, f64)> {
        let l = self.smoothness()?;
        let step = 1.0 / l;
        let mut theta = vec![0.0; self.dim()];
        let mut lookahead = theta.clone();
        let mut momentum = 0.0f64;
        for _ in 0..max_iters {
            let (_, grad) = honest_loss_grad(self, honest, &lookahead);
            if linalg::norm(&grad) <= tol {
                let loss = honest_loss_grad(self, honest, &lookahead).0;
                return Some((lookahead, loss));
            }
            let mut next = lookahead.clone();
            linalg::axpy(&mut next, -step, &grad);
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let blend = (momentum - 1.0) / next_momentum;
            let mut new_lookahead = next.clone();
            for k in 0..new_lookahead.len() {
                new_lookahead[k] += blend * (next[k] - theta[k]);
            }
            theta = next;
            lookahead = new_lookahead;
            momentum = next_momentum;
        }
        None
    }
}

impl Objective for LogisticTask {
    fn dim(&self) -> usize {
        self.classes * self.block()
    }

    fn example_loss_grad(&self, theta: &[f64], ex: &Example, grad: Option<&mut [f64]>) -> f64 {
        let probs = Self::softmax(&self.logits(theta, &ex.x));
        let b = self.block();
        let mut loss = -libm::log(probs[ex.y].max(1e-300));
        if self.l2 > 0.0 {
            loss += 0.5 * self.l2 * linalg::norm_sq(theta);
        }
        if let Some(g) = grad {
            for c in 0..self.classes {
                let coef = probs[c] - if c == ex.y { 1.0 } else { 0.0 };
                let row = &mut g[c * b..(c + 1) * b];
                linalg::axpy(&mut row[..self.features], coef, &ex.x);
                row[self.features] += coef;
            }
            if self.l2 > 0.0 {
                linalg::axpy(g, self.l2, theta);
            }
        }
        loss
    }

    fn predict(&self, theta: &[f64], ex: &Example) -> Option<usize> {
        let logits = self.logits(theta, &ex.x);
        let mut best = 0usize;
        for c in 1..self.classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        Some(best)
    }

    fn classes(&self) -> Option<usize> {
        Some(self.classes)
    }

    fn smoothness(&self) -> Option<f64> {
        Some(0.5 * self.max_feature_sq + self.l2)
    }

    fn strong_convexity(&self) -> Option<f64> {
        (self.l2 > 0.0).then_some(self.l2)
    }

    fn loss_star(&self, honest: &[Dataset]) -> Option<f64> {
        self.solve_offline(honest, 1e-10, 200_000).map(|(_, l)| l)
    }
}

// ---------------------------------------------------------------------------
// One-hidden-layer network
// ---------------------------------------------------------------------------

/// Tanh network with a softmax head; gradients derived by hand. Nonconvex,
/// so no curvature constants and no reachable infimum are reported.
#[derive(Debug, Clone)]
pub struct MlpTask {
    features: usize,
    hidden: usize,
    classes: usize,
}

impl MlpTask {
    pub fn new(features: usize, hidden: usize, classes: usize) -> Self {
        assert!(features >= 1 && hidden >= 1 && classes >= 2);
        Self {
            features,
            hidden,
            classes,
        }
    }

    fn split(&self) -> (usize, usize, usize, usize) {
        let w1 = self.hidden * self.features;
        let b1 = self.hidden;
        let w2 = self.classes * self.hidden;
        let b2 = self.classes;
        (w1, b1, w2, b2)
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, _) = self.split();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &theta[j * self.features..(j + 1) * self.features];
                libm::tanh(linalg::dot(row, x) + theta[w1 + j])
            })
            .collect();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &theta[w1 + b1 + c * self.hidden..w1 + b1 + (c + 1) * self.hidden];
                linalg::dot(row, &hidden) + theta[w1 + b1 + w2 + c]
            })
            .collect();
        (hidden, logits)
    }

    /// Deterministic small random initialization.
    pub fn init_theta(&self, seed: u64) -> Vec<f64> {
        let mut stream = KeyedStream::new(&[domain::TASK, seed, 0x6d6c70], 0);
        (0..self.dim())
            .map(|_| 0.1 * stream.standard_normal())
            .collect()
    }
}

impl Objective for MlpTask {
    fn dim(&self) -> usize {
        let (w1, b1, w2, b2) = self.split();
        w1 + b1 + w2 + b2
    }

    fn example_loss_grad(&self, theta: &[f64], ex: &Example, grad: Option<&mut [f64]>) -> f64 {
        let (w1, b1, w2, _) = self.split();
        let (hidden, logits) = self.forward(theta, &ex.x);
        let probs = LogisticTask::softmax(&logits);
        let loss = -libm::log(probs[ex.y].max(1e-300));
        if let Some(g) = grad {
            let dz2: Vec<f64> = (0..self.classes)
                .map(|c| probs[c] - if c == ex.y { 1.0 } else { 0.0 })
                .collect();
            let mut da1 = vec![0.0; self.hidden];
            for c in 0..self.classes {
                let row = &theta[w1 + b1 + c * self.hidden..w1 + b1 + (c + 1) * self.hidden];
                let grow = &mut g[w1 + b1 + c * self.hidden..w1 + b1 + (c + 1) * self.hidden];
                for j in 0..self.hidden {
                    grow[j] += dz2[c] * hidden[j];
                    da1[j] += dz2[c] * row[j];
                }
                g[w1 + b1 + w2 + c] += dz2[c];
            }
            for j in 0..self.hidden {
                let dz1 = da1[j] * (1.0 - hidden[j] * hidden[j]);
                let grow = &mut g[j * self.features..(j + 1) * self.features];
                linalg::axpy(grow, dz1, &ex.x);
                g[w1 + j] += dz1;
            }
        }
        loss
    }

    fn predict(&self, theta: &[f64], ex: &Example) -> Option<usize> {
        let (_, logits) = self.forward(theta, &ex.x);
        let mut best = 0usize;
        for c in 1..self.classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        Some(best)
    }

    fn classes(&self) -> Option<usize> {
        Some(self.classes)
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Points around per-worker centers, for the quadratic task. Returns the
/// datasets in worker order.
pub fn synthetic_quadratic_data(
    workers: usize,
    points_per_worker: usize,
    d: usize,
    center_spread: f64,
    point_noise: f64,
    seed: u64,
) -> Vec<Dataset> {
    (0..workers)
        .map(|w| {
            let mut stream = KeyedStream::new(&[domain::TASK, seed, w as u64], 0);
            let center: Vec<f64> = (0..d)
                .map(|_| center_spread * stream.standard_normal())
                .collect();
            (0..points_per_worker)
                .map(|_| Example {
                    x: center
                        .iter()
                        .map(|c| c + point_noise * stream.standard_normal())
                        .collect(),
                    y: 0,
                })
                .collect()
        })
        .collect()
}

/// Balanced Gaussian blobs: one prototype per class, examples scattered
/// around it. Labels cycle through the classes so every class has within
/// one example of the same count.
pub fn synthetic_blobs(
    classes: usize,
    features: usize,
    count: usize,
    separation: f64,
    scatter: f64,
    seed: u64,
) -> Dataset {
    assert!(classes >= 2);
    let mut proto_stream = KeyedStream::new(&[domain::TASK, seed, 0x626c6f62], 0);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..features)
                .map(|_| separation * proto_stream.standard_normal())
                .collect()
        })
        .collect();
    let mut stream = KeyedStream::new(&[domain::TASK, seed, 0x626c6f62], 1);
    (0..count)
        .map(|i| {
            let y = i % classes;
            Example {
                x: prototypes[y]
                    .iter()
                    .map(|p| p + scatter * stream.standard_normal())
                    .collect(),
                y,
            }
        })
        .collect()
}
