//! Probing classifiers on per-layer embeddings and cross-layer transfer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{roc_auc, MetricError};
use crate::exec::Execution;
use crate::model::{decoder_forward, positive_scores, DecoderWeights, EmbeddingStack, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe training data: {0}")]
    Data(String),
    #[error("embedding width {got} does not match probe width {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Knn,
    Decoder,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Knn => "knn",
            ProbeKind::Decoder => "decoder",
        }
    }
}

fn default_reg() -> f64 {
    1e-4
}
fn default_k() -> usize {
    5
}
fn default_decoder_steps() -> usize {
    100
}
fn default_decoder_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_reg")]
    pub linear_reg: f64,
    #[serde(default = "default_k")]
    pub knn_k: usize,
    #[serde(default = "default_decoder_steps")]
    pub decoder_steps: usize,
    #[serde(default = "default_decoder_lr")]
    pub decoder_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            linear_reg: default_reg(),
            knn_k: default_k(),
            decoder_steps: default_decoder_steps(),
            decoder_lr: default_decoder_lr(),
        }
    }
}

fn check_training(x: &Tensor, y: &[u8]) -> Result<()> {
    if x.shape().len() != 2 || x.rows() != y.len() || y.is_empty() {
        return Err(ProbeError::Data(format!(
            "{:?} embeddings with {} labels",
            x.shape(),
            y.len()
        )));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(ProbeError::Data("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Column mean and standard deviation (population); zero-variance columns
/// get scale 0, so they standardize to all zeros.
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            mean[c] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            var[c] += (v - mean[c]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

/// L2-regularized logistic regression on standardized columns.
///
/// Minimizes `mean log-loss + reg/2·‖w‖²` (the intercept is not penalized)
/// with L-BFGS.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub reg: f64,
    pub iterations: usize,
    pub trained_on_layer: usize,
}

const LBFGS_MEMORY: usize = 10;
const LBFGS_MAX_ITER: usize = 5000;
const LBFGS_TOL: f64 = 1e-10;

impl LinearProbe {
    pub fn fit(x: &Tensor, y: &[u8], reg: f64, layer: usize) -> Result<Self> {
        check_training(x, y)?;
        if !(reg.is_finite() && reg > 0.0) {
            return Err(ProbeError::Data(format!("regularization {reg} must be positive")));
        }
        let (mean, std) = column_stats(x);
        let z = standardize(x, &mean, &std);
        let d = z.cols();
        let objective = |theta: &[f64], grad: &mut [f64]| logistic_objective(&z, y, reg, theta, grad);
        let (theta, iterations) = lbfgs(vec![0.0; d + 1], objective);
        Ok(Self {
            mean,
            std,
            weights: theta[..d].to_vec(),
            intercept: theta[d],
            reg,
            iterations,
            trained_on_layer: layer,
        })
    }

    /// Decision values `w·z + b` of standardized rows.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.weights.len() {
            return Err(ProbeError::Width {
                expected: self.weights.len(),
                got: x.cols(),
            });
        }
        let z = standardize(x, &self.mean, &self.std);
        Ok((0..z.rows())
            .map(|r| dot(z.row(r), &self.weights) + self.intercept)
            .collect())
    }
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for c in 0..d {
            row[c] = if std[c] > 0.0 {
                (row[c] - mean[c]) / std[c]
            } else {
                0.0
            };
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln(1 + e^t)`.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logistic_objective(z: &Tensor, y: &[u8], reg: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let d = z.cols();
    let n = z.rows() as f64;
    let (w, b) = (&theta[..d], theta[d]);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for r in 0..z.rows() {
        let row = z.row(r);
        let t = dot(row, w) + b;
        let yi = y[r] as f64;
        // -[y ln σ(t) + (1-y) ln(1-σ(t))] = softplus(t) - y·t
        loss += softplus(t) - yi * t;
        let e = sigmoid(t) - yi;
        for c in 0..d {
            grad[c] += e * row[c];
        }
        grad[d] += e;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    for c in 0..d {
        loss += 0.5 * reg * w[c] * w[c];
        grad[c] += reg * w[c];
    }
    loss
}

/// Limited-memory BFGS with backtracking (Armijo) line search. Returns the
/// minimizer and the iteration count.
fn lbfgs(mut x: Vec<f64>, f: impl Fn(&[f64], &mut [f64]) -> f64) -> (Vec<f64>, usize) {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut g_new = vec![0.0; n];
    for iter in 0..LBFGS_MAX_ITER {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < LBFGS_TOL {
            return (x, iter);
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alpha = vec![0.0; s_hist.len()];
        for k in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            alpha[k] = rho * dot(&s_hist[k], &q);
            for i in 0..n {
                q[i] -= alpha[k] * y_hist[k][i];
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for k in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            let beta = rho * dot(&y_hist[k], &q);
            for i in 0..n {
                q[i] += (alpha[k] - beta) * s_hist[k][i];
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = if s_hist.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
        let mut x_new = vec![0.0; n];
        let mut f_new;
        loop {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let yv: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &yv);
        if step < 1e-20 && f_new >= fx {
            return (x, iter + 1);
        }
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if sy > 1e-300 {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
    }
    (x, LBFGS_MAX_ITER)
}

/// k-nearest-neighbour probe under Euclidean distance.
///
/// The score of a row is the fraction of positives among its `k` nearest
/// training rows; distance ties go to the lower training index.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnProbe {
    pub k: usize,
    pub train_x: Tensor,
    pub train_y: Vec<u8>,
    pub trained_on_layer: usize,
}

#[derive(PartialEq)]
struct Neighbor {
    dist: f64,
    index: usize,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl KnnProbe {
    pub fn fit(x: &Tensor, y: &[u8], k: usize, layer: usize) -> Result<Self> {
        check_training(x, y)?;
        if k == 0 {
            return Err(ProbeError::Data("k must be at least 1".into()));
        }
        Ok(Self {
            k: k.min(y.len()),
            train_x: x.clone(),
            train_y: y.to_vec(),
            trained_on_layer: layer,
        })
    }

    /// Training indices of the `k` nearest rows to `point`, nearest first.
    pub fn neighbors(&self, point: &[f64]) -> Vec<usize> {
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(self.k + 1);
        for i in 0..self.train_x.rows() {
            let dist: f64 = self
                .train_x
                .row(i)
                .iter()
                .zip(point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let cand = Neighbor { dist, index: i };
            if heap.len() < self.k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("k >= 1") {
                heap.pop();
                heap.push(cand);
            }
        }
        heap.into_sorted_vec().into_iter().map(|n| n.index).collect()
    }

    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.train_x.cols() {
            return Err(ProbeError::Width {
                expected: self.train_x.cols(),
                got: x.cols(),
            });
        }
        Ok((0..x.rows())
            .map(|r| {
                let nn = self.neighbors(x.row(r));
                let pos = nn.iter().filter(|&&i| self.train_y[i] == 1).count();
                pos as f64 / nn.len() as f64
            })
            .collect())
    }
}

/// A copy of the model's decoder fine-tuned on one layer's embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderProbe {
    pub decoder: DecoderWeights,
    /// Probe-train loss before each update.
    pub losses: Vec<f64>,
    pub trained_on_layer: usize,
}

impl DecoderProbe {
    /// Full-batch Adam on cross-entropy; `steps = 0` keeps the decoder
    /// unchanged.
    pub fn fit(
        decoder: &DecoderWeights,
        x: &Tensor,
        y: &[u8],
        steps: usize,
        lr: f64,
        layer: usize,
    ) -> Result<Self> {
        check_training(x, y)?;
        if x.cols() != decoder.input_dim() {
            return Err(ProbeError::Width {
                expected: decoder.input_dim(),
                got: x.cols(),
            });
        }
        let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
        let mut params = decoder.clone();
        let mut m: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut v = m.clone();
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut tape = Tape::new();
            let vars: [Var; 6] = std::array::from_fn(|i| tape.leaf(params.tensors[i].clone(), true));
            let h = tape.constant(x.clone());
            let logits = decoder_forward(&mut tape, &vars, h)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            losses.push(tape.value(loss).data()[0]);
            tape.backward(loss)?;
            let t = (step + 1) as i32;
            let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
            for (k, var) in vars.iter().enumerate() {
                let g = tape.grad(*var).expect("leaf requires grad");
                for (i, (p, gi)) in params.tensors[k].data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[k][i] = b1 * m[k][i] + (1.0 - b1) * gi;
                    v[k][i] = b2 * v[k][i] + (1.0 - b2) * gi * gi;
                    *p -= lr * (m[k][i] / c1) / ((v[k][i] / c2).sqrt() + eps);
                }
            }
        }
        Ok(Self {
            decoder: params,
            losses,
            trained_on_layer: layer,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.decoder.input_dim() {
            return Err(ProbeError::Width {
                expected: self.decoder.input_dim(),
                got: x.cols(),
            });
        }
        Ok(self.decoder.decode(x)?)
    }

    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(positive_scores(&self.logits(x)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    Linear(LinearProbe),
    Knn(KnnProbe),
    Decoder(DecoderProbe),
}

impl Probe {
    pub fn fit(
        kind: ProbeKind,
        config: &ProbeConfig,
        decoder: &DecoderWeights,
        x: &Tensor,
        y: &[u8],
        layer: usize,
    ) -> Result<Self> {
        Ok(match kind {
            ProbeKind::Linear => Probe::Linear(LinearProbe::fit(x, y, config.linear_reg, layer)?),
            ProbeKind::Knn => Probe::Knn(KnnProbe::fit(x, y, config.knn_k, layer)?),
            ProbeKind::Decoder => Probe::Decoder(DecoderProbe::fit(
                decoder,
                x,
                y,
                config.decoder_steps,
                config.decoder_lr,
                layer,
            )?),
        })
    }

    pub fn kind(&self) -> ProbeKind {
        match self {
            Probe::Linear(_) => ProbeKind::Linear,
            Probe::Knn(_) => ProbeKind::Knn,
            Probe::Decoder(_) => ProbeKind::Decoder,
        }
    }

    pub fn trained_on_layer(&self) -> usize {
        match self {
            Probe::Linear(p) => p.trained_on_layer,
            Probe::Knn(p) => p.trained_on_layer,
            Probe::Decoder(p) => p.trained_on_layer,
        }
    }

    /// Positive-class scores; larger means more likely positive.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        match self {
            Probe::Linear(p) => p.score(x),
            Probe::Knn(p) => p.score(x),
            Probe::Decoder(p) => p.score(x),
        }
    }
}

/// Probe AUC when trained on layer `i` (row) and evaluated on layer `j`
/// (column). Cells are `None` when the probe could not be fit or scored.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub kind: ProbeKind,
    pub values: Vec<Vec<Option<f64>>>,
}

impl TransferMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    /// Means of the strictly upper and strictly lower triangles.
    pub fn triangle_means(&self) -> (Option<f64>, Option<f64>) {
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    match j.cmp(&i) {
                        Ordering::Greater => upper.push(*v),
                        Ordering::Less => lower.push(*v),
                        Ordering::Equal => {}
                    }
                }
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        (mean(&upper), mean(&lower))
    }
}

pub fn transfer_matrix(
    stack: &EmbeddingStack,
    kind: ProbeKind,
    config: &ProbeConfig,
    decoder: &DecoderWeights,
    exec: Execution,
) -> TransferMatrix {
    let n = stack.depth();
    let evals: Vec<Tensor> = (0..n).map(|j| stack.eval_part(j)).collect();
    let eval_y = stack.eval_labels();
    let values = exec.map((0..n).collect(), |i| {
        let probe = Probe::fit(kind, config, decoder, &stack.train_part(i), stack.train_labels(), i);
        evals
            .iter()
            .map(|x| {
                let probe = probe.as_ref().ok()?;
                let scores = probe.score(x).ok()?;
                roc_auc(&scores, eval_y).ok()
            })
            .collect()
    });
    TransferMatrix { kind, values }
}
