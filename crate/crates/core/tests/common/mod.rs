//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use layerlab::episode::{split_episode, Episode, SplitConfig};
use layerlab::model::{Model, ModelConfig, TrainingTask, Variant};
use layerlab::prior::TaskPrior;
use layerlab::seed;
use layerlab::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

pub const FD_STEP: f64 = 1e-5;
/// Gradients whose norms are both below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-8;
/// An analytic gradient below this norm is treated as structurally zero
/// (e.g. attention key biases, which softmax shift invariance cancels).
pub const ZERO_GRAD: f64 = 1e-12;
/// Largest finite-difference entry accepted for a structurally zero
/// gradient. Central-difference rounding noise is about `ε·|f|/h ≈ 1e-11`.
pub const ZERO_NUMERIC: f64 = 1e-9;

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRAD_FLOOR)
}

/// Outcome of comparing analytic and finite-difference gradients tensor by
/// tensor.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Largest relative error over tensors with a non-zero gradient.
    pub worst_relative: f64,
    pub worst_tensor: Option<usize>,
    pub tensors: usize,
    /// Tensors whose analytic gradient is structurally zero.
    pub zero_tensors: usize,
    /// Structurally zero tensors whose finite differences exceed
    /// `ZERO_NUMERIC`.
    pub zero_violations: Vec<usize>,
}

impl GradReport {
    fn add(&mut self, k: usize, analytic: &[f64], numeric: &[f64]) {
        self.tensors += 1;
        if norm(analytic) < ZERO_GRAD {
            self.zero_tensors += 1;
            if numeric.iter().any(|v| v.abs() > ZERO_NUMERIC) {
                self.zero_violations.push(k);
            }
            return;
        }
        let e = relative_error(analytic, numeric);
        if !(e <= self.worst_relative) {
            self.worst_relative = e;
            self.worst_tensor = Some(k);
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst_relative < tol && self.zero_violations.is_empty()
    }
}

/// Compares tape gradients of the scalar produced by `f` with central
/// finite differences, one input at a time.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> GradReport {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut report = GradReport::default();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).unwrap();
        let mut numeric = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        report.add(k, analytic.data(), &numeric);
    }
    report
}

/// Compares the model's loss gradient with finite differences, one
/// parameter tensor at a time.
pub fn model_grad_check(model: &Model, batch: &[TrainingTask]) -> GradReport {
    let (_, grads) = model.loss_and_gradients(batch).unwrap();
    let mut probe = model.clone();
    let mut report = GradReport::default();
    for (k, g) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; g.len()];
        for i in 0..g.len() {
            let orig = probe.weights()[k].data()[i];
            probe.weights_mut()[k].data_mut()[i] = orig + FD_STEP;
            let up = probe.loss(batch).unwrap();
            probe.weights_mut()[k].data_mut()[i] = orig - FD_STEP;
            let down = probe.loss(batch).unwrap();
            probe.weights_mut()[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        report.add(k, g.data(), &numeric);
    }
    report
}

pub fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        embed_stage_layers: 1,
        max_features: 4,
        seed,
    }
}

pub fn small_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 4,
        model_dim: 16,
        heads: 4,
        ff_dim: 24,
        embed_stage_layers: 1,
        max_features: 6,
        seed,
    }
}

/// A stratified episode from a synthetic task.
pub fn episode(seed: u64, features: (usize, usize), samples: (usize, usize)) -> Episode {
    let prior = TaskPrior {
        feature_count_range: features,
        sample_count_range: samples,
        seed,
        ..TaskPrior::default()
    };
    let t = prior.task(0).unwrap();
    split_episode(&t, &SplitConfig::default(), &mut seed::rng(seed)).unwrap()
}

/// O(n²) Mann–Whitney count over positive–negative pairs.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Indices of the `k` nearest rows by full sort on (squared distance, index).
pub fn brute_neighbors(train: &Tensor, point: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..train.rows())
        .map(|i| {
            let dist = train.row(i).iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Column standardization with population statistics; constant columns map
/// to zero.
pub fn standardize_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..d {
        let col: Vec<f64> = (0..n).map(|r| x.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for r in 0..n {
            out.data_mut()[r * d + c] = if sd > 0.0 { (col[r] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Newton (IRLS) solution of `mean log-loss + reg/2·‖w‖²` on standardized
/// columns with an unpenalized intercept. Returns `(w, b)`.
pub fn irls_logistic(x: &Tensor, y: &[u8], reg: f64) -> (Vec<f64>, f64) {
    let z = standardize_columns(x);
    let (n, d) = (z.rows(), z.cols());
    let mut theta = vec![0.0; d + 1];
    for _ in 0..100 {
        let mut grad = vec![0.0; d + 1];
        let mut hess = vec![vec![0.0; d + 1]; d + 1];
        for r in 0..n {
            let mut row = z.row(r).to_vec();
            row.push(1.0);
            let t: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-t).exp());
            let w = p * (1.0 - p);
            for i in 0..=d {
                grad[i] += (p - y[r] as f64) * row[i] / n as f64;
                for j in 0..=d {
                    hess[i][j] += w * row[i] * row[j] / n as f64;
                }
            }
        }
        for i in 0..d {
            grad[i] += reg * theta[i];
            hess[i][i] += reg;
        }
        let step = solve(hess, grad.clone());
        for i in 0..=d {
            theta[i] -= step[i];
        }
        if norm(&grad) < 1e-14 {
            break;
        }
    }
    let b = theta.pop().unwrap();
    (theta, b)
}

/// Checks `value` against the subset of JSON Schema used by the manifest
/// schema: `type`, `required`, `properties`, `additionalProperties`,
/// `items`, `enum`, `minimum`, `minItems`, `const`. Returns the failing
/// JSON pointers.
pub fn schema_errors(schema: &Value, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, value, "", &mut errors);
    errors
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        _ => false,
    }
}

fn check(schema: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    if let Some(t) = schema.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().any(|t| t.as_str().is_some_and(|t| type_matches(t, v))),
            _ => false,
        };
        if !ok {
            errors.push(format!("{at}: expected type {t}, got {v}"));
            return;
        }
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            errors.push(format!("{at}: expected {c}"));
        }
    }
    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(v) {
            errors.push(format!("{at}: {v} not in enum"));
        }
    }
    if let (Some(min), Some(x)) = (schema.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            errors.push(format!("{at}: {x} < minimum {min}"));
        }
    }
    if let Value::Object(map) = v {
        if let Some(Value::Array(req)) = schema.get("required") {
            for r in req.iter().filter_map(Value::as_str) {
                if !map.contains_key(r) {
                    errors.push(format!("{at}: missing required `{r}`"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, child) in map {
            let path = format!("{at}/{k}");
            match props.and_then(|p| p.get(k)) {
                Some(s) => check(s, child, &path, errors),
                None => match schema.get("additionalProperties") {
                    Some(Value::Bool(false)) => errors.push(format!("{path}: unexpected property")),
                    Some(s @ Value::Object(_)) => check(s, child, &path, errors),
                    _ => {}
                },
            }
        }
    }
    if let Value::Array(items) = v {
        if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
            if (items.len() as u64) < min {
                errors.push(format!("{at}: fewer than {min} items"));
            }
        }
        if let Some(s) = schema.get("items") {
            for (i, item) in items.iter().enumerate() {
                check(s, item, &format!("{at}/{i}"), errors);
            }
        }
    }
}

pub fn manifest_schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/manifest.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A training-spec config for the CLI and runner tests.
pub fn desk_config(out: &std::path::Path, seed: u64, steps: usize, datasets: usize) -> String {
    format!(
        r#"seed = {seed}
out_dir = "{out}"

[model.architecture]
variant = "row"
layers = 4
model_dim = 32
heads = 4
ff_dim = 64
max_features = 6

[model.prior]
features = [2, 6]
samples = [64, 96]

[model.training]
steps = {steps}
learning_rate = 2e-3

[[datasets]]
kind = "synthetic"
count = {datasets}

[grid]
probes = ["linear", "knn", "decoder"]

[grid.probe]
decoder_steps = 50
"#,
        out = out.display()
    )
}
