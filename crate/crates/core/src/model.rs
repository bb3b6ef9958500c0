//! In-context learning transformers for binary tabular classification.
//!
//! All three variants share the same outline: an encoder turns the support
//! rows (with their labels) and the target rows (with an "unknown label"
//! embedding) into tokens, an ordered list of pre-norm residual blocks
//! transforms them, and a decoder maps each target row's hidden state to
//! two logits. There are no positional encodings and no autoregression:
//! support tokens attend to the support set, and each target token attends
//! to the support set and itself, so every target's prediction depends only
//! on the support set and that target.
//!
//! * [`Variant::Row`]: one token per row (features zero-padded to
//!   `max_features` and linearly embedded) with attention across rows.
//! * [`Variant::Dual`]: one token per cell plus a label token per row.
//!   Each block attends within a row (across its feature and label tokens)
//!   and then within a column (across rows). The label token is the row's
//!   hidden state.
//! * [`Variant::TwoStage`]: a cell-level embedding stage of dual blocks
//!   whose output is mean-pooled per row, followed by row-level blocks as in
//!   `Row`. Layer plans only address the second stage.
//!
//! Hidden states captured for analysis are the residual stream of the
//! target rows after the encoder (index 0) and after every executed block.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::Episode;
use crate::seed;
use crate::surgery::{LayerPlan, PlanError};
use crate::tensor::{GroupLayout, Mask, Tape, Tensor, TensorError, Var, LAYER_NORM_EPS};

/// Number of label embeddings: class 0, class 1, unknown.
const LABEL_SLOTS: usize = 3;
const UNKNOWN_LABEL: usize = 2;
/// Standard deviation of the decoder's output projection at init.
const OUTPUT_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step} (gradient norm {grad_norm})")]
    NonFinite { step: usize, grad_norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Row,
    Dual,
    TwoStage,
}

impl Variant {
    fn code(self) -> u8 {
        match self {
            Variant::Row => 0,
            Variant::Dual => 1,
            Variant::TwoStage => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Variant::Row),
            1 => Some(Variant::Dual),
            2 => Some(Variant::TwoStage),
            _ => None,
        }
    }
}

fn default_embed_layers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of surgery-addressable blocks.
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Cell-level blocks before pooling; used by `TwoStage` only.
    #[serde(default = "default_embed_layers")]
    pub embed_stage_layers: usize,
    /// Widest table the model accepts.
    pub max_features: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers < 2 {
            return bad(format!("layer count {} (need at least 2)", self.layers));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "head count {} must divide model dimension {}",
                self.heads, self.model_dim
            ));
        }
        if self.ff_dim == 0 || self.max_features == 0 {
            return bad("ff_dim and max_features must be positive".into());
        }
        if self.variant == Variant::TwoStage && self.embed_stage_layers == 0 {
            return bad("two-stage models need at least one embedding-stage layer".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Row {
        norm_attn: Norm,
        attn: Attention,
        norm_ff: Norm,
        ff: FeedForward,
    },
    Dual {
        norm_feat: Norm,
        attn_feat: Attention,
        norm_item: Norm,
        attn_item: Attention,
        norm_ff: Norm,
        ff: FeedForward,
    },
}

#[derive(Clone, Copy, Debug)]
enum Encoder {
    Row { input: Linear, labels: usize },
    Dual { cell: Linear, labels: usize },
    TwoStage { cell: Linear, pool: Linear, labels: usize },
}

#[derive(Clone, Copy, Debug)]
struct Decoder {
    norm: Norm,
    hidden: Linear,
    out: Linear,
}

impl Decoder {
    fn ids(&self) -> [usize; 6] {
        [
            self.norm.gain,
            self.norm.bias,
            self.hidden.w,
            self.hidden.b,
            self.out.w,
            self.out.b,
        ]
    }
}

/// A detached copy of a decoder head: final norm, hidden layer, output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub tensors: [Tensor; 6],
}

/// Per-layer hidden states of a set of target rows.
///
/// `states[0]` is the encoder output and `states[k]` the state after the
/// k-th executed block. The first `train_rows` rows are probe-train rows;
/// the rest are evaluation (query) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStack {
    pub states: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub train_rows: usize,
}

impl EmbeddingStack {
    pub fn depth(&self) -> usize {
        self.states.len()
    }

    pub fn train_labels(&self) -> &[u8] {
        &self.labels[..self.train_rows]
    }

    pub fn eval_labels(&self) -> &[u8] {
        &self.labels[self.train_rows..]
    }

    pub fn train_part(&self, layer: usize) -> Tensor {
        let idx: Vec<usize> = (0..self.train_rows).collect();
        self.states[layer].select_rows(&idx)
    }

    pub fn eval_part(&self, layer: usize) -> Tensor {
        let idx: Vec<usize> = (self.train_rows..self.labels.len()).collect();
        self.states[layer].select_rows(&idx)
    }
}

pub struct ForwardOutput {
    /// `[targets, 2]` class logits.
    pub logits: Tensor,
    pub stack: Option<EmbeddingStack>,
}

/// Positive-class scores (logit difference) from `[n, 2]` logits.
pub fn positive_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| logits.get(r, 1) - logits.get(r, 0))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: Vec<Tensor>,
    names: Vec<String>,
    encoder: Encoder,
    embed_blocks: Vec<Block>,
    blocks: Vec<Block>,
    decoder: Decoder,
}

struct Builder<R: Rng> {
    weights: Vec<Tensor>,
    names: Vec<String>,
    rng: R,
}

impl<R: Rng> Builder<R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.weights.push(t);
        self.names.push(name);
        self.weights.len() - 1
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
        let w = self.normal(vec![fan_in, fan_out], std);
        let w = self.push(format!("{name}.w"), w);
        let b = self.push(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gain = Tensor::new(vec![d], vec![1.0; d]).expect("vector");
        let gain = self.push(format!("{name}.gain"), gain);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(vec![d]));
        Norm { gain, bias }
    }

    fn attention(&mut self, name: &str, d: usize, residual_std: f64) -> Attention {
        let s = 1.0 / (d as f64).sqrt();
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, s),
            k: self.linear(&format!("{name}.k"), d, d, s),
            v: self.linear(&format!("{name}.v"), d, d, s),
            o: self.linear(&format!("{name}.o"), d, d, s * residual_std),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize, residual_std: f64) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, ff, 1.0 / (d as f64).sqrt()),
            down: self.linear(
                &format!("{name}.down"),
                ff,
                d,
                residual_std / (ff as f64).sqrt(),
            ),
        }
    }

    fn row_block(&mut self, name: &str, c: &ModelConfig, residual_std: f64) -> Block {
        let d = c.model_dim;
        Block::Row {
            norm_attn: self.norm(&format!("{name}.norm_attn"), d),
            attn: self.attention(&format!("{name}.attn"), d, residual_std),
            norm_ff: self.norm(&format!("{name}.norm_ff"), d),
            ff: self.feed_forward(&format!("{name}.ff"), d, c.ff_dim, residual_std),
        }
    }

    fn dual_block(&mut self, name: &str, c: &ModelConfig, residual_std: f64) -> Block {
        let d = c.model_dim;
        Block::Dual {
            norm_feat: self.norm(&format!("{name}.norm_feat"), d),
            attn_feat: self.attention(&format!("{name}.attn_feat"), d, residual_std),
            norm_item: self.norm(&format!("{name}.norm_item"), d),
            attn_item: self.attention(&format!("{name}.attn_item"), d, residual_std),
            norm_ff: self.norm(&format!("{name}.norm_ff"), d),
            ff: self.feed_forward(&format!("{name}.ff"), d, c.ff_dim, residual_std),
        }
    }
}

/// Token arrangement of one forward pass.
struct Geometry {
    support: usize,
    targets: usize,
    features: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.support + self.targets
    }
}

/// Weights bound as tape leaves for one forward pass.
struct Bound {
    vars: Vec<Var>,
    decoder: [Var; 6],
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            weights: Vec::new(),
            names: Vec::new(),
            rng: seed::rng_at(config.seed, &[seed::stream::INIT]),
        };
        let d = config.model_dim;
        let total_blocks = config.layers
            + if config.variant == Variant::TwoStage {
                config.embed_stage_layers
            } else {
                0
            };
        let residual_std = 1.0 / (2.0 * total_blocks as f64).sqrt();
        let labels_table = |b: &mut Builder<seed::Rng>| {
            let t = b.normal(vec![LABEL_SLOTS, d], 1.0);
            b.push("encoder.labels".into(), t)
        };
        let encoder = match config.variant {
            Variant::Row => Encoder::Row {
                input: b.linear(
                    "encoder.input",
                    config.max_features,
                    d,
                    1.0 / (config.max_features as f64).sqrt(),
                ),
                labels: labels_table(&mut b),
            },
            Variant::Dual => Encoder::Dual {
                cell: b.linear("encoder.cell", 1, d, 1.0),
                labels: labels_table(&mut b),
            },
            Variant::TwoStage => Encoder::TwoStage {
                cell: b.linear("encoder.cell", 1, d, 1.0),
                pool: b.linear("encoder.pool", d, d, 1.0 / (d as f64).sqrt()),
                labels: labels_table(&mut b),
            },
        };
        let embed_blocks = if config.variant == Variant::TwoStage {
            (0..config.embed_stage_layers)
                .map(|i| b.dual_block(&format!("embed.{i}"), &config, residual_std))
                .collect()
        } else {
            Vec::new()
        };
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("icl.{i}");
                match config.variant {
                    Variant::Dual => b.dual_block(&name, &config, residual_std),
                    Variant::Row | Variant::TwoStage => b.row_block(&name, &config, residual_std),
                }
            })
            .collect();
        let decoder = Decoder {
            norm: b.norm("decoder.norm", d),
            hidden: b.linear("decoder.hidden", d, config.ff_dim, 1.0 / (d as f64).sqrt()),
            out: b.linear("decoder.out", config.ff_dim, 2, OUTPUT_INIT_STD),
        };
        Ok(Self {
            config,
            weights: b.weights,
            names: b.names,
            encoder,
            embed_blocks,
            blocks,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of surgery-addressable blocks.
    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// Total addressable blocks including the embedding stage.
    pub fn block_count(&self) -> usize {
        self.blocks.len() + self.embed_blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Order-sensitive FNV-1a digest of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.weights {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn decoder_weights(&self) -> DecoderWeights {
        DecoderWeights {
            tensors: self.decoder.ids().map(|i| self.weights[i].clone()),
        }
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool, decoder: Option<&DecoderWeights>) -> Bound {
        let vars: Vec<Var> = self
            .weights
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        let decoder = match decoder {
            Some(dw) => std::array::from_fn(|i| tape.leaf(dw.tensors[i].clone(), false)),
            None => self.decoder.ids().map(|i| vars[i]),
        };
        Bound { vars, decoder }
    }

    fn check_inputs(&self, support_x: &Tensor, support_y: &[u8], targets_x: &Tensor) -> Result<Geometry> {
        let features = support_x.cols();
        if support_x.shape().len() != 2 || targets_x.shape().len() != 2 {
            return Err(ModelError::Shape("inputs must be matrices".into()));
        }
        if targets_x.cols() != features {
            return Err(ModelError::Shape(format!(
                "support has {features} features but targets have {}",
                targets_x.cols()
            )));
        }
        if features == 0 || features > self.config.max_features {
            return Err(ModelError::Shape(format!(
                "episode has {features} features; model accepts 1..={}",
                self.config.max_features
            )));
        }
        if support_x.rows() == 0 || support_x.rows() != support_y.len() {
            return Err(ModelError::Shape(format!(
                "{} support rows with {} labels",
                support_x.rows(),
                support_y.len()
            )));
        }
        if support_y.iter().any(|&y| y > 1) {
            return Err(ModelError::Shape("support labels must be 0 or 1".into()));
        }
        Ok(Geometry {
            support: support_x.rows(),
            targets: targets_x.rows(),
            features,
        })
    }

    /// Runs encoder, `order`, and decoder on a tape. Returns the logits var
    /// and, when capturing, the target-row hidden state after the encoder
    /// and after every block.
    fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        support_x: &Tensor,
        support_y: &[u8],
        targets_x: &Tensor,
        order: &[&Block],
        capture: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let geo = self.check_inputs(support_x, support_y, targets_x)?;
        let w = &bound.vars;
        let rows_mask = Arc::new(Mask::support_query(geo.support, geo.targets));
        let label_index: Vec<usize> = support_y
            .iter()
            .map(|&y| y as usize)
            .chain(std::iter::repeat(UNKNOWN_LABEL).take(geo.targets))
            .collect();

        let (mut h, tokens_per_row, readout) = match self.encoder {
            Encoder::Row { input, labels } => {
                let x = padded_rows(support_x, targets_x, self.config.max_features);
                let x = tape.constant(x);
                let h = linear(tape, w, x, input)?;
                let lab = tape.gather_rows(w[labels], &label_index)?;
                let h = tape.add(h, lab)?;
                (h, 1, (geo.support..geo.rows()).collect::<Vec<_>>())
            }
            Encoder::Dual { cell, labels } => {
                let t = geo.features + 1;
                let cells = cell_tokens(tape, w, cell, support_x, targets_x)?;
                let lab = tape.gather_rows(w[labels], &label_index)?;
                let all = tape.concat_rows(cells, lab)?;
                let n = geo.rows();
                let d = geo.features;
                let order: Vec<usize> = (0..n)
                    .flat_map(|r| (0..t).map(move |c| if c < d { r * d + c } else { n * d + r }))
                    .collect();
                let h = tape.gather_rows(all, &order)?;
                let readout = (geo.support..n).map(|r| r * t + d).collect();
                (h, t, readout)
            }
            Encoder::TwoStage { cell, pool, labels } => {
                let mut h = cell_tokens(tape, w, cell, support_x, targets_x)?;
                for block in &self.embed_blocks {
                    h = self.apply_block(tape, w, block, h, &geo, geo.features, &rows_mask)?;
                }
                let pooled = tape.segment_mean(h, geo.features)?;
                let h = linear(tape, w, pooled, pool)?;
                let lab = tape.gather_rows(w[labels], &label_index)?;
                let h = tape.add(h, lab)?;
                (h, 1, (geo.support..geo.rows()).collect())
            }
        };

        let mut captured = Vec::new();
        if capture {
            captured.push(tape.gather_rows(h, &readout)?);
        }
        for block in order {
            h = self.apply_block(tape, w, block, h, &geo, tokens_per_row, &rows_mask)?;
            if capture {
                captured.push(tape.gather_rows(h, &readout)?);
            }
        }
        let target_states = match captured.last() {
            Some(&last) => last,
            None => tape.gather_rows(h, &readout)?,
        };
        let logits = decode_on(tape, &bound.decoder, target_states)?;
        Ok((logits, captured))
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_block(
        &self,
        tape: &mut Tape,
        w: &[Var],
        block: &Block,
        h: Var,
        geo: &Geometry,
        tokens_per_row: usize,
        rows_mask: &Arc<Mask>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        match *block {
            Block::Row {
                norm_attn,
                attn,
                norm_ff,
                ff,
            } => {
                let a = norm(tape, w, h, norm_attn)?;
                let a = attention(tape, w, a, attn, heads, GroupLayout::single(geo.rows()), rows_mask)?;
                let h = tape.add(h, a)?;
                let f = norm(tape, w, h, norm_ff)?;
                let f = feed_forward(tape, w, f, ff)?;
                Ok(tape.add(h, f)?)
            }
            Block::Dual {
                norm_feat,
                attn_feat,
                norm_item,
                attn_item,
                norm_ff,
                ff,
            } => {
                let t = tokens_per_row;
                let n = geo.rows();
                let a = norm(tape, w, h, norm_feat)?;
                let a = attention(
                    tape,
                    w,
                    a,
                    attn_feat,
                    heads,
                    GroupLayout::contiguous(n, t),
                    &Arc::new(Mask::full(t)),
                )?;
                let h = tape.add(h, a)?;
                let a = norm(tape, w, h, norm_item)?;
                let a = attention(tape, w, a, attn_item, heads, GroupLayout::strided(t, n), rows_mask)?;
                let h = tape.add(h, a)?;
                let f = norm(tape, w, h, norm_ff)?;
                let f = feed_forward(tape, w, f, ff)?;
                Ok(tape.add(h, f)?)
            }
        }
    }

    fn plan_blocks(&self, plan: &LayerPlan) -> Result<Vec<&Block>> {
        plan.validate(self.blocks.len())?;
        Ok(plan.layers().iter().map(|&i| &self.blocks[i]).collect())
    }

    fn execute(
        &self,
        support_x: &Tensor,
        support_y: &[u8],
        targets_x: &Tensor,
        order: &[&Block],
        capture: bool,
        decoder: Option<&DecoderWeights>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, decoder);
        let (logits, captured) =
            self.run(&mut tape, &bound, support_x, support_y, targets_x, order, capture)?;
        let states = captured.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(logits).clone(), states))
    }

    /// Forward pass over arbitrary target rows under `plan`.
    pub fn forward_rows(
        &self,
        support_x: &Tensor,
        support_y: &[u8],
        targets_x: &Tensor,
        plan: &LayerPlan,
        capture: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let order = self.plan_blocks(plan)?;
        self.execute(support_x, support_y, targets_x, &order, capture, None)
    }

    /// Query-row logits under `plan`; with `capture`, also the query rows'
    /// hidden states after the encoder and after each executed plan step.
    pub fn forward(&self, episode: &Episode, plan: &LayerPlan, capture: bool) -> Result<ForwardOutput> {
        let (logits, states) = self.forward_rows(
            &episode.support_x,
            &episode.support_y,
            &episode.query_x,
            plan,
            capture,
        )?;
        let stack = capture.then(|| EmbeddingStack {
            states,
            labels: episode.query_y.clone(),
            train_rows: 0,
        });
        Ok(ForwardOutput { logits, stack })
    }

    /// Query-row logits running the model's own blocks in stored order,
    /// without consulting any plan.
    pub fn forward_reference(&self, episode: &Episode) -> Result<Tensor> {
        let order: Vec<&Block> = self.blocks.iter().collect();
        let (logits, _) = self.execute(
            &episode.support_x,
            &episode.support_y,
            &episode.query_x,
            &order,
            false,
            None,
        )?;
        Ok(logits)
    }

    /// Runs blocks `0..=exit_after` and applies the decoder (the model's own
    /// unless overridden) to the resulting hidden states.
    pub fn forward_early_exit(
        &self,
        episode: &Episode,
        exit_after: usize,
        decoder_override: Option<&DecoderWeights>,
    ) -> Result<Tensor> {
        let layers = self.blocks.len();
        if exit_after >= layers {
            return Err(PlanError::OutOfRange {
                index: exit_after,
                layers,
            }
            .into());
        }
        let order: Vec<&Block> = self.blocks[..=exit_after].iter().collect();
        let (logits, _) = self.execute(
            &episode.support_x,
            &episode.support_y,
            &episode.query_x,
            &order,
            false,
            decoder_override,
        )?;
        Ok(logits)
    }

    /// Early-exit logits after every layer from a single captured pass;
    /// element `i` equals `forward_early_exit(episode, i, decoder)`.
    pub fn early_exit_curve(
        &self,
        episode: &Episode,
        decoder_override: Option<&DecoderWeights>,
    ) -> Result<Vec<Tensor>> {
        let plan = LayerPlan::identity(self.blocks.len())?;
        let out = self.forward(episode, &plan, true)?;
        let decoder = decoder_override.cloned().unwrap_or_else(|| self.decoder_weights());
        let stack = out.stack.expect("capture requested");
        stack.states[1..]
            .iter()
            .map(|s| decoder.decode(s))
            .collect()
    }

    /// Hidden states of probe-train and query rows under `plan`, probe-train
    /// rows first. Support rows are never included.
    pub fn extract_embeddings(&self, episode: &Episode, plan: &LayerPlan) -> Result<EmbeddingStack> {
        let d = episode.n_features();
        let mut data = episode.probe_x.data().to_vec();
        data.extend_from_slice(episode.query_x.data());
        let rows = episode.probe_x.rows() + episode.query_x.rows();
        let targets = Tensor::matrix(rows, d, data)?;
        let (_, states) =
            self.forward_rows(&episode.support_x, &episode.support_y, &targets, plan, true)?;
        let labels = episode
            .probe_y
            .iter()
            .chain(&episode.query_y)
            .copied()
            .collect();
        Ok(EmbeddingStack {
            states,
            labels,
            train_rows: episode.probe_x.rows(),
        })
    }

    /// Mean query cross-entropy over `batch`, recorded on `tape` with every
    /// weight as a gradient-requiring leaf. Returns the loss var and the
    /// weight vars in parameter order.
    fn batch_loss(&self, tape: &mut Tape, batch: &[TrainingTask]) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(tape, true, None);
        let order: Vec<&Block> = self.blocks.iter().collect();
        let mut total: Option<Var> = None;
        for task in batch {
            let (logits, _) = self.run(
                tape,
                &bound,
                &task.support_x,
                &task.support_y,
                &task.query_x,
                &order,
                false,
            )?;
            let labels: Vec<usize> = task.query_y.iter().map(|&y| y as usize).collect();
            let ce = tape.cross_entropy(logits, &labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        let total = total.ok_or_else(|| ModelError::Shape("empty training batch".into()))?;
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        Ok((loss, bound.vars))
    }

    /// Mean query cross-entropy over `batch`.
    pub fn loss(&self, batch: &[TrainingTask]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss(&mut tape, batch)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Mean query cross-entropy and its gradient for every weight tensor,
    /// in [`Model::weights`] order.
    pub fn loss_and_gradients(&self, batch: &[TrainingTask]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (loss, vars) = self.batch_loss(&mut tape, batch)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.weights)
            .map(|(&v, w)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(w.shape().to_vec())))
            .collect();
        Ok((value, grads))
    }
}

/// One supervised in-context task: labelled support rows and query rows
/// whose labels are the training target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTask {
    pub support_x: Tensor,
    pub support_y: Vec<u8>,
    pub query_x: Tensor,
    pub query_y: Vec<u8>,
}

impl From<&Episode> for TrainingTask {
    fn from(e: &Episode) -> Self {
        Self {
            support_x: e.support_x.clone(),
            support_y: e.support_y.clone(),
            query_x: e.query_x.clone(),
            query_y: e.query_y.clone(),
        }
    }
}

impl DecoderWeights {
    /// Applies the decoder head to `[rows, model_dim]` hidden states.
    pub fn decode(&self, states: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: [Var; 6] = std::array::from_fn(|i| tape.constant(self.tensors[i].clone()));
        let h = tape.constant(states.clone());
        let out = decode_on(&mut tape, &vars, h)?;
        Ok(tape.value(out).clone())
    }

    pub fn input_dim(&self) -> usize {
        self.tensors[0].len()
    }
}

fn decode_on(tape: &mut Tape, dec: &[Var; 6], h: Var) -> Result<Var> {
    let a = tape.layer_norm(h, dec[0], dec[1], LAYER_NORM_EPS)?;
    let z = tape.matmul(a, dec[2])?;
    let z = tape.add_row(z, dec[3])?;
    let z = tape.gelu(z);
    let z = tape.matmul(z, dec[4])?;
    Ok(tape.add_row(z, dec[5])?)
}

/// Records the decoder head on `tape` with the given weight vars.
pub(crate) fn decoder_forward(tape: &mut Tape, dec: &[Var; 6], h: Var) -> Result<Var> {
    decode_on(tape, dec, h)
}

fn linear(tape: &mut Tape, w: &[Var], x: Var, l: Linear) -> Result<Var> {
    let y = tape.matmul(x, w[l.w])?;
    Ok(tape.add_row(y, w[l.b])?)
}

fn norm(tape: &mut Tape, w: &[Var], x: Var, n: Norm) -> Result<Var> {
    Ok(tape.layer_norm(x, w[n.gain], w[n.bias], LAYER_NORM_EPS)?)
}

fn attention(
    tape: &mut Tape,
    w: &[Var],
    x: Var,
    a: Attention,
    heads: usize,
    layout: GroupLayout,
    mask: &Arc<Mask>,
) -> Result<Var> {
    let q = linear(tape, w, x, a.q)?;
    let k = linear(tape, w, x, a.k)?;
    let v = linear(tape, w, x, a.v)?;
    let o = tape.grouped_attention(q, k, v, heads, layout, Arc::clone(mask))?;
    linear(tape, w, o, a.o)
}

fn feed_forward(tape: &mut Tape, w: &[Var], x: Var, f: FeedForward) -> Result<Var> {
    let h = linear(tape, w, x, f.up)?;
    let h = tape.gelu(h);
    linear(tape, w, h, f.down)
}

/// Support rows then target rows, zero-padded to `width` columns.
fn padded_rows(support: &Tensor, targets: &Tensor, width: usize) -> Tensor {
    let rows = support.rows() + targets.rows();
    let mut data = vec![0.0; rows * width];
    for (r, row) in (0..support.rows())
        .map(|r| support.row(r))
        .chain((0..targets.rows()).map(|r| targets.row(r)))
        .enumerate()
    {
        data[r * width..r * width + row.len()].copy_from_slice(row);
    }
    Tensor::matrix(rows, width, data).expect("padded matrix")
}

/// One token per cell, row-major over support then target rows.
fn cell_tokens(
    tape: &mut Tape,
    w: &[Var],
    cell: Linear,
    support: &Tensor,
    targets: &Tensor,
) -> Result<Var> {
    let mut values = support.data().to_vec();
    values.extend_from_slice(targets.data());
    let n = values.len();
    let x = tape.constant(Tensor::matrix(n, 1, values)?);
    linear(tape, w, x, cell)
}

// Checkpoint container:
//   "LLAB" | u32 version | u8 variant | u32 layers, model_dim, heads, ff_dim,
//   embed_stage_layers, max_features | u64 seed | u32 block count |
//   per block: u16 name length, UTF-8 name, u8 rank, u64 dims…, f64 values…
// All integers and floats little-endian.
const MAGIC: &[u8; 4] = b"LLAB";
const FORMAT_VERSION: u32 = 1;

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.config;
        out.push(c.variant.code());
        for v in [
            c.layers,
            c.model_dim,
            c.heads,
            c.ff_dim,
            c.embed_stage_layers,
            c.max_features,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.weights) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Checkpoint("missing LLAB magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let variant = Variant::from_code(r.u8()?)
            .ok_or_else(|| ModelError::Checkpoint("unknown variant code".into()))?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            variant,
            layers: dims[0],
            model_dim: dims[1],
            heads: dims[2],
            ff_dim: dims[3],
            embed_stage_layers: dims[4],
            max_features: dims[5],
            seed: r.u64()?,
        };
        let mut model = Model::build(config)?;
        let count = r.u32()? as usize;
        if count != model.weights.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter blocks, found {count}",
                model.weights.len()
            )));
        }
        for i in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            if name != model.names[i] {
                return Err(ModelError::Checkpoint(format!(
                    "block {i}: expected `{}`, found `{name}`",
                    model.names[i]
                )));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != model.weights[i].shape() {
                return Err(ModelError::Checkpoint(format!(
                    "`{name}`: expected shape {:?}, found {shape:?}",
                    model.weights[i].shape()
                )));
            }
            for v in model.weights[i].data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.at != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(ModelError::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
