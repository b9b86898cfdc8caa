//! The full autoregressive model: per-modality embeddings and output heads
//! around a stack of mixture-of-modality-experts layers.
//!
//! Position `t` is always scored with the head of the modality of token
//! `t + 1`; the interleaving pattern is given, never predicted.

mod checkpoint;
mod config;
mod generate;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use config::{parse_schedule, schedule_text, ModelConfig};
pub use generate::{next_timestamp, Sampler};

use crate::config::ConfigError;
use crate::modality::Modality;
use crate::mome::{
    build_mask_with, layer_forward, register_layer, route, route_indices, LayerContext, LayerVars,
    MomeError,
};
use crate::numerics::{Bound, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::rope::{RopeError, RopeLadder};
use crate::streams::InterleavedStream;
use crate::timeline::{self, Timeline, TimelineError, TimelineOptions};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty stream")]
    EmptyStream,
    #[error("token {id} at position {position} is outside the {modality} vocabulary of {vocab}")]
    TokenOutOfRange {
        position: usize,
        modality: Modality,
        id: u32,
        vocab: usize,
    },
    #[error("expected {expected} loss weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("schedule asks for a {0} token before any text or speech token exists")]
    OrphanGeneration(Modality),
    #[error("generation needs a non-empty prompt")]
    EmptyPrompt,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Mome(#[from] MomeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Model parameters with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct SlbModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Logits of the positions scored by one output head.
#[derive(Debug, Clone)]
pub struct HeadLogits {
    pub modality: Modality,
    pub positions: Vec<usize>,
    /// `positions.len() x vocab(modality)`.
    pub logits: Tensor,
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub timeline: Timeline,
    /// Residual stream after each layer.
    pub hidden: Vec<Tensor>,
    pub heads: Vec<HeadLogits>,
    slots: Vec<Option<(usize, usize)>>,
}

impl Forward {
    /// Logits at `pos`, over the vocabulary of the next modality.
    pub fn logits(&self, pos: usize) -> Option<&[f64]> {
        let (h, r) = (*self.slots.get(pos)?)?;
        Some(self.heads[h].logits.row(r))
    }

    pub fn next_modality(&self, pos: usize) -> Option<Modality> {
        let (h, _) = (*self.slots.get(pos)?)?;
        Some(self.heads[h].modality)
    }

    /// Weighted next-token loss sums; `weights[t]` scores token `t + 1`.
    pub fn report(&self, stream: &InterleavedStream, weights: &[f64]) -> LossReport {
        head_report(stream, &self.heads, weights)
    }

    /// Highest-scoring id at `pos`; the lowest id wins ties.
    pub fn argmax(&self, pos: usize) -> Option<usize> {
        self.logits(pos).map(argmax)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(row)[target]`.
pub fn nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    z.ln() + max - row[target]
}

/// Weighted loss and accuracy sums of one target modality.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub nll: f64,
    pub weight: f64,
    pub correct: f64,
}

impl LossSums {
    pub fn add(&mut self, other: &LossSums) {
        self.nll += other.nll;
        self.weight += other.weight;
        self.correct += other.correct;
    }
}

/// Per-target-modality loss sums; combine across sequences with
/// [`LossReport::merge`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub sums: [LossSums; 6],
}

impl LossReport {
    pub fn merge(&mut self, other: &LossReport) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.add(b);
        }
    }

    pub fn weight(&self) -> f64 {
        self.sums.iter().map(|s| s.weight).sum()
    }

    /// Weighted mean negative log-likelihood over every scored position.
    pub fn total(&self) -> f64 {
        let w = self.weight();
        if w == 0.0 {
            return 0.0;
        }
        self.sums.iter().map(|s| s.nll).sum::<f64>() / w
    }

    pub fn accuracy(&self) -> f64 {
        let w = self.weight();
        if w == 0.0 {
            return 0.0;
        }
        self.sums.iter().map(|s| s.correct).sum::<f64>() / w
    }

    /// `(mean loss, accuracy, weight)` of one target modality.
    pub fn modality(&self, m: Modality) -> Option<(f64, f64, f64)> {
        let s = self.sums[m.index()];
        (s.weight > 0.0).then(|| (s.nll / s.weight, s.correct / s.weight, s.weight))
    }
}

fn head_report(stream: &InterleavedStream, heads: &[HeadLogits], weights: &[f64]) -> LossReport {
    let mut report = LossReport::default();
    for h in heads {
        let s = &mut report.sums[h.modality.index()];
        for (r, &p) in h.positions.iter().enumerate() {
            let Some(&w) = weights.get(p) else { continue };
            if w == 0.0 {
                continue;
            }
            let target = stream.tokens[p + 1].id as usize;
            let row = h.logits.row(r);
            s.nll += w * nll(row, target);
            s.weight += w;
            if argmax(row) == target {
                s.correct += w;
            }
        }
    }
    report
}

fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        .expect("nonzero dims")
}

struct Built {
    timeline: Timeline,
    hidden: Vec<Var>,
    heads: Vec<(Modality, Vec<usize>, Var)>,
}

impl SlbModel {
    /// Fresh parameters drawn from `rng`.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d;
        let mut params = ParamStore::new();
        for m in Modality::ALL {
            params.insert(
                format!("embed.{m}"),
                init_normal(rng, config.vocab.get(m), d, 1.0),
            )?;
        }
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for l in 0..config.n_layers {
            register_layer(&mut params, &format!("layer{l}"), config.layer_dims(), out_scale, rng)?;
        }
        params.insert("ln_out.gain", Tensor::vector(vec![1.0; d])?)?;
        params.insert("ln_out.bias", Tensor::vector(vec![0.0; d])?)?;
        for m in Modality::ALL {
            let v = config.vocab.get(m);
            params.insert(
                format!("head.{m}.w"),
                init_normal(rng, d, v, 1.0 / (d as f64).sqrt()),
            )?;
            params.insert(format!("head.{m}.b"), Tensor::vector(vec![0.0; v])?)?;
        }
        Ok(SlbModel { config, params })
    }

    pub fn timeline_options(&self) -> TimelineOptions {
        TimelineOptions {
            integer_motion: self.config.integer_rope,
            fallback_interval: Some(1.0 / self.config.rate_speech),
        }
    }

    pub fn timeline(&self, stream: &InterleavedStream) -> Result<Timeline, ModelError> {
        Ok(timeline::assign(
            stream,
            &self.config.affine,
            self.timeline_options(),
        )?)
    }

    fn check_ids(&self, stream: &InterleavedStream) -> Result<(), ModelError> {
        for (position, tok) in stream.tokens.iter().enumerate() {
            let vocab = self.config.vocab.get(tok.modality);
            if tok.id as usize >= vocab {
                return Err(ModelError::TokenOutOfRange {
                    position,
                    modality: tok.modality,
                    id: tok.id,
                    vocab,
                });
            }
        }
        Ok(())
    }

    fn build(
        &self,
        g: &mut Graph,
        bound: &Bound,
        stream: &InterleavedStream,
        last_next: Option<Modality>,
    ) -> Result<Built, ModelError> {
        if stream.is_empty() {
            return Err(ModelError::EmptyStream);
        }
        self.check_ids(stream)?;
        let cfg = &self.config;
        let p = &self.params;
        let n = stream.len();
        let labels = stream.labels();
        let timeline = self.timeline(stream)?;

        let tables: Vec<Var> = Modality::ALL
            .iter()
            .map(|m| p.var(bound, &format!("embed.{m}")))
            .collect::<Result<_, _>>()?;
        let lookup: Vec<(usize, usize)> = stream
            .tokens
            .iter()
            .map(|t| (t.modality.index(), t.id as usize))
            .collect();
        let mut h = g.embed(&tables, &lookup)?;

        let routes: Arc<[usize]> = if cfg.tie_experts {
            vec![0; n].into()
        } else {
            route_indices(&route(&labels))
        };
        let mask = build_mask_with(&labels, cfg.topology())?;
        let ladder = RopeLadder::new(cfg.rotary_dim(), cfg.rope_base)?;
        let ctx = LayerContext {
            routes,
            mask: &mask,
            s_hat: &timeline.s_hat,
            ladder: &ladder,
        };
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let vars = LayerVars::lookup(p, bound, &format!("layer{l}"))?;
            h = layer_forward(g, h, &ctx, cfg.layer_dims(), &vars)?;
            hidden.push(h);
        }
        let shared: Arc<[usize]> = vec![0; n].into();
        let y = g.layer_norm(
            h,
            &[p.var(bound, "ln_out.gain")?],
            &[p.var(bound, "ln_out.bias")?],
            shared,
            cfg.ln_eps,
        )?;

        let next: Vec<Option<Modality>> = (0..n)
            .map(|t| labels.get(t + 1).copied().or(if t + 1 == n { last_next } else { None }))
            .collect();
        let mut heads = Vec::new();
        for m in Modality::ALL {
            let positions: Vec<usize> = (0..n).filter(|&t| next[t] == Some(m)).collect();
            if positions.is_empty() {
                continue;
            }
            let rows = g.gather_rows(y, &positions)?;
            let z = g.matmul(rows, p.var(bound, &format!("head.{m}.w"))?)?;
            let z = g.add_bias(z, p.var(bound, &format!("head.{m}.b"))?)?;
            heads.push((m, positions, z));
        }
        Ok(Built {
            timeline,
            hidden,
            heads,
        })
    }

    /// Scores every position of `stream`; the last one is scored with the
    /// head of `last_next` when given.
    pub fn forward(
        &self,
        stream: &InterleavedStream,
        last_next: Option<Modality>,
    ) -> Result<Forward, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let built = self.build(&mut g, &bound, stream, last_next)?;
        let mut slots = vec![None; stream.len()];
        let heads = built
            .heads
            .iter()
            .enumerate()
            .map(|(hi, (m, positions, z))| {
                for (r, &p) in positions.iter().enumerate() {
                    slots[p] = Some((hi, r));
                }
                HeadLogits {
                    modality: *m,
                    positions: positions.clone(),
                    logits: g.value(*z).clone(),
                }
            })
            .collect();
        Ok(Forward {
            timeline: built.timeline,
            hidden: built.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            heads,
            slots,
        })
    }

    fn weights_for(stream: &InterleavedStream, weights: Option<&[f64]>) -> Result<Vec<f64>, ModelError> {
        let n = stream.len().saturating_sub(1);
        match weights {
            None => Ok(vec![1.0; n]),
            Some(w) if w.len() == n => Ok(w.to_vec()),
            Some(w) => Err(ModelError::WeightCount {
                expected: n,
                got: w.len(),
            }),
        }
    }

    /// Next-token loss sums of one sequence without gradients.
    ///
    /// `weights[t]` weighs the prediction of token `t + 1`; `None` weighs
    /// every prediction 1.
    pub fn loss(
        &self,
        stream: &InterleavedStream,
        weights: Option<&[f64]>,
    ) -> Result<LossReport, ModelError> {
        let w = Self::weights_for(stream, weights)?;
        Ok(self.forward(stream, None)?.report(stream, &w))
    }

    /// Loss sums of one sequence; adds `scale * d(sum_t w_t nll_t)/dθ` into
    /// `grad_buf` (shaped like [`ParamStore::grad_buffer`]).
    pub fn accumulate_grads(
        &self,
        stream: &InterleavedStream,
        weights: Option<&[f64]>,
        scale: f64,
        checked: bool,
        grad_buf: &mut [Tensor],
    ) -> Result<LossReport, ModelError> {
        let w = Self::weights_for(stream, weights)?;
        let mut g = if checked { Graph::checked() } else { Graph::new() };
        let bound = self.params.bind(&mut g);
        let built = self.build(&mut g, &bound, stream, None)?;
        let mut terms = Vec::new();
        for (_, positions, z) in &built.heads {
            let targets: Vec<usize> = positions
                .iter()
                .map(|&p| stream.tokens[p + 1].id as usize)
                .collect();
            let rw: Vec<f64> = positions.iter().map(|&p| w[p] * scale).collect();
            if rw.iter().all(|&x| x == 0.0) {
                continue;
            }
            terms.push(g.cross_entropy(*z, &targets, &rw)?);
        }
        let heads: Vec<HeadLogits> = built
            .heads
            .iter()
            .map(|(m, p, z)| HeadLogits {
                modality: *m,
                positions: p.clone(),
                logits: g.value(*z).clone(),
            })
            .collect();
        let report = head_report(stream, &heads, &w);
        if let Some((&first, rest)) = terms.split_first() {
            let mut loss = first;
            for &t in rest {
                loss = g.add(loss, t)?;
            }
            let grads = g.backward(loss)?;
            self.params.collect_into(&bound, &grads, grad_buf);
        }
        Ok(report)
    }
}
