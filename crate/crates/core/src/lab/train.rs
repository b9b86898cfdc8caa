use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabError, RunConfig, Sample};
use crate::config::{invalid, value, ConfigError};
use crate::modality::Modality;
use crate::model::{Checkpoint, LossReport, LossSums, ModelError, RngState, SlbModel};
use crate::mome::MomeError;
use crate::numerics::{AdamW, AdamWConfig, NumericsError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Linear warmup length in steps.
    pub warmup: u64,
    /// Cosine decay of the learning rate to zero at `steps`.
    pub cosine: bool,
    pub eval_every: u64,
    pub n_eval: usize,
    /// Data-parallel replicas; results do not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            clip: 1.0,
            warmup: 20,
            cosine: true,
            eval_every: 100,
            n_eval: 200,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "steps" => self.steps = value(key, v)?,
            "batch_size" => self.batch_size = value(key, v)?,
            "lr" => self.lr = value(key, v)?,
            "weight_decay" => self.weight_decay = value(key, v)?,
            "clip" => self.clip = value(key, v)?,
            "warmup" => self.warmup = value(key, v)?,
            "cosine" => self.cosine = value(key, v)?,
            "eval_every" => self.eval_every = value(key, v)?,
            "n_eval" => self.n_eval = value(key, v)?,
            "workers" => self.workers = value(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip", self.clip.to_string()),
            ("warmup", self.warmup.to_string()),
            ("cosine", self.cosine.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("workers", self.workers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(invalid("train.eval_every", "must be positive"));
        }
        if self.workers == 0 {
            return Err(invalid("train.workers", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip >= 0.0) {
            return Err(invalid("train.weight_decay", "decay and clip must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate used by step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup > 0 && step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let decay = if self.cosine && self.steps > 0 {
            let p = (step as f64 / self.steps as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

pub const METRIC_HEADER: &str = "step\tsplit\tmodality\tloss\taccuracy";

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub split: Split,
    /// A modality name or an aggregate: `body`, `motion`, `ts`.
    pub modality: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            self.step, self.split, self.modality, self.loss, self.accuracy
        )
    }
}

fn group(report: &LossReport, ms: &[Modality]) -> LossSums {
    let mut s = LossSums::default();
    for m in ms {
        s.add(&report.sums[m.index()]);
    }
    s
}

fn records(report: &LossReport, step: u64, split: Split) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    let mut push = |name: &str, s: LossSums| {
        if s.weight > 0.0 {
            out.push(MetricRecord {
                step,
                split,
                modality: name.to_string(),
                loss: s.nll / s.weight,
                accuracy: s.correct / s.weight,
            });
        }
    };
    for m in Modality::ALL {
        push(m.name(), report.sums[m.index()]);
    }
    push("ts", group(report, &[Modality::Text, Modality::Speech]));
    push("body", group(report, &Modality::BODY));
    let motion: Vec<Modality> = Modality::ALL.into_iter().filter(|m| m.is_motion()).collect();
    push("motion", group(report, &motion));
    out
}

/// Held-out metrics: rule targets of motion tokens, and text/speech
/// next-token targets.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalReport {
    pub rule: LossReport,
    pub ts: LossReport,
}

impl EvalReport {
    fn acc(s: LossSums) -> Option<f64> {
        (s.weight > 0.0).then(|| s.correct / s.weight)
    }

    /// Rule-target accuracy of one motion modality.
    pub fn accuracy(&self, m: Modality) -> Option<f64> {
        Self::acc(self.rule.sums[m.index()])
    }

    pub fn face(&self) -> Option<f64> {
        self.accuracy(Modality::Face)
    }

    /// Rule-target accuracy pooled over upper, lower and hands.
    pub fn body(&self) -> Option<f64> {
        Self::acc(group(&self.rule, &Modality::BODY))
    }

    /// Rule-target accuracy pooled over every motion modality.
    pub fn motion(&self) -> Option<f64> {
        (self.rule.weight() > 0.0).then(|| self.rule.accuracy())
    }

    pub fn ts_accuracy(&self) -> Option<f64> {
        (self.ts.weight() > 0.0).then(|| self.ts.accuracy())
    }

    pub fn records(&self, step: u64) -> Vec<MetricRecord> {
        let mut merged = self.rule;
        merged.merge(&self.ts);
        records(&merged, step, Split::Eval)
    }
}

pub(crate) fn parallel_map<T, R>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R, LabError> + Sync,
) -> Result<Vec<R>, LabError>
where
    T: Sync,
    R: Send,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<R>, LabError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>, LabError>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores every sample; reduction runs in sample order.
pub fn evaluate(model: &SlbModel, samples: &[Sample], workers: usize) -> Result<EvalReport, LabError> {
    let parts = parallel_map(samples, workers, |s| {
        let f = model.forward(&s.stream, None)?;
        Ok(EvalReport {
            rule: f.report(&s.stream, &s.rule_weights()),
            ts: f.report(&s.stream, &s.ts_weights()),
        })
    })?;
    let mut out = EvalReport::default();
    for p in parts {
        out.rule.merge(&p.rule);
        out.ts.merge(&p.ts);
    }
    Ok(out)
}

/// Result of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricRecord>,
    /// Training loss of every step taken in this session.
    pub losses: Vec<f64>,
    pub final_eval: EvalReport,
}

/// Step-by-step training state.
pub struct Trainer<'a> {
    pub run: RunConfig,
    train_data: &'a [Sample],
    eval_data: &'a [Sample],
    weights: Vec<Vec<f64>>,
    pub model: SlbModel,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    pub step: u64,
    pub log: Vec<MetricRecord>,
    pub losses: Vec<f64>,
    window: LossReport,
    last_eval: Option<EvalReport>,
}

fn adam_config(run: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        lr: run.train.lr,
        weight_decay: run.train.weight_decay,
        clip: run.train.clip,
        ..AdamWConfig::default()
    }
}

impl<'a> Trainer<'a> {
    /// Fresh model and optimizer seeded from `run.seed`.
    pub fn new(run: &RunConfig, train_data: &'a [Sample], eval_data: &'a [Sample]) -> Result<Self, LabError> {
        run.validate()?;
        let model = SlbModel::new(run.model.clone(), &mut ChaCha8Rng::seed_from_u64(run.seed))?;
        let opt = AdamW::new(adam_config(run), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(1);
        Ok(Self::assemble(run, train_data, eval_data, model, opt, rng, 0))
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        run: &RunConfig,
        train_data: &'a [Sample],
        eval_data: &'a [Sample],
        ckpt: Checkpoint,
    ) -> Result<Self, LabError> {
        run.validate()?;
        let opt = match ckpt.optimizer {
            Some(o) => o,
            None => AdamW::new(adam_config(run), &ckpt.model.params),
        };
        Ok(Self::assemble(
            run,
            train_data,
            eval_data,
            ckpt.model,
            opt,
            ckpt.rng.restore(),
            ckpt.step,
        ))
    }

    fn assemble(
        run: &RunConfig,
        train_data: &'a [Sample],
        eval_data: &'a [Sample],
        model: SlbModel,
        opt: AdamW,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Self {
        Trainer {
            run: run.clone(),
            train_data,
            eval_data,
            weights: train_data.iter().map(Sample::train_weights).collect(),
            model,
            opt,
            rng,
            step,
            log: Vec::new(),
            losses: Vec::new(),
            window: LossReport::default(),
            last_eval: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.opt.clone()),
            rng: RngState::of(&self.rng),
            step: self.step,
        }
    }

    pub fn evaluate(&mut self) -> Result<EvalReport, LabError> {
        let r = evaluate(&self.model, self.eval_data, self.run.train.workers)?;
        self.log.extend(r.records(self.step));
        self.last_eval = Some(r);
        Ok(r)
    }

    /// One optimizer step on a freshly drawn batch; returns its loss.
    pub fn step_once(&mut self) -> Result<f64, LabError> {
        let n = self.train_data.len();
        if n == 0 {
            return Err(LabError::Task("empty training set".into()));
        }
        let batch: Vec<usize> = (0..self.run.train.batch_size)
            .map(|_| self.rng.gen_range(0..n))
            .collect();
        let total: f64 = batch
            .iter()
            .map(|&i| self.weights[i].iter().sum::<f64>())
            .sum();
        let step = self.step + 1;
        let diverged = |message: String| LabError::Divergence { step, message };
        if total == 0.0 {
            return Err(diverged("batch has no scored targets".into()));
        }
        let model = &self.model;
        let (data, weights) = (self.train_data, &self.weights);
        let parts = parallel_map(&batch, self.run.train.workers, |&i| {
            let mut buf = model.params.grad_buffer();
            let r = model.accumulate_grads(&data[i].stream, Some(&weights[i]), 1.0 / total, true, &mut buf);
            match r {
                Ok(r) => Ok((r, buf)),
                Err(ModelError::Numerics(NumericsError::NonFinite(op)))
                | Err(ModelError::Mome(MomeError::Numerics(NumericsError::NonFinite(op)))) => {
                    Err(diverged(format!("non-finite value in {op}")))
                }
                Err(e) => Err(e.into()),
            }
        })?;
        self.model.params.zero_grads();
        let mut report = LossReport::default();
        for (r, buf) in &parts {
            report.merge(r);
            self.model.params.add_grads(buf);
        }
        let loss = report.total();
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        self.opt.config.lr = self.run.train.lr_at(self.step);
        let norm = self.opt.update(&mut self.model.params);
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm {norm}")));
        }
        self.step = step;
        self.window.merge(&report);
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains until `until` steps have been taken in total, evaluating at
    /// step 0 of a fresh run, every `eval_every` steps and at the end.
    pub fn run_until(&mut self, until: u64) -> Result<(), LabError> {
        if self.step == 0 && self.log.is_empty() {
            self.evaluate()?;
        }
        while self.step < until {
            self.step_once()?;
            if self.step.is_multiple_of(self.run.train.eval_every) || self.step == self.run.train.steps {
                self.log.extend(records(&self.window, self.step, Split::Train));
                self.window = LossReport::default();
                self.evaluate()?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutcome, LabError> {
        let final_eval = match self.last_eval {
            Some(r) if self.log.last().is_some_and(|l| l.step == self.step) => r,
            _ => self.evaluate()?,
        };
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            log: self.log,
            losses: self.losses,
            final_eval,
        })
    }
}

/// Trains a fresh model for `run.train.steps` steps.
pub fn train(run: &RunConfig, train_data: &[Sample], eval_data: &[Sample]) -> Result<TrainOutcome, LabError> {
    let mut t = Trainer::new(run, train_data, eval_data)?;
    t.run_until(run.train.steps)?;
    t.finish()
}
