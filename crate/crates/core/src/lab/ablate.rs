use std::fmt;
use std::str::FromStr;

use super::train::parallel_map;
use super::{gen_dataset, oracle_verify, train, EvalReport, LabError, Rules, RunConfig};
use crate::modality::Modality;
use crate::model::ModelConfig;

/// Architectural variant compared by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Default,
    /// Motion queries read nothing.
    NoCrossAttention,
    /// Motion queries may also read face and body keys.
    FaceBodyAttentionOn,
    /// Every position uses the text/speech expert's parameters.
    DenseTiedExperts,
    /// Motion indices are rounded to the nearest anchor index.
    IntegerRope,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Default,
        Variant::NoCrossAttention,
        Variant::FaceBodyAttentionOn,
        Variant::DenseTiedExperts,
        Variant::IntegerRope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::FaceBodyAttentionOn => "face_body_attention_on",
            Variant::DenseTiedExperts => "dense_tied_experts",
            Variant::IntegerRope => "integer_rope",
        }
    }

    /// The config key this variant changes, with its value.
    pub fn delta(self) -> Option<(&'static str, &'static str)> {
        match self {
            Variant::Default => None,
            Variant::NoCrossAttention => Some(("cross_attention", "false")),
            Variant::FaceBodyAttentionOn => Some(("enable_face_body", "true")),
            Variant::DenseTiedExperts => Some(("tie_experts", "true")),
            Variant::IntegerRope => Some(("integer_rope", "true")),
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        if let Some((k, v)) = self.delta() {
            cfg.set(k, v).expect("variant keys are valid");
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LabError::UnknownVariant(s.to_string()))
    }
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// A motion modality, or `body` / `motion` for pooled accuracy.
    pub modality: String,
    pub accuracy: f64,
}

/// Per-variant, per-modality statistics over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub modality: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl SummaryRow {
    /// Cross-seed spread: `max - min`.
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Chance floor of the motion vocabularies, `1 / vocab`.
    pub chance: f64,
}

pub const TABLE_HEADER: &str = "variant\tseed\tmodality\taccuracy";

impl AblationTable {
    /// Delimited table with columns variant, seed, modality, accuracy.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                r.variant, r.seed, r.modality, r.accuracy
            ));
        }
        out
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        for r in &self.rows {
            match out
                .iter_mut()
                .find(|s| s.variant == r.variant && s.modality == r.modality)
            {
                Some(s) => {
                    s.mean += r.accuracy;
                    s.min = s.min.min(r.accuracy);
                    s.max = s.max.max(r.accuracy);
                    s.n += 1;
                }
                None => out.push(SummaryRow {
                    variant: r.variant,
                    modality: r.modality.clone(),
                    mean: r.accuracy,
                    min: r.accuracy,
                    max: r.accuracy,
                    n: 1,
                }),
            }
        }
        for s in &mut out {
            s.mean /= s.n as f64;
        }
        out
    }

    pub fn stat(&self, variant: Variant, modality: &str) -> Option<SummaryRow> {
        self.summary()
            .into_iter()
            .find(|s| s.variant == variant && s.modality == modality)
    }

    /// Accuracies of one variant and modality in seed order.
    pub fn values(&self, variant: Variant, modality: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.modality == modality)
            .map(|r| r.accuracy)
            .collect()
    }

    /// Plain-text summary: mean, spread and range per variant and modality.
    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "{:<24} {:<8} {:>8} {:>8} {:>17}\n",
            "variant", "modality", "mean", "spread", "range"
        );
        for s in self.summary() {
            out.push_str(&format!(
                "{:<24} {:<8} {:>8.4} {:>8.4}   [{:.4}, {:.4}]\n",
                s.variant.name(),
                s.modality,
                s.mean,
                s.spread(),
                s.min,
                s.max
            ));
        }
        out.push_str(&format!("chance floor {:.4}\n", self.chance));
        out
    }
}

fn rows_of(variant: Variant, seed: u64, r: &EvalReport) -> Vec<AblationRow> {
    let mut out = Vec::new();
    let mut push = |modality: &str, acc: Option<f64>| {
        if let Some(accuracy) = acc {
            out.push(AblationRow {
                variant,
                seed,
                modality: modality.to_string(),
                accuracy,
            });
        }
    };
    push("face", r.face());
    for m in Modality::BODY {
        push(m.name(), r.accuracy(m));
    }
    push("body", r.body());
    push("motion", r.motion());
    out
}

/// Trains every (variant, seed) pair of `base` and tabulates the final
/// held-out rule accuracy. Runs are independent and spread over
/// `base.train.workers` threads; each run is itself single-threaded.
pub fn ablate(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable, LabError> {
    if seeds.len() < 3 {
        return Err(LabError::TooFewSeeds(seeds.len()));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let workers = base.train.workers;
    let results = parallel_map(&jobs, workers, |&(variant, seed)| {
        let mut run = base.clone();
        run.set("seed", &seed.to_string())?;
        run.set("train.workers", "1")?;
        variant.apply(&mut run.model);
        run.validate()?;
        let train_data = gen_dataset(&run.task)?;
        let eval_data = gen_dataset(&run.eval_task())?;
        let rules = Rules::new(&run.task)?;
        let bad = oracle_verify(&rules, &train_data).len() + oracle_verify(&rules, &eval_data).len();
        if bad > 0 {
            return Err(LabError::OracleViolations(bad));
        }
        let out = train(&run, &train_data, &eval_data)?;
        Ok(rows_of(variant, seed, &out.final_eval))
    })?;
    let motion_vocab = Modality::ALL
        .iter()
        .filter(|m| m.is_motion())
        .map(|&m| base.model.vocab.get(m))
        .max()
        .unwrap_or(1);
    Ok(AblationTable {
        rows: results.into_iter().flatten().collect(),
        chance: 1.0 / motion_vocab as f64,
    })
}
