use rand::Rng;

use super::{argmax, ModelConfig, ModelError, SlbModel};
use crate::modality::Modality;
use crate::streams::{InterleavedStream, Token};

/// How the next id is drawn from a row of logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature(f64),
    /// Sample among the `k` highest logits at the given temperature.
    TopK { k: usize, temperature: f64 },
}

impl Sampler {
    pub fn sample(&self, logits: &[f64], rng: &mut impl Rng) -> usize {
        match *self {
            Sampler::Greedy => argmax(logits),
            Sampler::Temperature(tau) => sample_from(logits, tau, (0..logits.len()).collect(), rng),
            Sampler::TopK { k, temperature } => {
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                // stable: equal logits keep id order
                idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
                idx.truncate(k.max(1));
                sample_from(logits, temperature, idx, rng)
            }
        }
    }
}

fn sample_from(logits: &[f64], tau: f64, idx: Vec<usize>, rng: &mut impl Rng) -> usize {
    if !(tau > 0.0) {
        return idx
            .iter()
            .copied()
            .fold(idx[0], |b, i| if logits[i] > logits[b] { i } else { b });
    }
    let max = idx
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = idx.iter().map(|&i| ((logits[i] - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &wi) in idx.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    *idx.last().expect("non-empty candidate set")
}

/// Timestamp of a new `m` token appended to `stream`.
///
/// The token follows the previous token of its own modality by one
/// period, or starts at the stream's current time. It is pushed one
/// period past the last token whenever it would otherwise sort before it,
/// and text/speech tokens never share a timestamp with an earlier anchor.
pub fn next_timestamp(stream: &InterleavedStream, m: Modality, config: &ModelConfig) -> f64 {
    let step = 1.0 / config.rate(m);
    let own = stream.tokens.iter().rev().find(|t| t.modality == m);
    let mut t = match (own, stream.tokens.last()) {
        (Some(o), _) => o.t + step,
        (None, Some(last)) => last.t,
        (None, None) => 0.0,
    };
    if let Some(last) = stream.tokens.last() {
        if t < last.t || (t == last.t && m < last.modality) {
            t = last.t + step;
        }
    }
    if m.is_ts() {
        if let Some(&a) = stream.anchors.last() {
            let at = stream.tokens[a].t;
            if t <= at {
                t = at + step;
            }
        }
    }
    t
}

impl SlbModel {
    /// Extends `prompt` block by block following `schedule`.
    pub fn generate(
        &self,
        prompt: &InterleavedStream,
        schedule: &[(Modality, usize)],
        sampler: Sampler,
        rng: &mut impl Rng,
    ) -> Result<InterleavedStream, ModelError> {
        let mut out = prompt.clone();
        if schedule.iter().all(|&(_, n)| n == 0) {
            return Ok(out);
        }
        if out.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        for &(m, count) in schedule {
            for _ in 0..count {
                if m.is_motion() && out.anchors.is_empty() {
                    return Err(ModelError::OrphanGeneration(m));
                }
                let f = self.forward(&out, Some(m))?;
                let logits = f.logits(out.len() - 1).expect("last position is scored");
                let id = sampler.sample(logits, rng) as u32;
                let t = next_timestamp(&out, m, &self.config);
                out.push(Token::new(id, m, t));
            }
        }
        Ok(out)
    }
}
