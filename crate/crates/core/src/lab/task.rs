//! Synthetic interleaved task with exact dependency rules.
//!
//! The text/speech stream is a seeded Markov chain. Every face token is a
//! fixed permutation of the most recent text/speech id at or before its
//! time; every body token (upper, lower, hands, each with its own
//! permutation) applies the same rule to the text/speech history lagged by
//! `lag` seconds. Tokens without an antecedent carry the reserved last id.
//!
//! Optionally each rule token is preceded by a distractor: a random id of
//! the same modality at the same time. A rule token is then predicted from
//! a position whose own id carries no information about it, so the only
//! route to the answer is attention to the text/speech history.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabError;
use crate::modality::Modality;
use crate::streams::{frame_index, merge_order, InterleavedStream, Token, VocabSizes, MASTER_FPS};

/// What the token at a position is, for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Ts,
    /// Id fixed by a dependency rule.
    Rule,
    /// Random id; never scored.
    Distractor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTaskConfig {
    /// Seed of the sequence contents.
    pub seed: u64,
    /// Seed of the rule permutations; shared by every split.
    pub rule_seed: u64,
    pub n_sequences: usize,
    /// First per-sequence generator stream; splits use disjoint ranges.
    pub stream_offset: u64,
    pub vocab: VocabSizes,
    pub seconds: f64,
    pub rate_text: f64,
    pub rate_speech: f64,
    pub rate_face: f64,
    pub rate_body: f64,
    /// Interleave text tokens between speech tokens.
    pub text: bool,
    /// Body lag in seconds; a multiple of one master-clock frame.
    pub lag: f64,
    /// Probability that the next text/speech id follows the transition
    /// permutation instead of being drawn uniformly.
    pub follow: f64,
    /// Probability of a distractor before each rule token.
    pub distractor_rate: f64,
    /// Draw speech intervals from {1, 2, 3} frames instead of a fixed rate.
    pub jitter: bool,
    /// Use identity maps instead of random permutations.
    pub identity_rules: bool,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            seed: 0,
            rule_seed: 7,
            n_sequences: 2000,
            stream_offset: 0,
            vocab: VocabSizes::uniform(64),
            seconds: 0.64,
            rate_text: 12.5,
            rate_speech: 12.5,
            rate_face: 25.0,
            rate_body: 6.25,
            text: false,
            lag: 0.0,
            follow: 0.5,
            distractor_rate: 1.0,
            jitter: false,
            identity_rules: false,
        }
    }
}

impl SynthTaskConfig {
    pub fn lag_frames(&self) -> Result<i64, LabError> {
        let f = self.lag * MASTER_FPS;
        if !(self.lag >= 0.0) || (f - f.round()).abs() > 1e-9 {
            return Err(LabError::LagOffClock(self.lag));
        }
        if self.lag > self.seconds {
            return Err(LabError::LagTooLong {
                lag: self.lag,
                seconds: self.seconds,
            });
        }
        Ok(f.round() as i64)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.lag_frames()?;
        let bad = |what: &str| Err(LabError::Task(what.to_string()));
        if !(self.seconds > 0.0) || !self.seconds.is_finite() {
            return bad("seconds must be positive");
        }
        for r in [self.rate_speech, self.rate_face, self.rate_body, self.rate_text] {
            if !(r > 0.0) || !r.is_finite() {
                return bad("rates must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.follow) || !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("follow and distractor_rate must lie in [0, 1]");
        }
        if Modality::ALL.iter().any(|&m| self.vocab.get(m) < 2) {
            return bad("every vocabulary needs at least 2 ids");
        }
        Ok(())
    }
}

/// The fixed maps of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Rules {
    /// Per modality: transition permutation for text/speech, target map for
    /// motion. Each maps `0..vocab-1` onto itself.
    pub maps: [Vec<u32>; 6],
    pub lag_frames: i64,
    pub vocab: VocabSizes,
}

impl Rules {
    pub fn new(cfg: &SynthTaskConfig) -> Result<Self, LabError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rule_seed);
        let maps = Modality::ALL.map(|m| {
            let mut p: Vec<u32> = (0..(cfg.vocab.get(m) - 1) as u32).collect();
            if !cfg.identity_rules {
                p.shuffle(&mut rng);
            }
            p
        });
        Ok(Rules {
            maps,
            lag_frames: cfg.lag_frames()?,
            vocab: cfg.vocab,
        })
    }

    pub fn reserved(&self, m: Modality) -> u32 {
        (self.vocab.get(m) - 1) as u32
    }

    /// Target of a motion token whose antecedent has id `ts_id`.
    pub fn apply(&self, m: Modality, ts_id: Option<u32>) -> u32 {
        let map = &self.maps[m.index()];
        match ts_id {
            Some(id) => map[id as usize % map.len()],
            None => self.reserved(m),
        }
    }

    pub fn lag_for(&self, m: Modality) -> i64 {
        if m.is_body() {
            self.lag_frames
        } else {
            0
        }
    }
}

/// One generated sequence with the role of every position.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stream: InterleavedStream,
    pub targets: Vec<Target>,
}

impl Sample {
    /// Weights of the next-token predictions: `w[t]` scores token `t + 1`.
    pub fn weights(&self, f: impl Fn(Target) -> f64) -> Vec<f64> {
        self.targets.iter().skip(1).map(|&t| f(t)).collect()
    }

    /// Text/speech and rule targets.
    pub fn train_weights(&self) -> Vec<f64> {
        self.weights(|t| if t == Target::Distractor { 0.0 } else { 1.0 })
    }

    pub fn rule_weights(&self) -> Vec<f64> {
        self.weights(|t| if t == Target::Rule { 1.0 } else { 0.0 })
    }

    pub fn ts_weights(&self) -> Vec<f64> {
        self.weights(|t| if t == Target::Ts { 1.0 } else { 0.0 })
    }
}

fn grid(rate: f64, offset: f64, total_frames: i64) -> Vec<i64> {
    let mut out = Vec::new();
    for k in 0.. {
        let f = frame_index(offset + k as f64 / rate);
        if f >= total_frames {
            break;
        }
        if out.last() != Some(&f) {
            out.push(f);
        }
    }
    out
}

fn time(frame: i64) -> f64 {
    frame as f64 / MASTER_FPS
}

/// Generates sequence `index` of the task.
pub fn gen_sample(cfg: &SynthTaskConfig, rules: &Rules, index: u64) -> Result<Sample, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream_offset + index);
    let total = frame_index(cfg.seconds).max(1);

    let speech_frames = if cfg.jitter {
        let mut f = 0;
        let mut out = Vec::new();
        while f < total {
            out.push(f);
            f += rng.gen_range(1..=3);
        }
        out
    } else {
        grid(cfg.rate_speech, 0.0, total)
    };
    let mut ts: Vec<(i64, Modality)> = speech_frames.iter().map(|&f| (f, Modality::Speech)).collect();
    if cfg.text {
        let half = 0.5 / cfg.rate_text;
        for f in grid(cfg.rate_text, half, total) {
            if !speech_frames.contains(&f) {
                ts.push((f, Modality::Text));
            }
        }
        ts.sort();
    }

    // text/speech ids: one Markov chain over the merged anchor sequence
    let mut ts_tokens: Vec<(i64, Modality, u32)> = Vec::with_capacity(ts.len());
    let mut prev: Option<u32> = None;
    for &(f, m) in &ts {
        let n = cfg.vocab.get(m) as u32 - 1;
        let id = match prev {
            Some(p) if rng.gen::<f64>() < cfg.follow => rules.maps[m.index()][(p % n) as usize],
            _ => rng.gen_range(0..n),
        };
        prev = Some(id);
        ts_tokens.push((f, m, id));
    }

    let mut subs: Vec<(Modality, Vec<Token>)> = Vec::new();
    let mut kinds: Vec<Vec<Target>> = Vec::new();
    for m in [Modality::Text, Modality::Speech] {
        let toks: Vec<Token> = ts_tokens
            .iter()
            .filter(|t| t.1 == m)
            .map(|&(f, _, id)| Token::new(id, m, time(f)))
            .collect();
        kinds.push(vec![Target::Ts; toks.len()]);
        subs.push((m, toks));
    }
    for m in Modality::ALL.into_iter().filter(|m| m.is_motion()) {
        let rate = if m == Modality::Face {
            cfg.rate_face
        } else {
            cfg.rate_body
        };
        let lag = rules.lag_for(m);
        let mut toks = Vec::new();
        let mut k = Vec::new();
        let mut cursor = 0;
        let mut antecedent = None;
        for f in grid(rate, 0.0, total) {
            while cursor < ts_tokens.len() && ts_tokens[cursor].0 <= f - lag {
                antecedent = Some(ts_tokens[cursor].2);
                cursor += 1;
            }
            if rng.gen::<f64>() < cfg.distractor_rate {
                let n = cfg.vocab.get(m) as u32 - 1;
                toks.push(Token::new(rng.gen_range(0..n), m, time(f)));
                k.push(Target::Distractor);
            }
            toks.push(Token::new(rules.apply(m, antecedent), m, time(f)));
            k.push(Target::Rule);
        }
        subs.push((m, toks));
        kinds.push(k);
    }

    let order = merge_order(&subs)?;
    let tokens = order.iter().map(|&(s, i)| subs[s].1[i]).collect();
    let targets = order.iter().map(|&(s, i)| kinds[s][i]).collect();
    Ok(Sample {
        stream: InterleavedStream::from_tokens(tokens),
        targets,
    })
}

/// All `cfg.n_sequences` sequences of a task, in index order.
pub fn gen_dataset(cfg: &SynthTaskConfig) -> Result<Vec<Sample>, LabError> {
    cfg.validate()?;
    let rules = Rules::new(cfg)?;
    (0..cfg.n_sequences as u64)
        .map(|i| gen_sample(cfg, &rules, i))
        .collect()
}

/// Expected id of the motion token at `position`, recomputed from the
/// text/speech tokens of `stream` alone. `None` for text/speech positions.
pub fn oracle_predict(rules: &Rules, stream: &InterleavedStream, position: usize) -> Option<u32> {
    let tok = stream.tokens.get(position)?;
    if tok.modality.is_ts() {
        return None;
    }
    let limit = frame_index(tok.t) - rules.lag_for(tok.modality);
    let mut best: Option<(i64, usize)> = None;
    for (i, t) in stream.tokens.iter().enumerate() {
        if !t.modality.is_ts() {
            continue;
        }
        let f = frame_index(t.t);
        if f <= limit && best.is_none_or(|(bf, bi)| (f, i) > (bf, bi)) {
            best = Some((f, i));
        }
    }
    Some(rules.apply(tok.modality, best.map(|(_, i)| stream.tokens[i].id)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sample: usize,
    pub position: usize,
    pub message: String,
}

/// Replays the rules over every sample; empty means consistent.
pub fn oracle_verify(rules: &Rules, samples: &[Sample]) -> Vec<Violation> {
    let mut out = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let toks = &s.stream.tokens;
        if s.targets.len() != toks.len() {
            out.push(Violation {
                sample: si,
                position: 0,
                message: "annotation length differs from stream length".into(),
            });
            continue;
        }
        for (p, (&kind, tok)) in s.targets.iter().zip(toks).enumerate() {
            let v = |message: String| Violation {
                sample: si,
                position: p,
                message,
            };
            match kind {
                Target::Ts if !tok.modality.is_ts() => {
                    out.push(v(format!("{} token annotated as text/speech", tok.modality)))
                }
                Target::Rule => {
                    let expect = oracle_predict(rules, &s.stream, p);
                    if expect != Some(tok.id) {
                        out.push(v(format!("id {} but rule gives {expect:?}", tok.id)));
                    }
                }
                Target::Distractor => {
                    let next_ok = toks.get(p + 1).is_some_and(|n| {
                        n.modality == tok.modality && n.t == tok.t && s.targets[p + 1] == Target::Rule
                    });
                    if tok.modality.is_ts() || !next_ok {
                        out.push(v("distractor not followed by its rule token".into()));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// Accuracy of the oracle itself on the rule positions of `samples`.
pub fn oracle_accuracy(rules: &Rules, samples: &[Sample]) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for s in samples {
        for (p, &k) in s.targets.iter().enumerate() {
            if k == Target::Rule {
                n += 1;
                if oracle_predict(rules, &s.stream, p) == Some(s.stream.tokens[p].id) {
                    hit += 1;
                }
            }
        }
    }
    if n == 0 {
        1.0
    } else {
        hit as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::validate_stream;
    use Modality::*;

    fn small() -> SynthTaskConfig {
        SynthTaskConfig {
            n_sequences: 20,
            seed: 3,
            ..SynthTaskConfig::default()
        }
    }

    #[test]
    fn identity_rule_copies_latest_speech_id() {
        let cfg = SynthTaskConfig {
            identity_rules: true,
            distractor_rate: 0.0,
            ..small()
        };
        let data = gen_dataset(&cfg).unwrap();
        for s in &data {
            let mut latest = None;
            for tok in &s.stream.tokens {
                match tok.modality {
                    Speech => latest = Some(tok.id),
                    Face => assert_eq!(Some(tok.id), latest.map(|id| id % 63)),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_dataset(&small()).unwrap();
        let b = gen_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(&SynthTaskConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn datasets_are_oracle_consistent_and_valid() {
        for cfg in [
            small(),
            SynthTaskConfig {
                lag: 0.08,
                jitter: true,
                ..small()
            },
            SynthTaskConfig {
                text: true,
                distractor_rate: 0.3,
                lag: 0.04,
                ..small()
            },
        ] {
            let rules = Rules::new(&cfg).unwrap();
            let data = gen_dataset(&cfg).unwrap();
            assert!(oracle_verify(&rules, &data).is_empty());
            assert_eq!(oracle_accuracy(&rules, &data), 1.0);
            for s in &data {
                assert!(validate_stream(&s.stream, &cfg.vocab).is_empty());
            }
        }
    }

    #[test]
    fn oracle_independent_scan_matches_generator_labels() {
        let cfg = SynthTaskConfig {
            lag: 0.12,
            jitter: true,
            ..small()
        };
        let rules = Rules::new(&cfg).unwrap();
        let s = gen_sample(&cfg, &rules, 0).unwrap();
        let mut rule_positions = 0;
        for (p, &k) in s.targets.iter().enumerate() {
            if k == Target::Rule {
                rule_positions += 1;
                assert_eq!(oracle_predict(&rules, &s.stream, p), Some(s.stream.tokens[p].id));
            }
        }
        assert!(rule_positions > 20);
    }

    #[test]
    fn no_antecedent_gives_reserved_id() {
        let cfg = SynthTaskConfig {
            lag: 0.16,
            ..small()
        };
        let rules = Rules::new(&cfg).unwrap();
        let s = gen_sample(&cfg, &rules, 0).unwrap();
        let first_upper = s
            .stream
            .tokens
            .iter()
            .position(|t| t.modality == Upper)
            .unwrap();
        // upper at t = 0 with a 0.16 s lag has no antecedent
        let p = first_upper + usize::from(s.targets[first_upper] == Target::Distractor);
        assert_eq!(s.stream.tokens[p].id, 63);
        assert_eq!(oracle_predict(&rules, &s.stream, p), Some(63));
        assert_eq!(oracle_predict(&rules, &s.stream, 0), None);
    }

    #[test]
    fn permuted_rules_disagree_with_identity() {
        let cfg = SynthTaskConfig {
            distractor_rate: 0.0,
            ..small()
        };
        let permuted = Rules::new(&cfg).unwrap();
        let identity = Rules::new(&SynthTaskConfig {
            identity_rules: true,
            ..cfg.clone()
        })
        .unwrap();
        let s = gen_sample(&cfg, &permuted, 0).unwrap();
        let disagree = (0..s.stream.len())
            .filter(|&p| oracle_predict(&permuted, &s.stream, p) != oracle_predict(&identity, &s.stream, p))
            .count();
        assert!(disagree > 0);
        let relabeled = Sample {
            stream: s.stream.clone(),
            targets: s.targets.clone(),
        };
        assert!(!oracle_verify(&identity, &[relabeled]).is_empty());
    }

    #[test]
    fn distractors_precede_rule_tokens() {
        let cfg = small();
        let rules = Rules::new(&cfg).unwrap();
        let s = gen_sample(&cfg, &rules, 1).unwrap();
        let d = s.targets.iter().filter(|&&k| k == Target::Distractor).count();
        let r = s.targets.iter().filter(|&&k| k == Target::Rule).count();
        assert_eq!(d, r);
        // 0.64 s: 8 speech, 16 face, 4 per body stream, all doubled
        assert_eq!(s.stream.len(), 8 + 2 * (16 + 12));
        let w = s.train_weights();
        assert_eq!(w.len(), s.stream.len() - 1);
        assert_eq!(w.iter().sum::<f64>(), (8 - 1 + 28) as f64);
    }

    #[test]
    fn lag_must_fit_the_clock_and_the_sequence() {
        let bad = SynthTaskConfig {
            lag: 0.05,
            ..small()
        };
        assert!(matches!(gen_dataset(&bad), Err(LabError::LagOffClock(_))));
        let long = SynthTaskConfig {
            lag: 0.8,
            ..small()
        };
        assert!(matches!(gen_dataset(&long), Err(LabError::LagTooLong { .. })));
    }

    #[test]
    fn jittered_speech_intervals() {
        let cfg = SynthTaskConfig {
            jitter: true,
            seconds: 2.0,
            ..small()
        };
        let rules = Rules::new(&cfg).unwrap();
        let s = gen_sample(&cfg, &rules, 0).unwrap();
        let frames: Vec<i64> = s
            .stream
            .tokens
            .iter()
            .filter(|t| t.modality == Speech)
            .map(|t| frame_index(t.t))
            .collect();
        let gaps: std::collections::BTreeSet<i64> = frames.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(gaps.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
