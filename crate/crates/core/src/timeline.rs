//! The single rotary timeline shared by all modalities.
//!
//! Text and speech tokens are anchors and receive consecutive integer
//! indices. Motion tokens receive a fractional index by linear
//! interpolation between the anchors around their timestamp, or by
//! extrapolating with the median anchor interval outside the anchored
//! span. A per-modality affine map then shifts and scales the index.

use crate::modality::Modality;
use crate::streams::InterleavedStream;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TimelineError {
    #[error("no anchors: stream has no text or speech token")]
    NoAnchors,
    #[error("interval undefined: need at least 2 anchors, got {0}")]
    IntervalUndefined(usize),
    #[error("degenerate interval: anchors {0} and {1} share a timestamp")]
    DegenerateInterval(usize, usize),
    #[error("anchor times and indices differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("median anchor interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("phase scale for {0} must be positive, got {1}")]
    BadScale(Modality, f64),
    #[error("phase offset for {0} must satisfy |delta| < 0.5, got {1}")]
    BadOffset(Modality, f64),
}

/// Integer index of each anchor, in stream order: `0, 1, ..., L-1`.
pub fn anchor_indices(stream: &InterleavedStream) -> Result<Vec<usize>, TimelineError> {
    let n = stream
        .tokens
        .iter()
        .filter(|t| t.modality.is_ts())
        .count();
    if n == 0 {
        return Err(TimelineError::NoAnchors);
    }
    Ok((0..n).collect())
}

/// Lower median of consecutive anchor time differences.
pub fn median_anchor_interval(anchor_times: &[f64]) -> Result<f64, TimelineError> {
    if anchor_times.len() < 2 {
        return Err(TimelineError::IntervalUndefined(anchor_times.len()));
    }
    let mut gaps: Vec<f64> = anchor_times.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    Ok(gaps[(gaps.len() - 1) / 2])
}

/// Rotary index of a token at wall-clock time `u`.
pub fn fractional_index(
    u: f64,
    anchor_times: &[f64],
    anchor_s: &[f64],
    median_interval: f64,
) -> Result<f64, TimelineError> {
    if anchor_times.len() != anchor_s.len() {
        return Err(TimelineError::LengthMismatch(
            anchor_times.len(),
            anchor_s.len(),
        ));
    }
    if anchor_times.is_empty() {
        return Err(TimelineError::NoAnchors);
    }
    if let Some(i) = anchor_times.windows(2).position(|w| w[1] <= w[0]) {
        return Err(TimelineError::DegenerateInterval(i, i + 1));
    }
    if !(median_interval > 0.0) {
        return Err(TimelineError::BadInterval(median_interval));
    }
    let last = anchor_times.len() - 1;
    if u < anchor_times[0] {
        return Ok(anchor_s[0] - (anchor_times[0] - u) / median_interval);
    }
    if u >= anchor_times[last] {
        return Ok(anchor_s[last] + (u - anchor_times[last]) / median_interval);
    }
    // first anchor strictly after u, minus one
    let i = anchor_times.partition_point(|&a| a <= u) - 1;
    let alpha = (u - anchor_times[i]) / (anchor_times[i + 1] - anchor_times[i]);
    Ok(anchor_s[i] + alpha)
}

/// Per-modality phase scale `gamma` and offset `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseAffine {
    pub gamma: [f64; 6],
    pub delta: [f64; 6],
}

impl PhaseAffine {
    /// All scales 1, all offsets 0.
    pub fn identity() -> Self {
        PhaseAffine {
            gamma: [1.0; 6],
            delta: [0.0; 6],
        }
    }

    pub fn validate(&self) -> Result<(), TimelineError> {
        for m in Modality::ALL {
            let g = self.gamma[m.index()];
            if !(g > 0.0) || !g.is_finite() {
                return Err(TimelineError::BadScale(m, g));
            }
            let d = self.delta[m.index()];
            if !(d.abs() < 0.5) {
                return Err(TimelineError::BadOffset(m, d));
            }
        }
        Ok(())
    }
}

impl Default for PhaseAffine {
    /// Unit scales; face shifted slightly back, body slightly forward.
    fn default() -> Self {
        let mut delta = [0.0; 6];
        delta[Modality::Face.index()] = -0.01;
        for m in Modality::BODY {
            delta[m.index()] = 0.01;
        }
        PhaseAffine {
            gamma: [1.0; 6],
            delta,
        }
    }
}

pub fn apply_phase_affine(
    s: f64,
    modality: Modality,
    affine: &PhaseAffine,
) -> Result<f64, TimelineError> {
    let g = affine.gamma[modality.index()];
    if !(g > 0.0) {
        return Err(TimelineError::BadScale(modality, g));
    }
    Ok(g * s + affine.delta[modality.index()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct TimelineOptions {
    /// Round motion indices to the nearest integer before the affine map.
    pub integer_motion: bool,
    /// Extrapolation step used when fewer than two anchors exist.
    pub fallback_interval: Option<f64>,
}


/// Raw and affine-mapped rotary index of every position.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub s: Vec<f64>,
    pub s_hat: Vec<f64>,
}

/// Assigns the rotary index of every position of `stream`.
pub fn assign(
    stream: &InterleavedStream,
    affine: &PhaseAffine,
    opts: TimelineOptions,
) -> Result<Timeline, TimelineError> {
    affine.validate()?;
    if stream.is_empty() {
        return Ok(Timeline {
            s: vec![],
            s_hat: vec![],
        });
    }
    let ordinals = anchor_indices(stream)?;
    let anchor_s: Vec<f64> = ordinals.iter().map(|&i| i as f64).collect();
    let anchor_times = stream.anchor_times();
    let has_motion = stream.tokens.iter().any(|t| t.modality.is_motion());
    let median = match (median_anchor_interval(&anchor_times), opts.fallback_interval) {
        (Ok(m), _) => m,
        (Err(_), Some(f)) => f,
        (Err(e), None) if has_motion => return Err(e),
        (Err(_), None) => 1.0,
    };

    let mut s = Vec::with_capacity(stream.len());
    let mut next_anchor = 0usize;
    for tok in &stream.tokens {
        let idx = if tok.modality.is_ts() {
            next_anchor += 1;
            (next_anchor - 1) as f64
        } else {
            let v = fractional_index(tok.t, &anchor_times, &anchor_s, median)?;
            if opts.integer_motion {
                (v + 0.5).floor()
            } else {
                v
            }
        };
        s.push(idx);
    }
    let s_hat = stream
        .tokens
        .iter()
        .zip(&s)
        .map(|(tok, &v)| apply_phase_affine(v, tok.modality, affine))
        .collect::<Result<_, _>>()?;
    Ok(Timeline { s, s_hat })
}
