//! Multimodal token streams on the 25 fps master clock.
//!
//! A stream is one time-ordered list of tokens from all six modalities.
//! Every token carries its wall-clock timestamp; the stream derives the
//! text+speech anchor positions and the token-frame map from those
//! timestamps.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::modality::Modality;

/// Frames per second of the master clock every stream is aligned to.
pub const MASTER_FPS: f64 = 25.0;

/// Mandatory first line of a serialized stream.
pub const STREAM_HEADER: &str = "#slb-stream v1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StreamError {
    #[error("negative time {time} at index {index}")]
    NegativeTime { index: usize, time: f64 },
    #[error("non-finite time at index {index}")]
    NonFiniteTime { index: usize },
    #[error("times decrease at index {index}")]
    Unsorted { index: usize },
    #[error("source rate must be positive, got {0}")]
    BadRate(f64),
    #[error("sub-stream for {label} is not time-sorted at index {index}")]
    UnsortedSubStream { label: Modality, index: usize },
    #[error("sub-stream for {label} contains a {found} token at index {index}")]
    MixedSubStream {
        label: Modality,
        found: Modality,
        index: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Per-modality vocabulary sizes, indexed by [`Modality::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSizes(pub [usize; 6]);

impl VocabSizes {
    pub fn uniform(n: usize) -> Self {
        VocabSizes([n; 6])
    }

    pub fn get(&self, m: Modality) -> usize {
        self.0[m.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub id: u32,
    pub modality: Modality,
    /// Wall-clock time in seconds.
    pub t: f64,
}

impl Token {
    pub fn new(id: u32, modality: Modality, t: f64) -> Self {
        Token { id, modality, t }
    }
}

/// Master-clock frame of a wall-clock time, rounding halves up.
pub fn frame_index(t: f64) -> i64 {
    (t * MASTER_FPS + 0.5).floor() as i64
}

/// Maps frame times of a source clock onto master-clock frame indices.
pub fn resample_to_clock(frame_times: &[f64], src_rate: f64) -> Result<Vec<i64>, StreamError> {
    if !(src_rate > 0.0) || !src_rate.is_finite() {
        return Err(StreamError::BadRate(src_rate));
    }
    let mut prev = f64::NEG_INFINITY;
    frame_times
        .iter()
        .enumerate()
        .map(|(index, &time)| {
            if !time.is_finite() {
                return Err(StreamError::NonFiniteTime { index });
            }
            if time < 0.0 {
                return Err(StreamError::NegativeTime { index, time });
            }
            if time < prev {
                return Err(StreamError::Unsorted { index });
            }
            prev = time;
            Ok(frame_index(time))
        })
        .collect()
}

/// Global order of two tokens: timestamp first, then modality priority.
pub fn token_order(a: &Token, b: &Token) -> Ordering {
    a.t.total_cmp(&b.t).then(a.modality.cmp(&b.modality))
}

/// Ordered token sequence with its derived anchor set and frame map.
#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedStream {
    pub tokens: Vec<Token>,
    /// Positions whose modality is text or speech, ascending.
    pub anchors: Vec<usize>,
    /// Master-clock frame per token.
    pub frame_map: Vec<i64>,
}

impl InterleavedStream {
    /// Wraps tokens as-is, deriving anchors and the frame map. No checks.
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        let anchors = tokens
            .iter()
            .enumerate()
            .filter(|(_, tok)| tok.modality.is_ts())
            .map(|(i, _)| i)
            .collect();
        let frame_map = tokens.iter().map(|tok| frame_index(tok.t)).collect();
        InterleavedStream {
            tokens,
            anchors,
            frame_map,
        }
    }

    pub fn empty() -> Self {
        Self::from_tokens(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn labels(&self) -> Vec<Modality> {
        self.tokens.iter().map(|t| t.modality).collect()
    }

    /// Appends one token, keeping anchors and frame map in sync.
    pub fn push(&mut self, tok: Token) {
        if tok.modality.is_ts() {
            self.anchors.push(self.tokens.len());
        }
        self.frame_map.push(frame_index(tok.t));
        self.tokens.push(tok);
    }

    /// Tokens of one modality in stream order.
    pub fn restrict(&self, m: Modality) -> Vec<Token> {
        self.tokens
            .iter()
            .copied()
            .filter(|t| t.modality == m)
            .collect()
    }

    /// Drops every motion token.
    pub fn ts_only(&self) -> Self {
        Self::from_tokens(
            self.tokens
                .iter()
                .copied()
                .filter(|t| t.modality.is_ts())
                .collect(),
        )
    }

    pub fn anchor_times(&self) -> Vec<f64> {
        self.anchors.iter().map(|&a| self.tokens[a].t).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(24 * (self.tokens.len() + 1));
        out.push_str(STREAM_HEADER);
        out.push('\n');
        for tok in &self.tokens {
            let _ = writeln!(out, "{}\t{}\t{:.6}", tok.id, tok.modality, tok.t);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, StreamError> {
        let mut lines = text.split_terminator('\n');
        match lines.next() {
            Some(STREAM_HEADER) => {}
            _ => {
                return Err(StreamError::Parse {
                    line: 1,
                    message: format!("missing header '{STREAM_HEADER}'"),
                })
            }
        }
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let err = |message: String| StreamError::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let id = fields[0]
                .parse::<u32>()
                .map_err(|e| err(format!("bad id '{}': {e}", fields[0])))?;
            let modality = fields[1]
                .parse::<Modality>()
                .map_err(|e| err(e.to_string()))?;
            let t = fields[2]
                .parse::<f64>()
                .map_err(|e| err(format!("bad time '{}': {e}", fields[2])))?;
            if !t.is_finite() {
                return Err(err(format!("non-finite time '{}'", fields[2])));
            }
            tokens.push(Token { id, modality, t });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Stable merge order of several sub-streams as `(sub-stream, index)`.
///
/// Sub-streams must each be time-sorted. Ties on time are broken by
/// modality priority, then by sub-stream order, then by index.
pub fn merge_order(subs: &[(Modality, Vec<Token>)]) -> Result<Vec<(usize, usize)>, StreamError> {
    for (label, toks) in subs {
        for (index, tok) in toks.iter().enumerate() {
            if tok.modality != *label {
                return Err(StreamError::MixedSubStream {
                    label: *label,
                    found: tok.modality,
                    index,
                });
            }
            if !tok.t.is_finite() {
                return Err(StreamError::NonFiniteTime { index });
            }
            if index > 0 && toks[index - 1].t > tok.t {
                return Err(StreamError::UnsortedSubStream {
                    label: *label,
                    index,
                });
            }
        }
    }
    let mut order: Vec<(usize, usize)> = subs
        .iter()
        .enumerate()
        .flat_map(|(s, (_, toks))| (0..toks.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|&(sa, ia), &(sb, ib)| token_order(&subs[sa].1[ia], &subs[sb].1[ib]));
    Ok(order)
}

/// Merges per-modality sub-streams into one interleaved stream.
pub fn interleave(subs: &[(Modality, Vec<Token>)]) -> Result<InterleavedStream, StreamError> {
    let order = merge_order(subs)?;
    Ok(InterleavedStream::from_tokens(
        order.into_iter().map(|(s, i)| subs[s].1[i]).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingKind {
    Ordering,
    VocabOverflow,
    AnchorMismatch,
    FrameMap,
    BadTimestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub kind: FindingKind,
    pub position: usize,
    pub message: String,
}

/// Lists every invariant violation in `stream`; empty means valid.
pub fn validate_stream(stream: &InterleavedStream, vocab: &VocabSizes) -> Vec<Finding> {
    let mut findings = Vec::new();
    let toks = &stream.tokens;
    for (i, tok) in toks.iter().enumerate() {
        if !tok.t.is_finite() || tok.t < 0.0 {
            findings.push(Finding {
                kind: FindingKind::BadTimestamp,
                position: i,
                message: format!("timestamp {} is not a finite nonnegative time", tok.t),
            });
        }
        let v = vocab.get(tok.modality);
        if tok.id as usize >= v {
            findings.push(Finding {
                kind: FindingKind::VocabOverflow,
                position: i,
                message: format!("vocab overflow: {} id {} >= {}", tok.modality, tok.id, v),
            });
        }
        if i > 0 && token_order(&toks[i - 1], tok) == Ordering::Greater {
            findings.push(Finding {
                kind: FindingKind::Ordering,
                position: i,
                message: format!(
                    "ordering: {}@{} follows {}@{}",
                    tok.modality,
                    tok.t,
                    toks[i - 1].modality,
                    toks[i - 1].t
                ),
            });
        }
    }

    let expected: Vec<usize> = (0..toks.len())
        .filter(|&i| toks[i].modality.is_ts())
        .collect();
    if expected != stream.anchors {
        let position = expected
            .iter()
            .zip(&stream.anchors)
            .position(|(a, b)| a != b)
            .unwrap_or(expected.len().min(stream.anchors.len()));
        findings.push(Finding {
            kind: FindingKind::AnchorMismatch,
            position,
            message: format!(
                "anchor set has {} entries, expected {}",
                stream.anchors.len(),
                expected.len()
            ),
        });
    }

    if stream.frame_map.len() != toks.len() {
        findings.push(Finding {
            kind: FindingKind::FrameMap,
            position: stream.frame_map.len().min(toks.len()),
            message: format!(
                "frame map has {} entries for {} tokens",
                stream.frame_map.len(),
                toks.len()
            ),
        });
    } else {
        for (i, (tok, &f)) in toks.iter().zip(&stream.frame_map).enumerate() {
            if tok.t.is_finite() && frame_index(tok.t) != f {
                findings.push(Finding {
                    kind: FindingKind::FrameMap,
                    position: i,
                    message: format!("frame {f} does not match time {}", tok.t),
                });
            }
        }
    }
    findings
}
