//! Rotary position encoding at real-valued (fractional) indices.

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RopeError {
    #[error("rotary dimension must be even and at least 2, got {0}")]
    BadDim(usize),
    #[error("rotary base must exceed 1, got {0}")]
    BadBase(f64),
    #[error("vector of length {len} is shorter than rotary dimension {d_rot}")]
    TooShort { len: usize, d_rot: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Inverse-frequency ladder `omega_j = base^(-2j/d_rot)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeLadder {
    d_rot: usize,
    base: f64,
    omegas: Vec<f64>,
}

impl RopeLadder {
    pub fn new(d_rot: usize, base: f64) -> Result<Self, RopeError> {
        if d_rot < 2 || !d_rot.is_multiple_of(2) {
            return Err(RopeError::BadDim(d_rot));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(RopeError::BadBase(base));
        }
        let omegas = (0..d_rot / 2)
            .map(|j| base.powf(-2.0 * j as f64 / d_rot as f64))
            .collect();
        Ok(RopeLadder {
            d_rot,
            base,
            omegas,
        })
    }

    pub fn d_rot(&self) -> usize {
        self.d_rot
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// Rotates pairs `(2j, 2j+1)` of the first `d_rot` coordinates in place.
    ///
    /// Panics if `v` is shorter than `d_rot`; use [`RopeLadder::rotate`]
    /// for a checked variant.
    pub fn rotate_in_place(&self, v: &mut [f64], s_hat: f64) {
        for (j, &w) in self.omegas.iter().enumerate() {
            let (sin, cos) = (s_hat * w).sin_cos();
            let x = v[2 * j];
            let y = v[2 * j + 1];
            v[2 * j] = x * cos - y * sin;
            v[2 * j + 1] = x * sin + y * cos;
        }
    }

    pub fn rotate(&self, v: &[f64], s_hat: f64) -> Result<Vec<f64>, RopeError> {
        if v.len() < self.d_rot {
            return Err(RopeError::TooShort {
                len: v.len(),
                d_rot: self.d_rot,
            });
        }
        let mut out = v.to_vec();
        self.rotate_in_place(&mut out, s_hat);
        Ok(out)
    }
}

/// Dot product of the rotated query and the rotated key.
pub fn rope_dot(
    q: &[f64],
    k: &[f64],
    s_q: f64,
    s_k: f64,
    ladder: &RopeLadder,
) -> Result<f64, RopeError> {
    if q.len() != k.len() {
        return Err(RopeError::LengthMismatch(q.len(), k.len()));
    }
    let qr = ladder.rotate(q, s_q)?;
    let kr = ladder.rotate(k, s_k)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}

/// Phases `theta[t][j] = s_hat[t] * omega[j]`, row-major `T x d_rot/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub theta: Vec<f64>,
}

impl PhaseMatrix {
    pub fn new(s_hat: &[f64], ladder: &RopeLadder) -> Self {
        let cols = ladder.omegas.len();
        let theta = s_hat
            .iter()
            .flat_map(|&s| ladder.omegas.iter().map(move |&w| s * w))
            .collect();
        PhaseMatrix {
            rows: s_hat.len(),
            cols,
            theta,
        }
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.theta[t * self.cols + j]
    }
}
