//! Fourier range encoding of 2D boxes.
//!
//! A box is encoded against a fixed set of integer frequency pairs.  Each
//! pair contributes one cosine and one sine entry whose common amplitude
//! shrinks as the box grows, so the vector describes a soft spatial range
//! rather than a point.  Two properties make the encoding useful:
//!
//! - translation acts by per-pair phasor rotation ([`shift_encoding`]), and
//!   growing a box multiplies entries by another envelope
//!   ([`envelope_factors`]), so geometry is algebra on the vector;
//! - the dot product of two encodings ([`overlap_score`]) tracks how much
//!   the underlying spatial ranges overlap.
//!
//! The frequency set is sampled once per seed and then held fixed; it must
//! be identical when training and when decoding a trained model, so it
//! serializes alongside checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::BoxXYWH;

/// Multiplier applied to normalized coordinates before any trigonometry.
///
/// With the default, the largest default frequency spans about 24 periods
/// across the unit image.
pub const DEFAULT_PHASE_SCALE: f64 = std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum PosencError {
    #[error("low-frequency bound {theta_low} exceeds the maximum frequency {theta_max}")]
    LowAboveMax { theta_low: u32, theta_max: u32 },
    #[error("requested {total} pairs but the always-kept low-frequency disc alone has {disc}")]
    TotalBelowDisc { total: usize, disc: usize },
    #[error("requested {total} pairs but only {available} exist within the frequency bound")]
    TotalAboveLattice { total: usize, available: usize },
    #[error("box extents must be nonnegative, got ({w}, {h})")]
    NegativeExtent { w: f64, h: f64 },
    #[error("encoding lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
}

type Result<T> = std::result::Result<T, PosencError>;

/// The integer frequency pairs an encoder evaluates, with the parameters
/// that produced them.
///
/// Pairs live in the closed half-plane `-theta_max <= tx <= theta_max`,
/// `0 <= ty <= theta_max`.  Every pair inside the disc of radius
/// `theta_low` is always present; the rest are a seeded uniform sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySet {
    pub pairs: Vec<(i32, i32)>,
    pub theta_max: u32,
    pub theta_low: u32,
    pub seed: u64,
    pub phase_scale: f64,
}

impl FrequencySet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs, different coordinate-to-phase multiplier.
    pub fn with_phase_scale(mut self, phase_scale: f64) -> Self {
        self.phase_scale = phase_scale;
        self
    }
}

/// An encoded box: cosine block then sine block, one entry per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEncoding {
    pub values: Vec<f64>,
}

impl RangeEncoding {
    pub fn n_pairs(&self) -> usize {
        self.values.len() / 2
    }
}

fn in_disc(tx: i32, ty: i32, radius: u32) -> bool {
    (tx as i64).pow(2) + (ty as i64).pow(2) <= (radius as i64).pow(2)
}

/// Build the frequency set: the full disc of radius `theta_low`, padded to
/// `total` pairs with a seeded uniform sample (without replacement) of the
/// remaining half-plane lattice points.
pub fn make_frequency_set(
    theta_max: u32,
    theta_low: u32,
    total: usize,
    seed: u64,
) -> Result<FrequencySet> {
    if theta_low > theta_max {
        return Err(PosencError::LowAboveMax {
            theta_low,
            theta_max,
        });
    }
    let tmax = theta_max as i32;
    let mut disc = Vec::new();
    let mut rest = Vec::new();
    for tx in -tmax..=tmax {
        for ty in 0..=tmax {
            if in_disc(tx, ty, theta_low) {
                disc.push((tx, ty));
            } else {
                rest.push((tx, ty));
            }
        }
    }
    if total < disc.len() {
        return Err(PosencError::TotalBelowDisc {
            total,
            disc: disc.len(),
        });
    }
    if total > disc.len() + rest.len() {
        return Err(PosencError::TotalAboveLattice {
            total,
            available: disc.len() + rest.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<(i32, i32)> = rest
        .choose_multiple(&mut rng, total - disc.len())
        .cloned()
        .collect();
    sampled.sort_unstable();
    let mut pairs = disc;
    pairs.extend(sampled);
    Ok(FrequencySet {
        pairs,
        theta_max,
        theta_low,
        seed,
        phase_scale: DEFAULT_PHASE_SCALE,
    })
}

/// Per-pair amplitude attenuation for a box of extents `(w, h)`.
///
/// Entry-wise, encoding a box of extents `s + t` equals the encoding of a
/// same-centered box of extents `s` scaled by `envelope_factors(t, ...)`.
pub fn envelope_factors(w: f64, h: f64, f: &FrequencySet) -> Result<Vec<f64>> {
    if w < 0.0 || h < 0.0 {
        return Err(PosencError::NegativeExtent { w, h });
    }
    let s = f.phase_scale;
    Ok(f.pairs
        .iter()
        .map(|&(tx, ty)| {
            let ax = 1.0 - (s * tx as f64).cos();
            let ay = 1.0 - (s * ty as f64).cos();
            (-w * ax - h * ay).exp()
        })
        .collect())
}

/// Encode a box: per pair, an attenuated cosine and sine of the center
/// phase.  Cos block first, then sin block.
pub fn encode_box(b: &BoxXYWH, f: &FrequencySet) -> Result<RangeEncoding> {
    let env = envelope_factors(b.w, b.h, f)?;
    let s = f.phase_scale;
    let n = f.pairs.len();
    let mut values = vec![0.0; 2 * n];
    for (i, &(tx, ty)) in f.pairs.iter().enumerate() {
        let phase = s * (tx as f64 * b.cx + ty as f64 * b.cy);
        let (sin, cos) = phase.sin_cos();
        values[i] = env[i] * cos;
        values[n + i] = env[i] * sin;
    }
    Ok(RangeEncoding { values })
}

/// Dot product of two encodings; a proxy for the spatial overlap of the
/// ranges they describe.
pub fn overlap_score(a: &RangeEncoding, b: &RangeEncoding) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(PosencError::LengthMismatch {
            a: a.values.len(),
            b: b.values.len(),
        });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

/// Translate an encoded box by `(dx, dy)` without re-encoding: each
/// (cos, sin) pair rotates by its frequency's phase increment.  Equals
/// `encode_box` of the translated box exactly.
pub fn shift_encoding(
    e: &RangeEncoding,
    dx: f64,
    dy: f64,
    f: &FrequencySet,
) -> Result<RangeEncoding> {
    let n = f.pairs.len();
    if e.values.len() != 2 * n {
        return Err(PosencError::LengthMismatch {
            a: e.values.len(),
            b: 2 * n,
        });
    }
    let s = f.phase_scale;
    let mut values = vec![0.0; 2 * n];
    for (i, &(tx, ty)) in f.pairs.iter().enumerate() {
        let delta = s * (tx as f64 * dx + ty as f64 * dy);
        let (sd, cd) = delta.sin_cos();
        let (c, si) = (e.values[i], e.values[n + i]);
        values[i] = c * cd - si * sd;
        values[n + i] = si * cd + c * sd;
    }
    Ok(RangeEncoding { values })
}
