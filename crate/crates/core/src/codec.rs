//! Trajectory tokenization.
//!
//! A trajectory of `K = 8` BEV waypoints becomes a block of `L = 16` tokens laid
//! out as `[x1, y1, ..., x8, y8]`. Each axis is binned uniformly; x tokens occupy
//! ids `0..bins_x`, y tokens `bins_x..bins_x + bins_y`, and the mask token is the
//! id right after the last y token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Waypoints per trajectory.
pub const WAYPOINTS: usize = 8;
/// Tokens per action block.
pub const BLOCK_LEN: usize = 2 * WAYPOINTS;
/// Positions of the goal token pair `(x8, y8)`.
pub const GOAL_POSITIONS: [usize; 2] = [BLOCK_LEN - 2, BLOCK_LEN - 1];
/// Seconds between waypoints.
pub const DEFAULT_TIMESTEP: f64 = 0.5;

pub type TokenId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn of_position(pos: usize) -> Axis {
        if pos % 2 == 0 {
            Axis::X
        } else {
            Axis::Y
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub bins_x: usize,
    pub bins_y: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new((0.0, 64.0), (-16.0, 16.0), 128, 64).expect("default vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), bins_x: usize, bins_y: usize) -> Result<Self> {
        for (name, (lo, hi)) in [("x", x_range), ("y", y_range)] {
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}) is empty or non-finite")));
            }
        }
        if bins_x < 2 || bins_y < 2 {
            return Err(Error::Config(format!("need at least 2 bins per axis, got {bins_x} x {bins_y}")));
        }
        if bins_x + bins_y >= TokenId::MAX as usize {
            return Err(Error::Config("vocabulary too large for 16-bit token ids".into()));
        }
        Ok(Self { x_min: x_range.0, x_max: x_range.1, y_min: y_range.0, y_max: y_range.1, bins_x, bins_y })
    }

    pub fn width_x(&self) -> f64 {
        (self.x_max - self.x_min) / self.bins_x as f64
    }

    pub fn width_y(&self) -> f64 {
        (self.y_max - self.y_min) / self.bins_y as f64
    }

    pub fn bins(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.bins_x,
            Axis::Y => self.bins_y,
        }
    }

    pub fn mask_token(&self) -> TokenId {
        (self.bins_x + self.bins_y) as TokenId
    }

    /// Total number of token ids, mask included.
    pub fn size(&self) -> usize {
        self.bins_x + self.bins_y + 1
    }

    pub fn token(&self, axis: Axis, bin: usize) -> TokenId {
        match axis {
            Axis::X => bin as TokenId,
            Axis::Y => (self.bins_x + bin) as TokenId,
        }
    }

    /// Bin index of a coordinate token on the given axis, `None` for a mask or
    /// a token from the other axis.
    pub fn bin_of(&self, axis: Axis, token: TokenId) -> Option<usize> {
        let t = token as usize;
        match axis {
            Axis::X if t < self.bins_x => Some(t),
            Axis::Y if t >= self.bins_x && t < self.bins_x + self.bins_y => Some(t - self.bins_x),
            _ => None,
        }
    }

    fn axis_params(&self, axis: Axis) -> (f64, f64, usize) {
        match axis {
            Axis::X => (self.x_min, self.x_max, self.bins_x),
            Axis::Y => (self.y_min, self.y_max, self.bins_y),
        }
    }

    /// Bin of a coordinate. Edges belong to the higher bin.
    pub fn bin(&self, axis: Axis, value: f64, clamp: bool) -> Result<usize> {
        if !value.is_finite() {
            return Err(Error::Range(format!("non-finite coordinate {value}")));
        }
        let (lo, hi, bins) = self.axis_params(axis);
        if value < lo || value >= hi {
            if clamp {
                return Ok(if value < lo { 0 } else { bins - 1 });
            }
            return Err(Error::Range(format!("{axis:?} coordinate {value} outside [{lo}, {hi})")));
        }
        let w = (hi - lo) / bins as f64;
        let mut b = ((value - lo) / w).floor() as isize;
        // Snap against the edges as they are computed below, so ties are exact.
        if b + 1 < bins as isize && lo + (b + 1) as f64 * w <= value {
            b += 1;
        }
        if b > 0 && lo + b as f64 * w > value {
            b -= 1;
        }
        Ok(b.clamp(0, bins as isize - 1) as usize)
    }

    pub fn center(&self, axis: Axis, bin: usize) -> f64 {
        let (lo, hi, bins) = self.axis_params(axis);
        lo + (bin as f64 + 0.5) * (hi - lo) / bins as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
    pub timestep: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Result<Self> {
        Self::with_timestep(waypoints, DEFAULT_TIMESTEP)
    }

    pub fn with_timestep(waypoints: Vec<[f64; 2]>, timestep: f64) -> Result<Self> {
        if waypoints.len() != WAYPOINTS {
            return Err(Error::Contract(format!("trajectory needs {WAYPOINTS} waypoints, got {}", waypoints.len())));
        }
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Range("trajectory has non-finite coordinates".into()));
        }
        if !(timestep > 0.0) {
            return Err(Error::Config(format!("timestep must be positive, got {timestep}")));
        }
        Ok(Self { waypoints, timestep })
    }

    pub fn endpoint(&self) -> [f64; 2] {
        self.waypoints[WAYPOINTS - 1]
    }

    /// Polyline length starting from the ego origin.
    pub fn arc_length(&self) -> f64 {
        let mut prev = [0.0, 0.0];
        let mut total = 0.0;
        for p in &self.waypoints {
            total += dist(prev, *p);
            prev = *p;
        }
        total
    }

    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.waypoints
            .iter()
            .zip(&other.waypoints)
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max)
    }

    /// Mean Euclidean distance between matching waypoints.
    pub fn mean_l2(&self, other: &Trajectory) -> f64 {
        self.waypoints.iter().zip(&other.waypoints).map(|(a, b)| dist(*a, *b)).sum::<f64>() / WAYPOINTS as f64
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub [TokenId; BLOCK_LEN]);

impl TokenSequence {
    pub fn all_masked(vocab: &Vocabulary) -> Self {
        Self([vocab.mask_token(); BLOCK_LEN])
    }

    /// Checks the layout invariant: x tokens at even positions, y tokens at odd
    /// positions, or the mask token anywhere.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let mask = vocab.mask_token();
        for (pos, &t) in self.0.iter().enumerate() {
            if t != mask && vocab.bin_of(Axis::of_position(pos), t).is_none() {
                return Err(Error::Contract(format!("token {t} is not a valid {:?} token at position {pos}", Axis::of_position(pos))));
            }
        }
        Ok(())
    }

    pub fn is_masked(&self, pos: usize, vocab: &Vocabulary) -> bool {
        self.0[pos] == vocab.mask_token()
    }

    pub fn mask_count(&self, vocab: &Vocabulary) -> usize {
        self.0.iter().filter(|&&t| t == vocab.mask_token()).count()
    }

    pub fn goal(&self) -> (TokenId, TokenId) {
        (self.0[GOAL_POSITIONS[0]], self.0[GOAL_POSITIONS[1]])
    }
}

pub fn build_vocabulary(x_range: (f64, f64), y_range: (f64, f64), bins_x: usize, bins_y: usize) -> Result<Vocabulary> {
    Vocabulary::new(x_range, y_range, bins_x, bins_y)
}

/// Interleaves waypoint bins into a token block. With `clamp`, out-of-range
/// coordinates snap to the edge bins instead of failing.
pub fn tokenize(traj: &Trajectory, vocab: &Vocabulary, clamp: bool) -> Result<TokenSequence> {
    if traj.waypoints.len() != WAYPOINTS {
        return Err(Error::Contract(format!("trajectory needs {WAYPOINTS} waypoints")));
    }
    let mut out = [0 as TokenId; BLOCK_LEN];
    for (k, p) in traj.waypoints.iter().enumerate() {
        out[2 * k] = vocab.token(Axis::X, vocab.bin(Axis::X, p[0], clamp)?);
        out[2 * k + 1] = vocab.token(Axis::Y, vocab.bin(Axis::Y, p[1], clamp)?);
    }
    Ok(TokenSequence(out))
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Trajectory> {
    detokenize_with_timestep(seq, vocab, DEFAULT_TIMESTEP)
}

pub fn detokenize_with_timestep(seq: &TokenSequence, vocab: &Vocabulary, timestep: f64) -> Result<Trajectory> {
    let mut waypoints = Vec::with_capacity(WAYPOINTS);
    for k in 0..WAYPOINTS {
        let mut xy = [0.0; 2];
        for (slot, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
            let pos = 2 * k + slot;
            let t = seq.0[pos];
            if t == vocab.mask_token() {
                return Err(Error::IncompleteSequence(pos));
            }
            let bin = vocab
                .bin_of(axis, t)
                .ok_or_else(|| Error::Contract(format!("token {t} is not a {axis:?} token at position {pos}")))?;
            xy[slot] = vocab.center(axis, bin);
        }
        waypoints.push(xy);
    }
    Trajectory::with_timestep(waypoints, timestep)
}
