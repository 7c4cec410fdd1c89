//! Step lengths and turning angles from planar location tracks.
//!
//! Turning angles are counter-clockwise positive and wrapped into `(-π, π]`.
//! For a track with `n` locations there are `n - 1` raw steps and `n - 2`
//! turns; pair `t` of the resulting series is the step from location `t + 1`
//! to `t + 2` together with the turn made at location `t + 1`. The first raw
//! step has no preceding turn and is dropped.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered planar locations of one animal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: String,
    pub locations: Vec<(f64, f64)>,
    /// Metadata only; nothing in the model depends on it.
    pub sample_rate_hz: f64,
}

impl Track {
    pub fn new(id: impl Into<String>, locations: Vec<(f64, f64)>, sample_rate_hz: f64) -> Self {
        Self {
            id: id.into(),
            locations,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Index-aligned bivariate series of step lengths and turning angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTurnSeries {
    pub track_id: String,
    pub steps: Vec<f64>,
    pub turns: Vec<f64>,
}

impl StepTurnSeries {
    /// Builds a series after checking alignment, positivity of steps and the
    /// turn support.
    pub fn new(track_id: impl Into<String>, steps: Vec<f64>, turns: Vec<f64>) -> Result<Self> {
        if steps.len() != turns.len() {
            return Err(Error::Argument(format!(
                "{} steps but {} turns",
                steps.len(),
                turns.len()
            )));
        }
        if let Some(i) = steps.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain(format!(
                "step {} = {} is not a positive finite length",
                i, steps[i]
            )));
        }
        if let Some(i) = turns
            .iter()
            .position(|a| !(a.is_finite() && *a > -PI && *a <= PI))
        {
            return Err(Error::Domain(format!(
                "turn {} = {} lies outside (-pi, pi]",
                i, turns[i]
            )));
        }
        Ok(Self {
            track_id: track_id.into(),
            steps,
            turns,
        })
    }

    /// Number of aligned (step, turn) pairs.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Derives the aligned step/turn series of a track.
///
/// With `zero_floor > 0`, steps shorter than the floor are replaced by it; a
/// zero-length step keeps the heading of the previous step (or of the next
/// one when it opens the track). With `zero_floor == 0` any zero-length step
/// is rejected.
pub fn steps_and_turns(track: &Track, zero_floor: f64) -> Result<StepTurnSeries> {
    let locs = &track.locations;
    if locs.len() < 3 {
        return Err(Error::Structure(format!(
            "track '{}' has {} locations; at least 3 are needed for a turning angle",
            track.id,
            locs.len()
        )));
    }
    if !(zero_floor >= 0.0 && zero_floor.is_finite()) {
        return Err(Error::Argument(format!(
            "zero_floor must be a finite non-negative number, got {zero_floor}"
        )));
    }

    let n_steps = locs.len() - 1;
    let mut steps = Vec::with_capacity(n_steps);
    let mut headings: Vec<Option<f64>> = Vec::with_capacity(n_steps);
    for (i, w) in locs.windows(2).enumerate() {
        let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        let d = dx.hypot(dy);
        if !d.is_finite() {
            return Err(Error::Domain(format!(
                "track '{}': non-finite location near index {}",
                track.id, i
            )));
        }
        if d == 0.0 {
            if zero_floor == 0.0 {
                return Err(Error::Domain(format!(
                    "track '{}': zero-length step at index {} (locations {} and {} coincide)",
                    track.id,
                    i,
                    i,
                    i + 1
                )));
            }
            headings.push(None);
        } else {
            headings.push(Some(dy.atan2(dx)));
        }
        steps.push(if d < zero_floor { zero_floor } else { d });
    }

    // Zero-length steps inherit a neighbouring heading.
    let first = headings.iter().flatten().next().copied().unwrap_or(0.0);
    let mut prev = first;
    let headings: Vec<f64> = headings
        .into_iter()
        .map(|h| {
            let h = h.unwrap_or(prev);
            prev = h;
            h
        })
        .collect();

    let turns = headings
        .windows(2)
        .map(|h| wrap_angle(h[1] - h[0]))
        .collect();
    steps.remove(0);

    Ok(StepTurnSeries {
        track_id: track.id.clone(),
        steps,
        turns,
    })
}

/// Keeps every `factor`-th location starting with the first.
pub fn downsample(track: &Track, factor: usize) -> Result<Track> {
    if factor == 0 {
        return Err(Error::Argument("downsampling factor must be at least 1".into()));
    }
    Ok(Track {
        id: track.id.clone(),
        locations: track.locations.iter().step_by(factor).copied().collect(),
        sample_rate_hz: track.sample_rate_hz / factor as f64,
    })
}
