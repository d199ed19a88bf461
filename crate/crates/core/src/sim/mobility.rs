//! 2-D random walk with reflection at a rectangular boundary.

use rand::Rng;

use crate::sensor::{FlowSensor, Position};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            min_x: 0.0,
            min_y: 0.0,
            max_x: width,
            max_y: height,
        }
    }

    pub fn center(&self) -> Position {
        Position::new(
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        )
    }

    pub fn contains(&self, p: Position) -> bool {
        (self.min_x..=self.max_x).contains(&p.x) && (self.min_y..=self.max_y).contains(&p.y)
    }
}

/// Folds `v` back into `[lo, hi]` as if it bounced off both walls.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let t = (v - lo).rem_euclid(2.0 * span);
    let folded = if t > span { 2.0 * span - t } else { t };
    (lo + folded).clamp(lo, hi)
}

/// Moves a mobile sensor `speed * dt` meters in a fresh uniform direction.
pub fn step_mobility<R: Rng + ?Sized>(
    sensor: &mut FlowSensor,
    speed_mps: f64,
    dt_s: f64,
    bounds: &Bounds,
    rng: &mut R,
) -> Result<Position, SimError> {
    if !sensor.is_mobile() {
        return Err(SimError::Contract("step_mobility called on a fixed sensor"));
    }
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dist = speed_mps * dt_s;
    let p = sensor.position();
    let next = Position::new(
        reflect(p.x + dist * theta.cos(), bounds.min_x, bounds.max_x),
        reflect(p.y + dist * theta.sin(), bounds.min_y, bounds.max_y),
    );
    sensor
        .move_to(next)
        .map_err(|_| SimError::Contract("step_mobility called on a fixed sensor"))?;
    Ok(next)
}
