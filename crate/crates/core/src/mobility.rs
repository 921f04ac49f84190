//! Vehicles driving around a square road, one edge server per side.
//!
//! Positions are arc lengths along the perimeter `[0, 4a)`. Side `n` covers
//! the half-open arc `(n·a, (n+1)·a]`, so a vehicle exactly on the corner
//! between sides `n` and `n+1` belongs to side `n`; position `0` (the corner
//! between sides 3 and 0) belongs to side 3. Vehicles slow down while within
//! `intersection_zone` meters of a corner.

use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::{stream, SplitMix64};

pub const SQUARE_SIDES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    side_length: f64,
    intersection_zone: f64,
    slowdown_factor: f64,
    turn_probability: f64,
}

impl RoadNetwork {
    pub fn new(
        side_length: f64,
        intersection_zone: f64,
        slowdown_factor: f64,
        turn_probability: f64,
    ) -> Result<Self> {
        if !(side_length > 0.0 && side_length.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "side length must be positive, got {side_length}"
            )));
        }
        if !(0.0..side_length / 2.0).contains(&intersection_zone) {
            return Err(Error::InvalidParameter(format!(
                "intersection zone {intersection_zone} must lie in [0, a/2)"
            )));
        }
        if !(slowdown_factor > 0.0 && slowdown_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "slowdown factor {slowdown_factor} must lie in (0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&turn_probability) {
            return Err(Error::InvalidParameter(format!(
                "turn probability {turn_probability} must lie in [0, 1]"
            )));
        }
        Ok(Self {
            side_length,
            intersection_zone,
            slowdown_factor,
            turn_probability,
        })
    }

    /// `a = 1000`, zone `0.05·a`, half speed at corners, no turning.
    pub fn with_defaults(side_length: f64) -> Result<Self> {
        Self::new(side_length, 0.05 * side_length, 0.5, 0.0)
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn intersection_zone(&self) -> f64 {
        self.intersection_zone
    }

    pub fn slowdown_factor(&self) -> f64 {
        self.slowdown_factor
    }

    pub fn turn_probability(&self) -> f64 {
        self.turn_probability
    }

    pub fn edge_count(&self) -> usize {
        SQUARE_SIDES
    }

    pub fn perimeter(&self) -> f64 {
        SQUARE_SIDES as f64 * self.side_length
    }

    /// Side containing `position` under the half-open convention above.
    pub fn side_of(&self, position: f64) -> usize {
        if position <= 0.0 {
            return SQUARE_SIDES - 1;
        }
        let side = (position / self.side_length).ceil() as usize;
        side.clamp(1, SQUARE_SIDES) - 1
    }

    fn in_zone(&self, position: f64) -> bool {
        let a = self.side_length;
        let offset = position.rem_euclid(a);
        offset.min(a - offset) < self.intersection_zone
    }

    /// Speed of a vehicle whose top speed is `max_speed` at `position`.
    pub fn speed_at(&self, position: f64, max_speed: f64) -> f64 {
        if self.in_zone(position) {
            max_speed * self.slowdown_factor
        } else {
            max_speed
        }
    }

    /// Next speed-change point or corner strictly ahead of `p` when moving
    /// in `direction`, and whether it is a corner.
    fn next_boundary(&self, p: f64, direction: i8) -> (f64, bool) {
        let (a, z) = (self.side_length, self.intersection_zone);
        let k = (p / a).floor();
        let candidates = [
            ((k - 1.0) * a + z, false),
            (k * a - z, false),
            (k * a, true),
            (k * a + z, false),
            ((k + 1.0) * a - z, false),
            ((k + 1.0) * a, true),
            ((k + 1.0) * a + z, false),
            ((k + 2.0) * a - z, false),
        ];
        let mut best: Option<(f64, bool)> = None;
        for &(b, corner) in &candidates {
            let ahead = if direction > 0 { b > p } else { b < p };
            if !ahead {
                continue;
            }
            best = match best {
                None => Some((b, corner)),
                Some((cur, cur_corner)) => {
                    let closer = if direction > 0 { b < cur } else { b > cur };
                    if closer || (b == cur && corner) {
                        Some((b, corner))
                    } else {
                        Some((cur, cur_corner))
                    }
                }
            };
        }
        best.expect("a boundary always lies within one side length")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: usize,
    pub arc_position: f64,
    /// `+1` or `-1`.
    pub direction: i8,
    pub max_speed: f64,
    turn_rng: SplitMix64,
}

impl VehicleState {
    pub fn new(id: usize, arc_position: f64, direction: i8, max_speed: f64, seed: u64) -> Self {
        Self {
            id,
            arc_position,
            direction,
            max_speed,
            turn_rng: SplitMix64::derive(seed, &[stream::TURNING, id as u64]),
        }
    }

    pub fn current_speed(&self, network: &RoadNetwork) -> f64 {
        network.speed_at(self.arc_position, self.max_speed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    /// Uniform on the whole perimeter.
    Uniform,
    /// Uniform within the side assigned to each vehicle.
    OnSide(Vec<usize>),
    /// Explicit arc positions.
    Fixed(Vec<f64>),
}

/// Initial vehicle states. Positions and directions depend only on `seed`,
/// never on `max_speed`, so runs that differ only in speed start alike.
pub fn init_positions(
    network: &RoadNetwork,
    vehicle_count: usize,
    max_speed: f64,
    placement: &Placement,
    seed: u64,
) -> Result<Vec<VehicleState>> {
    if vehicle_count == 0 {
        return Err(Error::InvalidParameter("need at least one vehicle".into()));
    }
    if !(max_speed >= 0.0 && max_speed.is_finite()) {
        return Err(Error::InvalidParameter(format!("invalid speed {max_speed}")));
    }
    let expected = match placement {
        Placement::Uniform => vehicle_count,
        Placement::OnSide(sides) => sides.len(),
        Placement::Fixed(positions) => positions.len(),
    };
    if expected != vehicle_count {
        return Err(Error::DimensionMismatch {
            expected: vehicle_count,
            actual: expected,
        });
    }
    let a = network.side_length();
    let perimeter = network.perimeter();
    let mut rng = SplitMix64::derive(seed, &[stream::MOBILITY_INIT]);
    let mut out = Vec::with_capacity(vehicle_count);
    for id in 0..vehicle_count {
        let u = rng.next_f64();
        let direction = if rng.coin() { 1 } else { -1 };
        let position = match placement {
            Placement::Uniform => u * perimeter,
            Placement::OnSide(sides) => {
                let side = sides[id];
                if side >= SQUARE_SIDES {
                    return Err(Error::InvalidParameter(format!("no side {side}")));
                }
                // (n·a, (n+1)·a], wrapping the end of side 3 to 0.
                let p = side as f64 * a + (1.0 - u) * a;
                if p >= perimeter {
                    0.0
                } else {
                    p
                }
            }
            Placement::Fixed(positions) => {
                let p = positions[id];
                if !(0.0..perimeter).contains(&p) {
                    return Err(Error::InvalidParameter(format!(
                        "position {p} outside [0, {perimeter})"
                    )));
                }
                p
            }
        };
        out.push(VehicleState::new(id, position, direction, max_speed, seed));
    }
    Ok(out)
}

/// Moves every vehicle for `dt` seconds, integrating the piecewise-constant
/// speed exactly between zone boundaries and corners.
pub fn advance(network: &RoadNetwork, states: &mut [VehicleState], dt: f64) {
    assert!(dt > 0.0, "advance needs dt > 0");
    for state in states.iter_mut() {
        advance_one(network, state, dt);
    }
}

fn advance_one(network: &RoadNetwork, state: &mut VehicleState, dt: f64) {
    if state.max_speed == 0.0 {
        return;
    }
    let mut p = state.arc_position;
    let mut remaining = dt;
    while remaining > 0.0 {
        let (boundary, corner) = network.next_boundary(p, state.direction);
        let speed = network.speed_at(0.5 * (p + boundary), state.max_speed);
        let needed = (boundary - p).abs() / speed;
        if needed > remaining {
            p += f64::from(state.direction) * speed * remaining;
            break;
        }
        p = boundary;
        remaining -= needed;
        if corner
            && network.turn_probability() > 0.0
            && state.turn_rng.next_f64() < network.turn_probability()
        {
            state.direction = -state.direction;
        }
    }
    let perimeter = network.perimeter();
    let mut wrapped = p.rem_euclid(perimeter);
    if wrapped >= perimeter {
        wrapped = 0.0;
    }
    state.arc_position = wrapped;
}

/// Edge membership at one instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationSnapshot {
    edge_of: Vec<usize>,
    edge_count: usize,
}

impl AssociationSnapshot {
    pub fn new(edge_of: Vec<usize>, edge_count: usize) -> Result<Self> {
        if let Some(&bad) = edge_of.iter().find(|&&e| e >= edge_count) {
            return Err(Error::InvalidParameter(format!(
                "edge {bad} outside 0..{edge_count}"
            )));
        }
        Ok(Self { edge_of, edge_count })
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn vehicle_count(&self) -> usize {
        self.edge_of.len()
    }

    pub fn edge_of(&self, vehicle: usize) -> usize {
        self.edge_of[vehicle]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.edge_of
    }

    /// Vehicles on edge `n`, in id order.
    pub fn members(&self, edge: usize) -> Vec<usize> {
        (0..self.edge_of.len())
            .filter(|&m| self.edge_of[m] == edge)
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.edge_count];
        for &e in &self.edge_of {
            counts[e] += 1;
        }
        counts
    }
}

pub fn associate(network: &RoadNetwork, states: &[VehicleState]) -> AssociationSnapshot {
    AssociationSnapshot {
        edge_of: states.iter().map(|s| network.side_of(s.arc_position)).collect(),
        edge_count: network.edge_count(),
    }
}

pub const TRACE_HEADER: &str = "time_s,vehicle_id,arc_position_m,edge_id";

/// Appends one trace row per vehicle.
pub fn write_trace_rows(
    out: &mut impl Write,
    time_s: f64,
    states: &[VehicleState],
    snapshot: &AssociationSnapshot,
) -> std::io::Result<()> {
    for s in states {
        writeln!(out, "{time_s},{},{},{}", s.id, s.arc_position, snapshot.edge_of(s.id))?;
    }
    Ok(())
}
