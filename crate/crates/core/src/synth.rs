//! Seeded synthetic event streams.
//!
//! Structured patterns emit events on the edges of moving shapes, so they are
//! spatially and temporally correlated; `UniformNoise` is not.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_io::{Event, EventStream, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    MovingDot,
    RotatingSpinner,
    UniformNoise,
    FallingParticles,
}

impl Pattern {
    pub const ALL: [Pattern; 4] =
        [Pattern::MovingDot, Pattern::RotatingSpinner, Pattern::UniformNoise, Pattern::FallingParticles];

    pub const STRUCTURED: [Pattern; 3] = [Pattern::MovingDot, Pattern::RotatingSpinner, Pattern::FallingParticles];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::MovingDot => "moving-dot",
            Pattern::RotatingSpinner => "rotating-spinner",
            Pattern::UniformNoise => "uniform-noise",
            Pattern::FallingParticles => "falling-particles",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pattern {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub pattern: Pattern,
    pub width: u32,
    pub height: u32,
    /// Microseconds.
    pub duration: u64,
    /// Events per second.
    pub rate: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn event_count(&self) -> usize {
        (self.rate * self.duration as f64 / 1e6).round() as usize
    }
}

/// Radius of the moving dot in pixels.
pub fn dot_radius(width: u32, height: u32) -> f64 {
    (f64::from(width.min(height)) / 24.0).max(3.0)
}

fn triangle(phase: f64) -> f64 {
    let f = phase.rem_euclid(2.0);
    if f < 1.0 {
        f
    } else {
        2.0 - f
    }
}

/// Centre of the moving dot at time `t` (µs): it bounces around the sensor.
pub fn dot_center(width: u32, height: u32, t: u64) -> (f64, f64) {
    let r = dot_radius(width, height);
    let secs = t as f64 / 1e6;
    let span_x = f64::from(width) - 1.0 - 2.0 * r;
    let span_y = f64::from(height) - 1.0 - 2.0 * r;
    // about 1.5 and 1.1 traversals per second
    (r + span_x * triangle(1.5 * secs + 0.1), r + span_y * triangle(1.1 * secs + 0.3))
}

fn dot_velocity(width: u32, height: u32, t: u64) -> (f64, f64) {
    let (x0, y0) = dot_center(width, height, t);
    let (x1, y1) = dot_center(width, height, t + 100);
    (x1 - x0, y1 - y0)
}

struct Particle {
    x: f64,
    y0: f64,
    speed: f64,
    radius: f64,
}

/// Generates a deterministic stream for `params`.
pub fn generate_synthetic(params: &SynthParams) -> Result<EventStream> {
    let SynthParams { pattern, width, height, duration, rate, seed } = *params;
    if width < 8 || height < 8 || duration == 0 || rate.is_nan() || rate <= 0.0 {
        return Err(Error::InvalidArgument(format!("invalid synthetic parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pattern as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let count = params.event_count();
    let mut times: Vec<u64> = (0..count).map(|_| rng.gen_range(0..duration)).collect();
    times.sort_unstable();

    let (w, h) = (f64::from(width), f64::from(height));
    let clamp = |x: f64, max: f64| x.round().clamp(0.0, max - 1.0);
    let particles: Vec<Particle> = (0..24)
        .map(|_| Particle {
            x: rng.gen_range(4.0..w - 4.0),
            y0: rng.gen_range(0.0..h),
            speed: rng.gen_range(0.3..1.2) * h, // pixels per second
            radius: rng.gen_range(1.5..3.5),
        })
        .collect();

    let mut events = Vec::with_capacity(count);
    for t in times {
        let secs = t as f64 / 1e6;
        let (x, y, positive) = match pattern {
            Pattern::UniformNoise => (rng.gen_range(0.0..w).floor(), rng.gen_range(0.0..h).floor(), rng.gen_bool(0.5)),
            Pattern::MovingDot => {
                let (cx, cy) = dot_center(width, height, t);
                let (vx, vy) = dot_velocity(width, height, t);
                let r = dot_radius(width, height) + rng.gen_range(-1.0..1.0);
                let theta = rng.gen_range(0.0..TAU);
                let (dx, dy) = (theta.cos(), theta.sin());
                (clamp(cx + r * dx, w), clamp(cy + r * dy, h), dx * vx + dy * vy >= 0.0)
            }
            Pattern::RotatingSpinner => {
                let (cx, cy) = (w / 2.0, h / 2.0);
                let len = 0.4 * w.min(h);
                let blade = rng.gen_range(0..3) as f64;
                let angle = TAU * 4.0 * secs + blade * TAU / 3.0;
                let trailing = rng.gen_bool(0.5);
                let offset = if trailing { -0.02 } else { 0.02 } + rng.gen_range(-0.01..0.01);
                let r = rng.gen_range(0.1..1.0) * len;
                let a = angle + offset;
                (clamp(cx + r * a.cos(), w), clamp(cy + r * a.sin(), h), !trailing)
            }
            Pattern::FallingParticles => {
                let p = &particles[rng.gen_range(0..particles.len())];
                let cy = (p.y0 + p.speed * secs).rem_euclid(h);
                let theta = rng.gen_range(0.0..TAU);
                let (dx, dy) = (theta.cos(), theta.sin());
                (clamp(p.x + p.radius * dx, w), clamp(cy + p.radius * dy, h), dy >= 0.0)
            }
        };
        let p = if positive { Polarity::Positive } else { Polarity::Negative };
        events.push(Event::new(x as u16, y as u16, t, p));
    }
    Ok(EventStream::new(width, height, events))
}
