//! Synthetic event streams: toy moving-edge scenes for training and
//! uniformly random streams for property checks.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePattern {
    MovingBar,
    MovingDot,
    TwoBars,
}

impl std::str::FromStr for ScenePattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_bar" => Ok(ScenePattern::MovingBar),
            "moving_dot" => Ok(ScenePattern::MovingDot),
            "two_bars" => Ok(ScenePattern::TwoBars),
            other => Err(Error::Config(format!("unknown scene pattern `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySceneSpec {
    pub width: usize,
    pub height: usize,
    pub pattern: ScenePattern,
    /// Pixels per millisecond.
    pub velocity: f64,
    pub duration_us: u64,
    /// Mean number of events a pixel emits each time an edge crosses it.
    pub events_per_crossing: f64,
    /// Background noise events per pixel per second.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            pattern: ScenePattern::MovingBar,
            velocity: 0.5,
            duration_us: 60_000,
            events_per_crossing: 2.0,
            noise_rate: 0.5,
            seed: 0,
        }
    }
}

/// Rigid shape on a torus; pixels whose centre lies inside are "bright".
#[derive(Clone, Debug)]
struct Shape {
    kind: ScenePattern,
    width: f64,
    height: f64,
    size: f64,
    origin: (f64, f64),
    /// Pixels per microsecond.
    vel: (f64, f64),
    /// Second bar for `TwoBars`: origin and velocity along y.
    second: (f64, f64),
}

fn wrap(v: f64, m: f64) -> f64 {
    v.rem_euclid(m)
}

impl Shape {
    fn draw(spec: &ToySceneSpec, rng: &mut rng::Rng) -> Self {
        let (w, h) = (spec.width as f64, spec.height as f64);
        let v = spec.velocity / 1000.0;
        let sign = |rng: &mut rng::Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let size = match spec.pattern {
            ScenePattern::MovingDot => (w.min(h) / 5.0).floor().max(2.0),
            _ => (w.min(h) / 8.0).floor().max(2.0),
        };
        let origin = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let vel = match spec.pattern {
            ScenePattern::MovingDot => {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                (v * angle.cos(), v * angle.sin())
            }
            _ => (sign(rng) * v, 0.0),
        };
        let second = (rng.random_range(0.0..h), sign(rng) * v);
        Self { kind: spec.pattern, width: w, height: h, size, origin, vel, second }
    }

    fn bar_x(&self, t: f64) -> f64 {
        wrap(self.origin.0 + self.vel.0 * t, self.width)
    }

    fn lit(&self, x: usize, y: usize, t: f64) -> bool {
        let cx = x as f64 + 0.5;
        let cy = y as f64 + 0.5;
        let in_band = |c: f64, start: f64, m: f64| wrap(c - start, m) < self.size;
        match self.kind {
            ScenePattern::MovingBar => in_band(cx, self.bar_x(t), self.width),
            ScenePattern::MovingDot => {
                let oy = wrap(self.origin.1 + self.vel.1 * t, self.height);
                in_band(cx, self.bar_x(t), self.width) && in_band(cy, oy, self.height)
            }
            ScenePattern::TwoBars => {
                let by = wrap(self.second.0 + self.second.1 * t, self.height);
                in_band(cx, self.bar_x(t), self.width) || in_band(cy, by, self.height)
            }
        }
    }

    /// Edge coordinates (along x, along y) at time `t`.
    fn edges(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let bx = self.bar_x(t);
        let xs = vec![bx, wrap(bx + self.size, self.width)];
        let ys = match self.kind {
            ScenePattern::MovingBar => vec![],
            ScenePattern::MovingDot => {
                let oy = wrap(self.origin.1 + self.vel.1 * t, self.height);
                vec![oy, wrap(oy + self.size, self.height)]
            }
            ScenePattern::TwoBars => {
                let by = wrap(self.second.0 + self.second.1 * t, self.height);
                vec![by, wrap(by + self.size, self.height)]
            }
        };
        (xs, ys)
    }
}

/// A moving bright pattern: pixels turning on emit `+1` events, pixels
/// turning off emit `-1`, plus Poisson background noise.
pub fn synth_toy_stream(spec: &ToySceneSpec) -> Result<EventStream> {
    if spec.velocity.is_nan() || spec.velocity <= 0.0 {
        return Err(Error::Config(format!("scene velocity must be > 0, got {}", spec.velocity)));
    }
    if spec.events_per_crossing < 0.0 || spec.noise_rate < 0.0 {
        return Err(Error::Config("scene rates must be non-negative".into()));
    }
    let (w, h) = (spec.width, spec.height);
    if spec.duration_us == 0 {
        return EventStream::empty(w, h);
    }
    let mut rng = rng::stream(spec.seed, "scene");
    let shape = Shape::draw(spec, &mut rng);

    // Sub-step so no edge moves more than half a pixel between samples.
    let dt = (500.0 / spec.velocity).max(1.0);
    let steps = (spec.duration_us as f64 / dt).ceil() as u64;
    let mut state: Vec<bool> = (0..w * h).map(|i| shape.lit(i % w, i / w, 0.0)).collect();
    let mut events = Vec::new();
    for k in 1..=steps {
        let t0 = (k - 1) as f64 * dt;
        let t1 = (k as f64 * dt).min(spec.duration_us as f64);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let now = shape.lit(x, y, t1);
                if now == state[i] {
                    continue;
                }
                state[i] = now;
                let p = if now { Polarity::Positive } else { Polarity::Negative };
                for _ in 0..poisson(&mut rng, spec.events_per_crossing) {
                    let t = rng.random_range(t0..t1).floor() as u64;
                    events.push(Event::new(t.min(spec.duration_us - 1), x as u16, y as u16, p));
                }
            }
        }
    }
    let expected_noise = spec.noise_rate * (w * h) as f64 * spec.duration_us as f64 * 1e-6;
    for _ in 0..poisson(&mut rng, expected_noise) {
        events.push(random_event(&mut rng, w, h, 0, spec.duration_us));
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(w, h, events)
}

fn poisson(rng: &mut rng::Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

pub(crate) fn random_event(rng: &mut rng::Rng, w: usize, h: usize, t_lo: u64, t_hi: u64) -> Event {
    let t = if t_hi > t_lo { rng.random_range(t_lo..t_hi) } else { t_lo };
    let x = rng.random_range(0..w) as u16;
    let y = rng.random_range(0..h) as u16;
    let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
    Event::new(t, x, y, p)
}

/// `n` events uniform over the sensor and over `[0, t_span)`, sorted by time.
pub fn uniform_random_stream(seed: u64, width: usize, height: usize, n: usize, t_span: u64) -> EventStream {
    let mut rng = rng::stream(seed, "uniform");
    let mut events: Vec<Event> = (0..n).map(|_| random_event(&mut rng, width, height, 0, t_span)).collect();
    events.sort_by_key(|e| e.t);
    EventStream::from_parts(width, height, events)
}

/// Distance from pixel `(x, y)` (centre) to the nearest edge of the scene
/// shape at time `t`, measured along the axis that edge moves on.
pub fn edge_distance(spec: &ToySceneSpec, x: u16, y: u16, t: u64) -> f64 {
    let mut rng = rng::stream(spec.seed, "scene");
    let shape = Shape::draw(spec, &mut rng);
    let (xs, ys) = shape.edges(t as f64);
    let d = |c: f64, e: f64, m: f64| {
        let a = wrap(c - e, m);
        a.min(m - a)
    };
    let cx = f64::from(x) + 0.5;
    let cy = f64::from(y) + 0.5;
    xs.iter()
        .map(|&e| d(cx, e, shape.width))
        .chain(ys.iter().map(|&e| d(cy, e, shape.height)))
        .fold(f64::INFINITY, f64::min)
}
