//! Event-stream augmentations applied to the HR stream before the LR
//! counterpart is derived, so input and target stay paired.
//!
//! Every method is split into a parameter draw (seeded) and a pure
//! `apply_*` function taking concrete parameters, which keeps the geometric
//! transforms rigid: one draw per call, never per event.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream};
use crate::rng;
use crate::synth::random_event;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    None,
    PolarityFlip,
    RandomFlip,
    DropByTime,
    RandomDrop,
    DropByArea,
    RandomDropOrAddNoise,
    StaticTranslation,
    RandomResizedCrop,
    SelectedDa,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 10] = [
        AugmentMethod::None,
        AugmentMethod::PolarityFlip,
        AugmentMethod::RandomFlip,
        AugmentMethod::DropByTime,
        AugmentMethod::RandomDrop,
        AugmentMethod::DropByArea,
        AugmentMethod::RandomDropOrAddNoise,
        AugmentMethod::StaticTranslation,
        AugmentMethod::RandomResizedCrop,
        AugmentMethod::SelectedDa,
    ];

    /// Methods `SelectedDa` chooses from, uniformly.
    pub const SELECTED_POOL: [AugmentMethod; 4] = [
        AugmentMethod::PolarityFlip,
        AugmentMethod::RandomFlip,
        AugmentMethod::DropByTime,
        AugmentMethod::RandomDropOrAddNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentMethod::None => "none",
            AugmentMethod::PolarityFlip => "polarity_flip",
            AugmentMethod::RandomFlip => "random_flip",
            AugmentMethod::DropByTime => "drop_by_time",
            AugmentMethod::RandomDrop => "random_drop",
            AugmentMethod::DropByArea => "drop_by_area",
            AugmentMethod::RandomDropOrAddNoise => "random_drop_or_add_noise",
            AugmentMethod::StaticTranslation => "static_translation",
            AugmentMethod::RandomResizedCrop => "random_resized_crop",
            AugmentMethod::SelectedDa => "selected_da",
        }
    }
}

impl std::str::FromStr for AugmentMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AugmentMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub flip_horizontal_prob: f64,
    pub flip_vertical_prob: f64,
    pub drop_time_ratio_max: f64,
    pub drop_prob: f64,
    pub drop_area_ratio: f64,
    pub noise_drop_prob: f64,
    pub noise_ratio: f64,
    /// Maximum |dx| as a fraction of the width (same for dy/height).
    pub translate_max_fraction: f64,
    pub crop_scale_min: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_horizontal_prob: 0.5,
            flip_vertical_prob: 0.5,
            drop_time_ratio_max: 0.2,
            drop_prob: 0.1,
            drop_area_ratio: 0.05,
            noise_drop_prob: 0.1,
            noise_ratio: 0.05,
            translate_max_fraction: 0.25,
            crop_scale_min: 0.7,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("flip_horizontal_prob", self.flip_horizontal_prob),
            ("flip_vertical_prob", self.flip_vertical_prob),
            ("drop_time_ratio_max", self.drop_time_ratio_max),
            ("drop_prob", self.drop_prob),
            ("drop_area_ratio", self.drop_area_ratio),
            ("noise_drop_prob", self.noise_drop_prob),
            ("noise_ratio", self.noise_ratio),
            ("translate_max_fraction", self.translate_max_fraction),
            ("crop_scale_min", self.crop_scale_min),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment parameter {name} = {v} outside [0, 1]")));
            }
        }
        if self.crop_scale_min == 0.0 {
            return Err(Error::Config("crop_scale_min must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub method: AugmentMethod,
    pub params: AugmentParams,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(method: AugmentMethod, seed: u64) -> Self {
        Self { method, params: AugmentParams::default(), seed }
    }
}

/// Axis-aligned pixel rectangle `[x0, x0+w) × [y0, y0+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, e: &Event) -> bool {
        let (x, y) = (usize::from(e.x), usize::from(e.y));
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

pub fn augment(stream: &EventStream, spec: &AugmentSpec) -> Result<EventStream> {
    spec.params.validate()?;
    let mut rng = rng::stream(spec.seed, spec.method.name());
    let p = &spec.params;
    let (w, h) = (stream.width(), stream.height());
    Ok(match spec.method {
        AugmentMethod::None => stream.clone(),
        AugmentMethod::PolarityFlip => polarity_flip(stream),
        AugmentMethod::RandomFlip => {
            let horizontal = rng.random_bool(p.flip_horizontal_prob);
            let vertical = rng.random_bool(p.flip_vertical_prob);
            apply_flip(stream, horizontal, vertical)
        }
        AugmentMethod::DropByTime => {
            let (Some(t0), Some(t1)) = (stream.t_first(), stream.t_last()) else {
                return Ok(stream.clone());
            };
            let ratio = rng.random_range(0.0..=p.drop_time_ratio_max);
            let len = (ratio * (t1 - t0) as f64).round() as u64;
            let start = t0 + rng.random_range(0..=(t1 - t0 - len));
            apply_drop_interval(stream, start, start + len)
        }
        AugmentMethod::RandomDrop => apply_random_drop(stream, p.drop_prob, &mut rng),
        AugmentMethod::DropByArea => {
            let rect = draw_rect(&mut rng, w, h, p.drop_area_ratio, (0.5, 2.0));
            apply_drop_area(stream, rect)
        }
        AugmentMethod::RandomDropOrAddNoise => {
            apply_drop_and_noise(stream, p.noise_drop_prob, p.noise_ratio, &mut rng)
        }
        AugmentMethod::StaticTranslation => {
            let mx = (p.translate_max_fraction * w as f64).floor() as i64;
            let my = (p.translate_max_fraction * h as f64).floor() as i64;
            let dx = rng.random_range(-mx..=mx);
            let dy = rng.random_range(-my..=my);
            apply_translation(stream, dx, dy)
        }
        AugmentMethod::RandomResizedCrop => {
            let scale = rng.random_range(p.crop_scale_min..=1.0);
            let rect = draw_rect(&mut rng, w, h, scale, (3.0 / 4.0, 4.0 / 3.0));
            apply_resized_crop(stream, rect)
        }
        AugmentMethod::SelectedDa => {
            let member = selected_member(spec.seed);
            let child = AugmentSpec {
                method: member,
                params: spec.params.clone(),
                seed: rng::child_seed(spec.seed, "selected_da/member"),
            };
            return augment(stream, &child);
        }
    })
}

/// The pool member `SelectedDa` applies for `seed`.
pub fn selected_member(seed: u64) -> AugmentMethod {
    let mut rng = rng::stream(seed, "selected_da");
    AugmentMethod::SELECTED_POOL[rng.random_range(0..AugmentMethod::SELECTED_POOL.len())]
}

fn map_events(stream: &EventStream, f: impl FnMut(&Event) -> Option<Event>) -> EventStream {
    let events = stream.events().iter().filter_map(f).collect();
    EventStream::from_parts(stream.width(), stream.height(), events)
}

pub fn polarity_flip(stream: &EventStream) -> EventStream {
    map_events(stream, |e| Some(Event { p: e.p.flipped(), ..*e }))
}

pub fn apply_flip(stream: &EventStream, horizontal: bool, vertical: bool) -> EventStream {
    let (w, h) = (stream.width() as u16, stream.height() as u16);
    map_events(stream, |e| {
        Some(Event {
            x: if horizontal { w - 1 - e.x } else { e.x },
            y: if vertical { h - 1 - e.y } else { e.y },
            ..*e
        })
    })
}

/// Removes events with `start <= t < end`.
pub fn apply_drop_interval(stream: &EventStream, start: u64, end: u64) -> EventStream {
    map_events(stream, |e| (e.t < start || e.t >= end).then_some(*e))
}

pub fn apply_random_drop(stream: &EventStream, q: f64, rng: &mut rng::Rng) -> EventStream {
    map_events(stream, |e| (!rng.random_bool(q)).then_some(*e))
}

pub fn apply_drop_area(stream: &EventStream, rect: Rect) -> EventStream {
    map_events(stream, |e| (!rect.contains(e)).then_some(*e))
}

/// Random drop with probability `q`, then `⌊ν·N⌋` uniform noise events.
pub fn apply_drop_and_noise(stream: &EventStream, q: f64, nu: f64, rng: &mut rng::Rng) -> EventStream {
    let n = stream.len();
    let kept = apply_random_drop(stream, q, rng);
    let (Some(t0), Some(t1)) = (stream.t_first(), stream.t_last()) else {
        return kept;
    };
    let (w, h) = (stream.width(), stream.height());
    let n_noise = (nu * n as f64).floor() as usize;
    let mut noise: Vec<Event> = (0..n_noise).map(|_| random_event(rng, w, h, t0, t1 + 1)).collect();
    noise.sort_by_key(|e| e.t);
    // Merge; on equal timestamps the original event comes first.
    let kept = kept.into_events();
    let mut out = Vec::with_capacity(kept.len() + noise.len());
    let (mut i, mut j) = (0, 0);
    while i < kept.len() || j < noise.len() {
        if j == noise.len() || (i < kept.len() && kept[i].t <= noise[j].t) {
            out.push(kept[i]);
            i += 1;
        } else {
            out.push(noise[j]);
            j += 1;
        }
    }
    EventStream::from_parts(w, h, out)
}

pub fn apply_translation(stream: &EventStream, dx: i64, dy: i64) -> EventStream {
    let (w, h) = (stream.width() as i64, stream.height() as i64);
    map_events(stream, |e| {
        let x = i64::from(e.x) + dx;
        let y = i64::from(e.y) + dy;
        (0..w).contains(&x).then_some(())?;
        (0..h).contains(&y).then_some(())?;
        Some(Event { x: x as u16, y: y as u16, ..*e })
    })
}

/// Keeps events inside `rect` and stretches the rectangle back onto the full
/// sensor: `x ← ⌊(x − x0)·W / w⌋`, clamped.
pub fn apply_resized_crop(stream: &EventStream, rect: Rect) -> EventStream {
    let (w, h) = (stream.width(), stream.height());
    map_events(stream, |e| {
        if !rect.contains(e) {
            return None;
        }
        let x = ((usize::from(e.x) - rect.x0) * w / rect.w).min(w - 1);
        let y = ((usize::from(e.y) - rect.y0) * h / rect.h).min(h - 1);
        Some(Event { x: x as u16, y: y as u16, ..*e })
    })
}

/// Rectangle of relative area `area_ratio`, aspect ratio drawn uniformly
/// from `aspect`, placed uniformly inside a `w × h` frame.
pub fn draw_rect(rng: &mut rng::Rng, w: usize, h: usize, area_ratio: f64, aspect: (f64, f64)) -> Rect {
    let area = area_ratio * (w * h) as f64;
    let ratio = rng.random_range(aspect.0..=aspect.1);
    let rw = ((area * ratio).sqrt().round() as usize).min(w);
    let rh = ((area / ratio).sqrt().round() as usize).min(h);
    let (rw, rh) = if area > 0.0 { (rw.max(1), rh.max(1)) } else { (rw, rh) };
    let x0 = rng.random_range(0..=w - rw);
    let y0 = rng.random_range(0..=h - rh);
    Rect { x0, y0, w: rw, h: rh }
}
