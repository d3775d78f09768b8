//! Events, event streams and their count-image representations.

use std::ops::Range;

use crate::error::{Error, Result};

/// Largest sensor side representable by the 16-bit event coordinates.
pub const MAX_SENSOR_SIDE: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(p: i64) -> Result<Self> {
        match p {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::Data(format!("polarity must be 1 or -1, got {other}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single brightness-change spike. `t` is in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events on a `width × height` sensor.
///
/// Construction validates that timestamps are non-decreasing and every
/// event lies on the sensor, so every `EventStream` in circulation upholds
/// both invariants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: usize,
    height: usize,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        check_geometry(width, height)?;
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Data(format!(
                "events not sorted by timestamp at index {} ({} after {})",
                i + 1,
                events[i + 1].t,
                events[i].t
            )));
        }
        if let Some((i, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| usize::from(e.x) >= width || usize::from(e.y) >= height)
        {
            return Err(Error::Data(format!(
                "event {i} at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        Ok(Self { width, height, events })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    /// Caller guarantees both invariants; checked in debug builds.
    pub(crate) fn from_parts(width: usize, height: usize, events: Vec<Event>) -> Self {
        debug_assert!(events.windows(2).all(|w| w[0].t <= w[1].t));
        debug_assert!(events
            .iter()
            .all(|e| usize::from(e.x) < width && usize::from(e.y) < height));
        Self { width, height, events }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_first(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn t_last(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    pub fn count_polarity(&self, p: Polarity) -> usize {
        self.events.iter().filter(|e| e.p == p).count()
    }

    /// Sub-stream of the events in `range` (indices), same geometry.
    pub fn slice(&self, range: Range<usize>) -> EventStream {
        Self::from_parts(self.width, self.height, self.events[range].to_vec())
    }
}

fn check_geometry(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || width > MAX_SENSOR_SIDE || height > MAX_SENSOR_SIDE {
        return Err(Error::Data(format!(
            "sensor geometry {width}x{height} outside 1..={MAX_SENSOR_SIDE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolarityTag {
    Positive,
    Negative,
    All,
}

impl PolarityTag {
    pub fn code(self) -> u8 {
        match self {
            PolarityTag::Positive => 0,
            PolarityTag::Negative => 1,
            PolarityTag::All => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PolarityTag::Positive),
            1 => Ok(PolarityTag::Negative),
            2 => Ok(PolarityTag::All),
            c => Err(Error::Data(format!("unknown polarity tag {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolarityTag::Positive => "pos",
            PolarityTag::Negative => "neg",
            PolarityTag::All => "frame",
        }
    }

    fn admits(self, p: Polarity) -> bool {
        match self {
            PolarityTag::Positive => p == Polarity::Positive,
            PolarityTag::Negative => p == Polarity::Negative,
            PolarityTag::All => true,
        }
    }
}

/// Per-pixel event occurrence counts, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventCountImage {
    width: usize,
    height: usize,
    tag: PolarityTag,
    counts: Vec<u32>,
}

impl EventCountImage {
    pub fn zeros(width: usize, height: usize, tag: PolarityTag) -> Self {
        Self { width, height, tag, counts: vec![0; width * height] }
    }

    pub fn from_counts(width: usize, height: usize, tag: PolarityTag, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != width * height {
            return Err(Error::Data(format!(
                "count image {width}x{height} needs {} cells, got {}",
                width * height,
                counts.len()
            )));
        }
        Ok(Self { width, height, tag, counts })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn tag(&self) -> PolarityTag {
        self.tag
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Cell-wise sum; the result is tagged `All` unless both tags agree.
    pub fn add(&self, other: &EventCountImage) -> Result<EventCountImage> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                "count_image_add",
                format!("{}x{} vs {}x{}", self.width, self.height, other.width, other.height),
            ));
        }
        let tag = if self.tag == other.tag { self.tag } else { PolarityTag::All };
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(EventCountImage { width: self.width, height: self.height, tag, counts })
    }

    /// Sum over non-overlapping `factor × factor` tiles.
    pub fn block_sum(&self, factor: usize) -> Result<EventCountImage> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Usage(format!(
                "block factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = EventCountImage::zeros(w, h, self.tag);
        for y in 0..self.height {
            for x in 0..self.width {
                out.counts[(y / factor) * w + x / factor] += self.get(x, y);
            }
        }
        Ok(out)
    }
}

/// Partition into (positive, negative) sub-streams, preserving order.
pub fn split_by_polarity(stream: &EventStream) -> (EventStream, EventStream) {
    let (pos, neg): (Vec<Event>, Vec<Event>) =
        stream.events.iter().partition(|e| e.p == Polarity::Positive);
    (
        EventStream::from_parts(stream.width, stream.height, pos),
        EventStream::from_parts(stream.width, stream.height, neg),
    )
}

/// Kronecker-delta histogram of the events admitted by `tag`.
pub fn stack_count_image(stream: &EventStream, tag: PolarityTag) -> EventCountImage {
    stack_events(stream.width, stream.height, &stream.events, tag)
}

fn stack_events(width: usize, height: usize, events: &[Event], tag: PolarityTag) -> EventCountImage {
    let mut img = EventCountImage::zeros(width, height, tag);
    for e in events.iter().filter(|e| tag.admits(e.p)) {
        img.counts[usize::from(e.y) * width + usize::from(e.x)] += 1;
    }
    img
}

/// Unsigned event frame: every event counted once regardless of polarity.
pub fn make_event_frame(stream: &EventStream) -> EventCountImage {
    stack_count_image(stream, PolarityTag::All)
}

/// Positive minus negative occurrences per pixel. Not used by the network;
/// offered for inspection of polarity cancellation.
pub fn signed_event_frame(stream: &EventStream) -> Vec<i64> {
    let mut out = vec![0i64; stream.width * stream.height];
    for e in &stream.events {
        out[usize::from(e.y) * stream.width + usize::from(e.x)] += i64::from(e.p.sign());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowPolicy {
    /// Windows of `Δt` microseconds starting at the first event.
    FixedDuration(u64),
    /// Windows of `K` events; the final window may be shorter.
    FixedCount(usize),
}

impl WindowPolicy {
    fn validate(self) -> Result<()> {
        match self {
            WindowPolicy::FixedDuration(0) => Err(Error::Usage("window duration must be > 0".into())),
            WindowPolicy::FixedCount(0) => Err(Error::Usage("window event count must be > 0".into())),
            _ => Ok(()),
        }
    }
}

/// A contiguous slice of a stream: half-open time bounds plus the index
/// range of the events it holds. The index range is authoritative when
/// several events share a timestamp at a fixed-count boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub t_start: u64,
    pub t_end: u64,
    pub events: Range<usize>,
}

/// Split `[t_first, t_last]` into contiguous, non-overlapping windows.
pub fn partition_windows(stream: &EventStream, policy: WindowPolicy) -> Result<Vec<Window>> {
    policy.validate()?;
    let events = &stream.events;
    let (Some(t_first), Some(t_last)) = (stream.t_first(), stream.t_last()) else {
        return Ok(Vec::new());
    };
    let mut windows = Vec::new();
    match policy {
        WindowPolicy::FixedCount(k) => {
            let mut start = 0;
            while start < events.len() {
                let end = (start + k).min(events.len());
                let t_end = if end < events.len() { events[end].t } else { t_last + 1 };
                let t_start = windows.last().map_or(t_first, |w: &Window| w.t_end);
                windows.push(Window { t_start, t_end, events: start..end });
                start = end;
            }
        }
        WindowPolicy::FixedDuration(dt) => {
            let n = (t_last - t_first) / dt + 1;
            let mut start = 0;
            for i in 0..n {
                let t_start = t_first + i * dt;
                let t_end = t_start + dt;
                let end = start + events[start..].partition_point(|e| e.t < t_end);
                windows.push(Window { t_start, t_end, events: start..end });
                start = end;
            }
        }
    }
    Ok(windows)
}

/// Coordinate relocation: `(x, y) → (⌊x/f⌋, ⌊y/f⌋)`, keeping every event.
pub fn downsample_stream(stream: &EventStream, factor: usize) -> Result<EventStream> {
    if factor == 0 || !stream.width.is_multiple_of(factor) || !stream.height.is_multiple_of(factor) {
        return Err(Error::Usage(format!(
            "downsample factor {factor} does not divide sensor {}x{}",
            stream.width, stream.height
        )));
    }
    let f = factor as u32;
    let events = stream
        .events
        .iter()
        .map(|e| Event { x: (u32::from(e.x) / f) as u16, y: (u32::from(e.y) / f) as u16, ..*e })
        .collect();
    Ok(EventStream::from_parts(stream.width / factor, stream.height / factor, events))
}

/// One time slice of a training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceWindow {
    pub lr_pos: EventCountImage,
    pub lr_neg: EventCountImage,
    pub lr_frame: EventCountImage,
    pub hr_pos: EventCountImage,
    pub hr_neg: EventCountImage,
    pub t_start: u64,
    pub t_end: u64,
}

impl SequenceWindow {
    pub fn scale(&self) -> usize {
        self.hr_pos.width() / self.lr_pos.width()
    }

    /// Window built from an LR stream alone (inference); HR planes are empty.
    pub fn from_lr(lr: &EventStream, scale: usize, window: &Window) -> Self {
        let events = &lr.events[window.events.clone()];
        let (w, h) = (lr.width, lr.height);
        SequenceWindow {
            lr_pos: stack_events(w, h, events, PolarityTag::Positive),
            lr_neg: stack_events(w, h, events, PolarityTag::Negative),
            lr_frame: stack_events(w, h, events, PolarityTag::All),
            hr_pos: EventCountImage::zeros(w * scale, h * scale, PolarityTag::Positive),
            hr_neg: EventCountImage::zeros(w * scale, h * scale, PolarityTag::Negative),
            t_start: window.t_start,
            t_end: window.t_end,
        }
    }
}

/// A run of `T` consecutive windows.
pub type Sequence = Vec<SequenceWindow>;

/// Turn an HR ground-truth stream into LR/HR training sequences of length `seq_len`.
///
/// Windows are cut on the HR stream; each window's LR planes come from
/// relocating that same window's events, so both resolutions see exactly
/// the same event set. Trailing windows that do not fill a sequence are
/// dropped.
pub fn build_sequences(
    hr: &EventStream,
    factor: usize,
    policy: WindowPolicy,
    seq_len: usize,
) -> Result<Vec<Sequence>> {
    if seq_len == 0 {
        return Err(Error::Usage("sequence length must be >= 1".into()));
    }
    let lr = downsample_stream(hr, factor)?;
    let windows = partition_windows(hr, policy)?;
    let mut out = Vec::with_capacity(windows.len() / seq_len);
    for group in windows.chunks_exact(seq_len) {
        let seq = group
            .iter()
            .map(|w| {
                let hr_events = &hr.events[w.events.clone()];
                let lr_events = &lr.events[w.events.clone()];
                SequenceWindow {
                    lr_pos: stack_events(lr.width, lr.height, lr_events, PolarityTag::Positive),
                    lr_neg: stack_events(lr.width, lr.height, lr_events, PolarityTag::Negative),
                    lr_frame: stack_events(lr.width, lr.height, lr_events, PolarityTag::All),
                    hr_pos: stack_events(hr.width, hr.height, hr_events, PolarityTag::Positive),
                    hr_neg: stack_events(hr.width, hr.height, hr_events, PolarityTag::Negative),
                    t_start: w.t_start,
                    t_end: w.t_end,
                }
            })
            .collect();
        out.push(seq);
    }
    Ok(out)
}
