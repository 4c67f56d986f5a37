//! Polarity split, fixed-length time segmentation and timestamp normalization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_io::{Event, EventStream, Polarity};
use crate::octree::MAX_DEPTH;

/// Segment length used for sensors wider than 640 pixels.
pub const SEGMENT_LEN_HD: u64 = 2048;
/// Segment length used for VGA-class sensors.
pub const SEGMENT_LEN_VGA: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Segment length in microseconds; must be a power of two.
    pub segment_len: u64,
}

impl PreprocessConfig {
    pub fn new(segment_len: u64) -> Result<Self> {
        let cfg = Self { segment_len };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default segment length for a sensor resolution: 2048 µs above VGA, 1024 µs otherwise.
    pub fn for_resolution(width: u32, height: u32) -> Self {
        if width > 640 || height > 480 {
            Self { segment_len: SEGMENT_LEN_HD }
        } else {
            Self { segment_len: SEGMENT_LEN_VGA }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.segment_len.is_power_of_two() || self.segment_len > 1 << MAX_DEPTH {
            return Err(Error::InvalidArgument(format!(
                "segment length {} must be a power of two no larger than 2^21",
                self.segment_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentKey {
    pub index: u64,
    pub polarity: Polarity,
}

/// A voxel inside a segment: pixel position and normalized timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point {
    pub x: u32,
    pub y: u32,
    pub t: u32,
}

impl Point {
    pub fn new(x: u32, y: u32, t: u32) -> Self {
        Self { x, y, t }
    }
}

/// All events of one polarity within one time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub key: SegmentKey,
    pub min_timestamp: u64,
    /// Sorted, duplicate-free.
    pub points: Vec<Point>,
}

impl Segment {
    /// Builds a segment from arbitrary points, sorting and deduplicating them.
    pub fn from_points(key: SegmentKey, min_timestamp: u64, mut points: Vec<Point>) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { key, min_timestamp, points }
    }
}

/// Output of [`segment_stream`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segmentation {
    /// Ordered by `(index, polarity)`.
    pub segments: Vec<Segment>,
    /// Number of exact duplicate events collapsed.
    pub duplicates: usize,
}

pub fn segment_stream(stream: &EventStream, cfg: &PreprocessConfig) -> Segmentation {
    let mut groups: BTreeMap<SegmentKey, Vec<&Event>> = BTreeMap::new();
    for ev in &stream.events {
        let key = SegmentKey { index: ev.t / cfg.segment_len, polarity: ev.p };
        groups.entry(key).or_default().push(ev);
    }

    let mut duplicates = 0;
    let segments = groups
        .into_iter()
        .map(|(key, evs)| {
            let min_timestamp = evs.iter().map(|e| e.t).min().expect("group is non-empty");
            let points: Vec<Point> =
                evs.iter().map(|e| Point::new(u32::from(e.x), u32::from(e.y), (e.t - min_timestamp) as u32)).collect();
            let n = points.len();
            let seg = Segment::from_points(key, min_timestamp, points);
            duplicates += n - seg.points.len();
            seg
        })
        .collect();
    Segmentation { segments, duplicates }
}

/// Inverse of [`segment_stream`]; output is in canonical `(t, p, y, x)` order.
pub fn reassemble_stream(segments: &[Segment], cfg: &PreprocessConfig, width: u32, height: u32) -> Result<EventStream> {
    let total = segments.iter().map(|s| s.points.len()).sum();
    let mut events = Vec::with_capacity(total);
    for seg in segments {
        let start = seg
            .key
            .index
            .checked_mul(cfg.segment_len)
            .ok_or_else(|| Error::Corrupt(format!("segment index {} overflows the time axis", seg.key.index)))?;
        let end = start.saturating_add(cfg.segment_len);
        for pt in &seg.points {
            let t = seg.min_timestamp + u64::from(pt.t);
            if t < start || t >= end {
                return Err(Error::Corrupt(format!(
                    "timestamp {t} outside segment {} window [{start}, {end})",
                    seg.key.index
                )));
            }
            if pt.x >= width || pt.y >= height {
                return Err(Error::Corrupt(format!("point ({}, {}) outside {width}x{height} sensor", pt.x, pt.y)));
            }
            events.push(Event::new(pt.x as u16, pt.y as u16, t, seg.key.polarity));
        }
    }
    events.sort_unstable_by_key(Event::canonical_key);
    Ok(EventStream::new(width, height, events))
}
