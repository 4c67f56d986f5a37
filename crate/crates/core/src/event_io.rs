//! Event types and the EVT2 / CSV file formats.
//!
//! EVT2 words are 32-bit little-endian:
//!
//! | bits    | CD event (type 0x0 / 0x1) | TIME_HIGH (type 0x8)     |
//! |---------|---------------------------|--------------------------|
//! | 31..28  | type (= polarity)         | 0x8                      |
//! | 27..22  | timestamp bits 5..0       | timestamp bits 33..6     |
//! | 21..11  | x                         |                          |
//! | 10..0   | y                         |                          |
//!
//! Other word types are skipped. An optional ASCII header made of lines
//! starting with `%` may precede the binary payload.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const TYPE_CD_OFF: u32 = 0x0;
const TYPE_CD_ON: u32 = 0x1;
const TYPE_TIME_HIGH: u32 = 0x8;

/// Largest coordinate an EVT2 CD word can carry (11 bits).
pub const EVT2_MAX_COORD: u32 = (1 << 11) - 1;
/// Exclusive upper bound on EVT2 timestamps (34 bits).
pub const EVT2_TIME_LIMIT: u64 = 1 << 34;

/// Direction of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Polarity {
    Negative = 0,
    Positive = 1,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Polarity::Negative),
            1 => Ok(Polarity::Positive),
            other => Err(Error::Range(format!("polarity must be 0 or 1, got {other}"))),
        }
    }

    #[inline]
    pub fn bit(self) -> u8 {
        self as u8
    }
}

/// One `(x, y, t, p)` event; `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }

    /// Key of the canonical `(t, p, y, x)` ordering.
    #[inline]
    pub fn canonical_key(&self) -> (u64, u8, u16, u16) {
        (self.t, self.p.bit(), self.y, self.x)
    }
}

/// A chronological sequence of events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Self {
        Self { width, height, events }
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::new(width, height, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_chronological(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }

    /// Sorts into the canonical `(t, p, y, x)` order and removes exact duplicates.
    pub fn canonicalize(&mut self) {
        self.events.sort_unstable_by_key(Event::canonical_key);
        self.events.dedup();
    }

    /// Canonically ordered, deduplicated copy.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        out.canonicalize();
        out
    }

    fn check_bounds(&self, ev: &Event) -> Result<()> {
        if u32::from(ev.x) >= self.width || u32::from(ev.y) >= self.height {
            return Err(Error::Range(format!(
                "event ({}, {}) outside {}x{} sensor",
                ev.x, ev.y, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// How the EVT2 parser reacts to recoverable anomalies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Out-of-bounds coordinates and backwards timestamps are errors.
    #[default]
    Strict,
    /// Out-of-bounds events are dropped; the output is re-sorted by time.
    Lenient,
}

/// Anomalies seen while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseDiagnostics {
    pub header_bytes: usize,
    pub skipped_words: usize,
    pub dropped_out_of_bounds: usize,
    pub out_of_order: usize,
}

/// Parses an EVT2 byte buffer in strict mode.
pub fn parse_evt2(bytes: &[u8], width: u32, height: u32) -> Result<EventStream> {
    parse_evt2_with(bytes, width, height, ParseMode::Strict).map(|(s, _)| s)
}

/// Length of the `%`-line ASCII header at the start of `bytes`, if any.
///
/// A header is only recognised when the first four bytes are printable ASCII;
/// the serializer's first word is always a TIME_HIGH word whose top byte is
/// `0x8?`, so headerless payloads are never mistaken for one.
fn header_len(bytes: &[u8]) -> usize {
    let printable = |b: u8| (0x20..0x7f).contains(&b) || b == b'\t';
    if bytes.len() < 4 || bytes[0] != b'%' || !bytes[..4].iter().all(|&b| printable(b)) {
        return 0;
    }
    let mut pos = 0;
    while pos < bytes.len() && bytes[pos] == b'%' {
        match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(nl) => pos += nl + 1,
            None => break,
        }
    }
    pos
}

pub fn parse_evt2_with(
    bytes: &[u8],
    width: u32,
    height: u32,
    mode: ParseMode,
) -> Result<(EventStream, ParseDiagnostics)> {
    let mut diag = ParseDiagnostics { header_bytes: header_len(bytes), ..Default::default() };
    let payload = &bytes[diag.header_bytes..];
    if !payload.len().is_multiple_of(4) {
        return Err(Error::Format(format!("EVT2 payload length {} is not a multiple of 4", payload.len())));
    }

    let mut events = Vec::with_capacity(payload.len() / 4);
    let mut time_base: u64 = 0;
    let mut last_t: u64 = 0;
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let word = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        let kind = word >> 28;
        match kind {
            TYPE_TIME_HIGH => time_base = u64::from(word & 0x0fff_ffff) << 6,
            TYPE_CD_OFF | TYPE_CD_ON => {
                let t = time_base | u64::from((word >> 22) & 0x3f);
                let x = (word >> 11) & 0x7ff;
                let y = word & 0x7ff;
                if x >= width || y >= height {
                    if mode == ParseMode::Strict {
                        return Err(Error::Range(format!(
                            "word {i}: event ({x}, {y}) outside {width}x{height} sensor"
                        )));
                    }
                    log::warn!("dropping out-of-bounds event ({x}, {y}) at word {i}");
                    diag.dropped_out_of_bounds += 1;
                    continue;
                }
                if t < last_t {
                    if mode == ParseMode::Strict {
                        return Err(Error::Format(format!("word {i}: timestamp {t} precedes {last_t}")));
                    }
                    diag.out_of_order += 1;
                }
                last_t = last_t.max(t);
                let p = if kind == TYPE_CD_ON { Polarity::Positive } else { Polarity::Negative };
                events.push(Event::new(x as u16, y as u16, t, p));
            }
            _ => diag.skipped_words += 1,
        }
    }
    if diag.out_of_order > 0 {
        events.sort_by_key(|e| e.t);
    }
    Ok((EventStream::new(width, height, events), diag))
}

/// Serializes a chronological stream to EVT2 words.
///
/// A TIME_HIGH word precedes the first CD event and is repeated whenever the
/// upper timestamp bits change.
pub fn serialize_evt2(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stream.events.len() * 4 + 16);
    let mut current_high: Option<u64> = None;
    let mut last_t = 0;
    for ev in &stream.events {
        stream.check_bounds(ev)?;
        if u32::from(ev.x) > EVT2_MAX_COORD || u32::from(ev.y) > EVT2_MAX_COORD {
            return Err(Error::Range(format!("coordinate ({}, {}) exceeds 11 bits", ev.x, ev.y)));
        }
        if ev.t >= EVT2_TIME_LIMIT {
            return Err(Error::Range(format!("timestamp {} exceeds 34 bits", ev.t)));
        }
        if ev.t < last_t {
            return Err(Error::InvalidArgument(format!("stream is not chronological ({} after {last_t})", ev.t)));
        }
        last_t = ev.t;
        let high = ev.t >> 6;
        if current_high != Some(high) {
            let word = (TYPE_TIME_HIGH << 28) | high as u32;
            out.extend_from_slice(&word.to_le_bytes());
            current_high = Some(high);
        }
        let kind = if ev.p == Polarity::Positive { TYPE_CD_ON } else { TYPE_CD_OFF };
        let word = (kind << 28) | (((ev.t & 0x3f) as u32) << 22) | (u32::from(ev.x) << 11) | u32::from(ev.y);
        out.extend_from_slice(&word.to_le_bytes());
    }
    Ok(out)
}

/// Parses `x,y,t,p` lines. A leading non-numeric header line is skipped.
pub fn parse_csv(text: &str, width: u32, height: u32) -> Result<EventStream> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && !line.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let err = |msg: String| Error::Csv { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, name: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|e| err(format!("bad {name} {s:?}: {e}")))
        };
        let x = num(fields[0], "x")?;
        let y = num(fields[1], "y")?;
        let t = num(fields[2], "t")?;
        let p = num(fields[3], "p")?;
        if p > 1 {
            return Err(err(format!("polarity must be 0 or 1, got {p}")));
        }
        if x >= u64::from(width) || y >= u64::from(height) {
            return Err(err(format!("event ({x}, {y}) outside {width}x{height} sensor")));
        }
        let p = Polarity::from_bit(p as u8)?;
        events.push(Event::new(x as u16, y as u16, t, p));
    }
    let stream = EventStream::new(width, height, events);
    if !stream.is_chronological() {
        return Err(Error::Format("CSV events are not in chronological order".into()));
    }
    Ok(stream)
}

pub fn serialize_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(stream.events.len() * 16 + 8);
    out.push_str("x,y,t,p\n");
    for ev in &stream.events {
        let _ = writeln!(out, "{},{},{},{}", ev.x, ev.y, ev.t, ev.p.bit());
    }
    out
}

/// Summary statistics of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StreamStats {
    /// Seconds between first and last event.
    pub duration: f64,
    pub event_count: usize,
    /// Mega-events per second.
    pub event_rate: f64,
    pub positive_fraction: f64,
}

pub fn compute_stats(stream: &EventStream) -> StreamStats {
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return StreamStats::default();
    };
    let event_count = stream.events.len();
    let duration = (last.t - first.t) as f64 / 1e6;
    let event_rate = if duration > 0.0 { event_count as f64 / duration / 1e6 } else { 0.0 };
    let positives = stream.events.iter().filter(|e| e.p == Polarity::Positive).count();
    StreamStats { duration, event_count, event_rate, positive_fraction: positives as f64 / event_count as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(ws: &[u32]) -> Vec<u8> {
        ws.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    // Field extraction written out independently of the parser.
    fn hand_decode_cd(word: u32, base: u64) -> (u32, u32, u64, u32) {
        let ty = word / (1 << 28);
        let lsb = (word % (1 << 28)) / (1 << 22);
        let x = (word % (1 << 22)) / (1 << 11);
        let y = word % (1 << 11);
        (x, y, base + u64::from(lsb), ty)
    }

    #[test]
    fn time_high_word_sets_base() {
        let s = parse_evt2(&words(&[0x8000_0001]), 640, 480).unwrap();
        assert!(s.is_empty());
        let s = parse_evt2(&words(&[0x8000_0001, 0x0080_2803]), 640, 480).unwrap();
        assert_eq!(s.events, vec![Event::new(5, 3, 66, Polarity::Negative)]);
        assert_eq!(hand_decode_cd(0x0080_2803, 64), (5, 3, 66, 0));
    }

    #[test]
    fn cd_before_time_high_uses_zero_base() {
        let s = parse_evt2(&words(&[0x1080_2803]), 640, 480).unwrap();
        assert_eq!(s.events, vec![Event::new(5, 3, 2, Polarity::Positive)]);
    }

    #[test]
    fn empty_input_parses_to_empty_stream() {
        assert!(parse_evt2(&[], 10, 10).unwrap().is_empty());
    }

    #[test]
    fn truncated_word_is_format_error() {
        assert!(matches!(parse_evt2(&[1, 2, 3], 10, 10), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_words_skipped() {
        let (s, d) =
            parse_evt2_with(&words(&[0xA000_0000, 0xE123_4567, 0x0080_2803]), 640, 480, ParseMode::Strict).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(d.skipped_words, 2);
    }

    #[test]
    fn out_of_bounds_strict_vs_lenient() {
        // x = 5, y = 3 on a 4x4 sensor
        let bytes = words(&[0x0080_2803, 0x0000_0801]);
        assert!(matches!(parse_evt2(&bytes, 4, 4), Err(Error::Range(_))));
        let (s, d) = parse_evt2_with(&bytes, 4, 4, ParseMode::Lenient).unwrap();
        assert_eq!(s.events, vec![Event::new(1, 1, 0, Polarity::Negative)]);
        assert_eq!(d.dropped_out_of_bounds, 1);
    }

    #[test]
    fn backwards_time_strict_error_lenient_sorted() {
        let bytes = words(&[0x8000_0002, 0x0000_0801, 0x8000_0001, 0x0000_0802]);
        assert!(parse_evt2(&bytes, 8, 8).is_err());
        let (s, d) = parse_evt2_with(&bytes, 8, 8, ParseMode::Lenient).unwrap();
        assert_eq!(d.out_of_order, 1);
        assert!(s.is_chronological());
    }

    #[test]
    fn percent_header_is_skipped() {
        let mut bytes = b"% camera test\n% end\n".to_vec();
        bytes.extend(words(&[0x8000_0001, 0x0080_2803]));
        let (s, d) = parse_evt2_with(&bytes, 640, 480, ParseMode::Strict).unwrap();
        assert_eq!(d.header_bytes, 20);
        assert_eq!(s.events, vec![Event::new(5, 3, 66, Polarity::Negative)]);
    }

    #[test]
    fn serialize_single_event() {
        let s = EventStream::new(640, 480, vec![Event::new(5, 3, 66, Polarity::Negative)]);
        assert_eq!(serialize_evt2(&s).unwrap(), words(&[0x8000_0001, 0x0080_2803]));
        assert!(serialize_evt2(&EventStream::empty(640, 480)).unwrap().is_empty());
    }

    #[test]
    fn serialize_range_errors() {
        let s = EventStream::new(640, 480, vec![Event::new(1, 1, EVT2_TIME_LIMIT, Polarity::Negative)]);
        assert!(matches!(serialize_evt2(&s), Err(Error::Range(_))));
        let s = EventStream::new(4096, 480, vec![Event::new(2048, 1, 0, Polarity::Negative)]);
        assert!(matches!(serialize_evt2(&s), Err(Error::Range(_))));
        let s = EventStream::new(640, 480, vec![Event::new(640, 1, 0, Polarity::Negative)]);
        assert!(matches!(serialize_evt2(&s), Err(Error::Range(_))));
    }

    #[test]
    fn csv_basics() {
        let s = parse_csv("5,3,66,0\n", 640, 480).unwrap();
        assert_eq!(s.events, vec![Event::new(5, 3, 66, Polarity::Negative)]);
        let s = parse_csv("x,y,t,p\n5,3,66,1\n", 640, 480).unwrap();
        assert_eq!(s.events[0].p, Polarity::Positive);
        match parse_csv("5,3,66,2\n", 640, 480) {
            Err(Error::Csv { line: 1, msg }) => assert!(msg.contains("polarity")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv("1,1,1,1\n5,3\n", 640, 480), Err(Error::Csv { line: 2, .. })));
    }

    #[test]
    fn stats() {
        assert_eq!(compute_stats(&EventStream::empty(1, 1)), StreamStats::default());
        let events = (0..1_000_000u64).map(|i| Event::new(0, 0, i * 1_000_000 / 999_999, Polarity::Positive)).collect();
        let st = compute_stats(&EventStream::new(1, 1, events));
        assert_eq!(st.duration, 1.0);
        assert!((st.event_rate - 1.0).abs() < 1e-12);
        assert_eq!(st.positive_fraction, 1.0);
    }

    #[test]
    fn stats_matches_table_row_shape() {
        // 6.3 s at 0.73 Mev/s
        let n = 4_599_000u64;
        let dur = 6_300_000u64;
        let events = (0..n).map(|i| Event::new(0, 0, i * dur / (n - 1), Polarity::Negative)).collect();
        let st = compute_stats(&EventStream::new(640, 480, events));
        assert!((st.duration - 6.3).abs() < 1e-9);
        assert!((st.event_rate - 0.73).abs() < 0.005);
    }
}
